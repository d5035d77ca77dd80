"""Desk-scale animatable gaussian avatars.

Record: fit a temporal hex-plane codebook plus gaussian decoder to a
multi-view capture. Retrieve: match novel pose sequences against the
recorded track. Reconstruct: decode, skin, and splat at the retrieved
timestamps.
"""

__version__ = "0.1.0"
