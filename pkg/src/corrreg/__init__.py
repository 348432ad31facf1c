"""Weakly supervised multi-modal affine registration with a correlation-layer network."""

from .core import (
    AffineParams,
    BinaryMask,
    GridImage,
    LandmarkSet,
    Modality,
    anchor_params,
    apply_to_points,
    compose,
    identity_params,
    invert,
    norm_to_pixel,
    pixel_to_norm,
    warp_image,
)

__version__ = "0.1.0"
