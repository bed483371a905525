"""Micro-CT slice segmentation with a fully convolutional network."""

from ._core import (
    ClassMap,
    ConfigError,
    DataError,
    Error,
    Model,
    NumericalError,
    ShapeError,
    compose_three_layer_mask,
    confusion,
    decode_mask,
    downscale_image,
    downscale_mask,
    encode_mask,
    gradcheck,
    load_gray,
    perimeter,
    save_gray,
    scores,
    train,
)

__all__ = [
    "ClassMap",
    "ConfigError",
    "DataError",
    "Error",
    "Model",
    "NumericalError",
    "ShapeError",
    "compose_three_layer_mask",
    "confusion",
    "decode_mask",
    "downscale_image",
    "downscale_mask",
    "encode_mask",
    "gradcheck",
    "load_gray",
    "perimeter",
    "save_gray",
    "scores",
    "train",
]

__version__ = "0.1.0"
