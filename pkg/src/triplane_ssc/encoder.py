"""Strided convolutional image encoder producing the image feature map."""
from __future__ import annotations

from .numerics import Conv2d, Module, gelu


class ImageEncoder(Module):
    """Four 3x3 conv blocks with strides 2, 1, 2, 1: ``[3, H, W] -> [dim, H/4, W/4]``."""

    def __init__(self, rng, dim, width=16):
        self.blocks = [
            Conv2d(rng, 3, width, 3, stride=2, padding=1),
            Conv2d(rng, width, width, 3, stride=1, padding=1),
            Conv2d(rng, width, dim, 3, stride=2, padding=1),
            Conv2d(rng, dim, dim, 3, stride=1, padding=1),
        ]

    def __call__(self, image):
        return encode_image(image, self)


def encode_image(image, encoder):
    """GELU between blocks, none after the last; zero input with zero biases gives zero features."""
    _, h, w = image.shape
    if h % 4 or w % 4:
        raise ValueError(f"image extents {h}x{w} must be divisible by 4")
    x = image
    for i, block in enumerate(encoder.blocks):
        x = block(x)
        if i + 1 < len(encoder.blocks):
            x = gelu(x)
    return x
