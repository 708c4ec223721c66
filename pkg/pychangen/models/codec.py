"""
Image codecs mapping between stored images and the diffusion data space.

The sampler and trainer only talk to a `Codec`; the shipped implementation
works in pixel space. A learned autoencoder can be slotted in by providing
the same two methods.
"""

from typing import Protocol, runtime_checkable

import numpy as np
import torch

from ..errors import DimensionError, ParameterError


@runtime_checkable
class Codec(Protocol):
    """Encode uint8 images to data-space tensors and back."""

    channels: int

    def encode(self, images: np.ndarray) -> torch.Tensor:
        ...

    def decode(self, data: torch.Tensor) -> np.ndarray:
        ...


class PixelCodec:
    """
    Identity codec: uint8 [0, 255] pixels <-> float [-1, 1].

    Images are H x W x C (or B x H x W x C) uint8 arrays; tensors are
    C x H x W (or B x C x H x W).
    """

    def __init__(self, channels: int = 3):
        if channels < 1:
            raise ParameterError("channels must be positive", "codec")
        self.channels = channels

    def encode(self, images: np.ndarray) -> torch.Tensor:
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[..., None]
        if images.ndim not in (3, 4) or images.shape[-1] != self.channels:
            raise DimensionError(
                f"expected (...,H,W,{self.channels}) image, got {images.shape}", "codec"
            )
        data = torch.from_numpy(images.astype(np.float32) / 127.5 - 1.0)
        return data.movedim(-1, -3).contiguous()

    def decode(self, data: torch.Tensor) -> np.ndarray:
        if data.ndim not in (3, 4) or data.shape[-3] != self.channels:
            raise DimensionError(
                f"expected (...,{self.channels},H,W) tensor, got {tuple(data.shape)}", "codec"
            )
        pixels = ((data.detach().float().clamp(-1, 1) + 1.0) * 127.5).round()
        return pixels.movedim(-3, -1).to(torch.uint8).cpu().numpy()
