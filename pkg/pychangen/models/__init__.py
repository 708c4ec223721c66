"""Torch networks and image codecs."""

from .codec import Codec, PixelCodec
from .detector import DetectorConfig, SiameseChangeDetector
from .rsdit import DenoiserConfig, RSDiT

__all__ = [
    "Codec",
    "PixelCodec",
    "DetectorConfig",
    "SiameseChangeDetector",
    "DenoiserConfig",
    "RSDiT",
]
