"""
Toy Siamese change detector used to validate synthetic datasets.

Both dates run through one shared encoder. At every scale the two feature
maps and their absolute difference are concatenated and decoded to a
per-pixel change logit.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..constants import (
    DEFAULT_DETECTOR_BATCH_SIZE,
    DEFAULT_DETECTOR_DEPTH,
    DEFAULT_DETECTOR_LR,
    DEFAULT_DETECTOR_STEPS,
    DEFAULT_DETECTOR_WIDTH,
    DEFAULT_IMAGE_CHANNELS,
    LOSS_LOG_PERIOD,
)
from ..errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture and pre-training budget of the toy detector."""
    width: int = DEFAULT_DETECTOR_WIDTH
    depth: int = DEFAULT_DETECTOR_DEPTH
    in_channels: int = DEFAULT_IMAGE_CHANNELS
    steps: int = DEFAULT_DETECTOR_STEPS
    batch_size: int = DEFAULT_DETECTOR_BATCH_SIZE
    learning_rate: float = DEFAULT_DETECTOR_LR
    d4_augment: bool = True
    seed: int = 0
    log_every: int = LOSS_LOG_PERIOD

    def __post_init__(self):
        if self.width < 1 or self.depth < 0 or self.in_channels < 1:
            raise ConfigurationError("detector width/depth/channels out of range", "detector")
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("detector steps/batch/lr must be positive", "detector")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DetectorConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.conv(x)


class SiameseChangeDetector(nn.Module):
    """
    Shared-weight encoder, difference fusion and a 1-channel logit head.

    Input sides must be divisible by 2**depth.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        widths = [config.width * 2 ** level for level in range(config.depth + 1)]
        self.encoder = nn.ModuleList()
        prev = config.in_channels
        for w in widths:
            self.encoder.append(ConvBlock(prev, w))
            prev = w
        # fused skip at each level: f0, f1 and |f0 - f1|
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in range(config.depth, 0, -1):
            self.up.append(nn.ConvTranspose2d(
                widths[level] * (3 if level == config.depth else 1), widths[level - 1], 2, stride=2
            ))
            self.decoder.append(ConvBlock(widths[level - 1] * 4, widths[level - 1]))
        head_in = widths[0] * (3 if config.depth == 0 else 1)
        self.head = nn.Conv2d(head_in, 1, 1)

    def encode(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        for level, block in enumerate(self.encoder):
            if level > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats

    def forward(self, t0: torch.Tensor, t1: torch.Tensor) -> torch.Tensor:
        """
        Args:
            t0, t1: (B, C, H, W) images of the two dates

        Returns:
            (B, 1, H, W) change logits
        """
        if t0.shape != t1.shape:
            raise DimensionError("the two dates differ in shape", "detector")
        factor = 2 ** self.config.depth
        if t0.shape[-2] % factor or t0.shape[-1] % factor:
            raise DimensionError(f"image sides must be divisible by {factor}", "detector")
        f0, f1 = self.encode(t0), self.encode(t1)
        fused = [torch.cat([a, b, (a - b).abs()], dim=1) for a, b in zip(f0, f1)]

        x = fused[-1]
        for i, level in enumerate(range(self.config.depth, 0, -1)):
            x = self.up[i](x)
            x = self.decoder[i](torch.cat([x, fused[level - 1]], dim=1))
        return self.head(x)
