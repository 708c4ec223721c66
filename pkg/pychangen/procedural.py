"""
Procedural labeled scenes.

Stand-in source imagery: a smooth textured background with non-overlapping
colored objects (rectangles or elliptical blobs). The returned mask and
instance map match the rendered objects cell for cell.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np
import scipy.ndimage
from matplotlib import colormaps

from .constants import (
    BACKGROUND_CLASS,
    DEFAULT_OBJECT_COUNT_RANGE,
    DEFAULT_OBJECT_SIZE_RANGE,
    DEFAULT_SCENE_PLACEMENT_ATTEMPTS,
    DEFAULT_SCENE_SIZE,
)
from .errors import ParameterError
from .scene import InstanceMap, LabeledScene, SemanticMask
from .seeding import derive_seed, numpy_rng

logger = logging.getLogger("ChangenScenes")

SHAPE_FAMILIES = ("rectangles", "blobs")

# Per-channel amplitude of the texture added on top of palette colors
TEXTURE_AMPLITUDE = 8

_BACKGROUND_COLOR = (96, 104, 72)


@dataclass(frozen=True)
class SceneSpec:
    """Canvas size, label space and object statistics of procedural scenes."""
    height: int = DEFAULT_SCENE_SIZE
    width: int = DEFAULT_SCENE_SIZE
    num_classes: int = 2
    object_count_range: Tuple[int, int] = DEFAULT_OBJECT_COUNT_RANGE
    object_size_range: Tuple[int, int] = DEFAULT_OBJECT_SIZE_RANGE
    shape_family: str = "rectangles"
    texture_seed: int = 0
    placement_attempts: int = DEFAULT_SCENE_PLACEMENT_ATTEMPTS

    def __post_init__(self):
        object.__setattr__(self, "object_count_range", tuple(int(v) for v in self.object_count_range))
        object.__setattr__(self, "object_size_range", tuple(int(v) for v in self.object_size_range))
        lo, hi = self.object_count_range
        smin, smax = self.object_size_range
        if self.height < 1 or self.width < 1:
            raise ParameterError("canvas must be at least 1x1", "procedural")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2 (background plus objects)", "procedural")
        if not 0 <= lo <= hi:
            raise ParameterError(f"empty object_count_range {self.object_count_range}", "procedural")
        if not 1 <= smin <= smax:
            raise ParameterError(f"empty object_size_range {self.object_size_range}", "procedural")
        if smax > min(self.height, self.width):
            raise ParameterError(
                f"objects up to {smax} px do not fit a {self.height}x{self.width} canvas", "procedural"
            )
        if self.shape_family not in SHAPE_FAMILIES:
            raise ParameterError(f"unknown shape family '{self.shape_family}'", "procedural")
        if self.placement_attempts < 1:
            raise ParameterError("placement_attempts must be positive", "procedural")

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "object_count_range": list(self.object_count_range),
            "object_size_range": list(self.object_size_range),
            "shape_family": self.shape_family,
            "texture_seed": self.texture_seed,
            "placement_attempts": self.placement_attempts,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def scene_palette(num_classes: int) -> np.ndarray:
    """(K, 3) uint8 class colors; class 0 is the background color."""
    cmap = colormaps["tab10"] if num_classes <= 11 else colormaps["tab20"]
    colors = [_BACKGROUND_COLOR]
    for k in range(1, num_classes):
        r, g, b, _ = cmap((k - 1) % cmap.N)
        colors.append((round(r * 255), round(g * 255), round(b * 255)))
    return np.array(colors, dtype=np.int64)


def _shape_mask(family: str, h: int, w: int) -> np.ndarray:
    if family == "rectangles":
        return np.ones((h, w), dtype=bool)
    ys = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xs = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    blob = ys[:, None] ** 2 + xs[None, :] ** 2 <= 1.0
    if not blob.any():
        blob[h // 2, w // 2] = True
    return blob


def _texture(rng: np.random.Generator, height: int, width: int, sigma: float) -> np.ndarray:
    """Smooth noise in [-TEXTURE_AMPLITUDE, TEXTURE_AMPLITUDE], (H, W, 3)."""
    noise = rng.standard_normal((height, width, 3))
    smooth = scipy.ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0))
    scale = np.abs(smooth).max() or 1.0
    return np.round(smooth / scale * TEXTURE_AMPLITUDE)


def gen_procedural_scene(spec: SceneSpec, seed: int) -> LabeledScene:
    """
    Draw one labeled scene.

    Objects that find no free spot within ``placement_attempts`` tries are
    dropped; the scene then holds fewer objects than drawn and a warning is
    logged.

    Args:
        spec: Scene statistics
        seed: Scene seed

    Returns:
        LabeledScene whose mask and instances match the rendered objects
    """
    rng = numpy_rng(seed)
    lo, hi = spec.object_count_range
    smin, smax = spec.object_size_range
    wanted = int(rng.integers(lo, hi + 1))

    data = np.full((spec.height, spec.width), BACKGROUND_CLASS, dtype=np.int64)
    inst = np.zeros((spec.height, spec.width), dtype=np.int64)
    classes: Dict[int, int] = {}
    for _ in range(wanted):
        h, w = (int(v) for v in rng.integers(smin, smax + 1, size=2))
        cls = int(rng.integers(1, spec.num_classes))
        shape = _shape_mask(spec.shape_family, h, w)
        for _ in range(spec.placement_attempts):
            y = int(rng.integers(0, spec.height - h + 1))
            x = int(rng.integers(0, spec.width - w + 1))
            if not inst[y:y + h, x:x + w][shape].any():
                new_id = len(classes) + 1
                data[y:y + h, x:x + w][shape] = cls
                inst[y:y + h, x:x + w][shape] = new_id
                classes[new_id] = cls
                break

    if len(classes) < wanted:
        logger.warning(f"Scene seed {seed}: placed {len(classes)} of {wanted} objects")

    palette = scene_palette(spec.num_classes)
    texture_rng = numpy_rng(derive_seed(spec.texture_seed, seed, "texture"))
    background = _texture(texture_rng, spec.height, spec.width, sigma=4.0)
    detail = _texture(texture_rng, spec.height, spec.width, sigma=1.0)
    image = palette[data] + np.where(data[..., None] == BACKGROUND_CLASS, background, detail)
    image = np.clip(image, 0, 255).astype(np.uint8)

    return LabeledScene(
        image=image,
        mask=SemanticMask(data, spec.num_classes, BACKGROUND_CLASS),
        instances=InstanceMap(inst, classes),
    )
