"""
Label-space data model for pychangen.

This module provides the raster types every simulator works on (semantic
masks, instance maps, change masks and contour maps) together with the mask
algebra used throughout: change-mask computation, connected components,
square dilation and contour extraction.

All functions are pure; inputs are never modified and returned arrays are
fresh, read-only copies.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np
import scipy.ndimage
import skimage.measure

from .constants import BACKGROUND_CLASS, DEFAULT_CONNECTIVITY
from .errors import DimensionError, InstanceLookupError, ParameterError

_OFFSETS_4 = [(-1, 0), (1, 0), (0, -1), (0, 1)]
_OFFSETS_8 = _OFFSETS_4 + [(-1, -1), (-1, 1), (1, -1), (1, 1)]


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_grid(data: np.ndarray, kind: str):
    if data.ndim != 2:
        raise DimensionError(f"{kind} must be a 2-D grid, got shape {data.shape}", "scene")
    if data.shape[0] < 1 or data.shape[1] < 1:
        raise DimensionError(f"{kind} must be at least 1x1, got {data.shape}", "scene")


def _check_binary(data: np.ndarray, kind: str):
    if data.size and not np.isin(data, (0, 1)).all():
        raise ParameterError(f"{kind} values must be 0 or 1", "scene")


@dataclass(frozen=True, eq=False)
class SemanticMask:
    """H x W grid of class ids in [0, num_classes - 1]."""
    data: np.ndarray
    num_classes: int
    background_class: int = BACKGROUND_CLASS

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_grid(data, "SemanticMask")
        if self.num_classes < 2:
            raise ParameterError(f"num_classes must be >= 2, got {self.num_classes}", "scene")
        if not 0 <= self.background_class < self.num_classes:
            raise ParameterError("background_class outside [0, K-1]", "scene")
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise ParameterError(
                f"class ids must lie in [0, {self.num_classes - 1}]", "scene"
            )
        object.__setattr__(self, "data", _frozen(data, np.int64))

    @property
    def shape(self):
        return self.data.shape

    def foreground(self) -> np.ndarray:
        """Boolean grid of non-background cells."""
        return self.data != self.background_class

    def foreground_count(self) -> int:
        return int(self.foreground().sum())

    def one_hot(self) -> np.ndarray:
        """Return a (K, H, W) float32 one-hot encoding."""
        eye = np.eye(self.num_classes, dtype=np.float32)
        return np.ascontiguousarray(eye[self.data].transpose(2, 0, 1))

    def with_data(self, data: np.ndarray) -> "SemanticMask":
        return SemanticMask(data, self.num_classes, self.background_class)

    def equals(self, other: "SemanticMask") -> bool:
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class InstanceMap:
    """H x W grid of instance ids (0 = no instance) plus the id -> class map."""
    data: np.ndarray
    classes: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_grid(data, "InstanceMap")
        classes = {int(k): int(v) for k, v in self.classes.items()}
        present = set(int(i) for i in np.unique(data)) - {0}
        if present != set(classes):
            raise ParameterError(
                f"instance ids in data {sorted(present)} do not match classes {sorted(classes)}",
                "scene",
            )
        object.__setattr__(self, "data", _frozen(data, np.int64))
        object.__setattr__(self, "classes", classes)

    @classmethod
    def empty(cls, height: int, width: int) -> "InstanceMap":
        return cls(np.zeros((height, width), dtype=np.int64), {})

    @property
    def shape(self):
        return self.data.shape

    @property
    def ids(self) -> List[int]:
        """Instance ids in ascending order."""
        return sorted(self.classes)

    def __len__(self) -> int:
        return len(self.classes)

    def next_id(self) -> int:
        return max(self.classes, default=0) + 1

    def without(self, ids: Iterable[int]) -> "InstanceMap":
        """Return a copy with the given instances erased."""
        drop = set(int(i) for i in ids)
        data = self.data.copy()
        data[np.isin(data, list(drop))] = 0
        return InstanceMap(data, {k: v for k, v in self.classes.items() if k not in drop})

    def equals(self, other: "InstanceMap") -> bool:
        return (
            self.shape == other.shape
            and bool(np.array_equal(self.data, other.data))
            and self.classes == other.classes
        )


@dataclass(frozen=True, eq=False)
class ChangeMask:
    """H x W binary grid, 1 where the scene changed."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_grid(data, "ChangeMask")
        _check_binary(data, "ChangeMask")
        object.__setattr__(self, "data", _frozen(data, np.uint8))

    @classmethod
    def zeros(cls, height: int, width: int) -> "ChangeMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def shape(self):
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())

    def union(self, other: "ChangeMask") -> "ChangeMask":
        return ChangeMask(self.data | other.data)

    def equals(self, other: "ChangeMask") -> bool:
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class ContourMap:
    """H x W binary grid marking object boundary pixels."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_grid(data, "ContourMap")
        _check_binary(data, "ContourMap")
        object.__setattr__(self, "data", _frozen(data, np.uint8))

    @property
    def shape(self):
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())

    def to_raster(self) -> np.ndarray:
        """Return the (1, H, W) float32 condition raster."""
        return self.data.astype(np.float32)[None]

    def equals(self, other: "ContourMap") -> bool:
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))


# ========================================================================
# MASK ALGEBRA
# ========================================================================

def change_mask_of(before: SemanticMask, after: SemanticMask) -> ChangeMask:
    """
    Indicator of cells whose class differs between two masks.

    Args:
        before: Mask at time t
        after: Mask at time t+1

    Returns:
        ChangeMask with 1 where before != after
    """
    if before.shape != after.shape:
        raise DimensionError(
            f"cannot compare masks of shape {before.shape} and {after.shape}", "scene"
        )
    return ChangeMask((before.data != after.data).astype(np.uint8))


def _relabel_row_major(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 1..n by the row-major position of each region's first pixel."""
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int64)
    lut[order] = np.arange(1, len(order) + 1)
    return lut[labels]


def _skimage_connectivity(connectivity: int) -> int:
    if connectivity == 4:
        return 1
    if connectivity == 8:
        return 2
    raise ParameterError(f"connectivity must be 4 or 8, got {connectivity}", "scene")


def connected_components(
    mask: np.ndarray,
    connectivity: int = DEFAULT_CONNECTIVITY,
    class_id: int = 1,
) -> InstanceMap:
    """
    Label maximal connected regions of a binary grid.

    Labels run 1..n in row-major order of each region's first pixel, so the
    same input always yields the same numbering.

    Args:
        mask: Binary H x W grid
        connectivity: 4 or 8
        class_id: Class assigned to every component in the returned map

    Returns:
        InstanceMap whose instances are the components
    """
    mask = np.asarray(mask)
    _check_grid(mask, "mask")
    _check_binary(mask, "mask")
    labels = skimage.measure.label(
        mask.astype(bool), background=0, connectivity=_skimage_connectivity(connectivity)
    )
    labels = _relabel_row_major(labels)
    n = int(labels.max()) if labels.size else 0
    return InstanceMap(labels, {i: class_id for i in range(1, n + 1)})


def instances_from_semantic(
    mask: SemanticMask,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> InstanceMap:
    """
    Split every non-background class into its connected components.

    Components of different classes never merge even when they touch.
    """
    labels = np.zeros(mask.shape, dtype=np.int64)
    classes: Dict[int, int] = {}
    offset = 0
    for cls in range(mask.num_classes):
        if cls == mask.background_class:
            continue
        region = mask.data == cls
        if not region.any():
            continue
        comp = skimage.measure.label(
            region, background=0, connectivity=_skimage_connectivity(connectivity)
        )
        n = int(comp.max())
        labels[region] = comp[region] + offset
        for i in range(1, n + 1):
            classes[offset + i] = cls
        offset += n

    relabeled = _relabel_row_major(labels)
    remap = {}
    for old, cls in classes.items():
        new = int(relabeled.flat[np.flatnonzero(labels.ravel() == old)[0]])
        remap[new] = cls
    return InstanceMap(relabeled, remap)


def dilate(mask: ChangeMask, radius: int) -> ChangeMask:
    """
    Square (Chebyshev) dilation.

    Args:
        mask: Binary mask to grow
        radius: Chebyshev radius; 0 returns the input unchanged

    Returns:
        ChangeMask with 1 wherever an input 1-pixel lies within `radius`
    """
    if radius < 0:
        raise ParameterError(f"dilation radius must be >= 0, got {radius}", "scene")
    if radius == 0 or not mask.data.any():
        return ChangeMask(mask.data)
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    grown = scipy.ndimage.binary_dilation(mask.data.astype(bool), structure=structure)
    return ChangeMask(grown.astype(np.uint8))


def extract_contours(
    instances: InstanceMap,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> ContourMap:
    """
    Mark instance pixels that touch another label or the image border.

    A pixel is a contour pixel iff it belongs to an instance and at least one
    of its neighbors (8-neighborhood by default) is outside that same
    instance, the image border counting as outside.

    Args:
        instances: Instance map to outline
        connectivity: 4 or 8

    Returns:
        ContourMap
    """
    if connectivity not in (4, 8):
        raise ParameterError(f"connectivity must be 4 or 8, got {connectivity}", "scene")
    offsets = _OFFSETS_8 if connectivity == 8 else _OFFSETS_4

    data = instances.data
    h, w = data.shape
    padded = np.pad(data, 1, constant_values=-1)
    boundary = np.zeros((h, w), dtype=bool)
    for dy, dx in offsets:
        neighbor = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        boundary |= neighbor != data
    return ContourMap(((data > 0) & boundary).astype(np.uint8))


def instance_support(instances: InstanceMap, instance_id: int) -> np.ndarray:
    """
    Indicator grid of one instance.

    Raises:
        InstanceLookupError: if the id is not in the map
    """
    if instance_id not in instances.classes:
        raise InstanceLookupError(f"unknown instance id {instance_id}", "scene")
    return (instances.data == instance_id).astype(np.uint8)


def union_of_supports(instances: InstanceMap, ids: Iterable[int]) -> ChangeMask:
    """ChangeMask covering the supports of the given instances."""
    ids = list(ids)
    if not ids:
        return ChangeMask.zeros(*instances.shape)
    return ChangeMask(np.isin(instances.data, ids).astype(np.uint8))


def semantic_from_instances(
    instances: InstanceMap,
    num_classes: int,
    background_class: Optional[int] = None,
) -> SemanticMask:
    """Paint each instance's class into a background-filled mask."""
    background = BACKGROUND_CLASS if background_class is None else background_class
    data = np.full(instances.shape, background, dtype=np.int64)
    for inst_id, cls in instances.classes.items():
        data[instances.data == inst_id] = cls
    return SemanticMask(data, num_classes, background)


@dataclass(frozen=True, eq=False)
class LabeledScene:
    """An H x W x C uint8 image with its semantic mask and instances."""
    image: np.ndarray
    mask: SemanticMask
    instances: InstanceMap

    def __post_init__(self):
        image = np.asarray(self.image)
        if image.ndim != 3 or image.shape[:2] != self.mask.shape:
            raise DimensionError(
                f"image {image.shape} does not match mask {self.mask.shape}", "scene"
            )
        if self.instances.shape != self.mask.shape:
            raise DimensionError("instance map and mask differ in size", "scene")
        object.__setattr__(self, "image", _frozen(image, np.uint8))

    @property
    def shape(self):
        return self.mask.shape
