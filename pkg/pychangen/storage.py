"""
On-disk sample format for pychangen datasets.

A sample directory holds one synthesized time series:

    t0.png, t1.png, ...            8-bit RGB images
    mask_t0.png, mask_t1.png, ...  8-bit class-id masks
    instances_t0.png, ...          16-bit instance-id maps
    change.png, change_2.png, ...  per-step change masks (0 / 255)
    change_cumulative.png          change vs. time 0 (series longer than one step)
    contour_t0.png, ...            contour conditions (contour datasets only)
    meta.json                      seeds, provenance, instance classes, sha256 checksums

Samples are written to a temporary directory and renamed into place, so a
sample directory either validates completely or is regenerated on resume.
"""

import hashlib
import json
import logging
import os
import shutil
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .constants import SAMPLE_META_FILE, SCHEMA_VERSION
from .errors import ChecksumError, SchemaVersionError, StorageError
from .sampler import DenseCondition, TimeSeriesSample
from .scene import ChangeMask, ContourMap, InstanceMap, SemanticMask

logger = logging.getLogger("ChangenStorage")

PathLike = Union[str, Path]


# ========================================================================
# FILE NAMES
# ========================================================================

def image_file(k: int) -> str:
    return f"t{k}.png"


def mask_file(k: int) -> str:
    return f"mask_t{k}.png"


def instance_file(k: int) -> str:
    return f"instances_t{k}.png"


def contour_file(k: int) -> str:
    return f"contour_t{k}.png"


def change_file(step: int) -> str:
    """Change between t{step} and t{step + 1}."""
    return "change.png" if step == 0 else f"change_{step + 1}.png"


CUMULATIVE_CHANGE_FILE = "change_cumulative.png"


# ========================================================================
# PNG CODECS
# ========================================================================

def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_image(path: PathLike, image: np.ndarray):
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")


def write_label(path: PathLike, data: np.ndarray):
    """8-bit single-channel label raster."""
    if data.size and (data.min() < 0 or data.max() > 255):
        raise StorageError(f"label values do not fit in 8 bits: {path}", "storage")
    Image.fromarray(np.ascontiguousarray(data, dtype=np.uint8)).save(path, format="PNG")


def write_binary(path: PathLike, data: np.ndarray):
    write_label(path, np.asarray(data, dtype=np.uint8) * 255)


def write_instances(path: PathLike, data: np.ndarray):
    """16-bit instance-id raster."""
    if data.size and data.max() > 65535:
        raise StorageError(f"instance ids do not fit in 16 bits: {path}", "storage")
    Image.fromarray(np.ascontiguousarray(data, dtype=np.uint16)).save(path, format="PNG")


def read_png(path: PathLike) -> np.ndarray:
    """Decode a PNG; undecodable files raise ChecksumError."""
    try:
        with Image.open(path) as img:
            img.load()
            return np.array(img)
    except (OSError, UnidentifiedImageError, SyntaxError) as e:
        raise ChecksumError(f"cannot decode {path}: {e}", "storage") from e


def read_binary(path: PathLike) -> np.ndarray:
    return (read_png(path) > 0).astype(np.uint8)


# ========================================================================
# SAMPLES
# ========================================================================

def write_sample(sample_dir: PathLike, series: TimeSeriesSample,
                 meta: Dict[str, Any]) -> Dict[str, Any]:
    """
    Serialize one time series.

    Args:
        sample_dir: Final sample directory (replaced if present)
        series: The synthesized series
        meta: Extra metadata (ids, seeds) merged into meta.json

    Returns:
        The meta.json content, checksums included
    """
    sample_dir = Path(sample_dir)
    tmp_dir = sample_dir.with_name(sample_dir.name + ".tmp")
    try:
        if tmp_dir.exists():
            shutil.rmtree(tmp_dir)
        tmp_dir.mkdir(parents=True)

        contour_kind = series.conditions[0].kind == "contour"
        for k in range(series.length + 1):
            write_image(tmp_dir / image_file(k), series.images[k])
            write_label(tmp_dir / mask_file(k), series.masks[k].data)
            write_instances(tmp_dir / instance_file(k), series.instances[k].data)
            if contour_kind:
                write_binary(tmp_dir / contour_file(k), series.conditions[k].contour.data)
        for step, change in enumerate(series.change_masks):
            write_binary(tmp_dir / change_file(step), change.data)
        if series.length > 1:
            write_binary(tmp_dir / CUMULATIVE_CHANGE_FILE, series.cumulative_change.data)

        files = {p.name: sha256_file(p) for p in sorted(tmp_dir.iterdir())}
        record = dict(meta)
        record.update({
            "schema_version": SCHEMA_VERSION,
            "series_length": series.length,
            "num_classes": series.masks[0].num_classes,
            "background_class": series.masks[0].background_class,
            "condition_kind": series.conditions[0].kind,
            "instance_classes": [
                {str(i): c for i, c in sorted(inst.classes.items())} for inst in series.instances
            ],
            "provenance": series.provenance,
            "files": files,
        })
        with open(tmp_dir / SAMPLE_META_FILE, "w") as f:
            json.dump(record, f, indent=2, sort_keys=True)

        if sample_dir.exists():
            shutil.rmtree(sample_dir)
        os.replace(tmp_dir, sample_dir)
    except OSError as e:
        raise StorageError(f"cannot write sample to {sample_dir}: {e}", "storage") from e
    return record


def read_meta(sample_dir: PathLike) -> Dict[str, Any]:
    path = Path(sample_dir) / SAMPLE_META_FILE
    try:
        with open(path) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ChecksumError(f"unreadable sample metadata {path}: {e}", "storage") from e
    version = meta.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path} has schema version {version}, expected {SCHEMA_VERSION}", "storage"
        )
    return meta


def validate_checksums(sample_dir: PathLike, meta: Dict[str, Any]):
    """Raise ChecksumError unless every listed file exists with its recorded hash."""
    sample_dir = Path(sample_dir)
    for name, expected in meta["files"].items():
        path = sample_dir / name
        if not path.is_file():
            raise ChecksumError(f"missing file {path}", "storage")
        if sha256_file(path) != expected:
            raise ChecksumError(f"checksum mismatch for {path}", "storage")


def is_valid_sample(sample_dir: PathLike) -> bool:
    """True iff the sample's metadata and checksums validate."""
    try:
        validate_checksums(sample_dir, read_meta(sample_dir))
    except (ChecksumError, SchemaVersionError, KeyError):
        return False
    return True


def read_sample(sample_dir: PathLike) -> Tuple[TimeSeriesSample, Dict[str, Any]]:
    """
    Load a sample written by `write_sample`.

    Raises:
        SchemaVersionError: if the sample was written by another schema
        ChecksumError: if a file is missing, altered or undecodable
    """
    sample_dir = Path(sample_dir)
    meta = read_meta(sample_dir)
    validate_checksums(sample_dir, meta)

    n = int(meta["series_length"])
    num_classes = int(meta["num_classes"])
    background = int(meta["background_class"])
    kind = meta["condition_kind"]

    images, masks, instances, conditions = [], [], [], []
    for k in range(n + 1):
        images.append(read_png(sample_dir / image_file(k)))
        mask = SemanticMask(read_png(sample_dir / mask_file(k)).astype(np.int64),
                            num_classes, background)
        classes = {int(i): int(c) for i, c in meta["instance_classes"][k].items()}
        inst = InstanceMap(read_png(sample_dir / instance_file(k)).astype(np.int64), classes)
        masks.append(mask)
        instances.append(inst)
        if kind == "contour":
            conditions.append(DenseCondition.from_contour(
                ContourMap(read_binary(sample_dir / contour_file(k)))))
        else:
            conditions.append(DenseCondition.from_semantic(mask))

    changes = [ChangeMask(read_binary(sample_dir / change_file(s))) for s in range(n)]
    if n > 1:
        cumulative = ChangeMask(read_binary(sample_dir / CUMULATIVE_CHANGE_FILE))
    else:
        cumulative = changes[0]

    series = TimeSeriesSample(
        images=images,
        masks=masks,
        instances=instances,
        conditions=conditions,
        change_masks=changes,
        cumulative_change=cumulative,
        provenance=meta.get("provenance", {}),
    )
    return series, meta
