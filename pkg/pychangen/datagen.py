"""
Dataset generation for pychangen.

Builds synthetic change-detection datasets: procedural time-0 scenes, event
simulation and masked change diffusion, written to disk as

    <name>/manifest.json
    <name>/samples/<id>/{t0.png, t1.png, mask_t0.png, mask_t1.png, change.png, meta.json}

Every sample is a pure function of (checkpoint, configs, root seed, index).
Work always runs in a process pool with single-threaded torch workers, so
the bytes written do not depend on the worker count. Existing samples whose
checksums validate are kept on resume.
"""

import json
import logging
import multiprocessing
import re
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from .constants import (
    DATASET_NAME_PREFIX,
    DEFAULT_DILATION_RADIUS,
    MANIFEST_FILE,
    SAMPLES_DIR,
    SCHEMA_VERSION,
)
from .errors import (
    ChecksumError,
    ConfigurationError,
    EmptyDatasetError,
    LeakageError,
    ParameterError,
    SchemaVersionError,
    StorageError,
)
from .events import EventKind, EventSpec
from .procedural import SceneSpec, gen_procedural_scene
from .sampler import GuidanceConfig, MaskedChangeSampler, synthesize_time_series
from .scene import ChangeMask, dilate
from .seeding import derive_seed, numpy_rng
from .storage import is_valid_sample, read_meta, read_sample, write_sample
from .training import load_checkpoint

logger = logging.getLogger("ChangenDatagen")

PathLike = Union[str, Path]

_NAME_PATTERN = re.compile(
    rf"^{re.escape(DATASET_NAME_PREFIX)}-S(\d+)-(\d+(?:\.\d+)?)([kM]?)$"
)
_MULTIPLIERS = {"": 1, "k": 1000, "M": 1000000}


# ========================================================================
# NAMING
# ========================================================================

def _format_count(n: int) -> str:
    if n < 1000:
        return str(n)
    unit, scale = ("k", 1000) if n < 1000000 else ("M", 1000000)
    value = Decimal(n) / Decimal(scale)
    text = format(value.normalize(), "f")
    return f"{text}{unit}"


def name_dataset(classes: int, pairs: int) -> str:
    """
    Dataset name ``Changen2-S<classes>-<pairs>``.

    Examples:
        >>> name_dataset(1, 15000)
        'Changen2-S1-15k'
        >>> name_dataset(0, 1200000)
        'Changen2-S0-1.2M'
    """
    if classes < 0 or pairs < 1:
        raise ParameterError(f"need classes >= 0 and pairs >= 1, got {classes}, {pairs}", "datagen")
    return f"{DATASET_NAME_PREFIX}-S{classes}-{_format_count(pairs)}"


def parse_dataset_name(name: str) -> Tuple[int, int]:
    """Inverse of `name_dataset`: returns (classes, pairs)."""
    match = _NAME_PATTERN.match(name)
    if not match:
        raise ParameterError(f"'{name}' does not follow the dataset name template", "datagen")
    classes, number, unit = match.groups()
    try:
        pairs = Decimal(number) * _MULTIPLIERS[unit]
    except InvalidOperation as e:
        raise ParameterError(f"bad pair count in '{name}'", "datagen") from e
    if pairs != pairs.to_integral_value() or pairs < 1:
        raise ParameterError(f"pair count in '{name}' is not a positive integer", "datagen")
    return int(classes), int(pairs)


# ========================================================================
# MANIFEST
# ========================================================================

@dataclass
class DatasetManifest:
    """
    Dataset-level record written to manifest.json.

    Records are sorted by sample index and carry no timestamps, so identical
    runs produce identical manifests.
    """
    name: str
    pair_count: int
    class_count: int
    condition_kind: str
    guidance: Dict[str, Any]
    root_seed: int
    scene_seed_range: Tuple[int, int]
    scene_spec: Dict[str, Any]
    event_specs: List[Dict[str, Any]]
    series_length: int = 1
    schema_version: int = SCHEMA_VERSION
    records: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        self.scene_seed_range = tuple(self.scene_seed_range)

    @property
    def scene_seeds(self) -> List[int]:
        return [int(r["scene_seed"]) for r in self.records]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pair_count": self.pair_count,
            "class_count": self.class_count,
            "condition_kind": self.condition_kind,
            "guidance": self.guidance,
            "root_seed": self.root_seed,
            "scene_seed_range": list(self.scene_seed_range),
            "scene_spec": self.scene_spec,
            "event_specs": self.event_specs,
            "series_length": self.series_length,
            "schema_version": self.schema_version,
            "records": sorted(self.records, key=lambda r: r["index"]),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise SchemaVersionError(
                f"manifest schema {data.get('schema_version')}, expected {SCHEMA_VERSION}", "datagen"
            )
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def save(self, dataset_dir: PathLike):
        with open(Path(dataset_dir) / MANIFEST_FILE, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, dataset_dir: PathLike) -> "DatasetManifest":
        path = Path(dataset_dir) / MANIFEST_FILE
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except FileNotFoundError as e:
            raise EmptyDatasetError(f"no manifest at {path}", "datagen") from e
        except json.JSONDecodeError as e:
            raise ChecksumError(f"corrupted manifest {path}: {e}", "datagen") from e

    def get_summary(self) -> str:
        kinds: Dict[str, int] = {}
        for record in self.records:
            for kind in record["event_kinds"]:
                kinds[kind] = kinds.get(kind, 0) + 1
        lines = [f"Dataset: {self.name}", "=" * 40]
        lines.append(f"Samples: {len(self.records)} (series length {self.series_length})")
        lines.append(f"Condition: {self.condition_kind}, classes: {self.class_count}")
        lines.append(f"Guidance ratio: {self.guidance.get('guidance_ratio')}, "
                     f"DDIM steps: {self.guidance.get('num_steps')}")
        lines.append(f"Scene seeds: [{self.scene_seed_range[0]}, {self.scene_seed_range[1]})")
        lines.append("\nEvents by kind:")
        for kind, count in sorted(kinds.items()):
            lines.append(f"  {kind}: {count}")
        return "\n".join(lines)

    def print_summary(self):
        print(self.get_summary())


def check_disjoint_seeds(train: DatasetManifest, heldout: DatasetManifest):
    """Leak guard: raise LeakageError if two datasets share a scene seed."""
    shared = set(train.scene_seeds) & set(heldout.scene_seeds)
    if shared:
        raise LeakageError(
            f"{train.name} and {heldout.name} share {len(shared)} scene seeds "
            f"(e.g. {sorted(shared)[:5]})", "datagen"
        )


# ========================================================================
# GENERATION
# ========================================================================

@dataclass(frozen=True)
class SampleJob:
    """Everything one worker needs to produce one sample."""
    index: int
    sample_dir: str
    scene_spec: SceneSpec
    event_specs: Tuple[EventSpec, ...]
    guidance: GuidanceConfig
    root_seed: int
    scene_seed: int
    series_length: int
    condition_kind: str


_WORKER: Dict[str, Any] = {}


def _init_worker(checkpoint_path: str):
    torch.set_num_threads(1)
    _WORKER["checkpoint"] = load_checkpoint(checkpoint_path)


def sample_id(index: int) -> str:
    return f"{index:06d}"


def plan_events(event_specs: Sequence[EventSpec], series_length: int,
                sample_seed: int) -> List[EventSpec]:
    """Per-step event specs of one sample, drawn from the configured mix."""
    chooser = numpy_rng(derive_seed(sample_seed, "event_choice"))
    plan = []
    for k in range(series_length):
        pick = int(chooser.integers(len(event_specs))) if len(event_specs) > 1 else 0
        plan.append(event_specs[pick].with_seed(derive_seed(sample_seed, "events", k)))
    return plan


def _generate_one(job: SampleJob) -> Dict[str, Any]:
    checkpoint = _WORKER["checkpoint"]
    sampler = MaskedChangeSampler(checkpoint.model, checkpoint.schedule)
    sample_seed = derive_seed(job.root_seed, job.index)

    scene = gen_procedural_scene(job.scene_spec, job.scene_seed)
    plan = plan_events(job.event_specs, job.series_length, sample_seed)
    guidance = job.guidance.with_seed(derive_seed(sample_seed, "guidance"))
    series = synthesize_time_series(scene, plan, guidance, sampler,
                                    condition_kind=job.condition_kind)
    record = {
        "sample_id": sample_id(job.index),
        "index": job.index,
        "sample_seed": sample_seed,
        "scene_seed": job.scene_seed,
        "event_kinds": [s.kind.value for s in plan],
        "path": f"{SAMPLES_DIR}/{sample_id(job.index)}",
    }
    write_sample(job.sample_dir, series, record)
    record["change_pixels"] = [c.count() for c in series.change_masks]
    return record


def _record_from_meta(meta: Dict[str, Any], sample_dir: Path) -> Dict[str, Any]:
    series, _ = read_sample(sample_dir)
    record = {k: meta[k] for k in ("sample_id", "index", "sample_seed", "scene_seed",
                                   "event_kinds", "path")}
    record["change_pixels"] = [c.count() for c in series.change_masks]
    return record


def generate_dataset(
    out_dir: PathLike,
    count: int,
    scene_spec: SceneSpec,
    event_specs: Sequence[EventSpec],
    guidance: GuidanceConfig,
    checkpoint_path: PathLike,
    root_seed: int = 0,
    scene_seed_offset: int = 0,
    series_length: int = 1,
    condition_kind: str = "semantic",
    workers: int = 1,
    name: Optional[str] = None,
    show_progress: bool = False,
) -> DatasetManifest:
    """
    Generate (or resume) a dataset.

    Args:
        out_dir: Parent directory; the dataset lands in ``out_dir/<name>``
        count: Number of samples (pairs for series_length 1)
        scene_spec: Statistics of the time-0 scenes
        event_specs: Event mix; each step draws one of these per sample
        guidance: Guidance ratio and DDIM steps (seed is derived per sample)
        checkpoint_path: Trained RS-DiT checkpoint
        root_seed: Root of all per-sample seeds
        scene_seed_offset: Sample i uses scene seed offset + i
        series_length: Change steps per sample
        condition_kind: "semantic" or "contour"
        workers: Worker processes
        name: Dataset name; derived from the template when omitted
        show_progress: Show a tqdm bar

    Returns:
        The written DatasetManifest
    """
    if count < 1:
        raise ParameterError("count must be >= 1", "datagen")
    if series_length < 1:
        raise ParameterError("series_length must be >= 1", "datagen")
    if not event_specs:
        raise ParameterError("at least one event spec is required", "datagen")
    if condition_kind not in ("semantic", "contour"):
        raise ParameterError(f"unknown condition kind '{condition_kind}'", "datagen")

    checkpoint = load_checkpoint(checkpoint_path)
    expected = scene_spec.num_classes if condition_kind == "semantic" else 1
    if checkpoint.config.condition_channels != expected:
        raise ConfigurationError(
            f"checkpoint expects {checkpoint.config.condition_channels} condition channels, "
            f"{condition_kind} scenes provide {expected}", "datagen"
        )

    class_count = scene_spec.num_classes - 1 if condition_kind == "semantic" else 0
    name = name or name_dataset(class_count, count)
    dataset_dir = Path(out_dir) / name
    samples_dir = dataset_dir / SAMPLES_DIR
    try:
        samples_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create {samples_dir}: {e}", "datagen") from e

    records: List[Dict[str, Any]] = []
    jobs: List[SampleJob] = []
    for index in range(count):
        sample_dir = samples_dir / sample_id(index)
        if sample_dir.exists() and is_valid_sample(sample_dir):
            records.append(_record_from_meta(read_meta(sample_dir), sample_dir))
            continue
        if sample_dir.exists():
            logger.warning(f"Sample {sample_id(index)} is incomplete; regenerating")
        jobs.append(SampleJob(
            index=index,
            sample_dir=str(sample_dir),
            scene_spec=scene_spec,
            event_specs=tuple(event_specs),
            guidance=guidance,
            root_seed=root_seed,
            scene_seed=scene_seed_offset + index,
            series_length=series_length,
            condition_kind=condition_kind,
        ))
    logger.info(f"{name}: {len(records)} samples present, {len(jobs)} to generate "
                f"with {workers} worker(s)")

    if jobs:
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=max(1, workers), mp_context=context,
                                 initializer=_init_worker,
                                 initargs=(str(checkpoint_path),)) as pool:
            futures = [pool.submit(_generate_one, job) for job in jobs]
            for future in tqdm(as_completed(futures), total=len(futures),
                               disable=not show_progress, desc=name):
                record = future.result()
                records.append(record)
                logger.debug(f"Wrote sample {record['sample_id']}")

    manifest = DatasetManifest(
        name=name,
        pair_count=count,
        class_count=class_count,
        condition_kind=condition_kind,
        guidance={"guidance_ratio": guidance.guidance_ratio, "num_steps": guidance.num_steps},
        root_seed=root_seed,
        scene_seed_range=(scene_seed_offset, scene_seed_offset + count),
        scene_spec=scene_spec.to_dict(),
        event_specs=[s.to_dict() for s in event_specs],
        series_length=series_length,
        records=sorted(records, key=lambda r: r["index"]),
    )
    manifest.save(dataset_dir)
    logger.info(f"Wrote {name} with {count} samples to {dataset_dir}")
    return manifest


# ========================================================================
# VERIFY AND STATS
# ========================================================================

@dataclass
class VerifyReport:
    checked: int = 0
    failures: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def get_summary(self) -> str:
        status = "OK" if self.ok else f"{len(self.failures)} FAILURE(S)"
        lines = [f"Verified {self.checked} samples: {status}"]
        lines += [f"  - {msg}" for msg in self.failures]
        return "\n".join(lines)

    def print_summary(self):
        print(self.get_summary())


def _scan_sample_dirs(dataset_dir: Path) -> List[Path]:
    samples = dataset_dir / SAMPLES_DIR
    if not samples.is_dir():
        return []
    return sorted(p for p in samples.iterdir() if p.is_dir() and not p.name.endswith(".tmp"))


def contour_step_ok(prev_contour: np.ndarray, next_contour: np.ndarray, change: ChangeMask,
                    radius: int) -> bool:
    """Next contour lies inside the previous one and avoids the dilated change."""
    inside = not (next_contour & (1 - prev_contour)).any()
    clear = not (next_contour & dilate(change, radius).data).any()
    return inside and clear


def verify_dataset(dataset_dir: PathLike) -> VerifyReport:
    """
    Re-check every sample of a dataset against its own labels.

    Checks checksums and schema, manifest/name/directory agreement, that
    every stored change mask equals the change between its bracketing masks,
    and for contour-removal steps that the stored next contour was erased
    correctly.
    """
    dataset_dir = Path(dataset_dir)
    manifest = DatasetManifest.load(dataset_dir)
    report = VerifyReport()

    try:
        classes, pairs = parse_dataset_name(manifest.name)
        if (classes, pairs) != (manifest.class_count, manifest.pair_count):
            report.failures.append(f"name {manifest.name} disagrees with manifest counts")
    except ParameterError:
        logger.debug(f"{manifest.name} uses a custom name; skipping name check")
    if len(manifest.records) != manifest.pair_count:
        report.failures.append(
            f"manifest lists {len(manifest.records)} records, expected {manifest.pair_count}"
        )
    scanned = _scan_sample_dirs(dataset_dir)
    if len(scanned) != len(manifest.records):
        report.failures.append(f"{len(scanned)} sample directories, {len(manifest.records)} records")

    for record in manifest.records:
        sample_dir = dataset_dir / record["path"]
        report.checked += 1
        try:
            series, meta = read_sample(sample_dir)
        except (ChecksumError, SchemaVersionError) as e:
            report.failures.append(f"{record['sample_id']}: {e.message}")
            continue
        if not series.labels_consistent():
            report.failures.append(f"{record['sample_id']}: change masks disagree with masks")
        if meta["condition_kind"] == "contour":
            specs = meta.get("provenance", {}).get("event_specs", [])
            for k, kind in enumerate(record["event_kinds"]):
                if kind != EventKind.CONTOUR_REMOVE.value:
                    continue
                radius = int(specs[k].get("dilation_radius", DEFAULT_DILATION_RADIUS))
                prev = series.conditions[k].contour.data
                nxt = series.conditions[k + 1].contour.data
                if not contour_step_ok(prev, nxt, series.change_masks[k], radius):
                    report.failures.append(f"{record['sample_id']}: contour step {k} not erased")
    logger.info(f"Verified {report.checked} samples of {manifest.name}: "
                f"{len(report.failures)} failure(s)")
    return report


@dataclass
class DatasetStats:
    name: str
    samples: int
    steps: int
    pixels: int
    changed_pixels: int
    event_kinds: Dict[str, int]
    change_types: Dict[str, int]

    @property
    def change_prevalence(self) -> float:
        return self.changed_pixels / self.pixels if self.pixels else 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "samples": self.samples,
            "steps": self.steps,
            "pixels": self.pixels,
            "changed_pixels": self.changed_pixels,
            "change_prevalence": self.change_prevalence,
            "event_kinds": self.event_kinds,
            "change_types": self.change_types,
        }

    def get_summary(self) -> str:
        lines = [f"Dataset: {self.name}", "=" * 40]
        lines.append(f"Samples: {self.samples}, change steps: {self.steps}")
        lines.append(f"Change prevalence: {self.change_prevalence:.4f}")
        lines.append(f"Change types: {len(self.change_types)}")
        for pair, count in sorted(self.change_types.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {pair}: {count} px")
        return "\n".join(lines)

    def print_summary(self):
        print(self.get_summary())


def dataset_stats(dataset_dir: PathLike) -> DatasetStats:
    """Change prevalence, event kinds and the (from -> to) change-type histogram."""
    dataset_dir = Path(dataset_dir)
    manifest = DatasetManifest.load(dataset_dir)
    if not manifest.records:
        raise EmptyDatasetError(f"{manifest.name} has no samples", "datagen")

    kinds: Dict[str, int] = {}
    types: Dict[str, int] = {}
    pixels = changed = steps = 0
    for record in manifest.records:
        series, _ = read_sample(dataset_dir / record["path"])
        for kind in record["event_kinds"]:
            kinds[kind] = kinds.get(kind, 0) + 1
        for k, change in enumerate(series.change_masks):
            steps += 1
            pixels += change.data.size
            changed += change.count()
            where = change.data.astype(bool)
            if not where.any():
                continue
            before = series.masks[k].data[where]
            after = series.masks[k + 1].data[where]
            pairs, counts = np.unique(np.stack([before, after]), axis=1, return_counts=True)
            for (a, b), c in zip(pairs.T, counts):
                key = f"{int(a)}->{int(b)}"
                types[key] = types.get(key, 0) + int(c)
    return DatasetStats(manifest.name, len(manifest.records), steps, pixels, changed, kinds, types)
