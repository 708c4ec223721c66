"""
Evaluation harness for pychangen.

Validates synthetic data the way it is meant to be used: pre-train a toy
Siamese change detector on a generated dataset, evaluate it zero-shot on a
held-out dataset with pixel-level micro-averaged metrics, and sweep the
pre-event guidance ratio.
"""

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402
from tqdm import tqdm  # noqa: E402

from .constants import DETECTOR_CHECKPOINT_HEADER  # noqa: E402
from .datagen import (  # noqa: E402
    DatasetManifest,
    check_disjoint_seeds,
    generate_dataset,
    verify_dataset,
)
from .errors import (  # noqa: E402
    CheckpointError,
    ChecksumError,
    DimensionError,
    EmptyDatasetError,
    ParameterError,
)
from .events import EventSpec  # noqa: E402
from .models.codec import PixelCodec  # noqa: E402
from .models.detector import DetectorConfig, SiameseChangeDetector  # noqa: E402
from .procedural import SceneSpec  # noqa: E402
from .sampler import GuidanceConfig  # noqa: E402
from .scene import ChangeMask  # noqa: E402
from .seeding import derive_seed, numpy_rng, torch_generator  # noqa: E402
from .storage import read_sample  # noqa: E402

logger = logging.getLogger("ChangenEval")

PathLike = Union[str, Path]


# ========================================================================
# METRICS
# ========================================================================

@dataclass(frozen=True)
class BinaryChangeMetrics:
    """Pixel counts and the ratios derived from them."""
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else 0.0

    def __add__(self, other: "BinaryChangeMetrics") -> "BinaryChangeMetrics":
        return BinaryChangeMetrics(self.tp + other.tp, self.fp + other.fp,
                                   self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "iou": self.iou,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }

    def get_summary(self) -> str:
        return (f"F1 {self.f1:.4f} | Prec {self.precision:.4f} | "
                f"Rec {self.recall:.4f} | IoU {self.iou:.4f}")


def _binary(mask: Union[ChangeMask, np.ndarray]) -> np.ndarray:
    data = mask.data if isinstance(mask, ChangeMask) else np.asarray(mask)
    return data.astype(bool)


def compute_metrics(pred: Union[ChangeMask, np.ndarray],
                    truth: Union[ChangeMask, np.ndarray]) -> BinaryChangeMetrics:
    """Pixel-level TP/FP/FN/TN of one prediction."""
    p, t = _binary(pred), _binary(truth)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} vs truth {t.shape}", "evaluation")
    return BinaryChangeMetrics(
        tp=int((p & t).sum()),
        fp=int((p & ~t).sum()),
        fn=int((~p & t).sum()),
        tn=int((~p & ~t).sum()),
    )


def compute_batch_metrics(pairs: Iterable[Tuple[Any, Any]]) -> BinaryChangeMetrics:
    """Micro-average: pool counts over all (pred, truth) pairs, then take ratios."""
    total = BinaryChangeMetrics()
    for pred, truth in pairs:
        total = total + compute_metrics(pred, truth)
    return total


def random_baselines(truths: Sequence[np.ndarray], seed: int = 0) -> Dict[str, float]:
    """
    F1 of trivial predictors on the given labels.

    ``all_ones`` predicts change everywhere; ``bernoulli`` predicts change
    independently with probability equal to the label prevalence.
    """
    rng = numpy_rng(seed)
    prevalence = (sum(int(_binary(t).sum()) for t in truths)
                  / max(1, sum(_binary(t).size for t in truths)))
    ones = compute_batch_metrics((np.ones_like(_binary(t)), t) for t in truths)
    bern = compute_batch_metrics(
        (rng.random(_binary(t).shape) < prevalence, t) for t in truths
    )
    return {"prevalence": prevalence, "all_ones_f1": ones.f1, "bernoulli_f1": bern.f1}


def unchanged_region_mae(pre: np.ndarray, post: np.ndarray,
                         change: Union[ChangeMask, np.ndarray]) -> Tuple[float, int]:
    """Sum of absolute differences (uint8 scale) over unchanged pixels and their count."""
    keep = ~_binary(change)
    diff = np.abs(pre.astype(np.float64) - post.astype(np.float64))[keep]
    return float(diff.sum()), int(diff.size)


# ========================================================================
# DATA
# ========================================================================

@dataclass
class ChangePairs:
    """All bitemporal pairs of a dataset as tensors."""
    t0: torch.Tensor     # (N, C, H, W) in [-1, 1]
    t1: torch.Tensor
    labels: torch.Tensor  # (N, 1, H, W) float 0/1

    def __len__(self) -> int:
        return self.t0.shape[0]


def load_pairs(dataset_dir: PathLike) -> Tuple[ChangePairs, DatasetManifest]:
    """Every change step of every sample becomes one (pre, post, change) pair."""
    dataset_dir = Path(dataset_dir)
    manifest = DatasetManifest.load(dataset_dir)
    codec = PixelCodec(3)
    t0, t1, labels = [], [], []
    for record in manifest.records:
        series, _ = read_sample(dataset_dir / record["path"])
        for k, change in enumerate(series.change_masks):
            t0.append(codec.encode(series.images[k]))
            t1.append(codec.encode(series.images[k + 1]))
            labels.append(torch.from_numpy(change.data.astype(np.float32))[None])
    if not t0:
        raise EmptyDatasetError(f"{manifest.name} has no pairs", "evaluation")
    return ChangePairs(torch.stack(t0), torch.stack(t1), torch.stack(labels)), manifest


def d4_transform(x: torch.Tensor, k: int) -> torch.Tensor:
    """Element k (0..7) of the dihedral group: rotate by k % 4 quarter turns, flip if k >= 4."""
    x = torch.rot90(x, k % 4, dims=(-2, -1))
    return torch.flip(x, dims=(-1,)) if k >= 4 else x


def _augment(t0, t1, label, generator: torch.Generator):
    square = t0.shape[-1] == t0.shape[-2]
    choices = 8 if square else 4
    out = ([], [], [])
    for i in range(t0.shape[0]):
        k = int(torch.randint(choices, (1,), generator=generator))
        if not square:
            k = 2 * k  # shape-preserving elements only
        for dst, src in zip(out, (t0, t1, label)):
            dst.append(d4_transform(src[i], k))
    return tuple(torch.stack(o) for o in out)


# ========================================================================
# PRE-TRAINING
# ========================================================================

@dataclass
class DetectorTrainingResult:
    model: SiameseChangeDetector
    losses: List[Tuple[int, float]]
    dataset: str = ""


def save_detector(path: PathLike, model: SiameseChangeDetector, extra: Optional[dict] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "header": DETECTOR_CHECKPOINT_HEADER,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)


def load_detector(path: PathLike) -> Tuple[SiameseChangeDetector, Dict[str, Any]]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read detector checkpoint {path}: {e}", "evaluation") from e
    if not isinstance(payload, dict) or payload.get("header") != DETECTOR_CHECKPOINT_HEADER:
        raise CheckpointError(f"{path} is not a {DETECTOR_CHECKPOINT_HEADER} checkpoint",
                              "evaluation")
    model = SiameseChangeDetector(DetectorConfig.from_dict(payload["config"]))
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(f"detector checkpoint {path} is inconsistent: {e}", "evaluation") from e
    return model.eval(), dict(payload.get("extra", {}))


def save_loss_curve(losses: Sequence[Tuple[int, float]], out_dir: PathLike, stem: str = "loss"):
    """Write the loss curve as JSON and as a PNG plot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}.json", "w") as f:
        json.dump([{"step": s, "loss": v} for s, v in losses], f, indent=2)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([s for s, _ in losses], [v for _, v in losses], marker=".")
    ax.set_xlabel("step")
    ax.set_ylabel("BCE loss")
    ax.set_title("detector pre-training")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / f"{stem}.png", dpi=120)
    plt.close(fig)


def pretrain_detector(
    dataset_dir: PathLike,
    config: Optional[DetectorConfig] = None,
    out_dir: Optional[PathLike] = None,
    verify: bool = True,
    show_progress: bool = False,
) -> DetectorTrainingResult:
    """
    Bitemporal supervised pre-training with pixel-wise BCE.

    Args:
        dataset_dir: Dataset written by `generate_dataset`
        config: Detector architecture and budget
        out_dir: If given, receives detector.pt, loss.json and loss.png
        verify: Run `verify_dataset` first
        show_progress: Show a tqdm bar

    Returns:
        DetectorTrainingResult with the loss recorded every ``log_every`` steps
    """
    config = config or DetectorConfig()
    if verify:
        report = verify_dataset(dataset_dir)
        if not report.ok:
            raise ChecksumError(f"dataset failed verification: {report.failures[0]}", "evaluation")
    pairs, manifest = load_pairs(dataset_dir)

    torch.manual_seed(derive_seed(config.seed, "detector-init"))
    model = SiameseChangeDetector(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    generator = torch_generator(derive_seed(config.seed, "detector-batches"))
    losses: List[Tuple[int, float]] = []

    model.train()
    for step in tqdm(range(config.steps), disable=not show_progress, desc="pretrain"):
        idx = torch.randint(len(pairs), (config.batch_size,), generator=generator)
        t0, t1, label = pairs.t0[idx], pairs.t1[idx], pairs.labels[idx]
        if config.d4_augment:
            t0, t1, label = _augment(t0, t1, label, generator)
        loss = F.binary_cross_entropy_with_logits(model(t0, t1), label)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            losses.append((step, float(loss.detach())))
            logger.info(f"detector step {step}: bce={losses[-1][1]:.4f}")
    model.eval()

    if out_dir is not None:
        save_detector(Path(out_dir) / "detector.pt", model, extra={
            "dataset": manifest.name,
            "scene_seeds": manifest.scene_seeds,
        })
        save_loss_curve(losses, out_dir)
    return DetectorTrainingResult(model, losses, manifest.name)


@torch.no_grad()
def predict_changes(model: SiameseChangeDetector, pairs: ChangePairs,
                    batch_size: int = 16) -> torch.Tensor:
    """Binary (N, 1, H, W) predictions at logit 0."""
    model.eval()
    out = []
    for start in range(0, len(pairs), batch_size):
        sl = slice(start, start + batch_size)
        out.append(model(pairs.t0[sl], pairs.t1[sl]) > 0)
    return torch.cat(out)


def evaluate_detector(model: SiameseChangeDetector, pairs: ChangePairs) -> BinaryChangeMetrics:
    preds = predict_changes(model, pairs)
    return compute_batch_metrics(
        (p[0].numpy(), t[0].numpy()) for p, t in zip(preds, pairs.labels)
    )


@dataclass
class EvalReport:
    dataset: str
    metrics: BinaryChangeMetrics
    baselines: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "metrics": self.metrics.to_dict(),
                "baselines": self.baselines}

    def get_summary(self) -> str:
        lines = [f"Zero-shot on {self.dataset}", "=" * 40, self.metrics.get_summary()]
        if self.baselines:
            lines.append(
                f"Baselines: all-ones F1 {self.baselines['all_ones_f1']:.4f}, "
                f"Bernoulli F1 {self.baselines['bernoulli_f1']:.4f} "
                f"(prevalence {self.baselines['prevalence']:.4f})"
            )
        return "\n".join(lines)

    def print_summary(self):
        print(self.get_summary())


def zero_shot_eval(
    detector: Union[PathLike, SiameseChangeDetector],
    heldout_dir: PathLike,
    train_seeds: Optional[Sequence[int]] = None,
    train_dir: Optional[PathLike] = None,
) -> EvalReport:
    """
    Evaluate without fine-tuning on a held-out dataset.

    The leak guard compares the held-out scene seeds with the training seeds,
    taken from `train_dir`'s manifest, from `train_seeds`, or from the
    detector checkpoint (in that order).

    Raises:
        LeakageError: if a scene seed appears in both datasets
        ParameterError: if no training seeds are available
    """
    extra: Dict[str, Any] = {}
    if isinstance(detector, SiameseChangeDetector):
        model = detector
    else:
        model, extra = load_detector(detector)

    pairs, heldout = load_pairs(heldout_dir)
    if train_dir is not None:
        check_disjoint_seeds(DatasetManifest.load(train_dir), heldout)
    else:
        seeds = train_seeds if train_seeds is not None else extra.get("scene_seeds")
        if seeds is not None:
            shadow = DatasetManifest(
                name=extra.get("dataset", "training set"), pair_count=len(seeds), class_count=0,
                condition_kind="", guidance={}, root_seed=0, scene_seed_range=(0, 0),
                scene_spec={}, event_specs=[],
                records=[{"index": i, "scene_seed": s} for i, s in enumerate(seeds)],
            )
            check_disjoint_seeds(shadow, heldout)
        else:
            raise ParameterError(
                "no training scene seeds: pass train_dir or train_seeds, or a detector "
                "checkpoint written by pretrain_detector", "evaluation"
            )

    metrics = evaluate_detector(model, pairs)
    truths = [t[0].numpy() for t in pairs.labels]
    report = EvalReport(heldout.name, metrics, random_baselines(truths))
    logger.info(f"{heldout.name}: {metrics.get_summary()}")
    return report


# ========================================================================
# GUIDANCE-RATIO SWEEP
# ========================================================================

@dataclass
class SweepRow:
    guidance_ratio: float
    coherence_mae: float
    f1: float
    dataset: str = ""


@dataclass
class SweepResult:
    rows: List[SweepRow]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        writer.writerow(["guidance_ratio", "coherence_mae", "f1", "dataset"])
        for row in self.rows:
            writer.writerow([row.guidance_ratio, f"{row.coherence_mae:.6f}", f"{row.f1:.6f}",
                             row.dataset])
        return buffer.getvalue()

    def save(self, out_dir: PathLike):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "sweep.csv", "w", newline="") as f:
            f.write(self.to_csv())
        fig, ax1 = plt.subplots(figsize=(6, 4))
        ratios = [r.guidance_ratio for r in self.rows]
        ax1.plot(ratios, [r.coherence_mae for r in self.rows], "o-", color="tab:blue")
        ax1.set_xlabel("guidance ratio")
        ax1.set_ylabel("unchanged-region MAE", color="tab:blue")
        ax2 = ax1.twinx()
        ax2.plot(ratios, [r.f1 for r in self.rows], "s--", color="tab:red")
        ax2.set_ylabel("zero-shot F1", color="tab:red")
        fig.tight_layout()
        fig.savefig(out_dir / "sweep.png", dpi=120)
        plt.close(fig)

    def f1_prefers_small_ratio(self) -> bool:
        """True if F1 is non-increasing in the guidance ratio."""
        ordered = sorted(self.rows, key=lambda r: r.guidance_ratio)
        return all(a.f1 >= b.f1 for a, b in zip(ordered, ordered[1:]))

    def get_summary(self) -> str:
        lines = ["guidance_ratio  coherence_mae  f1", "-" * 36]
        for r in self.rows:
            lines.append(f"{r.guidance_ratio:14.2f}  {r.coherence_mae:13.4f}  {r.f1:.4f}")
        return "\n".join(lines)

    def print_summary(self):
        print(self.get_summary())


def dataset_coherence(dataset_dir: PathLike) -> float:
    """Mean absolute pre/post difference over unchanged pixels of every pair."""
    dataset_dir = Path(dataset_dir)
    manifest = DatasetManifest.load(dataset_dir)
    total, count = 0.0, 0
    for record in manifest.records:
        series, _ = read_sample(dataset_dir / record["path"])
        for k, change in enumerate(series.change_masks):
            s, n = unchanged_region_mae(series.images[k], series.images[k + 1], change)
            total += s
            count += n
    return total / count if count else 0.0


def lambda_sweep(
    checkpoint_path: PathLike,
    ratios: Sequence[float],
    out_dir: PathLike,
    count: int,
    scene_spec: SceneSpec,
    event_specs: Sequence[EventSpec],
    num_steps: int,
    detector_config: Optional[DetectorConfig] = None,
    heldout_count: Optional[int] = None,
    heldout_ratio: float = 0.5,
    root_seed: int = 0,
    condition_kind: str = "semantic",
    workers: int = 1,
) -> SweepResult:
    """
    Generate one dataset per guidance ratio and score it.

    Every dataset uses the same scenes and seeds. Each row records the
    unchanged-region MAE (coherence proxy) and the F1 of a detector trained
    with a fixed budget, evaluated on one shared held-out dataset built
    from a disjoint scene-seed range. Writes sweep.csv and sweep.png.
    """
    if not ratios:
        raise ParameterError("lambda_sweep needs at least one ratio", "evaluation")
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ParameterError(f"guidance ratio {r} outside [0, 1]", "evaluation")
    out_dir = Path(out_dir)
    detector_config = detector_config or DetectorConfig()
    heldout_count = heldout_count or max(1, count // 4)

    heldout = generate_dataset(
        out_dir / "heldout", heldout_count, scene_spec, event_specs,
        GuidanceConfig(heldout_ratio, num_steps), checkpoint_path,
        root_seed=derive_seed(root_seed, "heldout"), scene_seed_offset=count,
        condition_kind=condition_kind, workers=workers,
    )
    heldout_dir = out_dir / "heldout" / heldout.name

    rows = []
    for ratio in ratios:
        ratio_dir = out_dir / f"ratio_{ratio:g}"
        manifest = generate_dataset(
            ratio_dir, count, scene_spec, event_specs, GuidanceConfig(ratio, num_steps),
            checkpoint_path, root_seed=root_seed, scene_seed_offset=0,
            condition_kind=condition_kind, workers=workers,
        )
        dataset_dir = ratio_dir / manifest.name
        coherence = dataset_coherence(dataset_dir)
        trained = pretrain_detector(dataset_dir, detector_config, out_dir=ratio_dir / "detector")
        report = zero_shot_eval(trained.model, heldout_dir, train_dir=dataset_dir)
        rows.append(SweepRow(ratio, coherence, report.metrics.f1, manifest.name))
        logger.info(f"ratio {ratio:g}: coherence MAE {coherence:.3f}, F1 {report.metrics.f1:.4f}")

    result = SweepResult(rows)
    result.save(out_dir)
    if not all(math.isfinite(r.coherence_mae) and math.isfinite(r.f1) for r in rows):
        logger.warning("Sweep produced non-finite values")
    if len(rows) > 1 and not result.f1_prefers_small_ratio():
        logger.warning("Zero-shot F1 is not non-increasing in the guidance ratio for this sweep")
    return result
