"""
Denoiser training and checkpoint I/O.

Training draws procedural scenes on the fly; every batch is a pure function
of the training seed and the step index, so a run can be replayed exactly.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from .constants import CHECKPOINT_HEADER, LOSS_LOG_PERIOD
from .diffusion import NoiseSchedule, training_losses
from .errors import CheckpointError, ParameterError
from .models.codec import PixelCodec
from .models.rsdit import DenoiserConfig, RSDiT
from .procedural import SceneSpec, gen_procedural_scene
from .scene import LabeledScene, extract_contours
from .seeding import derive_seed, torch_generator

logger = logging.getLogger("ChangenTraining")

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    """A loaded denoiser with the schedule it was trained under."""
    model: RSDiT
    schedule: NoiseSchedule
    step: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> DenoiserConfig:
        return self.model.config


def save_checkpoint(path: PathLike, model: RSDiT, schedule: NoiseSchedule, step: int = 0,
                    extra: Optional[Dict[str, Any]] = None):
    """
    Write a versioned checkpoint.

    Args:
        path: Output file
        model: Denoiser to save
        schedule: Noise schedule used in training
        step: Training-step counter
        extra: JSON-style metadata (e.g. condition kind, scene spec)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "header": CHECKPOINT_HEADER,
        "config": model.config.to_dict(),
        "schedule": schedule.to_dict(),
        "state_dict": model.state_dict(),
        "step": int(step),
        "extra": extra or {},
    }
    torch.save(payload, path)
    logger.info(f"Saved checkpoint at step {step} to {path}")


def load_checkpoint(path: PathLike, device: str = "cpu") -> Checkpoint:
    """
    Load a checkpoint written by `save_checkpoint`.

    Raises:
        CheckpointError: if the file is missing, corrupted, foreign or
            inconsistent with its own config
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location=device, weights_only=True)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}", "training") from e
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}", "training") from e
    if not isinstance(payload, dict) or payload.get("header") != CHECKPOINT_HEADER:
        raise CheckpointError(f"{path} is not an {CHECKPOINT_HEADER} checkpoint", "training")
    try:
        config = DenoiserConfig.from_dict(payload["config"])
        schedule = NoiseSchedule.from_dict(payload["schedule"])
        model = RSDiT(config)
        model.load_state_dict(payload["state_dict"])
    except (KeyError, RuntimeError, TypeError) as e:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {e}", "training") from e
    model.to(device).eval()
    return Checkpoint(model, schedule, int(payload.get("step", 0)), dict(payload.get("extra", {})))


@dataclass
class TrainConfig:
    """Denoiser training run."""
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    condition_kind: str = "semantic"
    seed: int = 0
    log_every: int = LOSS_LOG_PERIOD
    device: str = "cpu"

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ParameterError("steps and batch_size must be positive", "training")
        if self.condition_kind not in ("semantic", "contour"):
            raise ParameterError(f"unknown condition kind '{self.condition_kind}'", "training")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingResult:
    model: RSDiT
    schedule: NoiseSchedule
    losses: List[Tuple[int, float]]

    def get_summary(self) -> dict:
        first = self.losses[0][1] if self.losses else float("nan")
        last = self.losses[-1][1] if self.losses else float("nan")
        return {"logged_points": len(self.losses), "first_loss": first, "last_loss": last}


def condition_raster(scene: LabeledScene, kind: str) -> np.ndarray:
    """One-hot semantic raster or 1-channel contour raster for a scene."""
    if kind == "semantic":
        return scene.mask.one_hot()
    return extract_contours(scene.instances).to_raster()


def make_training_batch(scene_spec: SceneSpec, kind: str, seed: int, step: int,
                        batch_size: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Procedural (x0, condition) batch for one training step."""
    codec = PixelCodec(3)
    images, conds = [], []
    for b in range(batch_size):
        scene = gen_procedural_scene(scene_spec, derive_seed(seed, "train", step, b))
        images.append(codec.encode(scene.image))
        conds.append(torch.from_numpy(condition_raster(scene, kind)))
    return torch.stack(images), torch.stack(conds)


def train_denoiser(
    denoiser_config: DenoiserConfig,
    scene_spec: SceneSpec,
    train_config: Optional[TrainConfig] = None,
    schedule: Optional[NoiseSchedule] = None,
    checkpoint_path: Optional[PathLike] = None,
    show_progress: bool = False,
) -> TrainingResult:
    """
    Train an RS-DiT on procedural scenes.

    The objective is the noise-prediction MSE plus the covariance bound
    term. With ``condition_kind="contour"`` the condition is derived from
    each image's own instances, so no semantic labels are needed.

    Args:
        denoiser_config: Network architecture
        scene_spec: SceneSpec drawing the training scenes
        train_config: Optimization settings
        schedule: Noise schedule (linear default)
        checkpoint_path: Where to save the final checkpoint, if given
        show_progress: Show a tqdm bar

    Returns:
        TrainingResult with the loss curve sampled every ``log_every`` steps
    """
    cfg = train_config or TrainConfig()
    schedule = schedule or NoiseSchedule()
    expected = scene_spec.num_classes if cfg.condition_kind == "semantic" else 1
    if denoiser_config.condition_channels != expected:
        raise ParameterError(
            f"{cfg.condition_kind} conditions have {expected} channels, "
            f"config expects {denoiser_config.condition_channels}", "training"
        )

    torch.manual_seed(derive_seed(cfg.seed, "init"))
    device = torch.device(cfg.device)
    model = RSDiT(denoiser_config).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    generator = torch_generator(derive_seed(cfg.seed, "noise"))
    logger.info(f"Training RS-DiT with {model.num_parameters():,} parameters for {cfg.steps} steps")

    losses: List[Tuple[int, float]] = []
    model.train()
    for step in tqdm(range(cfg.steps), disable=not show_progress, desc="train"):
        x0, cond = make_training_batch(scene_spec, cfg.condition_kind, cfg.seed, step,
                                       cfg.batch_size)
        terms = training_losses(model, x0.to(device), cond.to(device), schedule, generator)
        optimizer.zero_grad(set_to_none=True)
        terms["loss"].backward()
        optimizer.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            loss = float(terms["loss"].detach())
            losses.append((step, loss))
            logger.info(
                f"step {step}: loss={loss:.4f} mse={float(terms['mse'].detach()):.4f} "
                f"vlb={float(terms['vlb'].detach()):.4f}"
            )

    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, model, schedule, cfg.steps,
            extra={"condition_kind": cfg.condition_kind, "scene_spec": scene_spec.to_dict(),
                   "train_config": cfg.to_dict()},
        )
    return TrainingResult(model, schedule, losses)
