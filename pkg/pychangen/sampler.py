"""
Masked change diffusion sampler for pychangen.

Synthesizes a post-event image from a pre-event image, the simulated
post-event condition and the change mask. During the first floor(lambda * T)
DDIM steps (the high-noise end) the unchanged region of the running latent is
replaced by a freshly perturbed copy of the pre-event image; the remaining
steps denoise freely under the post-event condition.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .constants import DEFAULT_DDIM_STEPS, DEFAULT_GUIDANCE_RATIO
from .diffusion import NoiseSchedule, ddim_step, make_sampling_steps, perturb
from .errors import ConfigurationError, DimensionError, ParameterError
from .events import EventOutcome, EventSpec, simulate_sequence
from .models.codec import Codec, PixelCodec
from .scene import (
    ChangeMask,
    ContourMap,
    InstanceMap,
    LabeledScene,
    SemanticMask,
    change_mask_of,
    extract_contours,
)
from .seeding import derive_seed, torch_generator

logger = logging.getLogger("ChangenSampler")

CONDITION_KINDS = ("semantic", "contour")


@dataclass(frozen=True)
class GuidanceConfig:
    """Pre-event guidance ratio, DDIM step count and sampling seed."""
    guidance_ratio: float = DEFAULT_GUIDANCE_RATIO
    num_steps: int = DEFAULT_DDIM_STEPS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.guidance_ratio <= 1.0:
            raise ParameterError(
                f"guidance_ratio must lie in [0, 1], got {self.guidance_ratio}", "sampler"
            )
        if self.num_steps < 1:
            raise ParameterError("num_steps must be >= 1", "sampler")

    @property
    def guided_steps(self) -> int:
        """floor(ratio * T), exact for ratios written in decimal (0.29 * 100 is 29)."""
        return math.floor(Fraction(repr(float(self.guidance_ratio))) * self.num_steps)

    def with_seed(self, seed: int) -> "GuidanceConfig":
        return GuidanceConfig(self.guidance_ratio, self.num_steps, int(seed))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GuidanceConfig":
        return cls(
            guidance_ratio=float(data.get("guidance_ratio", data.get("lambda", DEFAULT_GUIDANCE_RATIO))),
            num_steps=int(data.get("num_steps", data.get("T", DEFAULT_DDIM_STEPS))),
            seed=int(data.get("seed", 0)),
        )


@dataclass(frozen=True, eq=False)
class DenseCondition:
    """
    Condition raster (channels, H, W) fed to the dense embedding.

    Semantic conditions are one-hot masks; contour conditions are a single
    boundary channel.
    """
    raster: np.ndarray
    kind: str
    semantic: Optional[SemanticMask] = None
    contour: Optional[ContourMap] = None

    def __post_init__(self):
        raster = np.asarray(self.raster, dtype=np.float32)
        if raster.ndim != 3:
            raise DimensionError(f"condition raster must be (C, H, W), got {raster.shape}", "sampler")
        if self.kind not in CONDITION_KINDS:
            raise ParameterError(f"unknown condition kind '{self.kind}'", "sampler")
        object.__setattr__(self, "raster", raster)

    @classmethod
    def from_semantic(cls, mask: SemanticMask) -> "DenseCondition":
        return cls(mask.one_hot(), "semantic", semantic=mask)

    @classmethod
    def from_contour(cls, contour: ContourMap) -> "DenseCondition":
        return cls(contour.to_raster(), "contour", contour=contour)

    @property
    def channels(self) -> int:
        return self.raster.shape[0]

    @property
    def shape(self):
        return self.raster.shape[1:]

    def to_tensor(self, device: Optional[torch.device] = None) -> torch.Tensor:
        """(1, C, H, W) float tensor."""
        return torch.from_numpy(self.raster.copy())[None].to(device or "cpu")


@dataclass(frozen=True, eq=False)
class SynthesisRequest:
    """Inputs of one post-event synthesis."""
    pre_image: torch.Tensor  # (C, H, W), data space
    pre_condition: DenseCondition
    post_condition: DenseCondition
    change: ChangeMask
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)

    def __post_init__(self):
        shapes = {
            tuple(self.pre_image.shape[-2:]),
            tuple(self.pre_condition.shape),
            tuple(self.post_condition.shape),
            tuple(self.change.shape),
        }
        if len(shapes) != 1:
            raise DimensionError(f"request rasters disagree in size: {sorted(shapes)}", "sampler")
        pre, post = self.pre_condition.semantic, self.post_condition.semantic
        if pre is not None and post is not None and not change_mask_of(pre, post).equals(self.change):
            raise ParameterError("change mask is inconsistent with the two semantic conditions",
                                 "sampler")


class ChangeSynthesizer(Protocol):
    """Anything that turns a SynthesisRequest into a post-event data tensor."""

    def synthesize(self, request: SynthesisRequest) -> torch.Tensor:
        ...


def mix_known_region(x_post: torch.Tensor, x_pre: torch.Tensor, change: torch.Tensor) -> torch.Tensor:
    """Keep x_post where change is 1 and x_pre elsewhere."""
    return change * x_post + (1.0 - change) * x_pre


def _change_tensor(change: ChangeMask, like: torch.Tensor) -> torch.Tensor:
    c = torch.from_numpy(change.data.astype(np.float32))[None, None].to(like.device, like.dtype)
    if c.shape[-2:] != like.shape[-2:]:
        c = F.interpolate(c, size=like.shape[-2:], mode="nearest")
    return c


@torch.no_grad()
def masked_change_step(
    x_post: torch.Tensor,
    x_pre0: torch.Tensor,
    change: torch.Tensor,
    step_from: int,
    step_to: int,
    guided: bool,
    denoiser: torch.nn.Module,
    schedule: NoiseSchedule,
    post_condition: torch.Tensor,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    One sampling step of masked change diffusion.

    Args:
        x_post: Running post-event latent at step_from, (B, C, H, W)
        x_pre0: Clean pre-event data, same shape
        change: Change mask broadcastable to x_post (1 = changed)
        step_from: Current step i
        step_to: Next step in the sampling subsequence
        guided: Mix in a freshly perturbed pre-event latent before denoising
        denoiser: Network returning (eps, raw_var)
        schedule: Noise schedule
        post_condition: (B, K, H, W) post-event condition raster
        generator: Source of the fresh guidance noise

    Returns:
        Latent at step_to
    """
    if x_post.shape != x_pre0.shape:
        raise DimensionError("pre- and post-event latents differ in shape", "sampler")
    if change.shape[-2:] != x_post.shape[-2:]:
        raise DimensionError("change mask does not match the latent size", "sampler")
    if guided:
        noise = torch.randn(x_pre0.shape, generator=generator, dtype=x_pre0.dtype).to(x_pre0.device)
        x_pre = perturb(x_pre0, step_from, noise, schedule)
        x_post = mix_known_region(x_post, x_pre, change)
    eps, _ = denoiser(x_post, step_from, post_condition)
    return ddim_step(x_post, eps, step_from, step_to, schedule)


class MaskedChangeSampler:
    """
    Diffusion implementation of `ChangeSynthesizer`.

    Attributes:
        guided_step_count: Guided steps executed by the last `synthesize` call
    """

    def __init__(self, denoiser: torch.nn.Module, schedule: NoiseSchedule,
                 codec: Optional[Codec] = None, device: str = "cpu"):
        self.denoiser = denoiser.eval()
        self.schedule = schedule
        self.codec = codec or PixelCodec(denoiser.config.in_channels)
        self.device = torch.device(device)
        self.guided_step_count = 0
        if self.codec.channels != denoiser.config.in_channels:
            raise ConfigurationError(
                f"codec has {self.codec.channels} channels, denoiser expects "
                f"{denoiser.config.in_channels}", "sampler"
            )

    def synthesize(self, request: SynthesisRequest) -> torch.Tensor:
        """
        Run the full DDIM chain for one request.

        Returns:
            (C, H, W) post-event data clamped to [-1, 1]
        """
        expected = self.denoiser.config.condition_channels
        if request.post_condition.channels != expected:
            raise ConfigurationError(
                f"condition has {request.post_condition.channels} channels, "
                f"denoiser was built for {expected}", "sampler"
            )
        guidance = request.guidance
        generator = torch_generator(guidance.seed)
        dtype = next(self.denoiser.parameters()).dtype

        x_pre0 = request.pre_image.to(self.device, dtype)[None]
        change = _change_tensor(request.change, x_pre0)
        cond = request.post_condition.to_tensor(self.device).to(dtype)

        steps = make_sampling_steps(guidance.num_steps, self.schedule.num_train_steps)
        targets = steps[1:] + [0]
        x = torch.randn(x_pre0.shape, generator=generator, dtype=dtype).to(self.device)
        self.guided_step_count = 0
        for k, (i, j) in enumerate(zip(steps, targets)):
            guided = k < guidance.guided_steps
            x = masked_change_step(x, x_pre0, change, i, j, guided, self.denoiser,
                                   self.schedule, cond, generator)
            self.guided_step_count += int(guided)
        logger.debug(
            f"Synthesized {tuple(x.shape[-2:])} image, {self.guided_step_count}/{len(steps)} guided steps"
        )
        return x[0].clamp(-1.0, 1.0)


def synthesize_post_event(request: SynthesisRequest, denoiser: torch.nn.Module,
                          schedule: NoiseSchedule, codec: Optional[Codec] = None) -> np.ndarray:
    """Synthesize and decode one post-event image to H x W x C uint8."""
    sampler = MaskedChangeSampler(denoiser, schedule, codec)
    return sampler.codec.decode(sampler.synthesize(request))


@dataclass(frozen=True, eq=False)
class TimeSeriesSample:
    """
    One synthesized sequence: n + 1 images with their labels.

    ``change_masks[k]`` is the change between ``masks[k]`` and ``masks[k + 1]``.
    """
    images: List[np.ndarray]
    masks: List[SemanticMask]
    instances: List[InstanceMap]
    conditions: List[DenseCondition]
    change_masks: List[ChangeMask]
    cumulative_change: ChangeMask
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.change_masks)
        if n < 1:
            raise ParameterError("a time series needs at least one step", "sampler")
        for name in ("images", "masks", "instances", "conditions"):
            if len(getattr(self, name)) != n + 1:
                raise DimensionError(
                    f"{name} has {len(getattr(self, name))} entries, expected {n + 1}", "sampler"
                )

    @property
    def length(self) -> int:
        """Number of change steps."""
        return len(self.change_masks)

    def labels_consistent(self) -> bool:
        """True iff every stored change mask is recomputable from the stored masks."""
        ok = all(
            change_mask_of(self.masks[k], self.masks[k + 1]).equals(self.change_masks[k])
            for k in range(self.length)
        )
        return ok and change_mask_of(self.masks[0], self.masks[-1]).equals(self.cumulative_change)


def _condition_for(kind: str, mask: SemanticMask, contour: ContourMap) -> DenseCondition:
    if kind == "semantic":
        return DenseCondition.from_semantic(mask)
    return DenseCondition.from_contour(contour)


def synthesize_time_series(
    scene: LabeledScene,
    specs: Sequence[EventSpec],
    guidance: GuidanceConfig,
    synthesizer: ChangeSynthesizer,
    codec: Optional[Codec] = None,
    condition_kind: str = "semantic",
) -> TimeSeriesSample:
    """
    Chain event simulation and synthesis over len(specs) steps.

    Each synthesized image becomes the next pre-event image. Step k samples
    with seed ``derive_seed(guidance.seed, "synthesis", k)``.

    Args:
        scene: Time-0 image and labels
        specs: One event spec per step
        guidance: Guidance ratio, DDIM steps and root sampling seed
        synthesizer: Post-event image generator
        codec: Image codec; pixel codec by default
        condition_kind: "semantic" (one-hot masks) or "contour"

    Returns:
        TimeSeriesSample with provenance (seeds and event logs)
    """
    if not specs:
        raise ParameterError("synthesize_time_series needs at least one event spec", "sampler")
    if condition_kind not in CONDITION_KINDS:
        raise ParameterError(f"unknown condition kind '{condition_kind}'", "sampler")
    codec = codec or PixelCodec(scene.image.shape[-1])

    outcomes: List[EventOutcome] = simulate_sequence(scene.mask, scene.instances, specs)
    masks = [scene.mask] + [o.next_mask for o in outcomes]
    instances = [scene.instances] + [o.next_instances for o in outcomes]
    contours = [extract_contours(scene.instances)]
    for o in outcomes:
        contours.append(o.next_contour if o.next_contour is not None
                        else extract_contours(o.next_instances))
    conditions = [_condition_for(condition_kind, m, c) for m, c in zip(masks, contours)]

    images = [np.array(scene.image)]
    step_seeds = []
    for k, outcome in enumerate(outcomes):
        seed = derive_seed(guidance.seed, "synthesis", k)
        step_seeds.append(seed)
        request = SynthesisRequest(
            pre_image=codec.encode(images[-1]),
            pre_condition=conditions[k],
            post_condition=conditions[k + 1],
            change=outcome.change,
            guidance=guidance.with_seed(seed),
        )
        images.append(codec.decode(synthesizer.synthesize(request)))
        logger.debug(f"Step {k}: {outcome.change.count()} changed pixels synthesized")

    return TimeSeriesSample(
        images=images,
        masks=masks,
        instances=instances,
        conditions=conditions,
        change_masks=[o.change for o in outcomes],
        cumulative_change=change_mask_of(masks[0], masks[-1]),
        provenance={
            "guidance": guidance.to_dict(),
            "condition_kind": condition_kind,
            "step_seeds": step_seeds,
            "event_specs": [s.to_dict() for s in specs],
            "event_logs": [[e.to_dict() for e in o.log] for o in outcomes],
        },
    )
