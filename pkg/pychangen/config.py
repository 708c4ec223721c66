"""
Run configuration files.

A run config is one JSON document describing the scenes, the event mix and
the guidance used by ``changen generate`` (and optionally the denoiser,
training and detector settings used by the other subcommands):

    {
      "scene": {"height": 64, "width": 64, "num_classes": 3},
      "events": [
        {"kind": "create", "selection_prob": 0.5},
        {"kind": "edit", "transition": {"csv": "transition.csv"}}
      ],
      "guidance": {"guidance_ratio": 0.5, "num_steps": 50},
      "condition_kind": "semantic",
      "series_length": 1,
      "root_seed": 0
    }

Relative CSV paths are resolved against the config file's directory.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .errors import ConfigurationError
from .events import EventSpec
from .models.detector import DetectorConfig
from .models.rsdit import DenoiserConfig
from .procedural import SceneSpec
from .sampler import CONDITION_KINDS, GuidanceConfig
from .training import TrainConfig

logger = logging.getLogger("ChangenConfig")

PathLike = Union[str, Path]


@dataclass
class RunConfig:
    """Everything a generation run needs besides the checkpoint and output directory."""
    scene_spec: SceneSpec = field(default_factory=SceneSpec)
    event_specs: List[EventSpec] = field(default_factory=lambda: [EventSpec.create()])
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    condition_kind: str = "semantic"
    series_length: int = 1
    root_seed: int = 0
    denoiser: Optional[DenoiserConfig] = None
    training: Optional[TrainConfig] = None
    detector: Optional[DetectorConfig] = None

    def __post_init__(self):
        if self.condition_kind not in CONDITION_KINDS:
            raise ConfigurationError(f"unknown condition kind '{self.condition_kind}'", "config")
        if not self.event_specs:
            raise ConfigurationError("a run needs at least one event", "config")
        if self.series_length < 1:
            raise ConfigurationError("series_length must be >= 1", "config")

    def to_dict(self) -> dict:
        out = {
            "scene": self.scene_spec.to_dict(),
            "events": [s.to_dict() for s in self.event_specs],
            "guidance": self.guidance.to_dict(),
            "condition_kind": self.condition_kind,
            "series_length": self.series_length,
            "root_seed": self.root_seed,
        }
        if self.denoiser is not None:
            out["denoiser"] = self.denoiser.to_dict()
        if self.training is not None:
            out["training"] = self.training.to_dict()
        if self.detector is not None:
            out["detector"] = self.detector.to_dict()
        return out


def _resolve_csv(event: Dict[str, Any], base_dir: Path) -> Dict[str, Any]:
    transition = event.get("transition")
    if not isinstance(transition, dict) or "csv" not in transition:
        return event
    csv_path = Path(transition["csv"])
    if not csv_path.is_absolute():
        csv_path = base_dir / csv_path
    return {**event, "transition": {"csv": str(csv_path)}}


def run_config_from_dict(data: Dict[str, Any], base_dir: PathLike = ".") -> RunConfig:
    """Build a RunConfig from a parsed JSON document."""
    try:
        scene = SceneSpec.from_dict(data.get("scene", {}))
        events = [
            EventSpec.from_dict(_resolve_csv(e, Path(base_dir)), num_classes=scene.num_classes)
            for e in data.get("events", [{"kind": "create"}])
        ]
        training = data.get("training")
        return RunConfig(
            scene_spec=scene,
            event_specs=events,
            guidance=GuidanceConfig.from_dict(data.get("guidance", {})),
            condition_kind=data.get("condition_kind", "semantic"),
            series_length=int(data.get("series_length", 1)),
            root_seed=int(data.get("root_seed", 0)),
            denoiser=DenoiserConfig.from_dict(data["denoiser"]) if "denoiser" in data else None,
            training=TrainConfig(**training) if training is not None else None,
            detector=DetectorConfig.from_dict(data["detector"]) if "detector" in data else None,
        )
    except (KeyError, TypeError, ValueError, OSError) as e:
        raise ConfigurationError(f"invalid run config: {e}", "config") from e


def load_run_config(path: PathLike) -> RunConfig:
    """
    Load a JSON run config.

    Args:
        path: JSON file

    Returns:
        RunConfig

    Raises:
        ConfigurationError: if the file is missing, not JSON, or describes
            an invalid scene, event or guidance setting
    """
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read run config {path}: {e}", "config") from e
    config = run_config_from_dict(data, base_dir=path.parent)
    logger.debug(f"Loaded run config {path}: {len(config.event_specs)} event spec(s)")
    return config
