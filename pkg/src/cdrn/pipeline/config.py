"""Run configuration: JSON-serializable dataclasses with a stable checksum."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional

from ..derain import DerainConfig
from ..detector.config import DetectorConfig
from ..losses import StageWeights
from ..rain.synth import RainParams

STAGES = (1, 2, 3)


@dataclass(frozen=True)
class StageConfig:
    epochs: int
    lr: float
    batch_size: int
    halve_epoch: Optional[int] = 30  # None: constant learning rate

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"invalid stage settings {self}")


@dataclass(frozen=True)
class DataConfig:
    source: str = "procedural"  # "procedural" | "dir" (a built dataset)
    root: Optional[str] = None
    n_train: int = 8
    n_test: int = 0
    width: int = 160
    height: int = 96
    objects_per_scene: tuple = (1, 4)
    # small desk images carry few streaks at reference densities; doubled by default
    rain_density_scale: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "objects_per_scene", tuple(self.objects_per_scene))
        if self.source not in ("procedural", "dir"):
            raise ValueError(f"unknown data source {self.source!r}")


def _desk_stages() -> Dict[int, StageConfig]:
    return {
        1: StageConfig(epochs=5, lr=3e-4, batch_size=1, halve_epoch=30),
        2: StageConfig(epochs=5, lr=2e-3, batch_size=1, halve_epoch=30),
        3: StageConfig(epochs=5, lr=5e-4, batch_size=1, halve_epoch=None),
    }


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run depends on besides the dataset bytes."""

    seed: int = 0
    precision: str = "f32"
    derain: DerainConfig = field(default_factory=DerainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    rain: RainParams = field(default_factory=RainParams)
    data: DataConfig = field(default_factory=DataConfig)
    stages: Dict[int, StageConfig] = field(default_factory=_desk_stages)
    # ablation switches: stage-2 feature-map loss and the stage-3 MSE term
    feature_loss: bool = True
    stage3_mse: bool = True
    # behaviour when a loaded checkpoint was produced under a different config
    on_config_mismatch: str = "fail"  # "fail" | "warn"
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "stages", {int(k): v for k, v in self.stages.items()})
        if set(self.stages) != set(STAGES):
            raise ValueError(f"stages must configure exactly {STAGES}, got {sorted(self.stages)}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.on_config_mismatch not in ("fail", "warn"):
            raise ValueError(f"on_config_mismatch must be 'fail' or 'warn', got {self.on_config_mismatch!r}")
        if self.data.height % self.derain.multiple or self.data.width % self.derain.multiple:
            raise ValueError("image size must be divisible by the deraining network's down-sampling factor")
        if self.data.height % 32 or self.data.width % 32:
            raise ValueError("image size must be divisible by 32 for the detector backbone")

    def weights(self, stage: int) -> StageWeights:
        return StageWeights.for_stage(stage, feature_loss=self.feature_loss, mse_term=self.stage3_mse)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "precision": self.precision,
            "derain": self.derain.to_dict(),
            "detector": self.detector.to_dict(),
            "rain": self.rain.to_dict(),
            "data": asdict(self.data),
            "stages": {str(k): asdict(v) for k, v in sorted(self.stages.items())},
            "feature_loss": self.feature_loss,
            "stage3_mse": self.stage3_mse,
            "on_config_mismatch": self.on_config_mismatch,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        base = cls()
        kwargs = {}
        for key in ("seed", "precision", "feature_loss", "stage3_mse", "on_config_mismatch", "note"):
            if key in d:
                kwargs[key] = d[key]
        if "derain" in d:
            kwargs["derain"] = DerainConfig(**d["derain"])
        if "detector" in d:
            kwargs["detector"] = DetectorConfig.from_dict(d["detector"])
        if "rain" in d:
            kwargs["rain"] = RainParams.from_dict(d["rain"])
        if "data" in d:
            kwargs["data"] = DataConfig(**d["data"])
        if "stages" in d:
            stages = dict(base.stages)
            for k, v in d["stages"].items():
                stages[int(k)] = StageConfig(**v)
            kwargs["stages"] = stages
        unknown = set(d) - {"seed", "precision", "feature_loss", "stage3_mse", "on_config_mismatch", "note",
                            "derain", "detector", "rain", "data", "stages"}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def checksum(self) -> str:
        """sha256 of the canonical JSON, leaving out where the dataset lives (its manifest pins the content)."""
        d = self.to_dict()
        d["data"] = {k: v for k, v in d["data"].items() if k != "root"}
        canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed, rain=replace(self.rain, seed=seed))


def desk_config(seed: int = 0) -> TrainConfig:
    """Desk-scale defaults: 8 procedural 160x96 scenes, depth-3 width-16 deraining net."""
    return TrainConfig().with_seed(seed)


def full_config(seed: int = 0) -> TrainConfig:
    """Full-scale schedule (50 pre-training epochs, LR halved at 30, 20 joint epochs, batch 4).

    Requires large-scale hardware: 1280x384 inputs over 5000 training pairs.
    """
    stages = {
        1: StageConfig(epochs=50, lr=1e-4, batch_size=4, halve_epoch=30),
        2: StageConfig(epochs=50, lr=1e-4, batch_size=4, halve_epoch=30),
        3: StageConfig(epochs=20, lr=1e-4, batch_size=4, halve_epoch=None),
    }
    data = DataConfig(source="dir", n_train=5000, n_test=1400, width=1280, height=384, rain_density_scale=1.0)
    detector = DetectorConfig(
        backbone_widths=(64, 128, 256),
        stem_width=32,
        fpn_channels=128,
        ranges=((0, 64), (64, 128), (128, 256), (256, 512), (512, float("inf"))),
    )
    return TrainConfig(
        derain=DerainConfig(depth=3, base_channels=32),
        detector=detector,
        data=data,
        stages=stages,
        note="full-scale schedule; requires large-scale hardware",
    ).with_seed(seed)


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))
