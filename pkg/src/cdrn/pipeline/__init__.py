from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CheckpointHeaderError,
    CheckpointVersionError,
    CorruptCheckpointError,
    DuplicateTensorError,
    TruncatedCheckpointError,
    dumps,
    load_checkpoint,
    loads,
    save_checkpoint,
)
from .config import DataConfig, StageConfig, TrainConfig, desk_config, full_config, load_config
from .train import (
    ConfigMismatchError,
    PrerequisiteError,
    StageResult,
    TrainState,
    build_state,
    evaluate,
    load_dataset,
    lr_schedule,
    procedural_dataset,
    run_all,
    run_stage,
    state_from_checkpoint,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "CheckpointHeaderError",
    "CheckpointVersionError",
    "ConfigMismatchError",
    "CorruptCheckpointError",
    "DataConfig",
    "DuplicateTensorError",
    "PrerequisiteError",
    "StageConfig",
    "StageResult",
    "TrainConfig",
    "TrainState",
    "TruncatedCheckpointError",
    "build_state",
    "desk_config",
    "dumps",
    "full_config",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "loads",
    "lr_schedule",
    "procedural_dataset",
    "run_all",
    "run_stage",
    "save_checkpoint",
    "state_from_checkpoint",
]
