import json
import struct
from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest

from cdrn.pipeline import (
    Checkpoint,
    CheckpointHeaderError,
    CheckpointVersionError,
    ConfigMismatchError,
    CorruptCheckpointError,
    DuplicateTensorError,
    PrerequisiteError,
    TrainConfig,
    TruncatedCheckpointError,
    build_state,
    dumps,
    full_config,
    load_checkpoint,
    load_config,
    loads,
    lr_schedule,
    run_all,
    run_stage,
    save_checkpoint,
    state_from_checkpoint,
)


def sample_checkpoint():
    rng = np.random.default_rng(0)
    tensors = OrderedDict([("a.weight", rng.random((3, 2, 3, 3), dtype=np.float32)), ("a.bias", np.zeros(3, np.float32)),
                           ("scalar", np.array(1.5, np.float32))])
    opt = OrderedDict([("m:a.bias", np.ones(3, np.float32))])
    return Checkpoint(tensors, opt, {"lr": 1e-3, "t": 4, "params": ["a.bias"]}, {"stage": 2, "epoch": 1, "step": 7})


def record(name, arr):
    raw = name.encode()
    return struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.astype("<f4").tobytes()


class TestCheckpointFormat:
    def test_round_trip_is_byte_identical(self, tmp_path):
        ckpt = sample_checkpoint()
        path = save_checkpoint(ckpt, tmp_path / "x.ckpt")
        back = load_checkpoint(path)
        assert dumps(back) == path.read_bytes()
        assert list(back.tensors) == list(ckpt.tensors)
        assert all(np.array_equal(back.tensors[k], v) for k, v in ckpt.tensors.items())
        assert (back.stage, back.epoch, back.step) == (2, 1, 7)

    def test_truncated(self):
        data = dumps(sample_checkpoint())
        for cut in (6, 20, len(data) // 2, len(data) - 1):
            with pytest.raises(TruncatedCheckpointError):
                loads(data[:cut])

    def test_bad_magic(self):
        with pytest.raises(CheckpointHeaderError):
            loads(b"XXXX" + dumps(sample_checkpoint())[4:])

    def test_unknown_version(self):
        data = dumps(sample_checkpoint())
        with pytest.raises(CheckpointVersionError):
            loads(data[:4] + struct.pack("<I", 99) + data[8:])

    def test_duplicate_names(self):
        a = np.zeros(2, np.float32)
        data = b"CDRN" + struct.pack("<I", 1) + struct.pack("<I", 2) + record("w", a) + record("w", a)
        data += struct.pack("<I", 0) + struct.pack("<I", 2) + b"{}" + struct.pack("<I", 2) + b"{}"
        with pytest.raises(DuplicateTensorError):
            loads(data)

    def test_trailing_bytes(self):
        with pytest.raises(CorruptCheckpointError):
            loads(dumps(sample_checkpoint()) + b"\0")

    def test_errors_are_distinct(self):
        kinds = {CheckpointHeaderError, CheckpointVersionError, TruncatedCheckpointError, DuplicateTensorError}
        assert len(kinds) == 4 and not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


class TestConfig:
    def test_json_round_trip(self, tmp_path, tiny_config):
        path = tmp_path / "cfg.json"
        path.write_text(tiny_config.to_json())
        back = load_config(path)
        assert back == tiny_config and back.checksum() == tiny_config.checksum()

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_dict({"seed": 1, "learning_rate": 3})

    def test_checksum_tracks_content(self, tiny_config):
        assert tiny_config.checksum() != tiny_config.with_seed(1).checksum()
        moved = replace(tiny_config, data=replace(tiny_config.data, root="/elsewhere"))
        assert moved.checksum() == tiny_config.checksum()

    def test_full_scale_defaults(self):
        cfg = full_config()
        assert [cfg.stages[s].epochs for s in (1, 2, 3)] == [50, 50, 20]
        assert cfg.stages[1].halve_epoch == cfg.stages[2].halve_epoch == 30
        assert cfg.stages[3].halve_epoch is None
        assert {s.batch_size for s in cfg.stages.values()} == {4}
        assert (cfg.data.width, cfg.data.height) == (1280, 384)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(precision="f16")
        with pytest.raises(ValueError):
            TrainConfig(stages={1: TrainConfig().stages[1]})


class TestSchedule:
    def test_halving(self):
        assert lr_schedule(1, 29, 1e-4) == 1e-4
        assert lr_schedule(1, 30, 1e-4) == 5e-5
        assert lr_schedule(2, 45, 1e-4) == 5e-5

    def test_joint_stage_is_constant(self):
        assert all(lr_schedule(3, e, 1e-4) == 1e-4 for e in range(0, 60, 7))

    def test_halve_beyond_end(self):
        assert all(lr_schedule(1, e, 2.0, halve_epoch=100) == 2.0 for e in range(50))

    def test_bad_stage(self):
        with pytest.raises(ValueError):
            lr_schedule(4, 0, 1.0)


class TestStages:
    def test_prerequisites(self, tiny_config, tiny_dataset):
        with pytest.raises(PrerequisiteError, match="stage 2 needs"):
            run_stage(2, tiny_config, tiny_dataset)
        s1 = run_stage(1, tiny_config, tiny_dataset).checkpoint
        with pytest.raises(PrerequisiteError, match="stage 3 needs"):
            run_stage(3, tiny_config, tiny_dataset, init=s1)

    def test_config_mismatch(self, tiny_config, tiny_dataset):
        ckpt = run_stage(1, tiny_config, tiny_dataset).checkpoint
        other = replace(tiny_config, note="changed")
        with pytest.raises(ConfigMismatchError):
            state_from_checkpoint(ckpt, other)
        with pytest.warns(RuntimeWarning):
            state_from_checkpoint(ckpt, replace(other, on_config_mismatch="warn"))

    def test_each_stage_touches_only_its_models(self, tiny_config, tiny_dataset):
        fresh = build_state(tiny_config).tensors()
        results = run_all(tiny_config, tiny_dataset)
        t1, t2, t3 = (results[s].checkpoint.tensors for s in (1, 2, 3))
        derain = [k for k in fresh if k.startswith("derain.")]
        detector = [k for k in fresh if k.startswith("detector.")]
        assert all(np.array_equal(t1[k], fresh[k]) for k in derain)
        assert not all(np.array_equal(t1[k], fresh[k]) for k in detector)
        # the detector is frozen while the deraining net learns
        assert all(np.array_equal(t2[k], t1[k]) for k in detector)
        assert not all(np.array_equal(t2[k], t1[k]) for k in derain)
        assert not all(np.array_equal(t3[k], t2[k]) for k in detector)
        assert not all(np.array_equal(t3[k], t2[k]) for k in derain)
        assert results[3].checkpoint.meta["stages_completed"] == [1, 2, 3]

    def test_step_counts(self, tiny_config, tiny_dataset):
        result = run_stage(1, tiny_config, tiny_dataset)
        assert len(result.step_losses) == 4 and result.checkpoint.step == 4
        assert [e["epoch"] for e in result.epochs] == [0, 1]

    def test_losses_are_finite(self, tiny_config, tiny_dataset):
        results = run_all(tiny_config, tiny_dataset)
        assert all(np.isfinite(r.step_losses).all() for r in results.values())


class TestResume:
    @pytest.mark.parametrize("stage", [1, 2, 3])
    def test_resume_matches_uninterrupted(self, stage, tiny_config, tiny_dataset, tmp_path):
        init = None
        for s in range(1, stage):
            init = run_stage(s, tiny_config, tiny_dataset, init=init).checkpoint
        full = run_stage(stage, tiny_config, tiny_dataset, init=init)
        part = run_stage(stage, tiny_config, tiny_dataset, init=init, checkpoint_dir=tmp_path, stop_after=3)
        assert part.interrupted and len(part.step_losses) == 3
        saved = load_checkpoint(tmp_path / f"stage{stage}_interrupted.ckpt")
        rest = run_stage(stage, tiny_config, tiny_dataset, init=saved)
        assert part.step_losses == full.step_losses[:3]
        assert abs(rest.step_losses[0] - full.step_losses[3]) < 1e-6
        assert dumps(rest.checkpoint) == dumps(full.checkpoint)


class TestDeterminism:
    def test_full_run_is_bit_identical(self, tiny_config, tiny_dataset):
        a = run_all(tiny_config, tiny_dataset)[3].checkpoint
        b = run_all(tiny_config, tiny_dataset)[3].checkpoint
        assert dumps(a) == dumps(b)

    def test_seed_changes_the_run(self, tiny_config, tiny_dataset):
        a = run_stage(1, tiny_config, tiny_dataset).checkpoint
        b = run_stage(1, tiny_config.with_seed(1), tiny_dataset).checkpoint
        assert dumps(a) != dumps(b)

    def test_meta_records_config(self, tiny_config, tiny_dataset):
        ckpt = run_stage(1, tiny_config, tiny_dataset).checkpoint
        assert ckpt.meta["config_checksum"] == tiny_config.checksum()
        assert TrainConfig.from_dict(json.loads(json.dumps(ckpt.meta["config"]))) == tiny_config
