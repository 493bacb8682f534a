import json
import time

import numpy as np
import pytest
from PIL import Image

from cdrn.detector import Annotation
from cdrn.metrics import psnr
from cdrn.rain import (
    FULL_SPLIT,
    LabelParseError,
    LabelSet,
    PairedDataset,
    RainParams,
    SplitSpec,
    StreakCategory,
    affected_pixels,
    blur3,
    build_dataset,
    composite,
    gen_streak_layer,
    image_seed,
    kitti_items,
    labels_from_json,
    labels_to_json,
    make_scene,
    make_split,
    pad_to_uniform,
    parse_kitti_labels,
    procedural_items,
    synthesize_sample,
)


def zero_density():
    p = RainParams()
    return p.with_density_scale(0.0)


class TestStreakLayer:
    def test_zero_density(self):
        assert np.all(gen_streak_layer(160, 96, zero_density(), 3) == 0)

    def test_deterministic(self):
        a = gen_streak_layer(160, 96, RainParams(), 11)
        b = gen_streak_layer(160, 96, RainParams(), 11)
        assert np.array_equal(a, b)

    def test_range(self):
        layer = gen_streak_layer(160, 96, RainParams().with_density_scale(8.0), 2)
        assert layer.shape == (96, 160)
        assert layer.min() >= 0.0 and layer.max() <= 1.0 and layer.max() > 0

    def test_denser_affects_more_pixels(self):
        base = RainParams()
        for seed in range(20):
            lo = affected_pixels(gen_streak_layer(160, 96, base, seed))
            hi = affected_pixels(gen_streak_layer(160, 96, base.with_density_scale(4.0), seed))
            assert hi > lo

    def test_denser_rain_is_a_superset(self):
        # the same seed keeps every streak and adds more
        base = RainParams()
        for seed in range(5):
            lo = gen_streak_layer(160, 96, base, seed)
            hi = gen_streak_layer(160, 96, base.with_density_scale(3.0), seed)
            assert np.all(hi >= lo - 1e-15)

    def test_blur_preserves_mass_inside(self):
        layer = np.zeros((9, 9))
        layer[4, 4] = 16.0
        out = blur3(layer)
        assert out.sum() == pytest.approx(16.0)
        assert out[4, 4] == 4.0 and out[3, 3] == 1.0

    def test_per_image_seed(self):
        assert image_seed(0, "a") == image_seed(0, "a")
        assert image_seed(0, "a") != image_seed(1, "a") != image_seed(0, "b")

    def test_params_round_trip(self):
        p = RainParams(seed=4).with_density_scale(1.5)
        q = RainParams.from_dict(json.loads(json.dumps(p.to_dict())))
        assert q == p and q.checksum() == p.checksum()

    def test_invalid_category(self):
        with pytest.raises(ValueError):
            StreakCategory(-1.0, (1, 2), (1, 2), (0, 1), (0, 1))
        with pytest.raises(ValueError):
            StreakCategory(1.0, (5, 2), (1, 2), (0, 1), (0, 1))

    def test_short_defaults(self):
        cats = RainParams().categories
        assert cats["short"].length == (5.0, 15.0)
        assert cats["medium"].length == (15.0, 40.0)
        assert cats["long"].length == (40.0, 90.0)
        assert all(c.angle == (-30.0, 30.0) and c.width == (1.0, 3.0) for c in cats.values())


class TestComposite:
    def test_zero_layer(self):
        clean = np.random.default_rng(0).random((8, 8, 3))
        assert np.array_equal(composite(clean, np.zeros((8, 8))), clean)

    def test_saturated_pixel(self):
        clean = np.ones((4, 4, 3))
        assert np.all(composite(clean, np.full((4, 4), 0.5)) == 1.0)

    def test_additive_bounds(self):
        rng = np.random.default_rng(1)
        clean = rng.random((96, 160, 3))
        layer = gen_streak_layer(160, 96, RainParams().with_density_scale(4.0), 5)
        diff = composite(clean, layer) - clean
        assert np.all(diff >= 0) and np.all(diff <= layer[..., None] + 1e-15)

    def test_psnr_drops_with_layer_energy(self):
        clean = np.random.default_rng(2).random((96, 160, 3)) * 0.4
        for seed in range(10):
            layer = gen_streak_layer(160, 96, RainParams(), seed)
            values = [psnr(composite(clean, layer * k), clean) for k in (0.25, 0.5, 1.0, 1.5)]
            assert all(b < a for a, b in zip(values, values[1:]))

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            composite(np.zeros((4, 4, 3)), np.zeros((4, 5)))


class TestPadding:
    def test_identity(self):
        img = np.random.default_rng(0).random((384, 1280, 3))
        out, anns, rec = pad_to_uniform(img, [], 1280, 384)
        assert np.array_equal(out, img) and rec.pads == (0, 0)

    def test_kitti_size(self):
        img = np.ones((375, 1242, 3), dtype=np.uint8)
        anns = [Annotation(0, (100.5, 150.25, 300.0, 250.0))]
        out, new, rec = pad_to_uniform(img, anns, 1280, 384)
        assert out.shape == (384, 1280, 3)
        assert rec.pads == (38, 9)
        assert np.all(out[:375, :1242] == 1) and np.all(out[375:] == 0) and np.all(out[:, 1242:] == 0)
        assert new[0].box == anns[0].box

    def test_too_large(self):
        with pytest.raises(ValueError):
            pad_to_uniform(np.zeros((10, 20, 3)), [], 16, 16)

    def test_synthesis_keeps_boxes(self):
        img = (np.random.default_rng(3).random((90, 150, 3)) * 255).astype(np.uint8)
        labels = LabelSet([Annotation(2, (10.0, 12.0, 40.0, 60.0))], [(0.0, 0.0, 5.0, 5.0)])
        s = synthesize_sample("x", img, labels, RainParams(), (160, 96))
        assert s.labels.annotations == labels.annotations and s.labels.ignore == labels.ignore
        assert s.pads == (10, 6) and s.clean.shape == (96, 160, 3)


class TestKittiLabels:
    def test_field_extraction(self):
        text = "Car 0.0 0 1.57 100 150 300 250 1.5 1.6 3.9 1.0 1.7 20.0 1.6\n"
        labels = parse_kitti_labels(text)
        assert labels.annotations == [Annotation(0, (100, 150, 300, 250))]

    def test_dont_care(self):
        text = "DontCare -1 -1 -10 5 6 20 30 -1 -1 -1 -1000 -1000 -1000 -10\nPedestrian 0 0 0 1 2 3 4 0 0 0 0 0 0 0\n"
        labels = parse_kitti_labels(text)
        assert labels.ignore == [(5.0, 6.0, 20.0, 30.0)]
        assert [a.cls for a in labels.annotations] == [1]

    def test_other_classes_dropped(self):
        assert parse_kitti_labels("Tram 0 0 0 1 2 3 4 0 0 0 0 0 0 0").annotations == []

    def test_malformed_line_number(self):
        with pytest.raises(LabelParseError) as exc:
            parse_kitti_labels("Car 0 0 0 1 2 3 4\nCar 0 0 x 1 2 3 4\n")
        assert exc.value.line_no == 2
        with pytest.raises(LabelParseError, match="line 1"):
            parse_kitti_labels("Car 0 0")

    def test_json_round_trip(self):
        labels = LabelSet([Annotation(0, (0.1, 0.2, 30.3, 40.4)), Annotation(2, (5, 5, 9, 9))], [(1.0, 2.0, 3.0, 4.0)])
        back = labels_from_json(json.loads(json.dumps(labels_to_json(labels))))
        assert back.annotations == labels.annotations and back.ignore == labels.ignore


class TestSplit:
    def test_disjoint_and_ordered(self):
        names = [f"n{i:03d}" for i in range(30)]
        split = make_split(names, SplitSpec(20, 8), seed=1)
        assert len(split["train"]) == 20 and len(split["test"]) == 8
        assert not set(split["train"]) & set(split["test"])
        assert split["train"] == sorted(split["train"])

    def test_full_split(self):
        assert (FULL_SPLIT.train, FULL_SPLIT.test) == (5000, 1400)

    def test_too_many(self):
        with pytest.raises(ValueError):
            make_split(["a"], SplitSpec(1, 1), 0)


class TestBuildDataset:
    def test_procedural_build_is_fast_and_reproducible(self, tmp_path):
        items = procedural_items(16, 160, 96, seed=3)
        t0 = time.perf_counter()
        m1 = build_dataset(tmp_path / "a", items, RainParams(), (160, 96), SplitSpec(12, 4), seed=3)
        elapsed = time.perf_counter() - t0
        build_dataset(tmp_path / "b", procedural_items(16, 160, 96, seed=3), RainParams(), (160, 96), SplitSpec(12, 4), seed=3)
        assert elapsed < 5.0
        assert len(m1["pairs"]) == 16
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    def test_load_round_trip(self, tmp_path):
        build_dataset(tmp_path, procedural_items(4, 64, 64, seed=0), RainParams(), (64, 64), SplitSpec(3, 1), seed=0)
        train = PairedDataset.load(tmp_path, "train", verify=True)
        test = PairedDataset.load(tmp_path, "test")
        assert len(train) == 3 and len(test) == 1
        assert train.clean.shape == (3, 3, 64, 64) and train.clean.dtype == np.float32
        assert np.all(train.rainy >= train.clean)

    def test_skips_are_recorded(self, tmp_path):
        img_dir, lab_dir = tmp_path / "img", tmp_path / "lab"
        img_dir.mkdir()
        lab_dir.mkdir()
        Image.fromarray(np.zeros((40, 60, 3), np.uint8)).save(img_dir / "000000.png")
        (lab_dir / "000000.txt").write_text("Car 0 0 0 1 2 30 20 0 0 0 0 0 0 0\n")
        Image.fromarray(np.zeros((40, 60, 3), np.uint8)).save(img_dir / "000001.png")
        (lab_dir / "000001.txt").write_text("Car 0 0 zero 1 2 30 20\n")
        (img_dir / "000002.png").write_bytes(b"not a png")
        (lab_dir / "000002.txt").write_text("")
        items = kitti_items(img_dir, lab_dir)
        m = build_dataset(tmp_path / "out", items, RainParams(), (64, 64), SplitSpec(1, 0), seed=0)
        assert [p["name"] for p in m["pairs"]] == ["000000"]
        assert sorted(s["name"] for s in m["skipped"]) == ["000001", "000002"]
        assert all(s["reason"] for s in m["skipped"])

    def test_scene_generator(self):
        img, anns = make_scene(np.random.default_rng(0), 160, 96)
        assert img.shape == (96, 160, 3) and 1 <= len(anns) <= 4
        for a in anns:
            x1, y1, x2, y2 = a.box
            assert 0 <= x1 < x2 <= 160 and 0 <= y1 < y2 <= 96
