from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ash_lab.domains import (
    CLASS_NAMES,
    IGNORE,
    N_CLASSES,
    MetricsRecord,
    confusion_matrix,
    evaluate,
    gen_data,
    gen_scene,
    gen_style,
    read_pgm,
    read_ppm,
    source_spec,
    target_spec,
    to_uint8,
    write_pgm,
    write_ppm,
)

GOLDEN = Path(__file__).parent / "golden"


class TestGoldenFiles:
    @pytest.mark.parametrize("name,make", [
        ("source_seed0.ppm", lambda p: write_ppm(p, gen_scene(source_spec(), 0).image)),
        ("source_seed0_labels.pgm", lambda p: write_pgm(p, gen_scene(source_spec(), 0).labels)),
        ("target_seed0.ppm", lambda p: write_ppm(p, gen_scene(target_spec(), 0).image)),
        ("style_seed0.ppm", lambda p: write_ppm(p, gen_style(0))),
    ])
    def test_bytes_match(self, tmp_path, name, make):
        make(tmp_path / name)
        assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes()

    def test_read_back(self):
        img = read_ppm(GOLDEN / "source_seed0.ppm")
        lab = read_pgm(GOLDEN / "source_seed0_labels.pgm")
        s = gen_scene(source_spec(), 0)
        np.testing.assert_array_equal(lab, s.labels)
        assert np.abs(img - s.image).max() <= 0.5 / 255 + 1e-12


class TestScenes:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_partition_and_range(self, seed):
        for spec in (source_spec(), target_spec()):
            s = gen_scene(spec, seed)
            assert s.image.shape == (3, 64, 64) and s.labels.shape == (64, 64)
            assert s.labels.min() >= 0 and s.labels.max() < N_CLASSES
            assert np.all(np.isfinite(s.image)) and s.image.min() >= 0 and s.image.max() <= 1

    def test_pure_function_of_seed(self):
        a, b = gen_scene(source_spec(), 9), gen_scene(source_spec(), 9)
        assert a.image.tobytes() == b.image.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_class_frequency_asymmetry(self):
        pole, road_sky = [], []
        for seed in range(100):
            lab = gen_scene(source_spec(), seed).labels
            pole.append(np.mean(lab == CLASS_NAMES.index("pole")))
            road_sky.append(np.mean((lab == CLASS_NAMES.index("road")) | (lab == CLASS_NAMES.index("sky"))))
        assert np.median(pole) < 0.03
        assert np.median(road_sky) > 0.5

    def test_target_shares_layout_differs_in_look(self):
        s, t = gen_scene(source_spec(), 4), gen_scene(target_spec(), 4)
        np.testing.assert_array_equal(s.labels, t.labels)
        assert np.abs(s.image - t.image).mean() > 0.05

    def test_severity_zero_is_source_palette(self):
        np.testing.assert_allclose(target_spec(0.0).shifted_colors(), source_spec().shifted_colors())


class TestStyles:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_range(self, seed):
        img = gen_style(seed)
        assert img.shape == (3, 64, 64) and img.min() >= 0 and img.max() <= 1

    def test_distinct_seeds_differ(self):
        frac = [np.mean(np.any(np.abs(gen_style(2 * i) - gen_style(2 * i + 1)) > 1e-6, axis=0)) for i in range(100)]
        assert min(frac) > 0.1


class TestNetpbm:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((3, 5, 7))
        lab = rng.integers(0, 6, (5, 7))
        write_ppm(tmp_path / "a.ppm", img)
        write_pgm(tmp_path / "a.pgm", lab)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), to_uint8(img) / 255.0)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), lab)

    def test_wrong_magic(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.zeros((2, 2), dtype=int))
        with pytest.raises(ValueError):
            read_ppm(tmp_path / "a.pgm")

    def test_gen_data_manifest(self, tmp_path):
        import json

        out = gen_data(tmp_path / "d", 2, 3, 1, seed=5)
        index = json.loads((out / "index.json").read_text())
        domains = [it["domain"] for it in index["items"]]
        assert domains.count("source") == 2 and domains.count("target") == 3 and domains.count("style") == 1
        for it in index["items"]:
            assert (out / it["image"]).exists()


class _Fixed:
    def __init__(self, pred):
        self.pred = pred

    def predict(self, image):
        return self.pred


class TestMetrics:
    def test_hand_counted(self):
        cm = confusion_matrix(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), 2)
        rec = MetricsRecord.from_confusion(cm)
        np.testing.assert_allclose(rec.iou, [0.5, 2 / 3])
        assert rec.miou == pytest.approx(0.5833, abs=1e-4)

    def test_perfect(self):
        labels = gen_scene(source_spec(), 1).labels
        rec = MetricsRecord.from_confusion(confusion_matrix(labels, labels))
        present = np.isin(np.arange(N_CLASSES), labels)
        assert np.all(rec.iou[present] == 1.0) and rec.miou == 1.0

    def test_absent_class_excluded(self):
        cm = confusion_matrix(np.array([0, 0, 2]), np.array([0, 0, 0]), 3)
        rec = MetricsRecord.from_confusion(cm)
        assert np.isnan(rec.iou[1])
        assert rec.iou[2] == 0.0
        assert rec.miou == pytest.approx(2 / 3)

    def test_ignore_label_dropped(self):
        cm = confusion_matrix(np.array([0, 1]), np.array([0, IGNORE]), 2)
        assert cm.sum() == 1

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_shards_add_up(self, seed):
        rng = np.random.default_rng(seed)
        pred, gt = rng.integers(0, 6, (4, 8, 8)), rng.integers(0, 6, (4, 8, 8))
        whole = confusion_matrix(pred, gt)
        shards = sum(confusion_matrix(p, g) for p, g in zip(pred, gt))
        np.testing.assert_array_equal(whole, shards)
        order = sum(confusion_matrix(p, g) for p, g in zip(pred[::-1], gt[::-1]))
        assert MetricsRecord.from_confusion(order).miou == MetricsRecord.from_confusion(whole).miou
        rec = MetricsRecord.from_confusion(whole)
        iou = rec.iou[~np.isnan(rec.iou)]
        assert np.all((iou >= 0) & (iou <= 1)) and 0 <= rec.miou <= 1

    def test_evaluate_needs_scenes(self):
        with pytest.raises(ValueError):
            evaluate(_Fixed(np.zeros((64, 64), int)), source_spec(), 0, 0)

    def test_evaluate_constant_predictor(self):
        rec = evaluate(_Fixed(np.zeros((64, 64), int)), source_spec(), 3, 0)
        assert 0 < rec.iou[0] < 1
        assert np.all(rec.iou[1:][~np.isnan(rec.iou[1:])] == 0)
