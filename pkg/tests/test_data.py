import filecmp
import logging

import numpy as np
import pytest

from specdet.data import (DataError, LabelParseError, LabelRangeError, PairedSample, SynthConfig, is_val, load_dataset,
                          modality_contrast, parse_label, read_labels, read_pnm, render_scene, resize_bilinear,
                          split_train_val, synthesize, write_pnm)


def write_stem(root, stem, vis_size=32, ir_size=32, labels="0 0.5 0.5 0.2 0.4\n"):
    for sub in ("visible", "infrared", "labels"):
        (root / sub).mkdir(exist_ok=True)
    write_pnm(root / "visible" / f"{stem}.ppm", np.zeros((vis_size, vis_size, 3), np.uint8))
    write_pnm(root / "infrared" / f"{stem}.pgm", np.zeros((ir_size, ir_size), np.uint8))
    (root / "labels" / f"{stem}.txt").write_text(labels)


class TestLabels:
    def test_examples(self):
        assert parse_label("0 0.5 0.5 0.1 0.3") == (0, 0.5, 0.5, pytest.approx(0.1), pytest.approx(0.3))
        with pytest.raises(LabelRangeError):
            parse_label("0 1.5 0.5 0.1 0.3")
        with pytest.raises(LabelParseError):
            parse_label("0 0.5 0.5")

    def test_errors(self):
        with pytest.raises(LabelParseError, match="line 7"):
            parse_label("0 a 0.5 0.1 0.3", lineno=7)
        with pytest.raises(LabelRangeError):
            parse_label("-1 0.5 0.5 0.1 0.3")
        with pytest.raises(LabelRangeError):
            parse_label("0 0.5 0.5 0.0 0.3")

    def test_file_reports_line(self, tmp_path):
        p = tmp_path / "x.txt"
        p.write_text("0 0.5 0.5 0.1 0.3\n\n0 0.5\n")
        with pytest.raises(LabelParseError, match="line 3"):
            read_labels(p)


class TestPnm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        gray = rng.integers(0, 256, size=(4, 6), dtype=np.uint8)
        write_pnm(tmp_path / "a.ppm", rgb)
        write_pnm(tmp_path / "b.pgm", gray)
        np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
        np.testing.assert_array_equal(read_pnm(tmp_path / "b.pgm")[..., 0], gray)

    def test_comment_in_header(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
        assert read_pnm(p)[..., 0].tolist() == [[1, 2]]

    def test_unsupported(self, tmp_path):
        p = tmp_path / "d.pgm"
        p.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(DataError):
            read_pnm(p)

    def test_resize(self):
        img = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
        assert resize_bilinear(img, 4) is img
        small = resize_bilinear(img, 2)
        np.testing.assert_allclose(small[..., 0], [[2.5, 4.5], [10.5, 12.5]])
        np.testing.assert_allclose(resize_bilinear(np.full((3, 5, 2), 0.7, np.float32), 8), 0.7, rtol=1e-6)


class TestLoad:
    def test_empty_root(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            assert load_dataset(tmp_path) == []
        assert "no samples" in caplog.text

    def test_order(self, tmp_path):
        for stem in ("c", "a", "b"):
            write_stem(tmp_path, stem)
        samples = load_dataset(tmp_path)
        assert [s.id for s in samples] == ["a", "b", "c"]
        assert samples[0].boxes == [(0, 0.5, 0.5, pytest.approx(0.2), pytest.approx(0.4))]
        assert samples[0].visible.shape == (32, 32, 3) and samples[0].infrared.shape == (32, 32, 1)
        assert samples[0].illumination is None

    def test_misaligned(self, tmp_path):
        write_stem(tmp_path, "a", vis_size=64, ir_size=32)
        with pytest.raises(DataError, match="aligned"):
            load_dataset(tmp_path)

    def test_missing_counterpart(self, tmp_path):
        write_stem(tmp_path, "lonely")
        (tmp_path / "infrared" / "lonely.pgm").unlink()
        with pytest.raises(DataError, match="lonely"):
            load_dataset(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")

    def test_sample_alignment_check(self):
        with pytest.raises(DataError):
            PairedSample("x", np.zeros((4, 4, 3)), np.zeros((4, 2, 1)))


class TestSplit:
    def test_deterministic_and_partitioning(self):
        ids = [f"{i:06d}" for i in range(500)]
        val = [i for i in ids if is_val(i)]
        assert 0.15 < len(val) / len(ids) < 0.25
        assert val == [i for i in ids if is_val(i)]
        samples = [PairedSample(i, np.zeros((1, 1, 3)), np.zeros((1, 1, 1))) for i in ids[:40]]
        train, held = split_train_val(samples)
        assert {s.id for s in train} | {s.id for s in held} == set(ids[:40])
        assert not {s.id for s in train} & {s.id for s in held}


NOISE = 0.03


class TestSynthesize:
    def contrasts(self, illumination, seeds=range(20)):
        vis, ir = [], []
        for seed in seeds:
            v, i, mask, boxes = render_scene(np.random.default_rng(seed), 64, illumination, 2, NOISE)
            vis.append(modality_contrast(v, mask, boxes))
            ir.append(modality_contrast(i, mask, boxes))
        return np.array(vis), np.array(ir)

    def test_daylight_contrast(self):
        vis, _ = self.contrasts(1.0)
        assert vis.min() >= 5 * NOISE

    def test_darkness_contrast(self):
        vis, ir = self.contrasts(0.0)
        assert vis.max() <= 1 * NOISE
        assert ir.min() >= 5 * NOISE

    def test_modal_alignment(self):
        v, i, mask, boxes = render_scene(np.random.default_rng(3), 64, 1.0, 3, 0.0)
        covered = np.zeros_like(mask)
        for x0, y0, w, h in boxes:
            covered[y0:y0 + h, x0:x0 + w] = True
            assert 0 < x0 and x0 + w < 64 and 0 < y0 and y0 + h < 64
            # each pedestrian is a flat patch in both bands
            assert np.ptp(v[y0:y0 + h, x0:x0 + w].reshape(-1, 3), axis=0).max() <= 1
            assert np.ptp(i[y0:y0 + h, x0:x0 + w]) <= 1
        np.testing.assert_array_equal(covered, mask)

    def test_byte_identical(self, tmp_path):
        cfg = SynthConfig(num_samples=4, image_size=32, seed=5)
        synthesize(cfg, tmp_path / "a")
        synthesize(cfg, tmp_path / "b")
        for rel in ("manifest.csv", "visible/000002.ppm", "infrared/000003.pgm", "labels/000001.txt"):
            assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False)

    def test_boxes_inside_and_manifest(self, tmp_path):
        synthesize(SynthConfig(num_samples=10, image_size=64, seed=1), tmp_path)
        samples = load_dataset(tmp_path)
        assert len(samples) == 10
        for s in samples:
            assert 1 <= len(s.boxes) <= 3
            for _, cx, cy, w, h in s.boxes:
                assert cx - w / 2 >= 0 and cx + w / 2 <= 1 and cy - h / 2 >= 0 and cy + h / 2 <= 1
            assert 0.0 <= s.illumination <= 1.0

    def test_low_res_thermal_band(self):
        v, i, mask, boxes = render_scene(np.random.default_rng(0), 64, 1.0, 1, 0.0, ir_downsample=4)
        # edges are blurred, the interior still carries the pedestrian
        assert modality_contrast(i, mask, boxes) > 5 * NOISE

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(image_size=50)
        with pytest.raises(ValueError):
            SynthConfig(min_pedestrians=3, max_pedestrians=2)
        with pytest.raises(ValueError):
            SynthConfig(illumination_low=0.8, illumination_high=0.2)

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(OSError):
            synthesize(SynthConfig(num_samples=1, image_size=32), tmp_path / "file" / "sub")
