import numpy as np
import pytest

from arped.config import RunConfig
from arped.synthdata import (SceneConfig, generate_scene, generate_split, read_dataset, read_labels, read_ppm,
                             split_indices, write_dataset, write_ppm)
from arped.targets import iou_matrix


class TestScenes:
    def test_pure_function_of_seed_and_index(self):
        cfg = SceneConfig()
        a, b = generate_scene(cfg, 3), generate_scene(cfg, 3)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.boxes, b.boxes)
        assert not np.array_equal(a.image, generate_scene(cfg, 4).image)
        assert not np.array_equal(a.image, generate_scene(SceneConfig(seed=1), 3).image)

    def test_boxes_respect_config(self):
        cfg = SceneConfig()
        for i in range(30):
            s = generate_scene(cfg, i)
            assert s.image.shape == (3, 160, 160)
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert len(s.boxes) <= 4 and (len(s.boxes) >= 1 or s.flagged)
            h = s.boxes[:, 3] - s.boxes[:, 1]
            assert ((h >= 24) & (h <= 96)).all()
            assert (s.boxes[:, :2] >= 0).all() and (s.boxes[:, 2:] <= 160).all()
            np.testing.assert_allclose((s.boxes[:, 2] - s.boxes[:, 0]) / h, 0.41, atol=0.04 + 1 / 24)
            if len(s.boxes) > 1:
                ov = iou_matrix(s.boxes, s.boxes)
                np.fill_diagonal(ov, 0)
                assert ov.max() <= 0.3
            assert ((s.occlusion >= 0) & (s.occlusion <= 1)).all()

    def test_images_are_eight_bit(self):
        img = generate_scene(SceneConfig(), 0).image
        np.testing.assert_allclose(img * 255, np.round(img * 255), atol=1e-9)

    def test_splits_are_disjoint(self):
        assert set(split_indices("train", 300)).isdisjoint(split_indices("test", 100))
        with pytest.raises(ValueError):
            split_indices("val", 3)

    def test_invalid_ranges(self):
        with pytest.raises(ValueError):
            SceneConfig(count=(3, 1))
        with pytest.raises(ValueError):
            SceneConfig(heights=(24, 200))

    def test_from_run_config(self):
        cfg = SceneConfig.from_run_config(RunConfig({"seed": 5, "data.image_size": 64, "data.heights": [16, 48]}))
        assert (cfg.seed, cfg.size, cfg.heights) == (5, 64, (16, 48))


class TestFiles:
    def test_ppm_round_trip(self, tmp_path):
        img = np.round(np.random.default_rng(0).random((3, 5, 7)) * 255) / 255
        write_ppm(tmp_path / "x.ppm", img)
        assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
        np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)

    def test_ppm_rejects_other_formats(self, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ValueError, match="P6"):
            read_ppm(tmp_path / "x.ppm")

    def test_dataset_round_trip_is_exact(self, tmp_path):
        scenes = generate_split(SceneConfig(), "test", 3)
        write_dataset(tmp_path, scenes, {"seed": 0})
        back = list(read_dataset(tmp_path))
        assert len(back) == 3
        for a, b in zip(scenes, back):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.boxes, b.boxes)
            np.testing.assert_array_equal(a.occlusion, b.occlusion)
        assert "count = 3" in (tmp_path / "meta.cfg").read_text()

    def test_malformed_label_names_line(self, tmp_path):
        (tmp_path / "a.txt").write_text("1 2 3 4 0\n1 2 3\n")
        with pytest.raises(ValueError, match=r"a.txt:2"):
            read_labels(tmp_path / "a.txt")
        (tmp_path / "b.txt").write_text("5 2 3 4 0\n")
        with pytest.raises(ValueError, match="extent"):
            read_labels(tmp_path / "b.txt")

    def test_missing_directory_is_empty(self, tmp_path):
        assert list(read_dataset(tmp_path / "nowhere")) == []
