import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridgnet import data, metrics


@pytest.fixture
def phantom():
    return data.synthesize_phantom(np.random.default_rng(0))


def write_entry(root, name, sample, split="train", landmarks=None):
    data.write_pgm(root / f"{name}.pgm", sample.image)
    data.write_landmarks(root / f"{name}.txt", sample.landmarks if landmarks is None else landmarks)
    return {"image": f"{name}.pgm", "landmarks": f"{name}.txt", "spacing_mm": sample.spacing_mm, "split": split}


class TestFiles:
    def test_pgm_16bit_roundtrip(self, tmp_path):
        raw = np.random.default_rng(0).integers(0, 65536, (5, 7))
        data.write_pgm(tmp_path / "a.pgm", raw)
        np.testing.assert_array_equal(data.read_pgm(tmp_path / "a.pgm", normalize=False), raw)
        np.testing.assert_allclose(data.read_pgm(tmp_path / "a.pgm"), raw / 65535)

    def test_pgm_8bit_with_comment(self, tmp_path):
        body = bytes([0, 128, 255, 7])
        (tmp_path / "b.pgm").write_bytes(b"P5\n# hello\n2 2\n255\n" + body)
        np.testing.assert_array_equal(data.read_pgm(tmp_path / "b.pgm", normalize=False), [[0, 128], [255, 7]])

    def test_pgm_rejects_ascii(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(ValueError):
            data.read_pgm(tmp_path / "c.pgm")

    def test_landmark_roundtrip_exact(self, tmp_path, phantom):
        data.write_landmarks(tmp_path / "l.txt", phantom.landmarks)
        np.testing.assert_array_equal(data.read_landmarks(tmp_path / "l.txt"), phantom.landmarks)


class TestManifest:
    def test_split_counts(self):
        assert data.split_counts(247) == (173, 24, 50)
        assert data.split_counts(10) == (7, 1, 2)
        assert data.split_counts(0) == (0, 0, 0)

    def test_assign_splits_counts(self):
        labels = data.assign_splits(247, np.random.default_rng(0))
        assert (labels.count("train"), labels.count("val"), labels.count("test")) == (173, 24, 50)

    def test_empty(self, tmp_path):
        (tmp_path / "m.json").write_text("[]")
        assert data.load_manifest(tmp_path / "m.json") == []

    def test_valid(self, tmp_path, phantom):
        entries = [write_entry(tmp_path, "a", phantom), write_entry(tmp_path, "b", phantom, "val")]
        (tmp_path / "m.json").write_text(json.dumps(entries))
        samples = data.load_dataset(tmp_path / "m.json")
        assert [s.split for s in samples] == ["train", "val"]
        np.testing.assert_array_equal(samples[0].landmarks, phantom.landmarks)

    def test_wrong_landmark_count_names_entry(self, tmp_path, phantom):
        entries = [write_entry(tmp_path, "a", phantom), write_entry(tmp_path, "b", phantom, landmarks=phantom.landmarks[:119])]
        (tmp_path / "m.json").write_text(json.dumps(entries))
        with pytest.raises(data.ManifestError, match="entry 1.*119"):
            data.load_manifest(tmp_path / "m.json")

    def test_missing_file(self, tmp_path, phantom):
        entry = write_entry(tmp_path, "a", phantom)
        entry["image"] = "nope.pgm"
        (tmp_path / "m.json").write_text(json.dumps([entry]))
        with pytest.raises(data.ManifestError, match="entry 0.*missing"):
            data.load_manifest(tmp_path / "m.json")

    @pytest.mark.parametrize("text", ["{", "{}", '[{"image": "a.pgm"}]'])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "m.json").write_text(text)
        with pytest.raises(data.ManifestError):
            data.load_manifest(tmp_path / "m.json")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(data.ManifestError):
            data.load_manifest(tmp_path / "absent.json")


class TestGraph:
    def test_cycle_edges(self, phantom):
        adj, feats = data.build_graph_from_landmarks(phantom.landmarks, phantom.image.shape)
        assert adj.sum() / 2 == 120
        assert np.all(adj.sum(axis=1) == 2)
        assert feats.min() >= 0 and feats.max() <= 1

    def test_same_adjacency_for_all_samples(self, phantom):
        other = data.synthesize_phantom(np.random.default_rng(9))
        a1, _ = data.build_graph_from_landmarks(phantom.landmarks, phantom.image.shape)
        a2, _ = data.build_graph_from_landmarks(other.landmarks, other.image.shape)
        np.testing.assert_array_equal(a1, a2)

    def test_out_of_bounds(self, phantom):
        pts = phantom.landmarks.copy()
        pts[3, 0] = 500.0
        with pytest.raises(ValueError):
            data.build_graph_from_landmarks(pts, phantom.image.shape)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(8, 2048), st.integers(8, 2048), st.integers(0, 2**31 - 1))
    def test_normalize_roundtrip(self, h, w, seed):
        pts = np.random.default_rng(seed).uniform(0, 1, (10, 2)) * [w, h]
        np.testing.assert_allclose(data.denormalize(data.normalize(pts, (h, w)), (h, w)), pts, atol=1e-9)


class TestAugment:
    def test_identity_is_bit_exact(self, phantom):
        out = data.augment(phantom, data.AugmentationParams())
        np.testing.assert_array_equal(out.image, phantom.image)
        np.testing.assert_array_equal(out.landmarks, phantom.landmarks)

    def test_rotation_fixes_centre(self):
        img = np.zeros((65, 65))
        lms = np.tile([[32.0, 32.0]], (120, 1))
        out = data.augment(data.Sample(img, lms), data.AugmentationParams(rotation_deg=3.0))
        np.testing.assert_allclose(out.landmarks, lms, atol=1e-9)

    def test_matrix_composition_oracle(self, phantom):
        p = data.AugmentationParams(gamma=1.2, rotation_deg=-2.0, scale_x=1.05, scale_y=0.93, offset_x=1.5, offset_y=-2.0)
        out = data.augment(phantom, p, out_size=128)
        mat = data.affine_matrix(p, (128, 128), (128, 128))
        for src, dst in zip(phantom.landmarks, out.landmarks):
            expect = mat @ np.array([src[0], src[1], 1.0])
            np.testing.assert_allclose(dst, expect[:2], atol=1e-9)

    def test_gamma_only(self, phantom):
        out = data.augment(phantom, data.AugmentationParams(gamma=0.6))
        np.testing.assert_array_equal(out.image, phantom.image**0.6)

    def test_drawn_params_in_range_and_in_frame(self, phantom):
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = data.sample_augmentation(phantom, rng)
            assert 0.6 <= p.gamma <= 1.4 and -3 <= p.rotation_deg <= 3
            assert data.landmarks_in_frame(data.augment(phantom, p).landmarks, (128, 128))

    def test_fallback_when_nothing_fits(self):
        lms = np.tile([[-5.0, -5.0]], (120, 1))
        p = data.sample_augmentation(data.Sample(np.zeros((16, 16)), lms), np.random.default_rng(0))
        assert (p.rotation_deg, p.scale_x, p.scale_y) == (0.0, 1.0, 1.0)


class TestMaskInput:
    def test_background(self):
        s = data.Sample(np.ones((4, 4)), np.zeros((120, 2)), mask=np.zeros((4, 4), np.uint8))
        assert not data.mask_to_input(s).image.any()

    def test_heart_is_one(self, phantom):
        out = data.mask_to_input(phantom)
        assert np.all(out.image[phantom.mask == 2] == 1.0)
        assert np.all(out.image[phantom.mask == 1] == 0.5)

    def test_bad_labels(self):
        s = data.Sample(np.ones((4, 4)), np.zeros((120, 2)), mask=np.full((4, 4), 3, np.uint8))
        with pytest.raises(ValueError):
            data.mask_to_input(s)


class TestPhantom:
    def test_invariants(self, phantom):
        assert phantom.landmarks.shape == (120, 2)
        assert data.landmarks_in_frame(phantom.landmarks, phantom.image.shape)
        assert np.isfinite(phantom.image).all() and 0 <= phantom.image.min() and phantom.image.max() <= 1
        assert phantom.spacing_mm > 0

    def test_heart_width_roundtrip(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            shape = data.random_phantom_shape(rng)
            s = data.synthesize_phantom(rng, shape=shape)
            cols = np.nonzero((s.mask == metrics.HEART).any(axis=0))[0]
            assert abs((cols.max() - cols.min() + 1) - shape.heart_width) <= 2.0

    def test_deterministic(self):
        a = data.synthesize_phantom(np.random.default_rng(5))
        b = data.synthesize_phantom(np.random.default_rng(5))
        np.testing.assert_array_equal(a.image, b.image)
