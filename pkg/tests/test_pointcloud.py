"""Grouping, patch embedding, and cloud I/O."""

import numpy as np
import pytest

import pointseq.autodiff as ad
import pointseq.pointcloud as pc
from pointseq.autodiff import Tensor

from conftest import assert_grads_close


def brute_force_fps(points: np.ndarray, count: int, start: int) -> np.ndarray:
    """Independent greedy max-min selection, quadratic and explicit."""
    chosen = [start]
    while len(chosen) < count:
        best, best_d = None, -1.0
        for i in range(points.shape[0]):
            d = min(float(((points[i] - points[j]) ** 2).sum()) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


class TestFPS:
    def test_three_point_hand_case(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.1, 0, 0]])
        idx = pc.farthest_point_sample(pts, 2, start_index=0)
        assert set(idx.tolist()) == {0, 1}

    def test_exhaustion_selects_all(self, rng):
        pts = rng.standard_normal((6, 3))
        idx = pc.farthest_point_sample(pts, 6)
        assert sorted(idx.tolist()) == list(range(6))

    def test_matches_brute_force(self, rng):
        pts = rng.standard_normal((64, 3))
        got = pc.farthest_point_sample(pts, 8, seed=0)
        centroid = pts.mean(axis=0)
        start = int(np.argmin(((pts - centroid) ** 2).sum(axis=1)))
        want = brute_force_fps(pts, 8, start)
        assert set(got.tolist()) == set(want.tolist())

    def test_no_repeats_and_spread(self, rng):
        pts = rng.standard_normal((50, 3))
        idx = pc.farthest_point_sample(pts, 10, seed=3)
        assert len(set(idx.tolist())) == 10

    def test_too_many_centers_rejected(self):
        with pytest.raises(ValueError, match="cannot sample"):
            pc.farthest_point_sample(np.zeros((3, 3)), 4)


class TestKNNGroup:
    def test_single_neighbor_is_zero(self, rng):
        pts = rng.standard_normal((10, 3))
        ps = pc.knn_group(pts, np.array([4]), 1)
        np.testing.assert_allclose(ps.neighborhoods[0, 0], np.zeros(3))

    def test_collinear_matches_sorted_distance_oracle(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [6.0, 0, 0], [10.0, 0, 0]])
        ps = pc.knn_group(pts, np.array([2]), 3)
        absolute = ps.neighborhoods[0] + ps.centers[0]
        d = ((pts - pts[2]) ** 2).sum(axis=1)
        want = pts[np.argsort(d, kind="stable")[:3]]
        np.testing.assert_allclose(absolute, want)

    def test_duplicate_center_dominates(self):
        pts = np.array([[0.0, 0, 0], [5.0, 0, 0], [0.0, 0, 0], [0.2, 0, 0]])
        ps = pc.knn_group(pts, np.array([0]), 2)
        # both zero-distance copies picked before anything farther
        np.testing.assert_allclose(ps.neighborhoods[0], np.zeros((2, 3)))

    def test_neighborhoods_are_subset_of_cloud(self, rng):
        pts = rng.standard_normal((2, 30, 3))
        idx = pc.farthest_point_sample(pts, 5)
        ps = pc.knn_group(pts, idx, 4)
        absolute = ps.neighborhoods + ps.centers[:, :, None, :]
        for b in range(2):
            for g in range(5):
                for k in range(4):
                    d = np.abs(pts[b] - absolute[b, g, k]).sum(axis=1)
                    assert d.min() < 1e-12

    def test_too_many_neighbors_rejected(self):
        with pytest.raises(ValueError, match="cannot gather"):
            pc.knn_group(np.zeros((4, 3)), np.array([0]), 5)


def make_patch_encoder(rng, feature_dim=12) -> pc.PatchEncoderParams:
    h1, h2 = pc.patch_encoder_widths(feature_dim)

    def lin(d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        return (Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True),
                Tensor(rng.uniform(-bound, bound, d_out), requires_grad=True))

    w1, b1 = lin(3, h1)
    w2, b2 = lin(h1, h2)
    w3, b3 = lin(2 * h2, feature_dim)
    return pc.PatchEncoderParams(w1, b1, w2, b2, w3, b3)


class TestPatchEncode:
    def test_permutation_invariance_bitwise(self, rng):
        params = make_patch_encoder(rng)
        nbrs = rng.standard_normal((1, 2, 6, 3))
        ps = pc.PatchSet(rng.standard_normal((1, 2, 3)), nbrs, np.zeros((1, 2), dtype=int))
        tok = pc.patch_encode(ps, params).tokens.data
        shuffled = nbrs[:, :, rng.permutation(6), :]
        ps2 = pc.PatchSet(ps.centers, shuffled, ps.center_indices)
        tok2 = pc.patch_encode(ps2, params).tokens.data
        np.testing.assert_array_equal(tok, tok2)

    def test_identical_patches_identical_tokens(self, rng):
        params = make_patch_encoder(rng)
        one = rng.standard_normal((1, 1, 5, 3))
        nbrs = np.concatenate([one, one], axis=1)
        ps = pc.PatchSet(np.zeros((1, 2, 3)), nbrs, np.zeros((1, 2), dtype=int))
        tok = pc.patch_encode(ps, params).tokens.data
        np.testing.assert_array_equal(tok[0, 0], tok[0, 1])

    def test_gradcheck(self, rng):
        params = make_patch_encoder(rng, feature_dim=6)
        nbrs = rng.uniform(-1, 1, (1, 2, 4, 3))
        ps = pc.PatchSet(np.zeros((1, 2, 3)), nbrs, np.zeros((1, 2), dtype=int))

        def loss():
            tok = pc.patch_encode(ps, params).tokens
            return ad.sum_(ad.mul(tok, tok))

        assert_grads_close(loss, params.tensors())


class TestNormalize:
    def test_zero_mean_unit_max_norm(self, rng):
        pts = rng.standard_normal((3, 40, 3)) * 7 + 2
        out = pc.normalize_cloud(pts)
        np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1).max(axis=1), 1.0)

    def test_translation_cancels(self, rng):
        pts = rng.standard_normal((20, 3))
        np.testing.assert_allclose(pc.normalize_cloud(pts), pc.normalize_cloud(pts + 13.0), atol=1e-12)

    def test_nonfinite_rejected(self):
        bad = np.zeros((4, 3))
        bad[1, 2] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            pc.normalize_cloud(bad)


class TestCloudIO:
    def test_ascii_roundtrip(self, rng, tmp_path):
        pts = rng.standard_normal((17, 3))
        path = tmp_path / "cloud.xyz"
        pc.write_cloud_ascii(path, pts)
        np.testing.assert_allclose(pc.read_cloud_ascii(path), pts, atol=1e-8)

    def test_binary_roundtrip(self, rng, tmp_path):
        pts = rng.standard_normal((17, 3)).astype(np.float32).astype(np.float64)
        path = tmp_path / "cloud.xyzb"
        pc.write_cloud_binary(path, pts)
        np.testing.assert_array_equal(pc.read_cloud_binary(path), pts)

    def test_load_normalizes(self, rng, tmp_path):
        pts = rng.standard_normal((9, 3)) + 4
        path = tmp_path / "cloud.xyz"
        pc.write_cloud_ascii(path, pts)
        out = pc.load_cloud(path)
        np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-8)

    def test_truncated_binary_rejected(self, tmp_path):
        path = tmp_path / "bad.xyzb"
        path.write_bytes(b"\x05\x00\x00\x00junk")
        with pytest.raises(ValueError, match="expected"):
            pc.read_cloud_binary(path)
