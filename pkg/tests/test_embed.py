import math

import numpy as np
import pytest

from uatrack.core import Box7, PointCloud
from uatrack.embed import (
    CanonicalCloud,
    EmbedNet,
    backward,
    canon_seed,
    canonicalize,
    cosine,
    degenerate,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from uatrack.kalman import NumericalError


def box(x=0.0, y=0.0, z=0.0, yaw=0.0, l=4.0, w=2.0, h=1.5):
    return Box7(x, y, z, yaw, l, w, h)


class TestCanonicalize:
    def test_identity_pose(self):
        pc = PointCloud([[0.1, 0.2, 0.3]])
        out = canonicalize(pc, box(), n=1, seed=0)
        np.testing.assert_allclose(out.points, [[0.1, 0.2, 0.3]], atol=1e-6)
        assert not out.empty

    def test_inverse_rigid_transform(self):
        # box at (5, 0, 0) with yaw pi/2; world point (5, 1, 0) -> (1, 0, 0)
        pc = PointCloud([[5.0, 1.0, 0.0]])
        out = canonicalize(pc, box(x=5.0, yaw=math.pi / 2), n=1, seed=0)
        np.testing.assert_allclose(out.points, [[1.0, 0.0, 0.0]], atol=1e-6)

    def test_resample_with_replacement(self):
        pc = PointCloud([[0.1, 0.1, 0.1], [-0.2, 0.3, -0.1], [99.0, 99.0, 99.0]])
        out = canonicalize(pc, box(), n=4, seed=0)
        assert out.points.shape == (4, 3)
        originals = np.array([[0.1, 0.1, 0.1], [-0.2, 0.3, -0.1]])
        for p in out.points:
            assert np.isclose(originals, p, atol=1e-6).all(axis=1).any()

    def test_empty_crop_flagged(self):
        pc = PointCloud([[50.0, 50.0, 50.0]])
        out = canonicalize(pc, box(), n=8, seed=0)
        assert out.empty
        np.testing.assert_array_equal(out.points, np.zeros((8, 3)))

    def test_subsample_without_replacement(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-0.4, 0.4, size=(50, 3))
        out = canonicalize(PointCloud(pts), box(), n=20, seed=1)
        assert out.points.shape == (20, 3)
        assert len({tuple(p) for p in np.round(out.points, 6)}) == 20

    def test_equivariance(self):
        # translating and yaw-rotating cloud and box together preserves the
        # selection structure exactly and coordinates to float tolerance
        rng = np.random.default_rng(4)
        pts = rng.uniform(-1.5, 1.5, size=(60, 3)).astype(np.float32)
        b0 = box(l=3.0, w=2.0, h=2.0)
        out0 = canonicalize(PointCloud(pts), b0, n=32, seed=9)

        th = 0.7
        t = np.array([3.0, -2.0, 0.5])
        c, s = math.cos(th), math.sin(th)
        rot_t = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        moved = pts.astype(np.float64) @ rot_t + t
        b1 = box(x=t[0], y=t[1], z=t[2], yaw=th, l=3.0, w=2.0, h=2.0)
        out1 = canonicalize(PointCloud(moved), b1, n=32, seed=9)
        assert out1.empty == out0.empty
        np.testing.assert_allclose(out1.points, out0.points, atol=1e-5)

    def test_n_validated(self):
        with pytest.raises(ValueError):
            canonicalize(PointCloud(np.zeros((1, 3))), box(), n=0, seed=0)

    def test_canon_seed_stable(self):
        assert canon_seed("abc") == canon_seed("abc")
        assert canon_seed("abc") != canon_seed("abd")


class TestForward:
    def test_zero_net_zero_embedding(self):
        net = EmbedNet(
            weights=(np.zeros((4, 3)), np.zeros((2, 4))),
            biases=(np.zeros(4), np.zeros(2)),
        )
        cloud = CanonicalCloud(points=np.random.default_rng(0).normal(size=(10, 3)), source="")
        np.testing.assert_array_equal(forward(net, cloud), np.zeros(2))

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(1)
        net = EmbedNet.random((3, 8, 8, 5), seed=2)
        pts = rng.normal(size=(40, 3))
        cloud = CanonicalCloud(points=pts, source="")
        base = forward(net, cloud)
        for _ in range(5):
            perm = rng.permutation(40)
            shuffled = CanonicalCloud(points=pts[perm], source="")
            np.testing.assert_array_equal(forward(net, shuffled), base)

    def test_single_layer_hand_example(self):
        # W = [[1,0,0],[0,1,0]], points (1,5,0) and (2,1,0) -> max = (2, 5)
        net = EmbedNet(
            weights=(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),),
            biases=(np.zeros(2),),
        )
        cloud = CanonicalCloud(points=np.array([[1.0, 5.0, 0.0], [2.0, 1.0, 0.0]]), source="")
        np.testing.assert_allclose(forward(net, cloud), [2.0, 5.0])

    def test_non_finite_params_rejected(self):
        net = EmbedNet(
            weights=(np.array([[np.inf, 0.0, 0.0]]),),
            biases=(np.zeros(1),),
        )
        cloud = CanonicalCloud(points=np.zeros((2, 3)), source="")
        with pytest.raises(NumericalError):
            forward(net, cloud)


class TestCosine:
    def test_identical(self):
        e = np.array([0.3, -0.4, 1.0])
        assert cosine(e, e) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 2.0]) == 0.0

    def test_half_diagonal(self):
        # oracle: 1/sqrt(2)
        assert cosine([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.7071067811865476, abs=1e-12)

    def test_degenerate_returns_zero(self):
        assert cosine(np.zeros(4), np.ones(4)) == 0.0
        assert degenerate(np.zeros(4))
        assert not degenerate(np.ones(4))

    def test_symmetry_and_scale_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            a, b = rng.normal(size=5), rng.normal(size=5)
            c = float(rng.uniform(0.1, 100))
            assert cosine(a, b) == pytest.approx(cosine(b, a), abs=1e-12)
            assert cosine(c * a, b) == pytest.approx(cosine(a, b), abs=1e-12)


def fd_gradients(net, cloud, upstream, h=1e-5):
    """Central finite differences of upstream . embedding, the oracle."""
    params = net.params()
    grads = []
    for slot, p in enumerate(params):
        g = np.zeros_like(p)
        flat = p.copy().reshape(-1)
        for k in range(flat.size):
            for sign in (+1, -1):
                bumped = [q.copy() for q in params]
                bq = bumped[slot].reshape(-1)
                bq[k] += sign * h
                net2 = EmbedNet.from_params(bumped)
                val = float(np.dot(upstream, forward(net2, cloud)))
                if sign > 0:
                    plus = val
                else:
                    minus = val
            g.reshape(-1)[k] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        net = EmbedNet.random((3, 6, 4), seed=0)
        cloud = CanonicalCloud(points=np.random.default_rng(1).normal(size=(12, 3)), source="")
        grads = backward(net, cloud, np.zeros(4))
        for g in grads:
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for trial in range(20):
            net = EmbedNet.random((3, 5, 4), seed=100 + trial)
            cloud = CanonicalCloud(points=rng.normal(size=(8, 3)), source="")
            upstream = rng.normal(size=4)
            analytic = backward(net, cloud, upstream)
            numeric = fd_gradients(net, cloud, upstream)
            for a, n in zip(analytic, numeric):
                denom = np.maximum(np.abs(n), 1e-6)
                rel = np.abs(a - n) / denom
                assert rel.max() < 1e-4

    def test_frozen_argmax_pattern(self):
        rng = np.random.default_rng(7)
        net = EmbedNet.random((3, 6, 4), seed=3)
        pts = rng.normal(size=(10, 3))
        cloud = CanonicalCloud(points=pts, source="")
        upstream = rng.normal(size=4)

        # identify a point never selected by the max pool and its margin
        feats = cloud.points
        for k, (w, b) in enumerate(zip(net.weights, net.biases)):
            feats = feats @ w.T + b
            if k < len(net.weights) - 1:
                feats = np.maximum(feats, 0.0)
        arg = set(feats.argmax(axis=0))
        loser = next(i for i in range(10) if i not in arg)
        margin = min(feats[:, d].max() - feats[loser, d] for d in range(4))
        assert margin > 0

        base = backward(net, cloud, upstream)
        bumped = pts.copy()
        bumped[loser] += margin * 1e-3  # well below the selection margin
        out = backward(net, CanonicalCloud(points=bumped, source=""), upstream)
        for a, b2 in zip(base, out):
            np.testing.assert_array_equal(a, b2)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = EmbedNet.random((3, 16, 8, 6), seed=5)
        save_checkpoint(tmp_path / "n.uann", net)
        back = load_checkpoint(tmp_path / "n.uann")
        assert back.widths == net.widths
        for a, b in zip(back.params(), net.params()):
            np.testing.assert_array_equal(a, b)

    def test_magic_checked(self, tmp_path):
        (tmp_path / "bad.uann").write_bytes(b"XXXX\x00\x00\x00\x00")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "bad.uann")
