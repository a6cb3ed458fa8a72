import math

import numpy as np
import pytest

from uatrack import assoc, embed, kalman, learn, sim
from uatrack.learn import (
    AdamState,
    DetRef,
    TrainerConfig,
    TrainingDataExhausted,
    Triplet,
    adam_step,
    batch_loss_and_grads,
    build_triplet_source,
    mine_hard_negative,
    sample_triplet,
    train,
    triplet_loss,
    weighted_triplet_loss,
)


class TestTripletLoss:
    def test_margin_satisfied(self):
        assert triplet_loss(0.9, 0.5, 0.2) == 0.0

    def test_hand_value(self):
        assert triplet_loss(0.6, 0.5, 0.2) == pytest.approx(0.1, abs=1e-12)

    def test_equal_similarities_give_margin(self):
        assert triplet_loss(0.5, 0.5, 0.2) == pytest.approx(0.2, abs=1e-12)


class TestWeightedLoss:
    def _triplet(self, w):
        return Triplet(anchor=DetRef(0, 0, 0), positive=DetRef(0, 1, 0),
                       negative=DetRef(0, 0, 1), weight=w)

    def test_product(self):
        t = self._triplet(0.5)
        assert weighted_triplet_loss(t, 0.6, 0.5, 0.2) == pytest.approx(0.05)

    def test_zero_weight_silences(self):
        t = self._triplet(0.0)
        assert weighted_triplet_loss(t, -1.0, 1.0, 0.2) == 0.0

    def test_unit_weight_identity(self):
        t = self._triplet(1.0)
        assert weighted_triplet_loss(t, 0.6, 0.5, 0.2) == triplet_loss(0.6, 0.5, 0.2)

    def test_weight_validated(self):
        with pytest.raises(ValueError):
            self._triplet(1.5)

    def test_negative_frame_enforced(self):
        with pytest.raises(ValueError):
            Triplet(anchor=DetRef(0, 0, 0), positive=DetRef(0, 1, 0),
                    negative=DetRef(0, 1, 1), weight=1.0)
        with pytest.raises(ValueError):
            Triplet(anchor=DetRef(0, 0, 0), positive=DetRef(0, 1, 0),
                    negative=DetRef(0, 0, 0), weight=1.0)


class TestMineHardNegative:
    def test_highest_cosine_wins(self):
        anchor = np.array([1.0, 0.0])
        cands = [(0, np.array([0.9, 0.1])), (1, np.array([0.0, 1.0]))]
        assert mine_hard_negative(anchor, cands) == 0

    def test_single_candidate(self):
        assert mine_hard_negative(np.array([1.0, 0.0]), [(3, np.array([0.0, 1.0]))]) == 3

    def test_tie_goes_to_lowest_index(self):
        e = np.array([0.5, 0.5])
        assert mine_hard_negative(np.array([1.0, 0.0]), [(2, e), (1, e)]) == 1

    def test_empty_returns_none(self):
        assert mine_hard_negative(np.array([1.0]), []) is None


def _source_from_tracks(track_members, link_conf, frame_sizes, n_dets_per_frame=3):
    """Build a TripletSource from hand-specified tracks over a stub sequence."""
    from uatrack.core import Box7, Detection, FrameRecord, PointCloud, Sequence

    max_frame = max(f for members in track_members.values() for f, _ in members)
    cloud = PointCloud(np.zeros((1, 3)))
    frames = []
    for f in range(max_frame + 1):
        dets = tuple(
            Detection(frame=f, box=Box7(0, 0, 0, 0, 1, 1, 1), score=1.0,
                      cloud_ref="c")
            for _ in range(frame_sizes.get(f, n_dets_per_frame))
        )
        frames.append(FrameRecord(index=f, detections=dets))
    seq = Sequence(frames=tuple(frames), clouds={"c": cloud}, frame_period=0.5)
    labels = [
        __import__("uatrack.core", fromlist=["TrackletLabel"]).TrackletLabel(
            track_id=tid, members=tuple(members))
        for tid, members in track_members.items()
    ]
    return build_triplet_source([seq], [(labels, link_conf)])


class TestSampleTriplet:
    def test_forced_pair_and_weight(self):
        src = _source_from_tracks({0: [(0, 0), (1, 0)]}, {0: [0.7]}, {})
        rng = np.random.default_rng(0)
        t = sample_triplet(src, TrainerConfig(), rng)
        assert t.anchor == DetRef(0, 0, 0)
        assert t.positive == DetRef(0, 1, 0)
        assert t.weight == pytest.approx(0.7)

    def test_chain_weight_product(self):
        src = _source_from_tracks({0: [(0, 0), (1, 0), (2, 0)]}, {0: [0.9, 0.8]}, {})
        rng = np.random.default_rng(1)
        seen = set()
        for _ in range(200):
            t = sample_triplet(src, TrainerConfig(), rng)
            seen.add((t.anchor.frame, t.positive.frame, round(t.weight, 6)))
        assert (0, 2, round(0.72, 6)) in seen  # matches the product rule
        assert (0, 1, 0.9) in seen
        assert (1, 2, 0.8) in seen

    def test_oracle_tracks_weight_one(self):
        src = _source_from_tracks({0: [(0, 0), (1, 0)]}, {0: [1.0]}, {})
        rng = np.random.default_rng(2)
        for _ in range(20):
            assert sample_triplet(src, TrainerConfig(), rng).weight == 1.0

    def test_exhausted_raises(self):
        src = _source_from_tracks({0: [(0, 0)]}, {0: []}, {})
        with pytest.raises(TrainingDataExhausted):
            sample_triplet(src, TrainerConfig(), np.random.default_rng(0))

    def test_lonely_anchor_frame_skips(self):
        src = _source_from_tracks({0: [(0, 0), (1, 0)]}, {0: [1.0]}, {0: 1})
        t = sample_triplet(src, TrainerConfig(), np.random.default_rng(0))
        assert t is None

    def test_max_gap_respected(self):
        src = _source_from_tracks({0: [(0, 0), (8, 0)]}, {0: [0.5]}, {})
        cfg = TrainerConfig(max_gap=3)
        assert sample_triplet(src, cfg, np.random.default_rng(0)) is None


class TestAdam:
    def _params(self):
        return [np.array([1.0, -2.0]), np.array([[0.5]])]

    def test_zero_grad_identity(self):
        params = self._params()
        state = AdamState.init(params)
        out, state2 = adam_step(params, [np.zeros(2), np.zeros((1, 1))], state,
                                TrainerConfig(learning_rate=0.1))
        for a, b in zip(out, params):
            np.testing.assert_array_equal(a, b)
        assert state2.step == 1

    def test_first_step_is_signed_lr(self):
        # oracle: first bias-corrected step = -lr * g / (|g| + ~eps)
        cfg = TrainerConfig(learning_rate=0.01)
        params = [np.array([1.0])]
        grads = [np.array([0.003])]
        out, _ = adam_step(params, grads, AdamState.init(params), cfg)
        assert out[0][0] == pytest.approx(1.0 - 0.01, rel=1e-4)

    def test_constant_gradient_update_magnitude_non_increasing(self):
        cfg = TrainerConfig(learning_rate=0.05)
        params = [np.array([0.0, 1.0, -2.0])]
        grads = [np.array([0.2, -0.1, 0.4])]
        state = AdamState.init(params)
        p1, state = adam_step(params, grads, state, cfg)
        step1 = np.abs(np.asarray(p1[0]) - np.asarray(params[0]))
        p2, state = adam_step(p1, grads, state, cfg)
        step2 = np.abs(np.asarray(p2[0]) - np.asarray(p1[0]))
        assert (step2 <= step1 + 1e-9).all()


def _mini_training_setup(seed=0, n_frames=10, n_objects=3):
    scene = sim.SceneConfig(n_objects=n_objects, n_frames=n_frames,
                            base_points=120, min_points=20)
    seq, _ = sim.generate_sequence(scene, seed=seed)
    labels, conf = assoc.build_pseudo_tracks(seq, kalman.NoiseConfig(), assoc.AssocConfig())
    return [seq], [(labels, conf)]


class TestTrain:
    def test_zero_lr_bit_identical(self):
        seqs, tracks = _mini_training_setup()
        net = embed.EmbedNet.random((3, 8, 8, 4), seed=1)
        cfg = TrainerConfig(learning_rate=0.0, batch_size=4, epochs=1,
                            points_per_crop=16, seed=0)
        out, history = train(seqs, tracks, net, cfg)
        for a, b in zip(out.params(), net.params()):
            np.testing.assert_array_equal(a, b)
        assert history

    def test_zero_weights_leave_params_unchanged(self):
        seqs, tracks = _mini_training_setup()
        labels, conf = tracks[0]
        conf = {tid: [0.0] * len(v) for tid, v in conf.items()}
        net = embed.EmbedNet.random((3, 8, 8, 4), seed=1)
        cfg = TrainerConfig(learning_rate=1e-2, batch_size=4, epochs=1,
                            points_per_crop=16, seed=0)
        out, _ = train(seqs, [(labels, conf)], net, cfg)
        for a, b in zip(out.params(), net.params()):
            np.testing.assert_array_equal(a, b)

    def test_deterministic_given_seed(self):
        seqs, tracks = _mini_training_setup()
        net = embed.EmbedNet.random((3, 8, 8, 4), seed=1)
        cfg = TrainerConfig(learning_rate=1e-3, batch_size=4, epochs=2,
                            points_per_crop=16, seed=7)
        out1, h1 = train(seqs, tracks, net, cfg)
        out2, h2 = train(seqs, tracks, net, cfg)
        for a, b in zip(out1.params(), out2.params()):
            np.testing.assert_array_equal(a, b)
        assert [(r.mean_loss, r.mean_weight) for r in h1] == \
               [(r.mean_loss, r.mean_weight) for r in h2]

    def test_loss_decreases_on_shape_dataset(self):
        seqs, tracks = _mini_training_setup(seed=5, n_frames=16, n_objects=4)
        net = embed.EmbedNet.random((3, 32, 32, 32), seed=0)
        cfg = TrainerConfig(learning_rate=3e-3, batch_size=16, epochs=30,
                            points_per_crop=48, seed=0)
        _, history = train(seqs, tracks, net, cfg)
        k = max(1, len(history) // 6)
        first = np.mean([r.mean_loss for r in history[:k]])
        last = np.mean([r.mean_loss for r in history[-k:]])
        assert last < 0.5 * first

    def test_exhausted_without_pairs(self):
        seqs, tracks = _mini_training_setup(n_frames=2)
        labels, conf = tracks[0]
        singles = [type(l)(track_id=l.track_id, members=l.members[:1]) for l in labels]
        net = embed.EmbedNet.random((3, 4, 4), seed=0)
        with pytest.raises(TrainingDataExhausted):
            train(seqs, [(singles, {l.track_id: [] for l in singles})], net,
                  TrainerConfig(batch_size=2, epochs=1, points_per_crop=8))

    def test_debug_asserts_hard_negative_dominance(self):
        seqs, tracks = _mini_training_setup()
        net = embed.EmbedNet.random((3, 8, 4), seed=2)
        cfg = TrainerConfig(learning_rate=1e-3, batch_size=4, epochs=1,
                            points_per_crop=16, seed=1)
        train(seqs, tracks, net, cfg, debug_asserts=True)


class TestBatchGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        seqs, tracks = _mini_training_setup(seed=3, n_frames=8, n_objects=3)
        src = build_triplet_source(seqs, tracks)
        cfg = TrainerConfig(points_per_crop=12)

        crops_cache = {}

        def crops(ref):
            if ref not in crops_cache:
                det = src.frame_map[(ref.seq, ref.frame)].detections[ref.det]
                crops_cache[ref] = embed.canonicalize(
                    seqs[ref.seq].cloud_of(det), det.box, cfg.points_per_crop,
                    seed=embed.canon_seed(det.cloud_ref))
            return crops_cache[ref]

        checked = 0
        for trial in range(40):
            if checked >= 5:
                break
            net = embed.EmbedNet.random((3, 6, 4), seed=50 + trial)
            t = sample_triplet(src, cfg, rng)
            if t is None:
                continue
            from uatrack.learn import negative_candidates
            cands = negative_candidates(src, t.anchor)
            if not cands:
                continue
            from dataclasses import replace
            t = replace(t, negative=DetRef(t.anchor.seq, t.anchor.frame, cands[0]))
            loss, grads, _ = batch_loss_and_grads(net, crops, [t], 0.2)
            if loss < 1e-3:  # keep a margin from the hinge kink
                continue
            checked += 1

            params = net.params()
            h = 1e-5
            for slot in range(len(params)):
                flat = params[slot].reshape(-1)
                for k in range(flat.size):
                    vals = []
                    for sign in (+1, -1):
                        bumped = [q.copy() for q in params]
                        bumped[slot].reshape(-1)[k] += sign * h
                        l2, _, _ = batch_loss_and_grads(
                            embed.EmbedNet.from_params(bumped), crops, [t], 0.2)
                        vals.append(l2)
                    num = (vals[0] - vals[1]) / (2 * h)
                    ana = grads[slot].reshape(-1)[k]
                    assert abs(ana - num) / max(abs(num), 1e-6) < 1e-4
        assert checked == 5
