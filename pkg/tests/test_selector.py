"""Confidence scores, targets, and pruned granularity selection."""

import numpy as np
import pytest

from keytraj.config import TrainConfig
from keytraj.diffcore import ParamTensor, as_node
from keytraj.keysteps import GranularityTrajectory
from keytraj.model import Model
from keytraj.selector import (
    Selection,
    confidence_loss,
    confidence_scores,
    confidence_target,
    granularity_ades,
    gt_confidence,
    select_and_generate,
)

# softmax of -(1, 2, 3)
SOFTMAX_123 = (0.66524096, 0.24472847, 0.09003057)


class TestConfidenceTarget:
    def test_reference_triple(self):
        np.testing.assert_allclose(
            confidence_target(np.array([1.0, 2.0, 3.0])), SOFTMAX_123, atol=1e-8
        )

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        t = confidence_target(rng.uniform(0, 50, size=(40, 3)))
        np.testing.assert_allclose(t.sum(axis=-1), 1.0, atol=1e-12)
        assert (t > 0).all()

    def test_smaller_error_gets_larger_weight(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            ades = rng.uniform(0, 10, size=4)
            t = confidence_target(ades)
            assert np.argmax(t) == np.argmin(ades)

    def test_order_reversal(self):
        # reversing the error order reverses the confidence order
        rng = np.random.default_rng(2)
        for _ in range(200):
            ades = rng.uniform(0, 10, size=3)
            fwd = confidence_target(ades)
            rev = confidence_target(ades[::-1])
            np.testing.assert_allclose(rev, fwd[::-1], atol=1e-12)

    def test_uniform_errors_uniform_target(self):
        np.testing.assert_allclose(
            confidence_target(np.full(4, 7.3)), 0.25, atol=1e-12
        )

    def test_extreme_errors_do_not_overflow(self):
        t = confidence_target(np.array([1e6, 0.0, 5e5]))
        assert np.isfinite(t).all()
        np.testing.assert_allclose(t.sum(), 1.0, atol=1e-12)


def _traj(level, values):
    arr = np.asarray(values, dtype=float)
    steps = arr.shape[-2]
    if arr.ndim == 2:
        points = {i + 1: as_node(arr[i]) for i in range(steps)}
    else:
        points = {i + 1: as_node(arr[:, i]) for i in range(steps)}
    return GranularityTrajectory(level, points, {i: "key" for i in points})


class TestGranularityAdes:
    def test_constant_offsets(self):
        future = np.zeros((4, 2))
        t2 = _traj(2, np.full((5, 2), 3.0 / np.sqrt(2)))
        t4 = _traj(4, np.zeros((5, 2)))
        ades = granularity_ades([t2, t4], future, t_f=4)
        np.testing.assert_allclose(ades, [3.0, 0.0], atol=1e-12)

    def test_extrapolated_tail_excluded(self):
        future = np.zeros((4, 2))
        good = np.zeros((5, 2))
        good[4] = 1e6  # wild tail beyond the scored horizon
        ades = granularity_ades([_traj(2, good)], future, t_f=4)
        np.testing.assert_allclose(ades, [0.0], atol=1e-12)

    def test_batched_rows(self):
        future = np.zeros((3, 4, 2))
        vals = np.zeros((3, 5, 2))
        vals[1] += 2.0
        ades = granularity_ades([_traj(2, vals)], future, t_f=4)
        np.testing.assert_allclose(ades[:, 0], [0.0, 2.0 * np.sqrt(2), 0.0], atol=1e-12)

    def test_horizon_mismatch_rejected(self):
        with pytest.raises(ValueError, match="exactly"):
            granularity_ades([_traj(2, np.zeros((5, 2)))], np.zeros((3, 2)), t_f=4)

    def test_gt_confidence_composes(self):
        future = np.zeros((4, 2))
        trajs = [
            _traj(2, np.full((5, 2), 1.0 / np.sqrt(2))),
            _traj(4, np.full((5, 2), 2.0 / np.sqrt(2))),
            _traj(8, np.full((5, 2), 3.0 / np.sqrt(2))),
        ]
        np.testing.assert_allclose(
            gt_confidence(trajs, future, 4), SOFTMAX_123, atol=1e-8
        )


class TestConfidenceScores:
    def _layers(self, rng, d_in, m):
        return (
            (ParamTensor("w1", rng.normal(size=(d_in, 6))), ParamTensor("b1", np.zeros(6)), "relu"),
            (ParamTensor("w2", rng.normal(size=(6, m))), ParamTensor("b2", np.zeros(m)), None),
        )

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(3)
        layers = self._layers(rng, 2 + 2 + 5, 3)
        scores = confidence_scores(
            rng.normal(size=(7, 2)), rng.normal(size=(7, 2)),
            rng.normal(size=(7, 5)), layers,
        )
        assert scores.value.shape == (7, 3)
        np.testing.assert_allclose(scores.value.sum(axis=-1), 1.0, atol=1e-12)
        assert (scores.value > 0).all()

    def test_depends_on_tail_input(self):
        rng = np.random.default_rng(4)
        layers = self._layers(rng, 9, 3)
        h, t, a = rng.normal(size=(1, 2)), rng.normal(size=(1, 2)), rng.normal(size=(1, 5))
        s1 = confidence_scores(h, t, a, layers).value
        s2 = confidence_scores(h, t + 1.0, a, layers).value
        assert np.abs(s1 - s2).max() > 1e-9


class TestConfidenceLoss:
    def test_matches_mse(self):
        pred = np.array([[0.5, 0.5], [0.9, 0.1]])
        target = np.array([[1.0, 0.0], [0.9, 0.1]])
        got = float(confidence_loss(as_node(pred), target).value)
        assert got == pytest.approx(((pred - target) ** 2).mean(), rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="confidence shapes"):
            confidence_loss(as_node(np.zeros((2, 3))), np.zeros((2, 2)))


@pytest.fixture(scope="module")
def small_model():
    cfg = TrainConfig(
        t_p=4, t_f=12, k_modes=2, granularities=(2, 4, 8),
        d=8, d_a=10, hidden=12, dtype="float64",
    )
    return Model.init(cfg, seed=5)


def _batch(rng, b, t_p=4):
    past = rng.normal(size=(b, t_p, 2)).cumsum(axis=1)
    nbr = rng.normal(size=(b, 2, t_p, 2)).cumsum(axis=2)
    return past, nbr, np.ones((b, 2))


class TestSelectAndGenerate:
    def test_selection_fields(self, small_model):
        rng = np.random.default_rng(6)
        past, nbr, mask = _batch(rng, 3)
        sel = select_and_generate(small_model, past, nbr, mask)
        assert isinstance(sel, Selection)
        assert sel.confidences.shape == (6, 3)
        assert sel.chosen.shape == (6,)
        assert set(sel.chosen) <= {2, 4, 8}
        assert sel.trajectory.shape == (6, 13, 2)
        assert sel.mode_probs.shape == (3, 2)
        np.testing.assert_allclose(sel.confidences.sum(axis=-1), 1.0, atol=1e-12)

    def test_pruned_equals_exhaustive_bitwise(self, small_model):
        for seed in range(8):
            rng = np.random.default_rng(seed)
            past, nbr, mask = _batch(rng, 4)
            pruned = select_and_generate(small_model, past, nbr, mask, prune=True)
            full = select_and_generate(small_model, past, nbr, mask, prune=False)
            assert np.array_equal(pruned.trajectory, full.trajectory)
            assert np.array_equal(pruned.chosen, full.chosen)
            assert set(pruned.generated) <= set(full.generated)

    def test_pruning_skips_unchosen_granularities(self, small_model):
        rng = np.random.default_rng(7)
        past, nbr, mask = _batch(rng, 4)
        sel = select_and_generate(small_model, past, nbr, mask, prune=True)
        chosen = set(int(c) for c in sel.chosen)
        # donors of a chosen coarse level may also be generated
        donors = {4} if 8 in chosen else set()
        assert set(sel.generated) == chosen | donors

    def test_trajectory_is_world_frame(self, small_model):
        rng = np.random.default_rng(8)
        past, nbr, mask = _batch(rng, 2)
        sel = select_and_generate(small_model, past, nbr, mask)
        shifted = select_and_generate(small_model, past + 100.0, nbr + 100.0, mask)
        np.testing.assert_allclose(
            shifted.trajectory, sel.trajectory + 100.0, atol=1e-6
        )

    def test_argmax_tie_prefers_finest(self):
        # identical confidences across granularities: argmax returns the
        # first index, which maps to the smallest L in the chain
        conf = np.full((1, 3), 1.0 / 3.0)
        chain = np.array([2, 4, 8])
        assert chain[np.argmax(conf, axis=-1)][0] == 2
