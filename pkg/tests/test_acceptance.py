"""End-to-end acceptance suite: one test per shipping criterion.

Each ``pytest -v`` line below is the pass/fail verdict for one numbered
criterion.  The lightweight criteria re-derive their oracles inline; the
training-based ones (6-8) run real desk-scale experiments with fixed seeds
and assert the headline comparison plus their wall-clock budget.  Criteria
6 and 8 share one trained model via a module fixture.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from keytraj.baselines import cv_extrapolate, kalman_smooth
from keytraj.cli import _head_predictions, _pack_set
from keytraj.config import TrainConfig
from keytraj.data import SynthConfig, gen_synthetic, load_ethucy, save_jsonl
from keytraj.diffcore import as_node
from keytraj.keysteps import (
    GranularityTrajectory,
    KeyPrediction,
    build_key_groups,
    downsample_keys,
    spatial_loss,
)
from keytraj.metrics import ade, compute_report, curve_csv_text, step_error_curve
from keytraj.model import Model, build_params, forward, generate_trajectories
from keytraj.selector import confidence_target, gt_confidence, select_and_generate
from keytraj.trainer import (
    gradient_check_suite,
    load_checkpoint,
    save_checkpoint,
    train,
    write_atomic_text,
)

FAMILIES = ("constant_velocity", "constant_turn", "sinusoid", "sudden_turn")
CURVED = ("constant_turn", "sinusoid", "sudden_turn")


# ---------------------------------------------------------------------------
# criterion 1: gradient integrity
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_integrity_20_seeds_under_2_minutes():
    start = time.monotonic()
    worst = 0.0
    for seed in range(20):
        result = gradient_check_suite(seed)
        assert result["params_checked"] == result["param_total"], (
            f"seed {seed}: only {result['params_checked']} of "
            f"{result['param_total']} parameters reached by the check"
        )
        worst = max(worst, result["max_rel_error"])
        assert result["max_rel_error"] < 1e-4, (
            f"seed {seed}: max relative gradient error "
            f"{result['max_rel_error']:.3e} >= 1e-4"
        )
    elapsed = time.monotonic() - start
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s (budget 120s)"
    print(f"criterion 1: worst rel error {worst:.3e} over 20 seeds, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: key-group construction
# ---------------------------------------------------------------------------


def test_criterion_02_key_groups_for_horizon_12():
    groups = {g.granularity: g for g in build_key_groups(12, (2, 4, 8))}
    assert set(groups) == {2, 4, 8}
    assert groups[2].indices == (1, 3, 5, 7, 9, 11, 13)
    assert groups[4].indices == (1, 5, 9, 13)
    assert groups[8].indices == (1, 9)
    assert groups[2].inherits_tail_from is None
    assert groups[4].inherits_tail_from is None
    assert groups[8].inherits_tail_from == 4
    assert groups[2].covered_until == 13
    assert groups[4].covered_until == 13
    assert groups[8].covered_until == 9


# ---------------------------------------------------------------------------
# criterion 3: generation invariants over 100 seeds
# ---------------------------------------------------------------------------


def test_criterion_03_generation_invariants_100_seeds_under_1_minute():
    start = time.monotonic()
    cfg = TrainConfig(
        t_p=4, t_f=12, k_modes=2, granularities=(2, 4, 8),
        d=6, d_a=8, hidden=10, dtype="float64",
    )
    all_indices = list(range(1, 14))
    for seed in range(100):
        rng = np.random.default_rng([seed, 3])
        model = Model.init(cfg, seed=seed)
        past = np.cumsum(rng.normal(0.2, 0.5, size=(3, cfg.t_p, 2)), axis=1)
        nbr = rng.normal(size=(3, 2, cfg.t_p, 2))
        mask = np.ones((3, 2))
        fwd = forward(model, past, nbr, mask)

        # completeness: every index 1..13 produced exactly once, tagged
        for level, traj in fwd.trajs.items():
            assert sorted(traj.points) == all_indices
            assert set(traj.provenance) == set(all_indices)

        # key preservation: generated coordinates at key indices are the
        # head's own key outputs, bitwise
        for group in model.groups:
            down = downsample_keys(fwd.keys, group).value
            got = np.stack(
                [fwd.trajs[group.granularity].points[i].value for i in group.indices],
                axis=-2,
            )
            assert np.array_equal(got, down), (
                f"seed {seed}: keys of granularity {group.granularity} altered"
            )

        # section locality: bumping one fine key may move only that key and
        # the two adjacent filled indices
        pos = int(rng.integers(0, 7))
        bumped = fwd.keys.coords.value.copy()
        bumped[:, pos, :] += rng.normal(size=2)
        base = generate_trajectories(model, fwd.keys, fwd.features.features, (2,))[2]
        pert = generate_trajectories(
            model,
            KeyPrediction(indices=fwd.keys.indices, coords=as_node(bumped)),
            fwd.features.features,
            (2,),
        )[2]
        key_index = 2 * pos + 1
        allowed = {key_index - 1, key_index, key_index + 1} & set(all_indices)
        for i in all_indices:
            same = np.array_equal(base.points[i].value, pert.points[i].value)
            if i == key_index:
                assert not same, f"seed {seed}: bumped key {i} did not move"
            elif i not in allowed:
                assert same, f"seed {seed}: index {i} moved outside section of {key_index}"

        # confidence-pruned inference matches exhaustive inference bitwise
        pruned = select_and_generate(model, past, nbr, mask, prune=True)
        full = select_and_generate(model, past, nbr, mask, prune=False)
        assert np.array_equal(pruned.trajectory, full.trajectory)
        assert np.array_equal(pruned.chosen, full.chosen)
        assert np.array_equal(pruned.confidences, full.confidences)

    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"invariant sweep took {elapsed:.1f}s (budget 60s)"
    print(f"criterion 3: 100 seeds clean, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: spatial-loss properties
# ---------------------------------------------------------------------------


def test_criterion_04_spatial_loss_worked_case_and_translation_invariance():
    # keys (0,0),(1,0),(2,0) vs ground truth along the diagonal: per-section
    # truth differences are (1,1), predictions move (1,0); mse over
    # 2 sections x 2 coords = (0+1+0+1)/4 = 0.5
    (g2,) = build_key_groups(4, (2,))
    keys = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    gt = np.array([[0.0, 0.0], [0.5, 0.5], [1.0, 1.0], [1.5, 1.5], [2.0, 2.0]])
    assert abs(float(spatial_loss(keys, gt, g2).value) - 0.5) < 1e-12

    rng = np.random.default_rng(41)
    g4 = [g for g in build_key_groups(12, (2, 4)) if g.granularity == 4][0]
    keys12 = rng.normal(size=(4, 2))
    gt12 = rng.normal(size=(13, 2))
    base = float(spatial_loss(keys12, gt12, g4).value)
    for shift in ([10.0, -3.0], [123.5, 77.25], [-0.125, 4096.0]):
        moved = float(spatial_loss(keys12 + shift, gt12 + shift, g4).value)
        assert abs(moved - base) < 1e-12


# ---------------------------------------------------------------------------
# criterion 5: confidence targets
# ---------------------------------------------------------------------------


def test_criterion_05_confidence_targets_and_order_reversal():
    expected = np.array([0.66524, 0.24473, 0.09003])
    np.testing.assert_allclose(confidence_target([1.0, 2.0, 3.0]), expected, atol=1e-4)

    # same numbers through the full pipeline: three trajectories offset from
    # the truth by exactly 1, 2 and 3 at every step
    rng = np.random.default_rng(5)
    future = rng.normal(size=(12, 2))
    tail = 2 * future[-1] - future[-2]
    full = np.vstack([future, tail[None]])
    trajs = []
    for level, dist in zip((2, 4, 8), (1.0, 2.0, 3.0)):
        pts = {i + 1: as_node(full[i] + [dist, 0.0]) for i in range(13)}
        trajs.append(GranularityTrajectory(
            granularity=level, points=pts,
            provenance={i: "key" for i in pts},
        ))
    np.testing.assert_allclose(gt_confidence(trajs, future, 12), expected, atol=1e-4)

    # strict order reversal: lower error => strictly higher confidence
    draws = np.random.default_rng(6).uniform(0.01, 10.0, size=(1000, 3))
    conf = confidence_target(draws)
    for errs, cs in zip(draws, conf):
        for i in range(3):
            for j in range(3):
                if errs[i] < errs[j]:
                    assert cs[i] > cs[j]


# ---------------------------------------------------------------------------
# criteria 6 and 8 share one trained model on the standard synthetic mix
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sanity_run():
    data = gen_synthetic(SynthConfig(counts={f: 500 for f in FAMILIES}), seed=100)
    held = gen_synthetic(SynthConfig(counts={f: 125 for f in FAMILIES}), seed=200)
    start = time.monotonic()
    ckpt = train(TrainConfig(epochs=50, seed=0), data)
    train_seconds = time.monotonic() - start
    model = ckpt.model()
    past, gt, nbr, mask = _pack_set(held, 8)
    preds, probs = _head_predictions(model, "g2l", past, nbr, mask)
    curved = np.array([s.id.rsplit("-", 1)[0] in CURVED for s in held.scenes])
    return {
        "model": model, "past": past, "gt": gt, "nbr": nbr, "mask": mask,
        "preds": preds, "probs": probs, "curved": curved,
        "train_seconds": train_seconds,
    }


def test_criterion_06_trained_model_beats_constant_velocity_on_curves(sanity_run):
    r = sanity_run
    curved = r["curved"]
    assert curved.sum() == 375
    report = compute_report(r["preds"][curved], r["probs"][curved],
                            r["gt"][curved], ks=(5,))
    cv = cv_extrapolate(r["past"][curved], 12)
    cv_ade = float(np.mean([ade(cv[i], g) for i, g in enumerate(r["gt"][curved])]))
    assert report.min_ade[5] < cv_ade, (
        f"model minADE_5 {report.min_ade[5]:.4f} not below "
        f"constant-velocity ADE {cv_ade:.4f} on curved families"
    )
    assert r["train_seconds"] < 900.0, (
        f"training took {r['train_seconds']:.0f}s (budget 900s)"
    )
    print(f"criterion 6: minADE_5 {report.min_ade[5]:.4f} < CV ADE {cv_ade:.4f}, "
          f"train {r['train_seconds']:.0f}s")


def test_criterion_08_trained_model_beats_kalman_smoothed_one_shot_head(sanity_run):
    r = sanity_run
    curved = r["curved"]
    g2l = compute_report(r["preds"][curved], r["probs"][curved],
                         r["gt"][curved], ks=(5,))
    simul, sprobs = _head_predictions(r["model"], "simultaneous",
                                      r["past"], r["nbr"], r["mask"])
    smoothed = simul[curved].copy()
    for i in range(smoothed.shape[0]):
        for k in range(smoothed.shape[1]):
            smoothed[i, k] = kalman_smooth(smoothed[i, k])
    kal = compute_report(smoothed, sprobs[curved], r["gt"][curved], ks=(5,))
    assert g2l.min_ade[5] < kal.min_ade[5], (
        f"minADE_5 {g2l.min_ade[5]:.4f} not below kalman-smoothed "
        f"one-shot head {kal.min_ade[5]:.4f}"
    )

    # smoother self-consistency on exact constant-velocity motion
    steps = np.arange(20, dtype=float)
    line = np.stack([2.0 + 0.4 * steps, 1.0 - 0.3 * steps], axis=1)
    out = kalman_smooth(line, q=1e-8, r=1e-2)
    drift = float(np.abs(out - line).max())
    assert drift < 1e-3, f"smoother moved an exact track by {drift:.2e} m"
    print(f"criterion 8: minADE_5 {g2l.min_ade[5]:.4f} < smoothed {kal.min_ade[5]:.4f}, "
          f"self-consistency drift {drift:.2e}")


# ---------------------------------------------------------------------------
# criterion 7: error-growth comparison against the step-by-step head
# ---------------------------------------------------------------------------


def test_criterion_07_slower_error_growth_than_recursive_head(tmp_path):
    synth = dict(counts={"constant_turn": 600}, noise_sigma=0.01,
                 turn_rate_range=(0.4, 0.9), speed_range=(0.8, 1.5))
    ratios = {"g2l": [], "recursive": []}
    for seed in range(3):
        data = gen_synthetic(SynthConfig(**synth), seed=300 + seed)
        held = gen_synthetic(
            SynthConfig(**dict(synth, counts={"constant_turn": 300})),
            seed=400 + seed,
        )
        stage_one = train(TrainConfig(epochs=40, seed=seed), data)

        # same frozen encoder under both decoding heads, fresh everything else
        cfg = TrainConfig(epochs=80, seed=seed, train_recursive=True,
                          freeze_prefixes=("enc.",))
        params = build_params(cfg, seed=1000 + seed)
        for name, p in stage_one.params.items():
            if name.startswith("enc."):
                params[name].values = p.values.copy()
        model = train(cfg, data, init_params=params).model()

        past, gt, nbr, mask = _pack_set(held, 8)
        for head in ("g2l", "recursive"):
            preds, probs = _head_predictions(model, head, past, nbr, mask)
            curve = step_error_curve(preds, probs, gt, ks=(5, 10))
            write_atomic_text(
                curve_csv_text(curve),
                str(tmp_path / f"growth_{head}_seed{seed}.csv"),
            )
            errs = curve.errors[5]
            ratios[head].append(float(errs[-1] / errs[0]))

    # curves are on disk before any verdict is reached
    csvs = sorted(tmp_path.glob("growth_*.csv"))
    assert len(csvs) == 6
    for path in csvs:
        assert path.read_text().splitlines()[1] == "step,err_top5,err_top10"

    med = {h: float(np.median(v)) for h, v in ratios.items()}
    assert med["g2l"] < med["recursive"], (
        f"median err(12)/err(1): g2l {med['g2l']:.2f} vs "
        f"recursive {med['recursive']:.2f}; per-seed {ratios}; CSVs in {tmp_path}"
    )
    print(f"criterion 7: median growth ratio g2l {med['g2l']:.2f} < "
          f"recursive {med['recursive']:.2f}; curves in {tmp_path}")


# ---------------------------------------------------------------------------
# criterion 9: serialization and determinism
# ---------------------------------------------------------------------------


def test_criterion_09_byte_identical_checkpoints_and_data(tmp_path):
    counts = {f: 50 for f in FAMILIES}
    data = gen_synthetic(SynthConfig(counts=counts), seed=7)
    cfg = TrainConfig(epochs=4, seed=11)
    first, second = train(cfg, data), train(cfg, data)
    p_first, p_second, p_cycled = (
        tmp_path / name for name in ("first.json", "second.json", "cycled.json")
    )
    save_checkpoint(first, str(p_first))
    save_checkpoint(second, str(p_second))
    assert p_first.read_bytes() == p_second.read_bytes(), (
        "identical training runs diverged"
    )
    save_checkpoint(load_checkpoint(str(p_first)), str(p_cycled))
    assert p_cycled.read_bytes() == p_first.read_bytes(), (
        "save/load/save altered the checkpoint"
    )

    d_one, d_two = tmp_path / "one.jsonl", tmp_path / "two.jsonl"
    save_jsonl(gen_synthetic(SynthConfig(counts=counts), seed=7), str(d_one))
    save_jsonl(gen_synthetic(SynthConfig(counts=counts), seed=7), str(d_two))
    assert d_one.read_bytes() == d_two.read_bytes(), "data generation not deterministic"


# ---------------------------------------------------------------------------
# criterion 10: trajectory-file ingestion
# ---------------------------------------------------------------------------


def _file_rows(agent: int, frames) -> list:
    return [f"{f} {agent} {0.25 * i:.2f} {0.1 * i:.2f}" for i, f in enumerate(frames)]


def test_criterion_10_window_counts_and_malformed_line_numbers(tmp_path):
    # frame stride 10; a window needs t_p + t_f = 20 consecutive observations
    rows = (
        _file_rows(1, range(0, 250, 10))      # 25 obs  -> 6 windows
        + _file_rows(2, range(0, 210, 10))    # 21 obs  -> 2 windows
        + _file_rows(3, list(range(0, 200, 10)) + list(range(300, 500, 10)))
    )                                         # 20 + 20 -> 1 + 1 windows
    good = tmp_path / "good.txt"
    good.write_text("\n".join(rows) + "\n")
    loaded = load_ethucy(good)
    assert len(loaded.scenes) == 6 + 2 + 1 + 1
    assert loaded.warnings == ()

    broken_token = _file_rows(1, range(0, 250, 10))
    broken_token[6] = "60 1 oops 4.0"
    bad_token = tmp_path / "bad_token.txt"
    bad_token.write_text("\n".join(broken_token) + "\n")
    with pytest.raises(ValueError, match="line 7: non-numeric"):
        load_ethucy(bad_token)

    missing_column = _file_rows(1, range(0, 250, 10))
    missing_column[2] = "20 1 3.5"
    bad_cols = tmp_path / "bad_cols.txt"
    bad_cols.write_text("\n".join(missing_column) + "\n")
    with pytest.raises(ValueError, match="line 3: expected 4 columns"):
        load_ethucy(bad_cols)
