"""Tests for scene containers, synthetic generation, and file ingestion."""

import json

import numpy as np
import pytest

from keytraj.data import (
    FAMILIES,
    Scene,
    SceneSet,
    SynthConfig,
    extrapolate_gt,
    gen_synthetic,
    load_ethucy,
    load_jsonl,
    save_jsonl,
)


def _canonical_frame(points: np.ndarray) -> np.ndarray:
    """Translate so the t_p-1 point is the origin and rotate velocity onto +x."""
    t_p = 8  # callers use default config
    origin = points[t_p - 1]
    v = points[t_p - 1] - points[t_p - 2]
    theta = np.arctan2(v[1], v[0])
    c, s = np.cos(-theta), np.sin(-theta)
    rot = np.array([[c, -s], [s, c]])
    return (points - origin) @ rot.T


# ---------------------------------------------------------------------------
# Scene / SceneSet / serialization
# ---------------------------------------------------------------------------


def test_scene_validation():
    with pytest.raises(ValueError, match="past"):
        Scene(id="a", past=np.zeros((1, 2)), future=np.zeros((12, 2)))
    with pytest.raises(ValueError, match="non-finite"):
        Scene(id="a", past=np.full((8, 2), np.nan), future=np.zeros((12, 2)))
    with pytest.raises(ValueError, match="timestep"):
        Scene(id="a", past=np.zeros((8, 2)), future=np.zeros((12, 2)), timestep=0.0)
    with pytest.raises(ValueError, match="neighbors"):
        Scene(id="a", past=np.zeros((8, 2)), future=np.zeros((12, 2)),
              neighbors=(np.zeros((5, 2)),))


def test_sceneset_rejects_mixed_horizons():
    good = Scene(id="a", past=np.zeros((8, 2)), future=np.zeros((12, 2)))
    with pytest.raises(ValueError, match="horizons"):
        SceneSet(scenes=[good], t_p=8, t_f=10)


def test_jsonl_round_trip(tmp_path):
    cfg = SynthConfig(counts={f: 3 for f in FAMILIES})
    ss = gen_synthetic(cfg, seed=5)
    p = tmp_path / "scenes.jsonl"
    save_jsonl(ss, p)
    back = load_jsonl(p)
    assert len(back) == len(ss)
    for a, b in zip(ss.scenes, back.scenes):
        assert a.id == b.id
        np.testing.assert_array_equal(a.past, b.past)
        np.testing.assert_array_equal(a.future, b.future)
        assert a.timestep == b.timestep


def test_jsonl_field_names_exact(tmp_path):
    ss = gen_synthetic(SynthConfig(counts={"constant_velocity": 1}), seed=0)
    p = tmp_path / "one.jsonl"
    save_jsonl(ss, p)
    obj = json.loads(p.read_text().splitlines()[0])
    assert set(obj) == {"id", "past", "future", "neighbors", "timestep"}


def test_jsonl_save_is_byte_deterministic(tmp_path):
    ss = gen_synthetic(SynthConfig(counts={f: 2 for f in FAMILIES}), seed=9)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_jsonl(ss, p1)
    save_jsonl(ss, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_jsonl_load_rejects_missing_field(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": "x", "past": [[0,0],[1,1]], "future": [[2,2],[3,3]]}\n')
    with pytest.raises(ValueError, match="line 1"):
        load_jsonl(p)


def test_jsonl_load_rejects_nan(tmp_path):
    p = tmp_path / "nan.jsonl"
    obj = {"id": "x", "past": [[0, 0]] * 8, "future": [[0, 0]] * 12, "neighbors": [],
           "timestep": 0.4}
    obj["past"][0] = [float("nan"), 0]
    p.write_text(json.dumps(obj) + "\n")
    with pytest.raises(ValueError, match="non-finite"):
        load_jsonl(p)


# ---------------------------------------------------------------------------
# extrapolate_gt
# ---------------------------------------------------------------------------


def test_extrapolate_linear():
    f = np.array([[1.0, 0.0], [2.0, 0.0]])
    out = extrapolate_gt(f, 3)
    np.testing.assert_array_equal(out[-1], [3.0, 0.0])


def test_extrapolate_stationary():
    f = np.array([[5.0, 5.0], [5.0, 5.0]])
    np.testing.assert_array_equal(extrapolate_gt(f, 3)[-1], [5.0, 5.0])


def test_extrapolate_general():
    f = np.array([[0.0, 0.0], [1.0, 2.0]])
    np.testing.assert_array_equal(extrapolate_gt(f, 3)[-1], [2.0, 4.0])


def test_extrapolate_difference_identity_exact():
    # Formed as last + (last - prev), so the difference round-trips bit-for-bit
    # for these dyadic coordinates.  (Arbitrary decimals can differ by 1 ulp.)
    rng = np.random.default_rng(3)
    f = rng.integers(-64, 64, size=(12, 2)).astype(np.float64) * 0.25
    out = extrapolate_gt(f, 13)
    np.testing.assert_array_equal(out[-1] - out[-2], out[-2] - out[-3])


def test_extrapolate_validations():
    with pytest.raises(ValueError, match="at least 2"):
        extrapolate_gt(np.zeros((1, 2)), 2)
    with pytest.raises(ValueError, match="target_len"):
        extrapolate_gt(np.zeros((4, 2)), 6)


# ---------------------------------------------------------------------------
# gen_synthetic
# ---------------------------------------------------------------------------


def test_counts_and_determinism():
    cfg = SynthConfig(counts={"constant_velocity": 4, "constant_turn": 3,
                              "sinusoid": 2, "sudden_turn": 1})
    a = gen_synthetic(cfg, seed=12)
    b = gen_synthetic(cfg, seed=12)
    assert len(a) == 10
    fams = [s.id.rsplit("-", 1)[0] for s in a.scenes]
    assert fams.count("constant_velocity") == 4
    assert fams.count("sudden_turn") == 1
    for sa, sb in zip(a.scenes, b.scenes):
        np.testing.assert_array_equal(sa.past, sb.past)
        np.testing.assert_array_equal(sa.future, sb.future)


def test_family_streams_independent():
    base = SynthConfig(counts={"constant_velocity": 2, "constant_turn": 5})
    more = SynthConfig(counts={"constant_velocity": 9, "constant_turn": 5})
    a = gen_synthetic(base, seed=7)
    b = gen_synthetic(more, seed=7)
    turns_a = [s for s in a.scenes if s.id.startswith("constant_turn")]
    turns_b = [s for s in b.scenes if s.id.startswith("constant_turn")]
    for sa, sb in zip(turns_a, turns_b):
        np.testing.assert_array_equal(sa.past, sb.past)
        np.testing.assert_array_equal(sa.future, sb.future)


def test_constant_velocity_kinematics():
    cfg = SynthConfig(counts={"constant_velocity": 1}, speed_range=(1.0, 1.0),
                      noise_sigma=0.0, timestep=1.0)
    s = gen_synthetic(cfg, seed=2).scenes[0]
    pts = _canonical_frame(np.concatenate([s.past, s.future]))
    t_p, t_f = cfg.t_p, cfg.t_f
    want = np.stack([np.arange(-(t_p - 1), t_f + 1, dtype=float),
                     np.zeros(t_p + t_f)], axis=1)
    np.testing.assert_allclose(pts, want, atol=1e-9)


def test_constant_turn_lies_on_circle():
    # pinned speed and turn rate -> radius v/omega = 1.5/0.8 exactly known
    cfg = SynthConfig(counts={"constant_turn": 5}, speed_range=(1.5, 1.5),
                      turn_rate_range=(0.8, 0.8), noise_sigma=0.0)
    for s in gen_synthetic(cfg, seed=31).scenes:
        pts = np.concatenate([s.past, s.future])
        # algebraic (Kasa) circle fit: least squares on x^2+y^2 = 2cx*x + 2cy*y + d
        a = np.column_stack([2 * pts[:, 0], 2 * pts[:, 1], np.ones(len(pts))])
        b = (pts**2).sum(axis=1)
        (cx, cy, d), *_ = np.linalg.lstsq(a, b, rcond=None)
        radius = np.sqrt(d + cx**2 + cy**2)
        assert radius == pytest.approx(1.5 / 0.8, abs=1e-9)
        np.testing.assert_allclose(np.hypot(pts[:, 0] - cx, pts[:, 1] - cy),
                                   radius, atol=1e-9)


def test_noise_applies_to_past_only():
    counts = {"constant_velocity": 3}
    clean = gen_synthetic(SynthConfig(counts=counts, noise_sigma=0.0), seed=4)
    noisy = gen_synthetic(SynthConfig(counts=counts, noise_sigma=0.2), seed=4)
    for c, n in zip(clean.scenes, noisy.scenes):
        np.testing.assert_array_equal(c.future, n.future)
        assert np.abs(c.past - n.past).max() > 0


def test_sudden_turn_changes_heading_in_future():
    cfg = SynthConfig(counts={"sudden_turn": 20}, noise_sigma=0.0)
    for s in gen_synthetic(cfg, seed=8).scenes:
        full = np.concatenate([s.past, s.future])
        segs = np.diff(full, axis=0)
        headings = np.arctan2(segs[:, 1], segs[:, 0])
        d = np.abs(np.diff(headings))
        d = np.minimum(d, 2 * np.pi - d)
        # past is straight; exactly one kink, in the future, of at least pi/6
        assert d[: cfg.t_p - 2].max() < 1e-9
        kinks = np.where(d > 1e-6)[0]
        assert len(kinks) == 1
        assert d[kinks[0]] >= np.pi / 6 - 1e-9


def test_synth_config_validation():
    with pytest.raises(ValueError, match="families"):
        SynthConfig(counts={"zigzag": 1})
    with pytest.raises(ValueError, match=">= 0"):
        SynthConfig(counts={"sinusoid": -1})
    with pytest.raises(ValueError, match="speed_range"):
        SynthConfig(speed_range=(2.0, 1.0))
    with pytest.raises(ValueError, match="noise_sigma"):
        SynthConfig(noise_sigma=-0.1)


# ---------------------------------------------------------------------------
# load_ethucy
# ---------------------------------------------------------------------------


def _write(tmp_path, name, rows):
    p = tmp_path / name
    p.write_text("\n".join(rows) + "\n")
    return p


def _agent_rows(agent, frames, x0=0.0, y0=0.0, step=0.1):
    return [f"{f} {agent} {x0 + i * step:.3f} {y0:.3f}" for i, f in enumerate(frames)]


def test_exactly_20_frames_one_scene(tmp_path):
    p = _write(tmp_path, "a.txt", _agent_rows(1, range(0, 200, 10)))
    ss = load_ethucy(p)
    assert len(ss) == 1
    assert ss.t_p == 8 and ss.t_f == 12


def test_19_frames_zero_scenes(tmp_path):
    p = _write(tmp_path, "a.txt", _agent_rows(1, range(0, 190, 10)))
    assert len(load_ethucy(p)) == 0


def test_window_count_minus_19(tmp_path):
    p = _write(tmp_path, "a.txt", _agent_rows(1, range(0, 250, 10)))
    assert len(load_ethucy(p)) == 25 - 19


def test_gap_splits_runs(tmp_path):
    # 22 frames, a gap (2 strides), then 21 frames: (22-19) + (21-19) = 5
    frames = list(range(0, 220, 10)) + list(range(240, 450, 10))
    p = _write(tmp_path, "a.txt", _agent_rows(1, frames))
    assert len(load_ethucy(p)) == 5


def test_malformed_token_line_number(tmp_path):
    rows = _agent_rows(1, range(0, 200, 10))
    rows[4] = "12 3 x 4.0"
    p = _write(tmp_path, "bad.txt", rows)
    with pytest.raises(ValueError, match="line 5"):
        load_ethucy(p)


def test_wrong_column_count_line_number(tmp_path):
    rows = _agent_rows(1, range(0, 200, 10))
    rows[9] = "10 1 3.0"
    p = _write(tmp_path, "bad.txt", rows)
    with pytest.raises(ValueError, match="line 10"):
        load_ethucy(p)


def test_duplicate_observation_rejected(tmp_path):
    rows = _agent_rows(1, [0, 10, 10, 20])
    p = _write(tmp_path, "dup.txt", rows)
    with pytest.raises(ValueError, match="duplicate"):
        load_ethucy(p)


def test_irregular_stride_agent_skipped_with_warning(tmp_path):
    rows = _agent_rows(1, range(0, 200, 10))
    rows += _agent_rows(2, [0, 10, 25, 40], x0=5.0)  # 15 is not a multiple of 10
    p = _write(tmp_path, "mix.txt", rows)
    ss = load_ethucy(p)
    assert len(ss) == 1
    assert len(ss.warnings) == 1 and "agent 2" in ss.warnings[0]


def test_neighbors_collected_and_ranked(tmp_path):
    rows = _agent_rows(1, range(0, 200, 10), x0=0.0)
    rows += _agent_rows(2, range(0, 200, 10), x0=1.0, y0=1.0)
    rows += _agent_rows(3, range(0, 200, 10), x0=50.0, y0=50.0)
    p = _write(tmp_path, "nbr.txt", rows)
    ss = load_ethucy(p)
    assert len(ss) == 3
    scene1 = next(s for s in ss.scenes if s.id.startswith("1:"))
    assert len(scene1.neighbors) == 2
    # nearest (agent 2) first
    d0 = np.hypot(*(scene1.neighbors[0][-1] - scene1.past[-1]))
    d1 = np.hypot(*(scene1.neighbors[1][-1] - scene1.past[-1]))
    assert d0 < d1


def test_neighbor_needs_full_past_coverage(tmp_path):
    rows = _agent_rows(1, range(0, 200, 10))
    # agent 2 only appears during the future half of agent 1's window
    rows += _agent_rows(2, range(100, 200, 10), x0=2.0)
    p = _write(tmp_path, "partial.txt", rows)
    scene1 = load_ethucy(p).scenes[0]
    assert len(scene1.neighbors) == 0


def test_non_integral_frame_rejected(tmp_path):
    p = _write(tmp_path, "b.txt", ["10.5 1 0.0 0.0"])
    with pytest.raises(ValueError, match="integral"):
        load_ethucy(p)
