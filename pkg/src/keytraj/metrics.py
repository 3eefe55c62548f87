"""Displacement metrics and per-step error curves.

Conventions: a trajectory is ``(t_f, 2)``; multimodal predictions are
``(K, t_f, 2)`` per scene or ``(S, K, t_f, 2)`` for a set.  All metrics score
exactly the real future steps — any trailing extrapolated index must be
stripped before calling in here.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"trajectory shapes differ: pred {p.shape} vs gt {g.shape}")
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"expected (steps, 2) trajectories, got {p.shape}")
    return p, g


def ade(pred, gt) -> float:
    """Mean Euclidean distance over all future steps."""
    p, g = _pair(pred, gt)
    return float(np.linalg.norm(p - g, axis=-1).mean())


def fde(pred, gt) -> float:
    """Euclidean distance at the final future step."""
    p, g = _pair(pred, gt)
    return float(np.linalg.norm(p[-1] - g[-1]))


def _ranked(preds: np.ndarray, probs: Optional[np.ndarray], k: int) -> np.ndarray:
    """Top-k modes by descending probability (stable: ties keep mode order)."""
    n_modes = preds.shape[0]
    if k > n_modes:
        raise ValueError(f"k={k} exceeds the {n_modes} available modes")
    if probs is None:
        return preds[:k]
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (n_modes,):
        raise ValueError(f"probs must have shape ({n_modes},), got {probs.shape}")
    order = np.argsort(-probs, kind="stable")
    return preds[order[:k]]


def min_ade_k(preds, gt, k: int, probs=None) -> float:
    """Best ADE among the k most likely modes."""
    preds = np.asarray(preds, dtype=float)
    top = _ranked(preds, probs, k)
    return min(ade(p, gt) for p in top)


def mr_k(preds, gt, k: int, threshold: float = 2.0, probs=None) -> float:
    """1.0 if no top-k mode lands its final point within ``threshold`` meters."""
    preds = np.asarray(preds, dtype=float)
    top = _ranked(preds, probs, k)
    best_fde = min(fde(p, gt) for p in top)
    return 1.0 if best_fde > threshold else 0.0


def min_fde_1(preds, probs, gt) -> float:
    """FDE of the single most likely mode (ties go to the lowest index)."""
    preds = np.asarray(preds, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (preds.shape[0],):
        raise ValueError(f"probs must have shape ({preds.shape[0]},), got {probs.shape}")
    return fde(preds[int(np.argmax(probs))], gt)


@dataclass
class MetricsReport:
    """Scene-averaged metrics; ``min_ade``/``mr`` are keyed by requested k."""

    ade: float
    fde: float
    min_ade: Dict[int, float]
    min_fde_1: float
    mr: Dict[int, float]
    scene_count: int

    def to_dict(self) -> dict:
        return {
            "ade": self.ade,
            "fde": self.fde,
            "min_ade": {str(k): v for k, v in self.min_ade.items()},
            "min_fde_1": self.min_fde_1,
            "mr": {str(k): v for k, v in self.mr.items()},
            "scene_count": self.scene_count,
        }


def compute_report(
    preds: np.ndarray,
    probs: Optional[np.ndarray],
    gt: np.ndarray,
    ks: Sequence[int] = (5, 10),
    mr_threshold: float = 2.0,
) -> MetricsReport:
    """Aggregate metrics over a scene set.

    ``preds`` is (S, K, t_f, 2), ``probs`` (S, K) or None for uniform, ``gt``
    (S, t_f, 2).  Plain ``ade``/``fde`` average over every (scene, mode)
    pair.  A requested k larger than K is computed over all K modes (the
    report keeps the requested key).
    """
    preds = np.asarray(preds, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if preds.ndim != 4 or gt.ndim != 3 or preds.shape[0] != gt.shape[0]:
        raise ValueError(
            f"expected preds (S, K, steps, 2) and gt (S, steps, 2), "
            f"got {preds.shape} and {gt.shape}"
        )
    s, k_modes = preds.shape[:2]
    if probs is None:
        probs = np.full((s, k_modes), 1.0 / k_modes)
    probs = np.asarray(probs, dtype=float)

    dists = np.linalg.norm(preds - gt[:, None, :, :], axis=-1)  # (S, K, steps)
    report_ade = float(dists.mean())
    report_fde = float(dists[:, :, -1].mean())

    min_ades: Dict[int, float] = {}
    mrs: Dict[int, float] = {}
    for k in ks:
        k_eff = min(int(k), k_modes)
        min_ades[int(k)] = float(np.mean([
            min_ade_k(preds[i], gt[i], k_eff, probs=probs[i]) for i in range(s)
        ]))
        mrs[int(k)] = float(np.mean([
            mr_k(preds[i], gt[i], k_eff, threshold=mr_threshold, probs=probs[i])
            for i in range(s)
        ]))
    fde1 = float(np.mean([min_fde_1(preds[i], probs[i], gt[i]) for i in range(s)]))
    return MetricsReport(
        ade=report_ade,
        fde=report_fde,
        min_ade=min_ades,
        min_fde_1=fde1,
        mr=mrs,
        scene_count=s,
    )


@dataclass
class StepErrorCurve:
    """Mean pointwise L2 error at each future step for top-k mode sets."""

    steps: Tuple[int, ...]                 # 1..t_f
    errors: Dict[int, np.ndarray]          # k -> (t_f,) mean error per step

    def __post_init__(self) -> None:
        for k, arr in self.errors.items():
            if len(arr) != len(self.steps):
                raise ValueError(f"curve for k={k} has {len(arr)} entries, "
                                 f"expected {len(self.steps)}")


def step_error_curve(
    preds: np.ndarray,
    probs: Optional[np.ndarray],
    gt: np.ndarray,
    ks: Sequence[int] = (5, 10),
) -> StepErrorCurve:
    """Per-step error averaged jointly over (scene, top-k mode) pairs.

    A requested k beyond the available modes uses all modes.
    """
    preds = np.asarray(preds, dtype=float)
    gt = np.asarray(gt, dtype=float)
    s, k_modes, t_f = preds.shape[:3]
    if probs is None:
        probs = np.full((s, k_modes), 1.0 / k_modes)
    probs = np.asarray(probs, dtype=float)
    order = np.argsort(-probs, axis=1, kind="stable")          # (S, K)
    dists = np.linalg.norm(preds - gt[:, None, :, :], axis=-1)  # (S, K, t_f)
    rows = np.arange(s)[:, None]
    ranked = dists[rows, order]                                 # sorted by prob
    errors = {}
    for k in ks:
        k_eff = min(int(k), k_modes)
        errors[int(k)] = ranked[:, :k_eff, :].mean(axis=(0, 1))
    return StepErrorCurve(steps=tuple(range(1, t_f + 1)), errors=errors)


def curve_csv_text(curve: StepErrorCurve) -> str:
    """Render the curve as CSV: comment line, header, one row per step."""
    ks = sorted(curve.errors)
    buf = io.StringIO()
    buf.write("# per-step L2 error averaged jointly over (scene, top-k mode) pairs\n")
    buf.write("step," + ",".join(f"err_top{k}" for k in ks) + "\n")
    for i, step in enumerate(curve.steps):
        row = [str(step)] + [repr(float(curve.errors[k][i])) for k in ks]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
