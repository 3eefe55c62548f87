"""Granularity selection: learned confidences and pruned generation.

Each mode carries one confidence per granularity.  Training pushes the
predicted vector toward a softmax over negated average errors, so at
inference the argmax picks the granularity expected to track the ground
truth best — and only that granularity (plus its tail donors) needs to be
generated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .diffcore import Node, Tape, as_node, concat, mlp_apply, regression_loss, softmax
from .keysteps import GranularityTrajectory, trajectory_length
from .model import Model, forward, generate_trajectories


def confidence_scores(
    z_head: Node | np.ndarray,
    z_tail: Node | np.ndarray,
    a: Node | np.ndarray,
    layers: Sequence[Tuple],
    tape: Optional[Tape] = None,
) -> Node:
    """softmax of a two-layer head over (head key || tail key || features).

    Accepts single vectors or row batches; rows are normalized per row.
    """
    parts = [p if isinstance(p, Node) else as_node(np.asarray(p)) for p in (z_head, z_tail, a)]
    logits = mlp_apply(layers, concat(parts, axis=-1), tape=tape)
    return softmax(logits, axis=-1)


def confidence_target(ades: np.ndarray) -> np.ndarray:
    """softmax of negated errors along the last axis (stable, plain numpy)."""
    ades = np.asarray(ades, dtype=float)
    z = -ades
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def granularity_ades(
    trajectories: Sequence[GranularityTrajectory],
    future: np.ndarray,
    t_f: int,
) -> np.ndarray:
    """Average displacement over real steps 1..t_f for each granularity.

    Returns (M,) for single-row trajectories or (R, M) for batched ones.
    The trailing extrapolated index is excluded: it exists to keep section
    lengths consistent during optimization, not to be scored.
    """
    future = np.asarray(future, dtype=float)
    if future.shape[-2] != t_f:
        raise ValueError(f"future must cover exactly {t_f} steps, got {future.shape}")
    cols = []
    for traj in trajectories:
        vals = traj.values()
        pred = vals[..., :t_f, :]
        err = np.linalg.norm(pred - future, axis=-1).mean(axis=-1)
        cols.append(err)
    return np.stack(cols, axis=-1)


def gt_confidence(
    trajectories: Sequence[GranularityTrajectory],
    future: np.ndarray,
    t_f: int,
) -> np.ndarray:
    """Confidence target: softmax over granularities of minus their ADE."""
    return confidence_target(granularity_ades(trajectories, future, t_f))


def confidence_loss(predicted: Node | np.ndarray, target: np.ndarray):
    """Mean squared error between predicted and target confidence vectors."""
    pred_shape = predicted.value.shape if isinstance(predicted, Node) else np.shape(predicted)
    if tuple(pred_shape) != tuple(np.shape(target)):
        raise ValueError(
            f"confidence shapes differ: predicted {tuple(pred_shape)} "
            f"vs target {tuple(np.shape(target))}"
        )
    return regression_loss("mse", predicted, np.asarray(target))


@dataclass
class Selection:
    """Per-row outcome of confidence-pruned inference (world frame)."""

    confidences: np.ndarray          # (R, M)
    chosen: np.ndarray               # (R,) chosen granularity per row
    trajectory: np.ndarray           # (R, 1+2N, 2) the chosen trajectories
    mode_probs: np.ndarray           # (B, K)
    origins: np.ndarray              # (B, 2)
    generated: Tuple[int, ...]       # granularities actually generated


def select_and_generate(
    model: Model,
    past: np.ndarray,
    neighbors: np.ndarray,
    nbr_mask: np.ndarray,
    prune: bool = True,
) -> Selection:
    """Pick the most confident granularity per row and generate only that.

    With ``prune=False`` every granularity is generated and then indexed;
    both paths return bitwise-identical trajectories because generation for
    a granularity never depends on which others run alongside it.
    """
    cfg = model.config
    fwd = forward(
        model, past, neighbors, nbr_mask,
        granularities=(), want_conf=True, want_simul=False,
    )
    conf = fwd.conf.value
    chain = np.asarray(cfg.granularities)
    chosen = chain[np.argmax(conf, axis=-1)]  # first max wins -> smallest L

    levels = tuple(int(x) for x in chain) if not prune else tuple(sorted(set(chosen.tolist())))
    trajs = generate_trajectories(model, fwd.keys, fwd.features.features, levels)

    rows = conf.shape[0]
    steps = trajectory_length(cfg.t_f)
    out = np.empty((rows, steps, 2), dtype=np.dtype(cfg.dtype))
    for level, traj in trajs.items():
        mask = chosen == level
        if mask.any():
            out[mask] = traj.values()[mask]
    b = fwd.origins.shape[0]
    world = (out.reshape(b, cfg.k_modes, steps, 2)
             + fwd.origins[:, None, None, :]).reshape(rows, steps, 2)
    return Selection(
        confidences=conf,
        chosen=chosen,
        trajectory=world,
        mode_probs=fwd.mode_probs,
        origins=fwd.origins,
        generated=tuple(sorted(trajs)),
    )
