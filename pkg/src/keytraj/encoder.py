"""Multimodal scene encoder and the simultaneous decoding baseline.

A deliberately small stand-in for a full forecasting backbone: the flattened,
origin-normalized past goes through a two-layer MLP into a shared latent;
mean-pooled neighbor projections are added; K learned mode queries branch the
latent into per-mode agent features.  ``baseline_decode`` emits the whole
trajectory in one shot and doubles as the decoder for the inherent loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .diffcore import (
    Node,
    ParamTensor,
    Tape,
    as_node,
    cross_entropy,
    getitem,
    mlp_apply,
    mul,
    reduce_sum,
    regression_loss,
    reshape,
)
from .data import Scene


@dataclass
class EncoderParams:
    """Layer bundles for the encoder; tensors live in the model registry."""

    past_layers: Tuple[Tuple, ...]     # 2*T_p -> hidden -> D_A
    nbr_proj: Tuple[ParamTensor, ParamTensor] | None  # (weight 2*T_p x D_A, bias)
    mode_queries: ParamTensor          # (K, D_A)
    mode_layers: Tuple[Tuple, ...]     # D_A -> hidden -> K
    feature_layers: Tuple[Tuple, ...]  # D_A -> hidden -> D_A
    simul_layers: Tuple[Tuple, ...]    # D_A -> hidden -> 2*(1+2N)


@dataclass
class AgentFeatures:
    """Per-mode feature rows (B*K, D_A) plus per-scene mode logits (B, K)."""

    features: Node
    mode_logits: Node
    k_modes: int

    @property
    def mode_probs(self) -> np.ndarray:
        z = self.mode_logits.value
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


def pack_scenes(scenes: Sequence[Scene], t_p: int, max_neighbors: int = 8,
                dtype=np.float64):
    """Stack scenes into (B, T_p, 2) past, (B, M, T_p, 2) neighbors, (B, M) mask."""
    b = len(scenes)
    past = np.zeros((b, t_p, 2), dtype=dtype)
    nbr = np.zeros((b, max_neighbors, t_p, 2), dtype=dtype)
    mask = np.zeros((b, max_neighbors), dtype=dtype)
    for i, s in enumerate(scenes):
        if s.t_p != t_p:
            raise ValueError(f"scene {s.id!r} has T_p={s.t_p}, expected {t_p}")
        past[i] = s.past
        for j, track in enumerate(s.neighbors[:max_neighbors]):
            nbr[i, j] = track
            mask[i, j] = 1.0
    return past, nbr, mask


def encode(past: np.ndarray, neighbors: np.ndarray, nbr_mask: np.ndarray,
           params: EncoderParams, k_modes: int, tape: Tape | None = None,
           use_neighbors: bool = True) -> AgentFeatures:
    """Encode origin-normalized pasts into per-mode agent features.

    ``past`` is (B, T_p, 2) with the last observed point already at the
    origin; neighbors share the same frame.  Rows of the output features are
    ordered scene-major: row b*K + k is mode k of scene b.
    """
    b, t_p, _ = past.shape
    flat = as_node(past.reshape(b, 2 * t_p))
    latent = mlp_apply(params.past_layers, flat, tape=tape)
    if use_neighbors and params.nbr_proj is not None and neighbors.size:
        m = neighbors.shape[1]
        w, bias = params.nbr_proj
        nflat = as_node(neighbors.reshape(b * m, 2 * t_p))
        proj = mlp_apply([(w, bias, "relu")], nflat, tape=tape)
        proj = reshape(proj, (b, m, -1))
        denom = np.maximum(nbr_mask.sum(axis=1, keepdims=True), 1.0)
        weights = (nbr_mask / denom).astype(past.dtype)[:, :, None]
        pooled = reduce_sum(mul(proj, weights), axis=1)
        latent = latent + pooled
    d_a = latent.value.shape[-1]
    queries = tape.leaf(params.mode_queries) if tape is not None else as_node(
        params.mode_queries.values
    )
    # per-mode branch: latent row + query_k, laid out scene-major
    lat_rows = reshape(latent, (b, 1, d_a)) + np.zeros((1, k_modes, 1), dtype=past.dtype)
    tiled = reshape(lat_rows, (b * k_modes, d_a))
    qtile = reshape(queries, (1, k_modes, d_a)) + np.zeros((b, 1, 1), dtype=past.dtype)
    qrows = reshape(qtile, (b * k_modes, d_a))
    features = mlp_apply(params.feature_layers, tiled + qrows, tape=tape)
    mode_logits = mlp_apply(params.mode_layers, latent, tape=tape)
    return AgentFeatures(features=features, mode_logits=mode_logits, k_modes=k_modes)


def baseline_decode(features: Node, simul_layers: Sequence[Tuple],
                    tape: Tape | None = None) -> Node:
    """One-shot decoder: every trajectory coordinate from a single MLP pass."""
    out = mlp_apply(simul_layers, features, tape=tape)
    width = out.value.shape[-1]
    if width % 2 != 0:
        raise ValueError(f"decoder emits odd width {width}")
    steps = width // 2
    if out.value.ndim == 2:
        return reshape(out, (out.value.shape[0], steps, 2))
    return reshape(out, (steps, 2))


def winner_index(trajs: np.ndarray, future: np.ndarray, t_f: int) -> int:
    """argmin over modes of ADE against the real horizon (steps 1..t_f)."""
    if trajs.ndim != 3:
        raise ValueError(f"expected (K, steps, 2) trajectories, got {trajs.shape}")
    d = trajs[:, :t_f, :] - future[None, :t_f, :]
    ades = np.sqrt((d**2).sum(axis=2)).mean(axis=1)
    return int(np.argmin(ades))


def inherent_loss(trajs: Node, mode_logits: Node, future_ext: np.ndarray,
                  t_f: int) -> Node:
    """Winner-takes-all regression plus mode classification for one scene.

    ``trajs`` is (K, steps, 2); the winner is the mode with the smallest ADE
    over real steps 1..t_f, but its regression covers all emitted steps
    (including the extrapolated tail index).
    """
    k = winner_index(trajs.value, future_ext, t_f)
    winner = getitem(trajs, (k, slice(None), slice(None)))
    reg = regression_loss("mse", winner, future_ext)
    ce = cross_entropy(mode_logits, k)
    return reg + ce
