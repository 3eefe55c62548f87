"""Key-step groups, position embeddings, spatial-constraint loss, and the
coarse-to-fine generation loop.

Future steps are indexed 1..1+2N where N is the smallest integer with
T_f <= 1 + 2N; index T_f+1..1+2N (at most one step) is supervised against a
linearly extrapolated ground-truth point.  A group at granularity L keeps
every L-th index starting from 1.  Generation fills the midpoint of every
adjacent pair at interval L, then L/2, and so on down to 2; trailing indices
a coarse group cannot reach are copied from the next-finer trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .diffcore import (
    Node,
    ParamTensor,
    Tape,
    as_node,
    concat,
    getitem,
    matmul,
    mlp_apply,
    regression_loss,
    reshape,
    stack,
)

Coords = Union[Node, np.ndarray]


def fine_key_count(t_f: int) -> int:
    """Smallest N with 1 + (N-1)*2 < t_f <= 1 + N*2; the fine group has N+1 keys."""
    if t_f < 2:
        raise ValueError(f"t_f must be >= 2, got {t_f}")
    return t_f // 2  # == ceil((t_f - 1) / 2)


def _lift_param(p, tape: Tape | None) -> Node:
    if isinstance(p, ParamTensor):
        return tape.leaf(p) if tape is not None else as_node(p.values)
    return as_node(p)


def trajectory_length(t_f: int) -> int:
    """Indices run 1..1+2N, one step past t_f when t_f is even."""
    return 1 + 2 * fine_key_count(t_f)


@dataclass(frozen=True)
class KeyStepGroup:
    granularity: int
    indices: Tuple[int, ...]
    covered_until: int
    inherits_tail_from: Optional[int] = None

    def __post_init__(self) -> None:
        if self.indices[0] != 1:
            raise ValueError("key indices must start at 1")
        for a, b in zip(self.indices, self.indices[1:]):
            if b - a != self.granularity:
                raise ValueError(
                    f"consecutive key indices must differ by {self.granularity}"
                )
        if self.covered_until != self.indices[-1]:
            raise ValueError("covered_until must equal the largest key index")


def build_key_groups(t_f: int, granularities: Sequence[int]) -> List[KeyStepGroup]:
    """Fine group from the key-count bound; each coarser group is the
    every-other downsample of the previous one, truncated to what it reaches."""
    gs = sorted(set(int(g) for g in granularities))
    if not gs or gs[0] != 2:
        raise ValueError(f"granularities must include 2, got {sorted(granularities)}")
    for a, b in zip(gs, gs[1:]):
        if b != 2 * a:
            raise ValueError(f"granularities must form a doubling chain, got {gs}")
    n = fine_key_count(t_f)
    full = 1 + 2 * n
    groups: List[KeyStepGroup] = []
    indices = tuple(1 + 2 * i for i in range(n + 1))
    prev_l = None
    for level in gs:
        if level > 2:
            if len(indices) < 2:
                raise ValueError(
                    f"granularity {level} has no room at t_f={t_f}: "
                    f"the finer group has only {len(indices)} key(s)"
                )
            indices = indices[::2]
        inherits = prev_l if indices[-1] < full else None
        groups.append(
            KeyStepGroup(
                granularity=level,
                indices=indices,
                covered_until=indices[-1],
                inherits_tail_from=inherits,
            )
        )
        prev_l = level
    return groups


@dataclass(frozen=True)
class KeyPrediction:
    """Fine-granularity key coordinates; leading axes are batch axes."""

    indices: Tuple[int, ...]
    coords: Node  # (..., len(indices), 2)

    def __post_init__(self) -> None:
        if self.coords.value.shape[-2] != len(self.indices):
            raise ValueError(
                f"coords cover {self.coords.value.shape[-2]} keys but "
                f"{len(self.indices)} indices were given"
            )


def predict_keys(a: Coords, layers: Sequence[Tuple], indices: Sequence[int],
                 tape: Tape | None = None) -> KeyPrediction:
    """Run the key head on agent features and reshape to (..., n_keys, 2)."""
    out = mlp_apply(layers, a, tape=tape)
    width = out.value.shape[-1]
    n_keys = len(indices)
    if width != 2 * n_keys:
        raise ValueError(f"key head emits width {width}, expected {2 * n_keys}")
    rows = out.value.shape[0] if out.value.ndim == 2 else None
    shape = (rows, n_keys, 2) if rows is not None else (n_keys, 2)
    return KeyPrediction(indices=tuple(indices), coords=reshape(out, shape))


def downsample_keys(keys: KeyPrediction, group: KeyStepGroup) -> Node:
    """Slice the fine keys at this group's indices (gradient flows through)."""
    positions = []
    for idx in group.indices:
        if idx not in keys.indices:
            raise ValueError(f"group index {idx} is not a fine key index")
        positions.append(keys.indices.index(idx))
    sel = np.array(positions)
    if keys.coords.value.ndim == 3:
        return getitem(keys.coords, (slice(None), sel, slice(None)))
    return getitem(keys.coords, (sel, slice(None)))


# ---------------------------------------------------------------------------
# position embeddings
# ---------------------------------------------------------------------------


@dataclass
class PositionEmbeddingTable:
    """Embeddings for step indices 0..1+2N (row count 2+2N)."""

    mode: str                       # "static_sinusoidal" | "learnable"
    size: int
    dim: int
    table: Union[np.ndarray, ParamTensor]

    def row_values(self, index: int) -> np.ndarray:
        arr = self.table.values if isinstance(self.table, ParamTensor) else self.table
        return arr[index]


def make_position_table(t_f: int, dim: int, mode: str = "static_sinusoidal",
                        param: ParamTensor | None = None,
                        dtype=np.float64) -> PositionEmbeddingTable:
    size = trajectory_length(t_f) + 1  # indices 0..1+2N inclusive
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    if mode == "static_sinusoidal":
        table = np.zeros((size, dim), dtype=np.float64)
        half = np.arange(dim // 2, dtype=np.float64)
        freqs = 1.0 / (10000.0 ** (2.0 * half / dim))
        pos = np.arange(size, dtype=np.float64)[:, None]
        table[:, 0::2] = np.sin(pos * freqs)
        table[:, 1::2] = np.cos(pos * freqs)
        return PositionEmbeddingTable(mode=mode, size=size, dim=dim,
                                      table=table.astype(dtype))
    if mode == "learnable":
        if param is None:
            raise ValueError("learnable mode requires the table parameter")
        if param.shape != (size, dim):
            raise ValueError(f"learnable table must be shape {(size, dim)}, got {param.shape}")
        return PositionEmbeddingTable(mode=mode, size=size, dim=dim, table=param)
    raise ValueError(f"unknown position-embedding mode {mode!r}")


def position_embedding(index: int, table: PositionEmbeddingTable) -> np.ndarray:
    """Current values of one embedding row (use the graph path for training)."""
    if not 0 <= index < table.size:
        raise ValueError(f"index {index} out of range 0..{table.size - 1}")
    return table.row_values(index)


def _embedding_node(index: int, table: PositionEmbeddingTable,
                    tape: Tape | None) -> Node:
    if not 0 <= index < table.size:
        raise ValueError(f"index {index} out of range 0..{table.size - 1}")
    if isinstance(table.table, ParamTensor):
        if tape is None:
            return as_node(table.table.values[index])
        return getitem(tape.leaf(table.table), index)
    return as_node(table.table[index])


# ---------------------------------------------------------------------------
# midpoint fill
# ---------------------------------------------------------------------------


@dataclass
class FillHeadParams:
    """Per-interval fill head: endpoint projections plus a two-layer MLP."""

    interval: int
    w_head: ParamTensor
    w_tail: ParamTensor
    layers: Tuple[Tuple, ...]  # ((w1, b1, act), (w2, b2, None))

    def __post_init__(self) -> None:
        if self.w_head is self.w_tail:
            raise ValueError("head and tail projections must be distinct tensors")


def fill_midpoint(z_i: Coords, i: int, z_j: Coords, j: int, a: Coords,
                  head: FillHeadParams, table: PositionEmbeddingTable,
                  tape: Tape | None = None) -> Node:
    """Predict the step halfway between two already-predicted steps.

    Projects both endpoints to the embedding width, adds their step
    embeddings, concatenates the agent features, and applies the head's MLP.
    """
    if j - i != head.interval:
        raise ValueError(f"interval mismatch: j-i={j - i} but head expects {head.interval}")
    if (i + j) % 2 != 0:
        raise ValueError(f"midpoint of ({i}, {j}) is not an integer index")
    zi, zj, an = as_node(z_i), as_node(z_j), as_node(a)
    was_vector = zi.value.ndim == 1
    if was_vector:
        zi, zj, an = (reshape(x, (1, -1)) for x in (zi, zj, an))
    wh = _lift_param(head.w_head, tape)
    wt = _lift_param(head.w_tail, tape)
    p_i = _embedding_node(i, table, tape)
    p_j = _embedding_node(j, table, tape)
    h = matmul(zi, wh) + p_i
    t = matmul(zj, wt) + p_j
    x = concat([h, t, an], axis=1)
    out = mlp_apply(head.layers, x, tape=tape)
    if was_vector:
        out = reshape(out, (2,))
    return out


# ---------------------------------------------------------------------------
# spatial-constraint loss
# ---------------------------------------------------------------------------


def spatial_loss(keys: Coords, f_values: Coords, group: KeyStepGroup,
                 kind: str = "mse", logvar: Coords | None = None,
                 max_index: int | None = None) -> Node:
    """Regression on positional differences between adjacent keys.

    ``keys``: (..., n_keys, 2) coordinates at the group's indices.
    ``f_values``: ground truth laid out so position t-1 holds step index t;
    it must cover every index a section touches (extrapolate the tail, or cap
    sections with ``max_index`` to stay inside the real horizon).
    ``logvar`` supplies per-section log-variances for ``nll_gaussian``.
    """
    keys_n = as_node(keys)
    if keys_n.value.ndim == 2:
        keys_n = reshape(keys_n, (1,) + keys_n.value.shape)
    f_arr = f_values.value if isinstance(f_values, Node) else np.asarray(f_values)
    if f_arr.ndim == 2:
        f_arr = f_arr[None, :, :]
    if keys_n.value.shape[-2] != len(group.indices):
        raise ValueError(
            f"keys cover {keys_n.value.shape[-2]} steps but the group has "
            f"{len(group.indices)} indices"
        )
    all_pairs = list(zip(group.indices, group.indices[1:]))
    keep = [
        p for p, (_, ib) in enumerate(all_pairs)
        if max_index is None or ib <= max_index
    ]
    pairs = [all_pairs[p] for p in keep]
    if not pairs:
        return as_node(np.zeros((), dtype=keys_n.value.dtype))
    needed = max(ib for _, ib in pairs)
    if f_arr.shape[-2] < needed:
        raise ValueError(
            f"ground truth covers {f_arr.shape[-2]} steps but section ending at "
            f"index {needed} is required"
        )
    pos = {idx: p for p, idx in enumerate(group.indices)}
    sel_a = np.array([pos[ia] for ia, _ in pairs])
    sel_b = np.array([pos[ib] for _, ib in pairs])
    pred_diff = getitem(keys_n, (slice(None), sel_b, slice(None))) - getitem(
        keys_n, (slice(None), sel_a, slice(None))
    )
    gt_diff = f_arr[:, [ib - 1 for _, ib in pairs], :] - f_arr[:, [ia - 1 for ia, _ in pairs], :]
    gt_diff = np.broadcast_to(gt_diff, pred_diff.value.shape)
    if kind == "nll_gaussian":
        if logvar is None:
            raise ValueError("nll_gaussian spatial loss needs per-section log-variances")
        lv = as_node(logvar)
        if lv.value.ndim == 2:
            lv = reshape(lv, (1,) + lv.value.shape)
        if lv.value.shape[-2] != len(all_pairs):
            raise ValueError(
                f"log-variance covers {lv.value.shape[-2]} sections but the "
                f"group has {len(all_pairs)}"
            )
        if len(keep) != len(all_pairs):
            lv = getitem(lv, (slice(None), np.array(keep), slice(None)))
        lv = lv + as_node(np.zeros(pred_diff.value.shape, dtype=lv.value.dtype))
        return regression_loss(kind, (pred_diff, lv), gt_diff)
    return regression_loss(kind, pred_diff, gt_diff)


# ---------------------------------------------------------------------------
# generation loop
# ---------------------------------------------------------------------------


@dataclass
class GranularityTrajectory:
    """Coordinates for every index 1..1+2N plus how each one was produced."""

    granularity: int
    points: Dict[int, Node]        # index -> (..., 2) coordinates
    provenance: Dict[int, str]     # "key" | "filled(l)" | "inherited"

    @property
    def max_index(self) -> int:
        return max(self.points)

    def node(self) -> Node:
        idxs = sorted(self.points)
        return stack([self.points[i] for i in idxs], axis=-2)

    def values(self) -> np.ndarray:
        return self.node().value


def generate_trajectory(
    group: KeyStepGroup,
    keys: Coords,
    a: Coords,
    fill_head_for: Callable[[int], FillHeadParams],
    table: PositionEmbeddingTable,
    donor: GranularityTrajectory | None = None,
    tape: Tape | None = None,
) -> GranularityTrajectory:
    """Halve the interval level by level, filling every midpoint, then copy
    any trailing indices from the next-finer trajectory."""
    keys_n = as_node(keys)
    batched = keys_n.value.ndim == 3
    if keys_n.value.shape[-2] != len(group.indices):
        raise ValueError(
            f"got {keys_n.value.shape[-2]} key coordinates for "
            f"{len(group.indices)} group indices"
        )
    points: Dict[int, Node] = {}
    provenance: Dict[int, str] = {}
    for p, idx in enumerate(group.indices):
        sel = (slice(None), p, slice(None)) if batched else (p, slice(None))
        points[idx] = getitem(keys_n, sel)
        provenance[idx] = "key"
    level = group.granularity
    while level >= 2:
        defined = sorted(points)
        for ia, ib in zip(defined, defined[1:]):
            if ib - ia != level:
                continue
            mid = (ia + ib) // 2
            points[mid] = fill_midpoint(
                points[ia], ia, points[ib], ib, a, fill_head_for(level), table, tape
            )
            provenance[mid] = f"filled({level})"
        level //= 2
    if group.inherits_tail_from is not None:
        if donor is None:
            raise ValueError(
                f"group L={group.granularity} inherits its tail from "
                f"L={group.inherits_tail_from} but no donor trajectory was given"
            )
        if donor.granularity != group.inherits_tail_from:
            raise ValueError(
                f"donor has granularity {donor.granularity}, expected "
                f"{group.inherits_tail_from}"
            )
        for idx in range(group.covered_until + 1, donor.max_index + 1):
            points[idx] = donor.points[idx]
            provenance[idx] = "inherited"
    return GranularityTrajectory(group.granularity, points, provenance)
