"""Parameter registry and the batched forward pass.

All learnable tensors live in one flat name -> ParamTensor dict created in a
fixed order from (config, seed), so checkpoints, optimizers, and gradient
maps agree on names.  The forward pass is row-batched: row b*K + k holds mode
k of scene b, and single-scene inference is just B = 1 of the same code path.
Scenes are normalized so the agent's last observed point is the origin; the
de-normalization offset is returned alongside the outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import recursive_decode
from .config import TrainConfig
from .data import Scene
from .diffcore import Node, ParamTensor, Tape, concat, getitem, mlp_apply, softmax
from .encoder import AgentFeatures, EncoderParams, baseline_decode, encode, pack_scenes
from .keysteps import (
    FillHeadParams,
    GranularityTrajectory,
    KeyPrediction,
    KeyStepGroup,
    build_key_groups,
    downsample_keys,
    fine_key_count,
    generate_trajectory,
    make_position_table,
    predict_keys,
    trajectory_length,
)

MAX_NEIGHBORS = 8


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_params(config: TrainConfig, seed: int | None = None) -> Dict[str, ParamTensor]:
    """Create every tensor in a fixed order from one seeded stream."""
    rng = np.random.default_rng([int(config.seed if seed is None else seed), 0])
    dtype = np.dtype(config.dtype)
    reg: Dict[str, ParamTensor] = {}

    def dense(prefix: str, fan_in: int, fan_out: int) -> None:
        reg[f"{prefix}.w"] = ParamTensor(
            f"{prefix}.w", _glorot(rng, fan_in, fan_out, (fan_in, fan_out), dtype)
        )
        reg[f"{prefix}.b"] = ParamTensor(f"{prefix}.b", np.zeros(fan_out, dtype=dtype))

    def mlp2(prefix: str, fan_in: int, fan_out: int) -> None:
        dense(f"{prefix}.l1", fan_in, config.hidden)
        dense(f"{prefix}.l2", config.hidden, fan_out)

    t_p, t_f = config.t_p, config.t_f
    n = fine_key_count(t_f)
    full_len = trajectory_length(t_f)
    d, d_a, k = config.d, config.d_a, config.k_modes
    m = config.n_granularities

    mlp2("enc.past", 2 * t_p, d_a)
    if config.use_neighbors:
        dense("enc.nbr", 2 * t_p, d_a)
    reg["enc.mode_query"] = ParamTensor(
        "enc.mode_query", _glorot(rng, k, d_a, (k, d_a), dtype)
    )
    mlp2("enc.feat", d_a, d_a)
    mlp2("enc.mode", d_a, k)
    mlp2("enc.simul", d_a, 2 * full_len)
    mlp2("key", d_a, 2 * (n + 1))
    if config.loss_kind == "nll_gaussian":
        groups = build_key_groups(t_f, config.granularities)
        n_sections = sum(len(g.indices) - 1 for g in groups)
        mlp2("keyvar", d_a, 2 * n_sections)
    if config.pos_mode == "learnable":
        # start from the sinusoidal table so rows are distinct from step one
        static = make_position_table(t_f, d, "static_sinusoidal").table.astype(dtype)
        reg["pos.table"] = ParamTensor("pos.table", static)
    for prefix in _fill_prefixes(config):
        for proj in ("head_proj", "tail_proj"):
            name = f"{prefix}.{proj}"
            reg[name] = ParamTensor(name, _glorot(rng, 2, d, (2, d), dtype))
        mlp2(f"{prefix}.mlp", 2 * d + d_a, 2)
    mlp2("conf", 2 + 2 + d_a, m)
    # gated recurrent baseline head: input = previous 2-D point, hidden = d_a
    dense("rec.init", d_a, d_a)
    for gate in ("z", "r", "h"):
        reg[f"rec.w{gate}"] = ParamTensor(
            f"rec.w{gate}", _glorot(rng, 2, d_a, (2, d_a), dtype)
        )
        reg[f"rec.u{gate}"] = ParamTensor(
            f"rec.u{gate}", _glorot(rng, d_a, d_a, (d_a, d_a), dtype)
        )
        reg[f"rec.b{gate}"] = ParamTensor(f"rec.b{gate}", np.zeros(d_a, dtype=dtype))
    dense("rec.out", d_a, 2)
    return reg


def _fill_prefixes(config: TrainConfig) -> List[str]:
    if config.share_fill_heads:
        return [f"fill.l{level}" for level in config.granularities]
    out = []
    for big_l in config.granularities:
        level = big_l
        while level >= 2:
            out.append(f"fill.g{big_l}.l{level}")
            level //= 2
    return out


@dataclass
class Model:
    """Config + parameter registry + derived structures."""

    config: TrainConfig
    params: Dict[str, ParamTensor]

    def __post_init__(self) -> None:
        self.groups: List[KeyStepGroup] = build_key_groups(
            self.config.t_f, self.config.granularities
        )
        self.fine_indices: Tuple[int, ...] = self.groups[0].indices
        table_param = self.params.get("pos.table")
        self.table = make_position_table(
            self.config.t_f,
            self.config.d,
            self.config.pos_mode,
            param=table_param,
            dtype=np.dtype(self.config.dtype),
        )

    # -- constructors ----------------------------------------------------
    @classmethod
    def init(cls, config: TrainConfig, seed: int | None = None) -> "Model":
        return cls(config=config, params=build_params(config, seed))

    # -- parameter views ---------------------------------------------------
    def _mlp2(self, prefix: str, act: str | None = "default") -> Tuple[Tuple, ...]:
        a = self.config.activation if act == "default" else act
        return (
            (self.params[f"{prefix}.l1.w"], self.params[f"{prefix}.l1.b"], a),
            (self.params[f"{prefix}.l2.w"], self.params[f"{prefix}.l2.b"], None),
        )

    def encoder_params(self) -> EncoderParams:
        nbr = None
        if self.config.use_neighbors:
            nbr = (self.params["enc.nbr.w"], self.params["enc.nbr.b"])
        return EncoderParams(
            past_layers=self._mlp2("enc.past"),
            nbr_proj=nbr,
            mode_queries=self.params["enc.mode_query"],
            mode_layers=self._mlp2("enc.mode"),
            feature_layers=self._mlp2("enc.feat"),
            simul_layers=self._mlp2("enc.simul"),
        )

    def fill_head(self, level: int, group_l: int | None = None) -> FillHeadParams:
        if self.config.share_fill_heads:
            prefix = f"fill.l{level}"
        else:
            if group_l is None:
                raise ValueError("unshared fill heads need the group granularity")
            prefix = f"fill.g{group_l}.l{level}"
        if f"{prefix}.head_proj" not in self.params:
            raise KeyError(f"no fill head for interval {level} ({prefix})")
        return FillHeadParams(
            interval=level,
            w_head=self.params[f"{prefix}.head_proj"],
            w_tail=self.params[f"{prefix}.tail_proj"],
            layers=self._mlp2(f"{prefix}.mlp"),
        )

    def key_layers(self) -> Tuple[Tuple, ...]:
        return self._mlp2("key")

    def conf_layers(self) -> Tuple[Tuple, ...]:
        return self._mlp2("conf")

    def keyvar_layers(self) -> Tuple[Tuple, ...]:
        return self._mlp2("keyvar")

    def tail_position(self) -> int:
        """Fine-key position feeding the confidence head's tail input."""
        if self.config.tail_key == "last":
            return len(self.fine_indices) - 1
        below = [p for p, idx in enumerate(self.fine_indices) if idx <= self.config.t_f]
        return below[-1]

    def trainable_params(self, freeze_prefixes: Sequence[str] = ()) -> List[ParamTensor]:
        return [
            p
            for name, p in self.params.items()
            if not any(name.startswith(pre) for pre in freeze_prefixes)
        ]


@dataclass
class ForwardOut:
    """Everything one batched pass produces; Nodes stay attached to the tape."""

    origins: np.ndarray                     # (B, 2) de-normalization offsets
    features: AgentFeatures
    keys: KeyPrediction                     # coords (B*K, N+1, 2), normalized
    trajs: Dict[int, GranularityTrajectory]
    conf: Optional[Node]                    # (B*K, M) softmax confidences
    simul: Optional[Node]                   # (B*K, 1+2N, 2)
    recursive: Optional[Node]               # (B*K, 1+2N, 2)
    keyvar: Optional[Node]                  # (B*K, 2 * total sections)

    @property
    def mode_probs(self) -> np.ndarray:
        return self.features.mode_probs


def needed_granularities(groups: List[KeyStepGroup],
                         wanted: Iterable[int]) -> List[int]:
    """Close the wanted set over tail-inheritance donors, ascending order."""
    by_l = {g.granularity: g for g in groups}
    need = set()
    for level in wanted:
        if level not in by_l:
            raise ValueError(f"granularity {level} is not in the configured chain")
        cur = level
        while cur is not None:
            need.add(cur)
            cur = by_l[cur].inherits_tail_from
    return sorted(need)


def generate_trajectories(
    model: Model,
    keys: KeyPrediction,
    features: Node,
    levels: Iterable[int],
    tape: Tape | None = None,
) -> Dict[int, GranularityTrajectory]:
    """Run recursive filling for ``levels`` (plus donors), ascending.

    Each granularity's numbers depend only on the keys and its donor chain,
    never on which other granularities are generated — the property that lets
    confidence-pruned inference match exhaustive inference bitwise.
    """
    trajs: Dict[int, GranularityTrajectory] = {}
    by_l = {g.granularity: g for g in model.groups}
    for level in needed_granularities(model.groups, levels):
        group = by_l[level]
        donor = trajs.get(group.inherits_tail_from)
        trajs[level] = generate_trajectory(
            group,
            downsample_keys(keys, group),
            features,
            lambda lv, gl=group.granularity: model.fill_head(lv, gl),
            model.table,
            donor=donor,
            tape=tape,
        )
    return trajs


def forward(
    model: Model,
    past: np.ndarray,
    neighbors: np.ndarray,
    nbr_mask: np.ndarray,
    tape: Tape | None = None,
    granularities: Sequence[int] | None = None,
    want_conf: bool = True,
    want_simul: bool = True,
    want_recursive: bool = False,
    want_keyvar: bool = False,
) -> ForwardOut:
    """Batched forward pass over origin-normalized inputs.

    ``granularities`` restricts which trajectories are generated (donors are
    pulled in automatically); passing a subset never changes the numbers the
    remaining granularities produce, which is what makes pruned inference
    bitwise-equal to exhaustive inference.
    """
    cfg = model.config
    dtype = np.dtype(cfg.dtype)
    past = np.asarray(past, dtype=dtype)
    origins = past[:, -1, :].copy()
    past_n = past - origins[:, None, :]
    nbr = np.asarray(neighbors, dtype=dtype)
    if nbr.size:
        nbr = (nbr - origins[:, None, None, :]) * nbr_mask[:, :, None, None]
    feats = encode(
        past_n,
        nbr,
        nbr_mask,
        model.encoder_params(),
        cfg.k_modes,
        tape=tape,
        use_neighbors=cfg.use_neighbors,
    )
    keys = predict_keys(feats.features, model.key_layers(), model.fine_indices, tape=tape)

    wanted = cfg.granularities if granularities is None else tuple(granularities)
    trajs = generate_trajectories(model, keys, feats.features, wanted, tape=tape)

    conf = None
    if want_conf:
        head_pt = getitem(keys.coords, (slice(None), 0, slice(None)))
        tail_pt = getitem(keys.coords, (slice(None), model.tail_position(), slice(None)))
        logits = mlp_apply(
            model.conf_layers(), concat([head_pt, tail_pt, feats.features], axis=1),
            tape=tape,
        )
        conf = softmax(logits, axis=-1)

    simul = None
    if want_simul:
        simul = baseline_decode(feats.features, model.encoder_params().simul_layers, tape=tape)

    rec = None
    if want_recursive:
        rec = recursive_decode(
            feats.features, model.params, trajectory_length(cfg.t_f), tape=tape,
        )

    keyvar = None
    if want_keyvar:
        keyvar = mlp_apply(model.keyvar_layers(), feats.features, tape=tape)

    return ForwardOut(
        origins=origins,
        features=feats,
        keys=keys,
        trajs=trajs,
        conf=conf,
        simul=simul,
        recursive=rec,
        keyvar=keyvar,
    )


def forward_scenes(model: Model, scenes: Sequence[Scene], tape: Tape | None = None,
                   **kwargs) -> ForwardOut:
    past, nbr, mask = pack_scenes(
        scenes, model.config.t_p, MAX_NEIGHBORS, dtype=np.dtype(model.config.dtype)
    )
    return forward(model, past, nbr, mask, tape=tape, **kwargs)


def denormalize(rows: np.ndarray, origins: np.ndarray, k_modes: int) -> np.ndarray:
    """Add per-scene origins back onto (B*K, steps, 2) rows."""
    b = origins.shape[0]
    out = rows.reshape(b, k_modes, *rows.shape[1:]) + origins[:, None, None, :]
    return out.reshape(rows.shape)
