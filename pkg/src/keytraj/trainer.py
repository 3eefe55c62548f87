"""Loss composition, the optimization loop, and checkpoint persistence.

The total training objective is

    L = L_G + eta1 * sum_m L_s(granularity m) + eta2 * L_c

where L_G combines the winner-take-all regression of the filled trajectories
(averaged over granularities), the same regression for the simultaneous
decoder head, and a cross-entropy pushing the mode logits toward the winning
mode.  The winner is the mode whose finest-granularity trajectory has the
lowest average displacement over the real future steps.  Spatial and
confidence losses attach to the winning mode by default; ``all_modes``
applies them everywhere.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import TrainConfig
from .data import SceneSet, extrapolate_gt
from .diffcore import (
    Node,
    ParamTensor,
    Tape,
    backprop,
    clip_grad_norm,
    cross_entropy,
    getitem,
    init_optimizer,
    optimizer_step,
    regression_loss,
    reshape,
)
from .keysteps import downsample_keys, spatial_loss, trajectory_length
from .model import ForwardOut, Model, build_params, forward
from .selector import confidence_loss, confidence_target

CHECKPOINT_VERSION = 1


def _winner_rows(fine_values: np.ndarray, gt_rows: np.ndarray, t_f: int,
                 k_modes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per scene, the row index of the mode with the lowest ADE on 1..t_f."""
    err = np.linalg.norm(fine_values[:, :t_f, :] - gt_rows[:, :t_f, :], axis=-1)
    ade = err.mean(axis=-1).reshape(-1, k_modes)
    k_star = np.argmin(ade, axis=-1)
    rows = np.arange(ade.shape[0]) * k_modes + k_star
    return rows, k_star


def _take_rows(node: Node, rows: np.ndarray) -> Node:
    key: tuple = (rows,) + (slice(None),) * (node.value.ndim - 1)
    return getitem(node, key)


def total_loss(model: Model, out: ForwardOut, future: np.ndarray,
               config: TrainConfig | None = None) -> Node:
    """Compose the full objective for one batch (normalized frame).

    ``future`` is (B, t_f, 2) ground truth already shifted by the same
    origins the forward pass used.
    """
    cfg = model.config if config is None else config
    k, t_f = cfg.k_modes, cfg.t_f
    dtype = np.dtype(cfg.dtype)
    future = np.asarray(future, dtype=dtype)
    b = future.shape[0]
    if future.shape != (b, t_f, 2):
        raise ValueError(f"future must be (B, {t_f}, 2), got {future.shape}")
    full_len = trajectory_length(t_f)
    gt_full = np.stack([extrapolate_gt(f, full_len) for f in future]).astype(dtype)
    gt_rows = np.repeat(gt_full, k, axis=0)                       # (B*K, 13, 2)

    fine = out.trajs[cfg.granularities[0]]
    rows, k_star = _winner_rows(fine.node().value, gt_rows, t_f, k)
    gt_win = gt_full                                              # (B, 13, 2)

    # -- L_G: trajectory + simultaneous regression on the winner, mode CE --
    fill_terms = []
    for level in cfg.granularities:
        sel = _take_rows(out.trajs[level].node(), rows)
        fill_terms.append(regression_loss("mse", sel, gt_win))
    l_g = fill_terms[0]
    for term in fill_terms[1:]:
        l_g = l_g + term
    l_g = l_g * (1.0 / len(fill_terms))
    if out.simul is not None:
        l_g = l_g + regression_loss("mse", _take_rows(out.simul, rows), gt_win)
    l_g = l_g + cross_entropy(out.features.mode_logits, k_star)
    if out.recursive is not None:
        l_g = l_g + regression_loss("mse", _take_rows(out.recursive, rows), gt_win)

    total = l_g
    wta = cfg.spatial_mode == "wta"
    max_index = t_f if cfg.gt_tail_mode == "cap" else None

    if cfg.eta1 != 0.0:
        if cfg.loss_kind == "nll_gaussian" and out.keyvar is None:
            raise ValueError("nll_gaussian spatial loss needs the variance head output")
        spatial_sum = None
        offset = 0
        gt_spatial = gt_win if wta else gt_rows
        for level in cfg.granularities:
            group = next(g for g in model.groups if g.granularity == level)
            keys_m = downsample_keys(out.keys, group)
            if wta:
                keys_m = _take_rows(keys_m, rows)
            logvar = None
            n_sections = len(group.indices) - 1
            if cfg.loss_kind == "nll_gaussian":
                cols = slice(offset, offset + 2 * n_sections)
                lv = getitem(out.keyvar, (slice(None), cols))
                lv = reshape(lv, (lv.value.shape[0], n_sections, 2))
                if wta:
                    lv = _take_rows(lv, rows)
                logvar = lv
            offset += 2 * n_sections
            term = spatial_loss(keys_m, gt_spatial, group, kind=cfg.loss_kind,
                                logvar=logvar, max_index=max_index)
            spatial_sum = term if spatial_sum is None else spatial_sum + term
        total = total + spatial_sum * cfg.eta1

    if cfg.eta2 != 0.0 and out.conf is not None:
        ades = _granularity_ade_matrix(out, gt_rows, t_f)         # (B*K, M)
        target = confidence_target(ades).astype(dtype)
        conf = out.conf
        if wta:
            conf = _take_rows(conf, rows)
            target = target[rows]
        total = total + confidence_loss(conf, target) * cfg.eta2

    return total


def _granularity_ade_matrix(out: ForwardOut, gt_rows: np.ndarray, t_f: int) -> np.ndarray:
    cols = []
    for level in sorted(out.trajs):
        vals = out.trajs[level].node().value
        err = np.linalg.norm(vals[:, :t_f, :] - gt_rows[:, :t_f, :], axis=-1)
        cols.append(err.mean(axis=-1))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# optimization loop
# ---------------------------------------------------------------------------


def _pack_training(data: SceneSet, cfg: TrainConfig):
    past = np.stack([np.asarray(s.past, dtype=float) for s in data.scenes])
    future = np.stack([np.asarray(s.future, dtype=float) for s in data.scenes])
    m = 8
    b = len(data.scenes)
    nbr = np.zeros((b, m, cfg.t_p, 2))
    mask = np.zeros((b, m))
    for i, scene in enumerate(data.scenes):
        for j, nb in enumerate(scene.neighbors[:m]):
            nbr[i, j] = np.asarray(nb, dtype=float)
            mask[i, j] = 1.0
    dt = np.dtype(cfg.dtype)
    return past.astype(dt), future.astype(dt), nbr.astype(dt), mask.astype(dt)


def train(config: TrainConfig, data: SceneSet,
          init_params: Optional[Dict[str, ParamTensor]] = None) -> "Checkpoint":
    """Deterministic mini-batch training; returns the final checkpoint."""
    if not data.scenes:
        raise ValueError("training data is empty")
    if data.t_p != config.t_p or data.t_f != config.t_f:
        raise ValueError(
            f"data horizons (t_p={data.t_p}, t_f={data.t_f}) do not match the "
            f"config (t_p={config.t_p}, t_f={config.t_f})"
        )
    model = Model.init(config) if init_params is None else Model(config, dict(init_params))
    past, future, nbr, mask = _pack_training(data, config)
    origins = past[:, -1, :]
    future_n = future - origins[:, None, :]

    opt = init_optimizer(
        config.optimizer,
        model.params.values(),
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    frozen = tuple(config.freeze_prefixes)
    rng = np.random.default_rng([int(config.seed), 7])
    n = past.shape[0]
    trace: List[float] = []
    want_var = config.loss_kind == "nll_gaussian"
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        batch_losses: List[float] = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            tape = Tape()
            out = forward(
                model, past[idx], nbr[idx], mask[idx], tape=tape,
                want_recursive=config.train_recursive, want_keyvar=want_var,
            )
            loss = total_loss(model, out, future_n[idx])
            val = float(loss.value)
            if not np.isfinite(val):
                raise FloatingPointError(
                    f"non-finite loss {val} at epoch {epoch}, batch {bi}"
                )
            grads = backprop(tape, loss)
            if config.clip_norm:
                clip_grad_norm(grads, config.clip_norm)
            step_params = [
                model.params[name] for name in grads
                if not any(name.startswith(p) for p in frozen)
            ]
            optimizer_step(opt, step_params, grads)
            batch_losses.append(val)
        trace.append(float(sum(batch_losses) / len(batch_losses)))
    return Checkpoint(version=CHECKPOINT_VERSION, config=config,
                      params=model.params, loss_trace=trace)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    params: Dict[str, ParamTensor]
    loss_trace: List[float] = field(default_factory=list)

    def model(self) -> Model:
        return Model(config=self.config, params=self.params)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write the checkpoint as canonical JSON (atomic replace)."""
    doc = {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "params": {
            name: {"shape": list(p.values.shape), "data": p.values.ravel().tolist()}
            for name, p in ckpt.params.items()
        },
        "loss_trace": [float(x) for x in ckpt.loss_trace],
    }
    write_atomic_json(doc, path)


def write_atomic_json(doc, path: str, indent: int | None = None) -> None:
    seps = (",", ":") if indent is None else (",", ": ")
    text = json.dumps(doc, sort_keys=True, separators=seps, indent=indent)
    write_atomic_text(text + "\n", path)


def write_atomic_text(text: str, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Checkpoint:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    for key in ("version", "config", "params", "loss_trace"):
        if key not in doc:
            raise ValueError(f"checkpoint missing field {key!r}")
    if doc["version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {doc['version']!r}; "
            f"expected {CHECKPOINT_VERSION}"
        )
    config = TrainConfig.from_dict(doc["config"])
    expected = {name: p.values.shape for name, p in build_params(config).items()}
    dtype = np.dtype(config.dtype)
    params: Dict[str, ParamTensor] = {}
    for name, shape in expected.items():
        if name not in doc["params"]:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        entry = doc["params"][name]
        got_shape = tuple(entry["shape"])
        if got_shape != shape:
            raise ValueError(
                f"parameter {name!r} has shape {got_shape}, expected {shape}"
            )
        values = np.asarray(entry["data"], dtype=dtype).reshape(shape)
        params[name] = ParamTensor(name, values)
    extra = set(doc["params"]) - set(expected)
    if extra:
        raise ValueError(f"checkpoint has unexpected parameter {sorted(extra)[0]!r}")
    return Checkpoint(
        version=doc["version"],
        config=config,
        params=params,
        loss_trace=[float(x) for x in doc["loss_trace"]],
    )


# ---------------------------------------------------------------------------
# gradient integrity suite
# ---------------------------------------------------------------------------


def gradient_check_suite(seed: int, eps: float = 1e-5) -> dict:
    """Finite-difference check of every parameterized head at toy size.

    Two passes: the training objective with the confidence term off (its
    target is a stop-gradient function of the predictions, so finite
    differences would see a path the analytic gradient deliberately ignores),
    then the confidence head against a fixed random target.  Batches are
    re-drawn when they land too close to a relu kink or a winner-mode tie,
    or when some connected gradient element is so small that central
    differences cannot resolve it at this eps (rounding noise on the loss is
    about |loss|*ulp/eps; comparing it against a gradient below that floor
    measures the noise, not the implementation).
    """
    from .diffcore import backprop, finite_diff_check, relu_kink_margin

    cfg = TrainConfig(
        t_p=3, t_f=4, k_modes=2, granularities=(2, 4), d=4, d_a=6, hidden=6,
        dtype="float64", train_recursive=True, eta1=0.1, eta2=0.0, seed=seed,
    )
    model = Model.init(cfg, seed=seed)
    rng = np.random.default_rng([int(seed), 11])

    def draw_batch():
        past = np.cumsum(rng.normal(0.2, 0.4, size=(2, cfg.t_p, 2)), axis=1)
        future = past[:, -1:, :] + np.cumsum(
            rng.normal(0.2, 0.4, size=(2, cfg.t_f, 2)), axis=1
        )
        nbr = rng.normal(scale=2.0, size=(2, 2, cfg.t_p, 2))
        # full mask: a zeroed neighbor row parks a relu exactly on its kink
        # (harmlessly, since pooling drops the row), which would make every
        # draw fail the margin check
        mask = np.ones((2, 2))
        return past, future - past[:, -1:, :], nbr, mask

    def wta_gap(out: ForwardOut, fut_n: np.ndarray) -> float:
        gt_rows = np.repeat(
            np.stack([extrapolate_gt(f, trajectory_length(cfg.t_f)) for f in fut_n]),
            cfg.k_modes, axis=0,
        )
        fine = out.trajs[2].node().value
        err = np.linalg.norm(fine[:, :cfg.t_f, :] - gt_rows[:, :cfg.t_f, :], axis=-1)
        ade = err.mean(axis=-1).reshape(-1, cfg.k_modes)
        spread = np.sort(ade, axis=-1)
        return float(np.min(spread[:, 1] - spread[:, 0]))

    rows = 2 * cfg.k_modes
    conf_target = confidence_target(
        np.random.default_rng([int(seed), 13]).normal(size=(rows, cfg.n_granularities))
    )
    for _ in range(25):
        past, fut_n, nbr, mask = draw_batch()

        def main_loss():
            tape = Tape()
            out = forward(model, past, nbr, mask, tape=tape,
                          want_conf=False, want_recursive=True)
            return total_loss(model, out, fut_n), tape

        def conf_loss():
            tape = Tape()
            out = forward(model, past, nbr, mask, tape=tape,
                          granularities=(), want_simul=False)
            return confidence_loss(out.conf, conf_target), tape

        loss_node, tape = main_loss()
        probe = forward(model, past, nbr, mask, want_conf=False)
        if relu_kink_margin(loss_node) < 50 * eps or wta_gap(probe, fut_n) < 1e-3:
            continue
        grads = backprop(tape, loss_node)
        nonzero = np.concatenate([np.abs(g[g != 0].ravel()) for g in grads.values()])
        noise_floor = abs(float(loss_node.value)) * 1.1e-16 / eps + eps ** 2 / 6
        if nonzero.size and nonzero.min() < 5 * noise_floor / 1e-4:
            continue

        main_params = [model.params[n] for n in sorted(tape.leaves)]
        err_main = finite_diff_check(main_loss, main_params, eps=eps)
        _, conf_tape = conf_loss()
        conf_params = [model.params[n] for n in sorted(conf_tape.leaves)]
        err_conf = finite_diff_check(conf_loss, conf_params, eps=eps)
        checked = set(tape.leaves) | set(conf_tape.leaves)
        return {
            "max_rel_error": float(max(err_main, err_conf)),
            "params_checked": len(checked),
            "param_total": len(model.params),
        }
    raise RuntimeError("could not draw a batch clear of relu kinks and mode ties")
