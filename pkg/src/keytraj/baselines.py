"""Reference decoders the key-step head is compared against.

Three baselines with very different failure modes:

* constant-velocity extrapolation (no parameters),
* an autoregressive gated-recurrent decoder (errors compound step to step),
* a constant-velocity Kalman smoother for post-hoc cleanup of any trajectory.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from .diffcore import (
    Node,
    ParamTensor,
    Tape,
    as_node,
    matmul,
    mul,
    sigmoid,
    stack,
    tanh,
)


def cv_extrapolate(past: np.ndarray, t_f: int) -> np.ndarray:
    """Continue the last observed velocity for ``t_f`` steps.

    ``past`` is ``(..., T_p, 2)`` with T_p >= 2; returns ``(..., t_f, 2)``.
    """
    past = np.asarray(past, dtype=float)
    if past.ndim < 2 or past.shape[-1] != 2:
        raise ValueError(f"past must be (..., T_p, 2), got {past.shape}")
    if past.shape[-2] < 2:
        raise ValueError("need at least two observed points to estimate velocity")
    if t_f < 1:
        raise ValueError("t_f must be positive")
    last = past[..., -1, :]
    vel = last - past[..., -2, :]
    steps = np.arange(1, t_f + 1, dtype=past.dtype)
    return last[..., None, :] + steps[:, None] * vel[..., None, :]


def _param(params: Dict[str, ParamTensor], name: str, tape: Optional[Tape]) -> Node:
    if name not in params:
        raise KeyError(f"recursive decoder parameter {name!r} missing")
    p = params[name]
    return tape.leaf(p) if tape is not None else as_node(p.values)


def recursive_decode(
    a: Node | np.ndarray,
    params: Dict[str, ParamTensor],
    steps: int,
    tape: Optional[Tape] = None,
    perturb: Optional[Tuple[int, np.ndarray]] = None,
) -> Node:
    """Roll a gated-recurrent cell forward ``steps`` future points.

    The hidden state starts from a projection of the agent features ``a``
    ``(R, D_A)``; each step feeds back the previously emitted point and adds
    a predicted displacement to it.
    ``perturb=(s, delta)`` adds ``delta`` to the hidden state entering step
    ``s`` (1-based) — a diagnostic hook: outputs before ``s`` are untouched,
    outputs from ``s`` on react, which is exactly the causal structure the
    key-step head does *not* have.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    if not isinstance(a, Node):
        a = as_node(np.asarray(a))
    if a.value.ndim != 2:
        raise ValueError(f"agent features must be (R, D_A), got {a.value.shape}")
    rows = a.value.shape[0]
    dtype = a.value.dtype

    w = {name: _param(params, f"rec.{name}", tape)
         for name in ("init.w", "init.b", "wz", "uz", "bz", "wr", "ur", "br",
                      "wh", "uh", "bh", "out.w", "out.b")}
    h = tanh(matmul(a, w["init.w"]) + w["init.b"])
    x = as_node(np.zeros((rows, 2), dtype=dtype))
    outs = []
    for t in range(1, steps + 1):
        if perturb is not None and perturb[0] == t:
            h = h + as_node(np.asarray(perturb[1], dtype=dtype))
        z = sigmoid(matmul(x, w["wz"]) + matmul(h, w["uz"]) + w["bz"])
        r = sigmoid(matmul(x, w["wr"]) + matmul(h, w["ur"]) + w["br"])
        cand = tanh(matmul(x, w["wh"]) + matmul(mul(r, h), w["uh"]) + w["bh"])
        h = (1.0 - z) * h + z * cand
        # emit a displacement and integrate: position error compounds step
        # over step, the characteristic failure mode this head exists to show
        y = x + matmul(h, w["out.w"]) + w["out.b"]
        outs.append(y)
        x = y
    return stack(outs, axis=1)


def kalman_smooth(traj: np.ndarray, q: float = 1e-4, r: float = 1e-2) -> np.ndarray:
    """Constant-velocity Kalman filter + RTS smoother over a 2-D trajectory.

    ``traj`` is ``(n, 2)`` observed positions at unit time steps; returns the
    smoothed positions with the same shape.  ``q`` scales process noise
    (trust in the constant-velocity assumption), ``r`` measurement noise.
    """
    traj = np.asarray(traj, dtype=float)
    if traj.ndim != 2 or traj.shape[1] != 2:
        raise ValueError(f"traj must be (n, 2), got {traj.shape}")
    if not np.isfinite(traj).all():
        raise ValueError("traj contains non-finite values")
    if q <= 0 or r <= 0:
        raise ValueError("q and r must be positive")
    n = traj.shape[0]
    if n <= 1:
        return traj.copy()

    f = np.eye(4)
    f[0, 2] = f[1, 3] = 1.0
    hm = np.zeros((2, 4))
    hm[0, 0] = hm[1, 1] = 1.0
    qm = q * np.eye(4)
    rm = r * np.eye(2)

    x = np.zeros(4)
    x[:2] = traj[0]
    x[2:] = traj[1] - traj[0]
    p = np.diag([r, r, 2 * r + q, 2 * r + q])

    xs_pred = np.zeros((n, 4))
    ps_pred = np.zeros((n, 4, 4))
    xs_filt = np.zeros((n, 4))
    ps_filt = np.zeros((n, 4, 4))
    for t in range(n):
        if t == 0:
            xp, pp = x, p
        else:
            xp = f @ xs_filt[t - 1]
            pp = f @ ps_filt[t - 1] @ f.T + qm
        xs_pred[t], ps_pred[t] = xp, pp
        innov = traj[t] - hm @ xp
        s = hm @ pp @ hm.T + rm
        gain = pp @ hm.T @ np.linalg.inv(s)
        xs_filt[t] = xp + gain @ innov
        ps_filt[t] = (np.eye(4) - gain @ hm) @ pp

    xs = xs_filt.copy()
    for t in range(n - 2, -1, -1):
        c = ps_filt[t] @ f.T @ np.linalg.inv(ps_pred[t + 1])
        xs[t] = xs_filt[t] + c @ (xs[t + 1] - xs_pred[t + 1])
    return xs[:, :2]
