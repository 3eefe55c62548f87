"""Command-line entry point.

Subcommands: gen-data, train, eval, predict, curves, gradcheck.  Exit codes:
0 success, 1 bad usage (flags/values), 2 runtime failure.  Runtime failures
print one machine-parsable JSON line on stderr.  File outputs are written
atomically; report paths also render a companion PNG next to the structured
output unless --no-fig is passed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baselines import cv_extrapolate, kalman_smooth
from .config import PRESETS, TrainConfig
from .data import SceneSet, SynthConfig, gen_synthetic, load_jsonl, save_jsonl
from .metrics import MetricsReport, StepErrorCurve, compute_report, curve_csv_text, step_error_curve
from .model import Model, forward
from .selector import select_and_generate
from .trainer import (
    gradient_check_suite,
    load_checkpoint,
    save_checkpoint,
    train,
    write_atomic_json,
    write_atomic_text,
)

_HEADS = ("g2l", "recursive", "simultaneous")
_BASELINES = ("cv", "recursive", "kalman", "simultaneous")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1, not argparse's default 2
        raise _UsageError(message)


def _bool_flag(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {exc}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive ints, got {text!r}")
    return values


def _name_list(allowed: Sequence[str]):
    def parse(text: str) -> List[str]:
        names = [part.strip() for part in text.split(",") if part.strip()]
        bad = [n for n in names if n not in allowed]
        if bad or not names:
            raise argparse.ArgumentTypeError(
                f"expected a comma-separated subset of {','.join(allowed)}, got {text!r}"
            )
        seen: List[str] = []
        for n in names:
            if n not in seen:
                seen.append(n)
        return seen

    return parse


def _past_points(text: str) -> np.ndarray:
    try:
        points = [
            [float(c) for c in pair.split(",")]
            for pair in text.split(";") if pair.strip()
        ]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad --past value: {exc}")
    if not points or any(len(p) != 2 for p in points):
        raise argparse.ArgumentTypeError(
            'expected --past as "x,y;x,y;..." with 2-D points'
        )
    arr = np.asarray(points, dtype=float)
    if not np.isfinite(arr).all():
        raise argparse.ArgumentTypeError("--past contains non-finite coordinates")
    return arr


def _build_parser() -> _Parser:
    parser = _Parser(prog="keytraj", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="write a synthetic scene file")
    p.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="scene JSONL file")
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--preset", choices=sorted(PRESETS))

    p = sub.add_parser("eval", help="score a checkpoint, optionally vs baselines")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--baseline", type=_name_list(_BASELINES), default=[])
    p.add_argument("--k", type=_int_list, default=[5, 10])
    p.add_argument("--mr-threshold", type=float, default=2.0)
    p.add_argument("--no-fig", action="store_true", help="skip the PNG companion")

    p = sub.add_parser("predict", help="decode one past trajectory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--past", required=True, type=_past_points,
                   metavar='"x,y;x,y;..."')
    p.add_argument("--prune", type=_bool_flag, default=True)

    p = sub.add_parser("curves", help="export per-step error curves as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--heads", type=_name_list(_HEADS), default=["g2l"])
    p.add_argument("--no-fig", action="store_true", help="skip the PNG companion")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, required=True)
    # 1e-5 balances central-difference rounding noise (~|loss|*ulp/eps)
    # against truncation (~eps^2); 1e-6 drowns small gradients in noise
    p.add_argument("--eps", type=float, default=1e-5)

    return parser


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _read_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _pack_set(data: SceneSet, t_p: int):
    past = np.stack([np.asarray(s.past, dtype=float) for s in data.scenes])
    gt = np.stack([np.asarray(s.future, dtype=float) for s in data.scenes])
    m = 8
    nbr = np.zeros((len(data.scenes), m, t_p, 2))
    mask = np.zeros((len(data.scenes), m))
    for i, scene in enumerate(data.scenes):
        for j, nb in enumerate(scene.neighbors[:m]):
            nbr[i, j] = np.asarray(nb, dtype=float)
            mask[i, j] = 1.0
    return past, gt, nbr, mask


def _head_predictions(model: Model, head: str, past, nbr, mask):
    """World-frame (S, K, t_f, 2) predictions plus (S, K) mode probabilities."""
    cfg = model.config
    k, t_f = cfg.k_modes, cfg.t_f
    s = past.shape[0]
    if head == "g2l":
        sel = select_and_generate(model, past, nbr, mask, prune=True)
        preds = sel.trajectory[:, :t_f, :].reshape(s, k, t_f, 2)
        return preds.astype(float), sel.mode_probs.astype(float)
    out = forward(
        model, past, nbr, mask,
        granularities=(), want_conf=False,
        want_simul=head == "simultaneous",
        want_recursive=head == "recursive",
    )
    rows = out.simul if head == "simultaneous" else out.recursive
    vals = rows.value[:, :t_f, :].reshape(s, k, t_f, 2)
    preds = vals + out.origins[:, None, None, :]
    return preds.astype(float), out.mode_probs.astype(float)


def _atomic_figure(render, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".png")
    os.close(fd)
    try:
        render(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sibling(path: str, insert: str, ext: str) -> str:
    base, old_ext = os.path.splitext(path)
    if insert:
        base = f"{base}.{insert}"
    return base + (ext if ext else old_ext)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg_dict = _read_json(args.config) if args.config else {}
    cfg = SynthConfig.from_dict(cfg_dict)
    data = gen_synthetic(cfg, seed=args.seed)
    save_jsonl(data, args.out)
    print(json.dumps({"scenes": len(data.scenes), "out": args.out}, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    data = load_jsonl(args.data)
    cfg_dict = _read_json(args.config) if args.config else {}
    config = TrainConfig.from_dict(cfg_dict)
    if args.preset:
        config = config.with_preset(args.preset)
    ckpt = train(config, data)
    save_checkpoint(ckpt, args.out)
    print(json.dumps({
        "epochs": len(ckpt.loss_trace),
        "final_loss": ckpt.loss_trace[-1] if ckpt.loss_trace else None,
        "out": args.out,
        "scenes": len(data.scenes),
    }, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    data = load_jsonl(args.data)
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model()
    if data.t_p != model.config.t_p or data.t_f != model.config.t_f:
        raise ValueError(
            f"data horizons (t_p={data.t_p}, t_f={data.t_f}) do not match the "
            f"checkpoint (t_p={model.config.t_p}, t_f={model.config.t_f})"
        )
    past, gt, nbr, mask = _pack_set(data, model.config.t_p)
    ks = tuple(args.k)

    preds, probs = _head_predictions(model, "g2l", past, nbr, mask)
    reports: Dict[str, MetricsReport] = {}
    reports["model"] = compute_report(preds, probs, gt, ks=ks,
                                      mr_threshold=args.mr_threshold)
    for name in args.baseline:
        if name == "cv":
            b_preds = cv_extrapolate(past, model.config.t_f)[:, None, :, :]
            b_probs = None
        elif name == "kalman":
            sim, b_probs = _head_predictions(model, "simultaneous", past, nbr, mask)
            b_preds = np.stack([
                np.stack([kalman_smooth(mode) for mode in scene])
                for scene in sim
            ])
        else:
            b_preds, b_probs = _head_predictions(model, name, past, nbr, mask)
        reports[name] = compute_report(b_preds, b_probs, gt, ks=ks,
                                       mr_threshold=args.mr_threshold)

    doc = reports["model"].to_dict()
    doc["baselines"] = {n: reports[n].to_dict() for n in args.baseline}
    write_atomic_json(doc, args.out, indent=2)
    if not args.no_fig:
        from .figures import render_metrics_figure

        fig_path = _sibling(args.out, "", ".png")
        _atomic_figure(lambda p: render_metrics_figure(reports, p), fig_path)
    print(json.dumps({"out": args.out, "scenes": len(data.scenes)}, sort_keys=True))
    return 0


def _cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model()
    cfg = model.config
    if args.past.shape[0] != cfg.t_p:
        raise ValueError(
            f"--past has {args.past.shape[0]} points; the checkpoint expects {cfg.t_p}"
        )
    past = args.past[None, :, :]
    nbr = np.zeros((1, 8, cfg.t_p, 2))
    mask = np.zeros((1, 8))
    sel = select_and_generate(model, past, nbr, mask, prune=args.prune)
    modes = []
    for k in range(cfg.k_modes):
        modes.append({
            "granularity": int(sel.chosen[k]),
            "confidences": [float(c) for c in sel.confidences[k]],
            "probability": float(sel.mode_probs[0, k]),
            "trajectory": [[float(x), float(y)]
                           for x, y in sel.trajectory[k, :cfg.t_f, :]],
        })
    print(json.dumps({"granularities": [int(g) for g in model.config.granularities],
                      "modes": modes}, sort_keys=True))
    return 0


def _cmd_curves(args) -> int:
    data = load_jsonl(args.data)
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model()
    if data.t_p != model.config.t_p or data.t_f != model.config.t_f:
        raise ValueError(
            f"data horizons (t_p={data.t_p}, t_f={data.t_f}) do not match the "
            f"checkpoint (t_p={model.config.t_p}, t_f={model.config.t_f})"
        )
    past, gt, nbr, mask = _pack_set(data, model.config.t_p)
    curves: Dict[str, StepErrorCurve] = {}
    outputs: Dict[str, str] = {}
    for head in args.heads:
        preds, probs = _head_predictions(model, head, past, nbr, mask)
        curves[head] = step_error_curve(preds, probs, gt, ks=(5, 10))
        path = args.out if len(args.heads) == 1 else _sibling(args.out, head, ".csv")
        write_atomic_text(curve_csv_text(curves[head]), path)
        outputs[head] = path
    if not args.no_fig:
        from .figures import render_curve_figure

        fig_path = _sibling(args.out, "", ".png")
        _atomic_figure(lambda p: render_curve_figure(curves, p), fig_path)
    print(json.dumps({"out": outputs, "scenes": len(data.scenes)}, sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    if args.eps <= 0:
        raise ValueError("--eps must be positive")
    result = gradient_check_suite(args.seed, eps=args.eps)
    print(json.dumps(result, sort_keys=True))
    if result["max_rel_error"] >= 1e-4:
        raise FloatingPointError(
            f"gradient check failed: max relative error {result['max_rel_error']:.3e}"
        )
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "curves": _cmd_curves,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(json.dumps({
            "command": args.command,
            "error": f"{type(exc).__name__}: {exc}",
        }), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
