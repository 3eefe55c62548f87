"""Ingestion of whitespace-separated "frame_id agent_id x y" trajectory files.

The file's frame stride is the smallest positive difference between an
agent's consecutive frames anywhere in the file.  Within one agent, frame
gaps that are multiples of the stride split the record into separate runs;
differences that are not multiples mark the agent as irregular and skip it
(counted in ``SceneSet.warnings``).  Every run of at least t_p + t_f
consecutive observations yields sliding windows offset by one frame.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Dict, List, Tuple

import numpy as np

from .scenes import Scene, SceneSet

MAX_NEIGHBORS = 8


def _parse_lines(path) -> Dict[int, Dict[int, np.ndarray]]:
    """agent_id -> {frame -> (x, y)}; raises with the 1-based line number."""
    by_agent: Dict[int, Dict[int, np.ndarray]] = defaultdict(dict)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) != 4:
                raise ValueError(
                    f"{path}: line {lineno}: expected 4 columns "
                    f"(frame_id agent_id x y), got {len(tokens)}"
                )
            try:
                vals = [float(t) for t in tokens]
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: non-numeric token: {exc}") from exc
            frame_f, agent_f, x, y = vals
            if not np.isfinite(vals).all():
                raise ValueError(f"{path}: line {lineno}: non-finite value")
            if frame_f != int(frame_f) or agent_f != int(agent_f):
                raise ValueError(
                    f"{path}: line {lineno}: frame_id and agent_id must be integral"
                )
            frame, agent = int(frame_f), int(agent_f)
            if frame in by_agent[agent]:
                raise ValueError(
                    f"{path}: line {lineno}: duplicate observation for agent "
                    f"{agent} at frame {frame}"
                )
            by_agent[agent][frame] = np.array([x, y], dtype=np.float64)
    return by_agent


def _frame_stride(by_agent: Dict[int, Dict[int, np.ndarray]]) -> int:
    diffs = []
    for obs in by_agent.values():
        frames = sorted(obs)
        diffs.extend(b - a for a, b in zip(frames, frames[1:]) if b > a)
    return min(diffs) if diffs else 1


def _runs(frames: List[int], stride: int) -> List[List[int]]:
    """Split sorted frames into maximal runs with consecutive spacing == stride."""
    runs: List[List[int]] = [[frames[0]]]
    for prev, cur in zip(frames, frames[1:]):
        if cur - prev == stride:
            runs[-1].append(cur)
        else:
            runs.append([cur])
    return runs


def load_ethucy(path, t_p: int = 8, t_f: int = 12, timestep: float = 0.4) -> SceneSet:
    by_agent = _parse_lines(path)
    stride = _frame_stride(by_agent)
    window = t_p + t_f

    warnings: List[str] = []
    regular: Dict[int, Dict[int, np.ndarray]] = {}
    for agent in sorted(by_agent):
        frames = sorted(by_agent[agent])
        gaps = [b - a for a, b in zip(frames, frames[1:])]
        if any(g % stride != 0 for g in gaps):
            warnings.append(f"agent {agent}: non-uniform frame stride; skipped")
            continue
        regular[agent] = by_agent[agent]

    scenes: List[Scene] = []
    for agent in sorted(regular):
        obs = regular[agent]
        for run in _runs(sorted(obs), stride):
            for start_pos in range(len(run) - window + 1):
                frames_win = run[start_pos : start_pos + window]
                coords = np.stack([obs[f] for f in frames_win])
                past, future = coords[:t_p], coords[t_p:]
                past_frames = frames_win[:t_p]
                neighbors = _neighbors_for(
                    regular, agent, past_frames, past[-1]
                )
                scenes.append(
                    Scene(
                        id=f"{agent}:{frames_win[0]}",
                        past=past,
                        future=future,
                        neighbors=neighbors,
                        timestep=timestep,
                    )
                )
    return SceneSet(
        scenes=scenes,
        t_p=t_p,
        t_f=t_f,
        provenance={"kind": "file", "path": str(path)},
        warnings=tuple(warnings),
    )


def _neighbors_for(
    regular: Dict[int, Dict[int, np.ndarray]],
    agent: int,
    past_frames: List[int],
    anchor: np.ndarray,
) -> Tuple[np.ndarray, ...]:
    """Other agents observed at every past frame, nearest first, capped."""
    candidates = []
    for other in sorted(regular):
        if other == agent:
            continue
        obs = regular[other]
        if all(f in obs for f in past_frames):
            track = np.stack([obs[f] for f in past_frames])
            dist = float(np.hypot(*(track[-1] - anchor)))
            candidates.append((dist, other, track))
    candidates.sort(key=lambda c: (c[0], c[1]))
    return tuple(track for _, _, track in candidates[:MAX_NEIGHBORS])
