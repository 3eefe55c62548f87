"""Scene containers and the JSON-lines interchange format.

One scene is an agent's observed past, its ground-truth future, and the
observed pasts of nearby agents, all in world coordinates (meters).  The
serialized form is one JSON object per line with exactly the fields
``id, past, future, neighbors, timestep``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Tuple

import numpy as np


class TrajPoint(NamedTuple):
    x: float
    y: float


def _as_coords(value, name: str, length: int | None = None) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must be an (n, 2) array of points, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name} must have {length} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


@dataclass
class Scene:
    """One prediction instance: T_p observed points, T_f future points."""

    id: str
    past: np.ndarray
    future: np.ndarray
    neighbors: Tuple[np.ndarray, ...] = ()
    timestep: float = 0.4

    def __post_init__(self) -> None:
        self.past = _as_coords(self.past, "past")
        self.future = _as_coords(self.future, "future")
        if self.past.shape[0] < 2:
            raise ValueError("past must contain at least 2 points")
        if self.future.shape[0] < 2:
            raise ValueError("future must contain at least 2 points")
        if self.timestep <= 0:
            raise ValueError("timestep must be > 0")
        self.neighbors = tuple(
            _as_coords(n, f"neighbors[{i}]", length=self.past.shape[0])
            for i, n in enumerate(self.neighbors)
        )

    @property
    def t_p(self) -> int:
        return self.past.shape[0]

    @property
    def t_f(self) -> int:
        return self.future.shape[0]


@dataclass
class SceneSet:
    """Scenes plus the shared horizon lengths and where they came from."""

    scenes: List[Scene]
    t_p: int
    t_f: int
    provenance: Dict = field(default_factory=dict)
    warnings: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for s in self.scenes:
            if s.t_p != self.t_p or s.t_f != self.t_f:
                raise ValueError(
                    f"scene {s.id!r} has horizons ({s.t_p}, {s.t_f}); "
                    f"expected ({self.t_p}, {self.t_f})"
                )

    def __len__(self) -> int:
        return len(self.scenes)


def extrapolate_gt(future: np.ndarray, target_len: int) -> np.ndarray:
    """Append one linearly extrapolated point: F_ext = 2*F_last - F_prev.

    Only a single extra step is ever needed, so ``target_len`` must be
    ``len(future) + 1``.
    """
    future = np.asarray(future, dtype=np.float64)
    if future.ndim != 2 or future.shape[1] != 2:
        raise ValueError(f"future must be (n, 2), got shape {future.shape}")
    n = future.shape[0]
    if n < 2:
        raise ValueError("need at least 2 future points to extrapolate")
    if target_len != n + 1:
        raise ValueError(f"target_len must be len(future)+1 = {n + 1}, got {target_len}")
    # formed as last + (last - prev) so the difference identity holds exactly
    step = future[-1] - future[-2]
    ext = future[-1] + step
    return np.concatenate([future, ext[None, :]], axis=0)


def save_jsonl(sceneset: SceneSet, path) -> None:
    """Write one JSON object per scene; key order is sorted for byte determinism."""
    lines = []
    for s in sceneset.scenes:
        obj = {
            "id": s.id,
            "past": [[float(x), float(y)] for x, y in s.past],
            "future": [[float(x), float(y)] for x, y in s.future],
            "neighbors": [[[float(x), float(y)] for x, y in n] for n in s.neighbors],
            "timestep": float(s.timestep),
        }
        lines.append(json.dumps(obj, sort_keys=True))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def load_jsonl(path) -> SceneSet:
    scenes: List[Scene] = []
    required = {"id", "past", "future", "neighbors", "timestep"}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or not required.issubset(obj):
                missing = sorted(required - set(obj)) if isinstance(obj, dict) else required
                raise ValueError(f"{path}: line {lineno}: missing fields {missing}")
            try:
                scenes.append(
                    Scene(
                        id=str(obj["id"]),
                        past=obj["past"],
                        future=obj["future"],
                        neighbors=tuple(np.asarray(n) for n in obj["neighbors"]),
                        timestep=obj["timestep"],
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    if not scenes:
        raise ValueError(f"{path}: no scenes found")
    t_p, t_f = scenes[0].t_p, scenes[0].t_f
    return SceneSet(scenes=scenes, t_p=t_p, t_f=t_f, provenance={"kind": "file", "path": str(path)})
