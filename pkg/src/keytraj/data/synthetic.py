"""Deterministic synthetic kinematics scenarios.

Four families: straight lines, circular arcs, sinusoidal sway, and abrupt
mid-horizon heading changes.  Each family draws from its own random stream
seeded by (seed, family index), so changing one family's count never alters
another family's scenes.  Gaussian observation noise applies to the observed
past only; the stored future stays noise-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .scenes import Scene, SceneSet

FAMILIES = ("constant_velocity", "constant_turn", "sinusoid", "sudden_turn")

# world-frame start offsets keep scenes from piling onto the origin
_OFFSET_RANGE = 20.0
_SWAY_AMP_RANGE = (0.5, 2.0)    # meters
_SWAY_PERIOD_RANGE = (3.0, 8.0)  # seconds
_TURN_ANGLE_RANGE = (np.pi / 6, np.pi / 2)  # sudden-turn magnitude


@dataclass
class SynthConfig:
    counts: Dict[str, int] = field(
        default_factory=lambda: {f: 50 for f in FAMILIES}
    )
    speed_range: Tuple[float, float] = (0.5, 2.0)       # m/s
    turn_rate_range: Tuple[float, float] = (0.2, 1.0)   # rad/s
    noise_sigma: float = 0.05                           # meters, past only
    t_p: int = 8
    t_f: int = 12
    timestep: float = 0.4                               # seconds

    def __post_init__(self) -> None:
        unknown = set(self.counts) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown scenario families: {sorted(unknown)}")
        for fam, n in self.counts.items():
            if n < 0:
                raise ValueError(f"count for {fam} must be >= 0, got {n}")
        for name, rng in (("speed_range", self.speed_range),
                          ("turn_rate_range", self.turn_rate_range)):
            lo, hi = rng
            if not (lo <= hi) or lo <= 0:
                raise ValueError(f"{name} must be a positive non-empty range, got {rng}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.t_p < 2 or self.t_f < 2:
            raise ValueError("t_p and t_f must both be >= 2")
        if self.timestep <= 0:
            raise ValueError("timestep must be > 0")

    def to_dict(self) -> Dict:
        return {
            "counts": {f: int(self.counts.get(f, 0)) for f in FAMILIES},
            "speed_range": list(self.speed_range),
            "turn_rate_range": list(self.turn_rate_range),
            "noise_sigma": self.noise_sigma,
            "t_p": self.t_p,
            "t_f": self.t_f,
            "timestep": self.timestep,
        }

    @classmethod
    def from_dict(cls, obj: Dict) -> "SynthConfig":
        kwargs = dict(obj)
        if "speed_range" in kwargs:
            kwargs["speed_range"] = tuple(kwargs["speed_range"])
        if "turn_rate_range" in kwargs:
            kwargs["turn_rate_range"] = tuple(kwargs["turn_rate_range"])
        known = set(cls.__dataclass_fields__)
        unknown = set(kwargs) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**kwargs)


def _times(config: SynthConfig) -> np.ndarray:
    """Seconds relative to the last observed step (index t_p - 1)."""
    steps = np.arange(-(config.t_p - 1), config.t_f + 1, dtype=np.float64)
    return steps * config.timestep


def _family_traj(family: str, config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Full noise-free (t_p + t_f, 2) trajectory for one drawn scenario."""
    tau = _times(config)
    speed = rng.uniform(*config.speed_range)
    heading = rng.uniform(0, 2 * np.pi)
    offset = rng.uniform(-_OFFSET_RANGE, _OFFSET_RANGE, size=2)
    u = np.array([np.cos(heading), np.sin(heading)])

    if family == "constant_velocity":
        return offset + speed * tau[:, None] * u

    if family == "constant_turn":
        omega = rng.uniform(*config.turn_rate_range) * (1 if rng.random() < 0.5 else -1)
        radius = speed / omega
        # arc through `offset` at tau=0 with tangent along `heading`
        x = offset[0] + radius * (np.sin(heading + omega * tau) - np.sin(heading))
        y = offset[1] + radius * (np.cos(heading) - np.cos(heading + omega * tau))
        return np.stack([x, y], axis=1)

    if family == "sinusoid":
        amp = rng.uniform(*_SWAY_AMP_RANGE)
        period = rng.uniform(*_SWAY_PERIOD_RANGE)
        normal = np.array([-u[1], u[0]])
        along = speed * tau[:, None] * u
        sway = amp * np.sin(2 * np.pi * tau / period)[:, None] * normal
        return offset + along + sway

    if family == "sudden_turn":
        # straight travel, then an abrupt heading change at a future step
        turn_step = int(rng.integers(1, config.t_f))  # future step index 1..t_f-1
        angle = rng.uniform(*_TURN_ANGLE_RANGE) * (1 if rng.random() < 0.5 else -1)
        turn_tau = turn_step * config.timestep
        u2 = np.array([np.cos(heading + angle), np.sin(heading + angle)])
        before = offset + speed * tau[:, None] * u
        pivot = offset + speed * turn_tau * u
        after = pivot + speed * (tau - turn_tau)[:, None] * u2
        return np.where((tau <= turn_tau)[:, None], before, after)

    raise ValueError(f"unknown family {family!r}")


def gen_synthetic(config: SynthConfig, seed: int) -> SceneSet:
    """Pure function of (config, seed); exact per-family counts."""
    scenes: List[Scene] = []
    for fam_idx, family in enumerate(FAMILIES):
        count = config.counts.get(family, 0)
        rng = np.random.default_rng([int(seed), fam_idx])
        for i in range(count):
            traj = _family_traj(family, config, rng)
            noise = rng.normal(0.0, config.noise_sigma, size=(config.t_p, 2))
            past = traj[: config.t_p] + (noise if config.noise_sigma > 0 else 0.0)
            future = traj[config.t_p:]
            scenes.append(
                Scene(
                    id=f"{family}-{i:05d}",
                    past=past,
                    future=future,
                    neighbors=(),
                    timestep=config.timestep,
                )
            )
    return SceneSet(
        scenes=scenes,
        t_p=config.t_p,
        t_f=config.t_f,
        provenance={"kind": "synthetic", "config": config.to_dict(), "seed": int(seed)},
    )
