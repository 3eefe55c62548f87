"""Scene data model, synthetic scenario generation, and file ingestion."""

from .scenes import (
    Scene,
    SceneSet,
    TrajPoint,
    extrapolate_gt,
    load_jsonl,
    save_jsonl,
)
from .synthetic import FAMILIES, SynthConfig, gen_synthetic
from .ethucy import load_ethucy

__all__ = [
    "FAMILIES",
    "Scene",
    "SceneSet",
    "SynthConfig",
    "TrajPoint",
    "extrapolate_gt",
    "gen_synthetic",
    "load_ethucy",
    "load_jsonl",
    "save_jsonl",
]
