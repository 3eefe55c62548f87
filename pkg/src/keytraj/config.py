"""Single flat configuration for model structure and training."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, Tuple

from .diffcore.layers import LOSS_KINDS
from .diffcore.optim import ALGORITHMS

# named hyperparameter recipes; everything else keeps field defaults
PRESETS: Dict[str, Dict] = {
    "ethucy": {"optimizer": "adamw", "learning_rate": 1e-3, "batch_size": 128,
               "weight_decay": 0.01},
    "nuscenes": {"optimizer": "adam", "learning_rate": 7.5e-4, "batch_size": 64},
}


@dataclass
class TrainConfig:
    # horizons and data
    t_p: int = 8
    t_f: int = 12
    timestep: float = 0.4

    # model structure
    k_modes: int = 5
    granularities: Tuple[int, ...] = (2, 4, 8)
    d: int = 64            # fill-projection / position-embedding width
    d_a: int = 64          # agent feature width
    hidden: int = 128      # hidden width of every two-layer MLP
    activation: str = "relu"
    pos_mode: str = "static_sinusoidal"   # or "learnable"
    share_fill_heads: bool = True         # one fill head per interval, shared across groups
    use_neighbors: bool = True
    tail_key: str = "last"                # confidence tail input: "last" or "nearest_tf"

    # losses
    loss_kind: str = "mse"                # spatial-loss regression kind
    spatial_mode: str = "wta"             # "wta" or "all_modes"
    gt_tail_mode: str = "extrapolate"     # "extrapolate" or "cap"
    eta1: float = 0.1
    eta2: float = 1.0

    # optimization
    optimizer: str = "adam"
    learning_rate: float = 7.5e-4
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 50
    clip_norm: float = 5.0
    seed: int = 0
    dtype: str = "float32"

    # phase control
    train_recursive: bool = False
    freeze_prefixes: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.t_p < 2 or self.t_f < 2:
            raise ValueError("t_p and t_f must both be >= 2")
        if self.k_modes < 1:
            raise ValueError("k_modes must be >= 1")
        gs = tuple(int(g) for g in self.granularities)
        if not gs or gs[0] != 2 or sorted(gs) != list(gs):
            raise ValueError(f"granularities must be an ascending chain starting at 2, got {gs}")
        for a, b in zip(gs, gs[1:]):
            if b != 2 * a:
                raise ValueError(f"granularities must double at each step, got {gs}")
        self.granularities = gs
        if self.eta1 < 0 or self.eta2 < 0:
            raise ValueError("eta1 and eta2 must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.optimizer not in ALGORITHMS:
            raise ValueError(f"optimizer must be one of {ALGORITHMS}")
        if self.spatial_mode not in ("wta", "all_modes"):
            raise ValueError("spatial_mode must be 'wta' or 'all_modes'")
        if self.gt_tail_mode not in ("extrapolate", "cap"):
            raise ValueError("gt_tail_mode must be 'extrapolate' or 'cap'")
        if self.pos_mode not in ("static_sinusoidal", "learnable"):
            raise ValueError("pos_mode must be 'static_sinusoidal' or 'learnable'")
        if self.tail_key not in ("last", "nearest_tf"):
            raise ValueError("tail_key must be 'last' or 'nearest_tf'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if self.d % 2 != 0:
            raise ValueError("d must be even (paired sin/cos position embeddings)")
        self.freeze_prefixes = tuple(self.freeze_prefixes)

    @property
    def n_granularities(self) -> int:
        return len(self.granularities)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["granularities"] = list(self.granularities)
        out["freeze_prefixes"] = list(self.freeze_prefixes)
        return out

    @classmethod
    def from_dict(cls, obj: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(obj)
        for key in ("granularities", "freeze_prefixes"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def with_preset(self, name: str) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        out = self.to_dict()
        out.update(PRESETS[name])
        return TrainConfig.from_dict(out)
