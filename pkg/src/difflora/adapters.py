"""Low-rank adapters: construction, delta application and parameter accounting."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

INIT_STD = 0.02


@dataclass
class LowRankAdapter:
    """Trainable weight delta ``(alpha / rank) * b @ a``.

    ``b`` is ``in_dim x rank`` and is applied first (``x @ b @ a``), so it is
    the factor that starts at zero.
    """

    b: np.ndarray
    a: np.ndarray
    rank: int
    alpha: float

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.rank}")
        if self.b.ndim != 2 or self.a.ndim != 2:
            raise ShapeError("adapter factors must be 2-D")
        if self.b.shape[1] != self.rank or self.a.shape[0] != self.rank:
            raise ShapeError(
                f"adapter factors {self.b.shape} and {self.a.shape} do not match rank {self.rank}"
            )

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def in_dim(self) -> int:
        return self.b.shape[0]

    @property
    def out_dim(self) -> int:
        return self.a.shape[1]

    @property
    def n_params(self) -> int:
        return self.b.size + self.a.size


def init_adapter(
    in_dim: int,
    out_dim: int,
    rank: int,
    alpha: float,
    seed: int,
    dtype=np.float64,
    zero_b: bool = True,
) -> LowRankAdapter:
    """LoRA-style init: ``a`` Gaussian, ``b`` zero so the delta starts at zero.

    ``zero_b=False`` draws ``b`` from the same Gaussian. The model uses it for
    the negative-term key adapter: with both ``q2`` and ``k2`` at zero the
    negative scores ``q2 @ k2.T`` sit at a saddle where every adapter
    gradient vanishes, while a zero ``q2`` alone already keeps the scores
    (and so the model output) unchanged at init.
    """
    if rank < 1 or rank > min(in_dim, out_dim):
        raise ConfigError(f"rank {rank} is not in [1, min({in_dim}, {out_dim})]")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, INIT_STD, size=(rank, out_dim)).astype(dtype)
    if zero_b:
        b = np.zeros((in_dim, rank), dtype=dtype)
    else:
        b = rng.normal(0.0, INIT_STD, size=(in_dim, rank)).astype(dtype)
    return LowRankAdapter(b=b, a=a, rank=rank, alpha=float(alpha))


def apply_delta(x: np.ndarray, adapter: LowRankAdapter) -> np.ndarray:
    """``(alpha/rank) * x @ b @ a`` as two thin products."""
    if x.shape[-1] != adapter.in_dim:
        raise ShapeError(
            f"input with {x.shape[-1]} features does not fit adapter with in_dim {adapter.in_dim}"
        )
    return adapter.scale * ((x @ adapter.b) @ adapter.a)


def delta_backward(x: np.ndarray, dy: np.ndarray, adapter: LowRankAdapter):
    """Backward of :func:`apply_delta`.

    Returns ``(dx, db, da)``; parameter gradients are summed over all leading
    (batch/sequence) axes.
    """
    s = adapter.scale
    xb = x @ adapter.b
    dya = dy @ adapter.a.T
    dx = s * (dya @ adapter.b.T)
    x2 = x.reshape(-1, x.shape[-1])
    db = s * (x2.T @ dya.reshape(-1, dya.shape[-1]))
    da = s * (xb.reshape(-1, xb.shape[-1]).T @ dy.reshape(-1, dy.shape[-1]))
    return dx, db, da


def merged_weight(w: np.ndarray, adapter: LowRankAdapter) -> np.ndarray:
    if w.shape != (adapter.in_dim, adapter.out_dim):
        raise ShapeError(
            f"weight {w.shape} does not match adapter {adapter.in_dim}x{adapter.out_dim}"
        )
    return w + adapter.scale * (adapter.b @ adapter.a)


class PlacementMode(str, enum.Enum):
    NEGATIVE_ONLY = "negative_only"
    BOTH_TERMS = "both_terms"


@dataclass(frozen=True)
class AdapterPlacement:
    """Where DiffLoRA puts adapters and with which ranks.

    With ``BOTH_TERMS`` the positive-term Q/K adapters use the same rank as the
    negative ones; to stay parameter-matched with a negative-only model of rank
    ``r`` both use ``r/2`` (see :meth:`matched_both_terms`).
    """

    mode: PlacementMode
    rank_negative: int
    rank_positive: int = 0

    def __post_init__(self):
        if self.rank_negative < 1:
            raise ConfigError("rank_negative must be >= 1")
        if self.mode is PlacementMode.NEGATIVE_ONLY and self.rank_positive != 0:
            raise ConfigError("negative-only placement cannot carry positive-term adapters")
        if self.mode is PlacementMode.BOTH_TERMS and self.rank_positive != self.rank_negative:
            raise ConfigError("both-terms placement uses equal ranks on both terms")

    @classmethod
    def negative_only(cls, rank: int) -> "AdapterPlacement":
        return cls(PlacementMode.NEGATIVE_ONLY, rank, 0)

    @classmethod
    def both_terms(cls, rank: int) -> "AdapterPlacement":
        return cls(PlacementMode.BOTH_TERMS, rank, rank)

    @classmethod
    def matched_both_terms(cls, negative_rank: int) -> "AdapterPlacement":
        if negative_rank % 2:
            raise ConfigError(f"rank {negative_rank} is odd; cannot halve it")
        return cls.both_terms(negative_rank // 2)

    @property
    def adapted_projections(self) -> list[str]:
        names = ["q2", "k2"]
        if self.mode is PlacementMode.BOTH_TERMS:
            names = ["q1", "k1"] + names
        return names

    def rank_for(self, projection: str) -> int:
        return self.rank_positive if projection in ("q1", "k1") else self.rank_negative


def trainable_param_count(
    placement: AdapterPlacement,
    n_layers: int,
    in_dim: int,
    out_dim: int,
    lambda_learnable: bool,
    group_norm: bool,
    head_dim: int,
    n_heads: int,
) -> int:
    """Exact number of trainable scalars in a DiffLoRA model."""
    per_layer = sum(placement.rank_for(p) * (in_dim + out_dim) for p in placement.adapted_projections)
    if lambda_learnable:
        per_layer += 1
    if group_norm:
        per_layer += n_heads * head_dim
    return n_layers * per_layer


def fulllora_shapes(d_model: int, mlp_hidden: int) -> dict[str, tuple[int, int]]:
    """Per-layer weights adapted by the Full-LoRA baseline and their shapes."""
    return {
        "attn.q": (d_model, d_model),
        "attn.k": (d_model, d_model),
        "attn.v": (d_model, d_model),
        "attn.o": (d_model, d_model),
        "mlp.up": (d_model, mlp_hidden),
        "mlp.down": (mlp_hidden, d_model),
    }


def fulllora_param_count(rank: int, n_layers: int, d_model: int, mlp_hidden: int) -> int:
    shapes = fulllora_shapes(d_model, mlp_hidden).values()
    return n_layers * sum(rank * (i + o) for i, o in shapes)


def solve_fulllora_rank(budget: int, n_layers: int, d_model: int, mlp_hidden: int) -> int:
    """Largest Full-LoRA rank whose trainable count does not exceed ``budget``."""
    max_rank = min(d_model, mlp_hidden)
    best = 0
    for r in range(1, max_rank + 1):
        if fulllora_param_count(r, n_layers, d_model, mlp_hidden) > budget:
            break
        best = r
    if best == 0:
        raise ConfigError(f"budget {budget} is below a rank-1 Full-LoRA model")
    return best
