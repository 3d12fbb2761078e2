"""Standard and differential attention over a frozen base with low-rank adapters.

Arrays are ``(..., T, D)``: a single sequence is ``(T, D)``; the model also
passes batches ``(B, T, D)`` through the same code. Heads are split as
``(..., H, T, head_dim)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .adapters import LowRankAdapter, apply_delta, delta_backward
from .errors import ConfigError, ShapeError
from .linalg import CausalMask

POSITIVE = ("q1", "k1")
NEGATIVE = ("q2", "k2")
ADAPTER_SLOTS = ("q1", "k1", "q2", "k2", "v", "o")


class LambdaMode(str, enum.Enum):
    FIXED = "fixed"
    LEARNABLE = "learnable"


class LambdaState:
    """Per-layer scalar weighting the negative softmax term.

    The value lives in a ``1x1`` array so that the optimizer can update it in
    place like any other parameter.
    """

    def __init__(self, mode: LambdaMode | str = LambdaMode.FIXED, init_value: float = 0.1,
                 param: np.ndarray | None = None, dtype=np.float64):
        self.mode = LambdaMode(mode)
        self.init_value = float(init_value)
        if not np.isfinite(self.init_value):
            raise ConfigError("lambda must be finite")
        if param is None:
            param = np.full((1, 1), self.init_value, dtype=dtype)
        self.param = param

    @property
    def value(self) -> float:
        return self.param[0, 0]

    @property
    def learnable(self) -> bool:
        return self.mode is LambdaMode.LEARNABLE

    def __repr__(self):
        return f"LambdaState(mode={self.mode.value}, value={self.value!r}, init={self.init_value!r})"


@dataclass
class DiffAttnLayer:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    n_heads: int
    adapters: dict[str, LowRankAdapter] = field(default_factory=dict)
    lam: LambdaState | None = None
    gn_gain: np.ndarray | None = None  # (n_heads, head_dim)

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.n_heads < 1 or d % self.n_heads:
            raise ConfigError(f"d_model {d} is not divisible by n_heads {self.n_heads}")
        unknown = set(self.adapters) - set(ADAPTER_SLOTS)
        if unknown:
            raise ConfigError(f"unknown adapter slots {sorted(unknown)}")
        if self.gn_gain is not None:
            if self.gn_gain.shape != (self.n_heads, self.head_dim):
                raise ShapeError(f"group-norm gain must be {(self.n_heads, self.head_dim)}")
            if self.lam is None or not 0.0 < self.lam.init_value < 1.0:
                raise ConfigError("group norm needs lambda_init in (0, 1)")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def differential(self) -> bool:
        return all(n in self.adapters for n in NEGATIVE)

    @property
    def lambda_init(self) -> float:
        return self.lam.init_value if self.lam is not None else 0.0


@dataclass
class AttnTrace:
    """Softmax maps captured during a forward pass.

    ``a1``/``a2`` are ``(H, T, T)`` arrays (or ``(B, H, T, T)`` for batched
    calls); ``a1[h]`` is head ``h``'s positive map. ``a2`` is ``None`` for
    standard attention.
    """

    a1: np.ndarray
    a2: np.ndarray | None
    lambda_used: float

    @property
    def n_heads(self) -> int:
        return self.a1.shape[-3]


def _project(x, w, adapter):
    y = x @ w
    if adapter is not None:
        y = y + apply_delta(x, adapter)
    return y


def _split(t, n_heads):
    *lead, T, D = t.shape
    return np.swapaxes(t.reshape(*lead, T, n_heads, D // n_heads), -2, -3)


def _merge(t):
    t = np.swapaxes(t, -2, -3)
    *lead, T, H, hd = t.shape
    return t.reshape(*lead, T, H * hd)


def _forward(x: np.ndarray, layer: DiffAttnLayer, mask: CausalMask, differential: bool):
    if x.ndim < 2 or x.shape[-1] != layer.d_model:
        raise ShapeError(f"input {x.shape} does not have d_model={layer.d_model} columns")
    if x.shape[-2] != mask.seq_len:
        raise ShapeError(f"input has {x.shape[-2]} positions but mask is for {mask.seq_len}")
    ad = layer.adapters
    H, hd = layer.n_heads, layer.head_dim
    q1 = _project(x, layer.w_q, ad.get("q1"))
    k1 = _project(x, layer.w_k, ad.get("k1"))
    v = _project(x, layer.w_v, ad.get("v"))
    q1h, k1h, vh = _split(q1, H), _split(k1, H), _split(v, H)
    a1 = linalg.masked_row_softmax(linalg.scaled_scores(q1h, k1h, hd), mask)
    cache = {"x": x, "q1h": q1h, "k1h": k1h, "vh": vh, "a1": a1}
    lam = 0.0
    if differential:
        if not layer.differential:
            raise ConfigError("differential attention needs q2 and k2 adapters")
        lam = layer.lam.value if layer.lam is not None else 0.0
        q2h = _split(apply_delta(x, ad["q2"]), H)
        k2h = _split(apply_delta(x, ad["k2"]), H)
        a2 = linalg.masked_row_softmax(linalg.scaled_scores(q2h, k2h, hd), mask)
        mix = a1 - lam * a2
        cache.update(q2h=q2h, k2h=k2h, a2=a2)
    else:
        a2 = None
        mix = a1
    heads = mix @ vh
    cache.update(mix=mix, lam=lam)
    if differential and layer.gn_gain is not None:
        gain = layer.gn_gain[:, None, :]
        normed, n, rms = linalg.rmsnorm_forward(heads, gain)
        cache.update(gn_n=n, gn_rms=rms)
        heads = normed * (1.0 - layer.lambda_init)
    concat = _merge(heads)
    out = _project(concat, layer.w_o, ad.get("o"))
    cache["concat"] = concat
    return out, AttnTrace(a1=a1, a2=a2, lambda_used=lam), cache


def standard_attention(x: np.ndarray, layer: DiffAttnLayer, mask: CausalMask):
    """Causal multi-head attention using only the positive term."""
    out, trace, _ = _forward(x, layer, mask, differential=False)
    return out, trace


def diff_attention(x: np.ndarray, layer: DiffAttnLayer, mask: CausalMask):
    """Per head ``(sm(Q1 K1^T/sqrt(hd)) - lambda * sm(Q2 K2^T/sqrt(hd))) V``.

    ``Q2``/``K2`` are pure adapter products. With group norm on, each head's
    output is RMS-normalized, multiplied by its gain and by ``1 - lambda_init``.
    """
    out, trace, _ = _forward(x, layer, mask, differential=True)
    return out, trace


def attention_backward(dout: np.ndarray, layer: DiffAttnLayer, cache: dict,
                       frozen_grads: bool = False):
    """Reverse pass for :func:`_forward`.

    Returns ``(dx, grads)`` where ``grads`` maps local names (``"q2.b"``,
    ``"lambda"``, ``"gn_gain"``, and ``"w_q"`` etc. when ``frozen_grads``) to
    arrays summed over the batch.
    """
    ad = layer.adapters
    H, hd = layer.n_heads, layer.head_dim
    x = cache["x"]
    grads: dict[str, np.ndarray] = {}
    scale = 1.0 / np.sqrt(hd)

    def flat_outer(a, b):
        return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])

    concat = cache["concat"]
    dconcat = dout @ layer.w_o.T
    if frozen_grads:
        grads["w_o"] = flat_outer(concat, dout)
    if "o" in ad:
        dx_o, grads["o.b"], grads["o.a"] = delta_backward(concat, dout, ad["o"])
        dconcat = dconcat + dx_o

    dheads = _split(dconcat, H)
    if "gn_n" in cache:
        dheads = dheads * (1.0 - layer.lambda_init)
        gain = layer.gn_gain[:, None, :]
        dheads, dgain_rows = linalg.rmsnorm_backward(dheads, cache["gn_n"], cache["gn_rms"], gain)
        lead = tuple(range(dgain_rows.ndim - 3))
        grads["gn_gain"] = dgain_rows.sum(axis=lead + (dgain_rows.ndim - 2,))

    vh, mix = cache["vh"], cache["mix"]
    dmix = dheads @ np.swapaxes(vh, -1, -2)
    dvh = np.swapaxes(mix, -1, -2) @ dheads

    def qk_backward(a, dA, qh, kh):
        ds = linalg.softmax_backward(a, dA)
        dq = (ds @ kh) * scale
        dk = (np.swapaxes(ds, -1, -2) @ qh) * scale
        return _merge(dq), _merge(dk)

    dq1, dk1 = qk_backward(cache["a1"], dmix, cache["q1h"], cache["k1h"])
    dv = _merge(dvh)
    dx = dq1 @ layer.w_q.T + dk1 @ layer.w_k.T + dv @ layer.w_v.T
    if frozen_grads:
        grads["w_q"] = flat_outer(x, dq1)
        grads["w_k"] = flat_outer(x, dk1)
        grads["w_v"] = flat_outer(x, dv)
    upstream = {"q1": dq1, "k1": dk1, "v": dv}

    if "a2" in cache:
        a2 = cache["a2"]
        lam = cache["lam"]
        if layer.lam is not None and layer.lam.learnable:
            grads["lambda"] = np.full((1, 1), -(dmix * a2).sum(), dtype=dmix.dtype)
        dq2, dk2 = qk_backward(a2, -lam * dmix, cache["q2h"], cache["k2h"])
        upstream.update(q2=dq2, k2=dk2)

    for slot, dy in upstream.items():
        if slot in ad:
            dxs, grads[f"{slot}.b"], grads[f"{slot}.a"] = delta_backward(x, dy, ad[slot])
            dx = dx + dxs
    return dx, grads


def effective_attention_map(trace: AttnTrace) -> np.ndarray:
    """Per-head ``a1 - lambda * a2`` (``a1`` alone for standard attention)."""
    if trace.a2 is None:
        return trace.a1
    if trace.a1.shape != trace.a2.shape:
        raise ShapeError(f"positive maps {trace.a1.shape} and negative maps {trace.a2.shape} differ")
    return trace.a1 - trace.lambda_used * trace.a2
