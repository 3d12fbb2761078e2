"""Dense linear-algebra and normalization primitives.

Tensors are plain ``numpy.ndarray`` objects. Every function here accepts a
2-D array; most also accept a stack of 2-D arrays (leading batch axes), which
the model uses internally to run several sequences at once.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, ShapeError

NORM_EPS = 1e-6

_DTYPES = {"double": np.float64, "single": np.float32}


def resolve_dtype(precision: str | None = None) -> np.dtype:
    """Map ``"double"``/``"single"`` to a numpy dtype.

    ``None`` falls back to ``$DIFFLORA_PRECISION`` and then to double.
    """
    if precision is None:
        precision = os.environ.get("DIFFLORA_PRECISION", "double")
    try:
        return np.dtype(_DTYPES[precision])
    except KeyError:
        raise ConfigError(f"unknown precision {precision!r}; expected 'double' or 'single'") from None


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    arr = np.array(data, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class CausalMask:
    """Decoder mask: position ``i`` may attend to ``j`` iff ``j <= i``."""

    seq_len: int

    def allowed(self, i: int, j: int) -> bool:
        return 0 <= j <= i < self.seq_len

    @cached_property
    def matrix(self) -> np.ndarray:
        m = np.tril(np.ones((self.seq_len, self.seq_len), dtype=bool))
        m.flags.writeable = False
        return m

    @cached_property
    def additive(self) -> np.ndarray:
        """0 on allowed entries, -inf elsewhere."""
        a = np.where(self.matrix, 0.0, -np.inf)
        a.flags.writeable = False
        return a


def _check_2d(name: str, a: np.ndarray) -> None:
    if a.ndim < 2:
        raise ShapeError(f"{name} must be at least 2-D, got shape {a.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_2d("a", a)
    _check_2d("b", b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    return a @ b


def masked_row_softmax(scores: np.ndarray, mask: CausalMask) -> np.ndarray:
    """Row softmax restricted to the causal prefix of each row.

    Disallowed entries come out as exact zeros. The row maximum over allowed
    entries is subtracted before exponentiation.
    """
    _check_2d("scores", scores)
    n, m = scores.shape[-2:]
    if n != m:
        raise ShapeError(f"softmax scores must be square, got {scores.shape[-2:]}")
    if n != mask.seq_len:
        raise ShapeError(f"scores are {n}x{m} but mask is for seq_len {mask.seq_len}")
    shifted = scores + mask.additive
    shifted -= shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted, out=shifted)  # exp(-inf) is exactly 0 on masked entries
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the scores of a row softmax, given its output and upstream grad.

    Masked entries have zero probability and therefore receive zero gradient.
    """
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def scaled_scores(q: np.ndarray, k: np.ndarray, scale_dim: int) -> np.ndarray:
    if scale_dim <= 0:
        raise ConfigError(f"scale_dim must be positive, got {scale_dim}")
    _check_2d("q", q)
    _check_2d("k", k)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q {q.shape} and k {k.shape} disagree on the feature dimension")
    return (q @ np.swapaxes(k, -1, -2)) / np.sqrt(scale_dim)


def _row_rms(x: np.ndarray, eps: float) -> np.ndarray:
    """Row RMS floored at ``eps``.

    A floor rather than ``sqrt(ms + eps)``: the additive form shrinks every
    row by about ``eps / (2 ms)``, which exceeds 1e-6 for the small head
    outputs seen in attention. With the floor, rows with RMS above ``eps``
    come out at exactly unit RMS and an all-zero row stays zero.
    """
    return np.maximum(np.sqrt((x * x).mean(axis=-1, keepdims=True)), eps)


def per_head_rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Scale every row of ``x`` to unit root-mean-square, then multiply by ``gain``."""
    gain = np.asarray(gain)
    if gain.ndim != 1 and not (gain.ndim == 2 and gain.shape[0] == 1):
        raise ShapeError(f"gain must be a vector, got shape {gain.shape}")
    if gain.shape[-1] != x.shape[-1]:
        raise ShapeError(f"gain has length {gain.shape[-1]} but rows have length {x.shape[-1]}")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    return x / _row_rms(x, eps) * gain.reshape(-1)


def rmsnorm_forward(x: np.ndarray, gain: np.ndarray, eps: float = NORM_EPS):
    """Like :func:`per_head_rmsnorm` but also returns ``(normalized, rms)`` for backward."""
    rms = _row_rms(x, eps)
    n = x / rms
    return n * gain, n, rms


def rmsnorm_backward(dy: np.ndarray, n: np.ndarray, rms: np.ndarray, gain: np.ndarray):
    """Returns ``(dx, dgain_per_row)``; the caller reduces ``dgain`` over rows."""
    dn = dy * gain
    # rows held at the eps floor have a constant denominator
    live = (n * n).mean(axis=-1, keepdims=True) > 0.5
    dx = (dn - live * n * (dn * n).mean(axis=-1, keepdims=True)) / rms
    return dx, dy * n


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(u: np.ndarray) -> np.ndarray:
    """Tanh approximation of GELU."""
    return gelu_with_tanh(u)[0]


def gelu_with_tanh(u: np.ndarray):
    """GELU output plus the tanh term, which :func:`gelu_grad` can reuse."""
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def gelu_grad(u: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * (u * u))
