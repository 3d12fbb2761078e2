"""Loss, reverse-mode gradients, finite-difference checks and the adapter training loop."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateBatchError, DivergenceError, InputError
from .model import ToyModel, backprop, forward_batch
from .tasks import LabeledExample, evaluate_accuracy, to_arrays

log = logging.getLogger(__name__)

GradientSet = dict[str, np.ndarray]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets, loss_mask=None) -> float:
    """Mean negative log-likelihood over positions with a non-zero mask."""
    loss, _ = _ce_with_grad(np.asarray(logits), np.asarray(targets), loss_mask)
    return loss


def _mean_nll(logits, targets, loss_mask):
    """Masked mean NLL kept in the logits' dtype (no rounding to float)."""
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    mask = np.asarray(loss_mask).astype(bool)
    return -(picked * mask).sum() / mask.sum()


def _ce_with_grad(logits, targets, loss_mask):
    if loss_mask is None:
        loss_mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(loss_mask).astype(bool)
    if logits.shape[:-1] != targets.shape or mask.shape != targets.shape:
        raise InputError(
            f"logits {logits.shape}, targets {targets.shape} and mask {mask.shape} disagree"
        )
    n = int(mask.sum())
    if n == 0:
        raise DegenerateBatchError("no position contributes to the loss")
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * mask).sum() / n)
    dlogits = np.exp(logp)
    np.put_along_axis(
        dlogits, targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1,
    )
    dlogits *= (mask / n)[..., None]
    return loss, dlogits


def _batchify(tokens, targets, mask):
    tokens = np.asarray(tokens)
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones(targets.shape, dtype=np.int64)
    mask = np.asarray(mask)
    if tokens.ndim == 1:
        tokens, targets, mask = tokens[None], targets[None], mask[None]
    return tokens, targets, mask


def loss_fn(model: ToyModel, tokens, targets, mask=None) -> float:
    tokens, targets, mask = _batchify(tokens, targets, mask)
    logits, _, _ = forward_batch(model, tokens)
    return cross_entropy(logits, targets, mask)


def backward(model: ToyModel, tokens, targets, mask=None, wrt: set[str] | None = None):
    """Loss and exact gradients for every trainable parameter (or for ``wrt``).

    ``tokens``/``targets``/``mask`` may be one sequence or a ``(B, T)`` batch;
    the loss is the mean over all unmasked positions of the batch.
    """
    tokens, targets, mask = _batchify(tokens, targets, mask)
    logits, _, cache = forward_batch(model, tokens, keep_cache=True)
    loss, dlogits = _ce_with_grad(logits, targets, mask)
    return loss, backprop(model, cache, dlogits, wrt)


def finite_diff_grad(model: ToyModel, tokens, targets, mask, param_name: str,
                     epsilon: float = 1e-5, index: Sequence[tuple] | None = None,
                     extended: bool = False) -> np.ndarray:
    """Central differences ``(L(θ+ε) - L(θ-ε)) / 2ε`` for one parameter tensor.

    With ``extended`` the two losses are evaluated on a ``np.longdouble``
    copy of the model. In plain double the difference of two losses near 4
    carries about 1e-15 of rounding, i.e. ~5e-11 after dividing by 2ε, which
    alone is a 1e-4 relative error on gradients of size 5e-7. Where
    ``longdouble`` is no wider than double this changes nothing.

    ``index`` restricts the estimate to selected coordinates (others stay 0).
    The model itself is never modified.
    """
    if param_name not in model.params:
        raise KeyError(f"unknown parameter {param_name!r}")
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    dt = np.longdouble if extended else model.params[param_name].dtype.type
    probe = ToyModel(model.config, {n: a.astype(dt) for n, a in model.params.items()},
                     model.trainable, model.base_names, model.injected)
    tokens, targets, mask = _batchify(tokens, targets, mask)

    def loss():
        return _mean_nll(forward_batch(probe, tokens)[0], targets, mask)

    p = probe.params[param_name]
    est = np.zeros(p.shape, dtype=dt)
    coords = index if index is not None else list(np.ndindex(p.shape))
    for i in coords:
        old = p[i]
        p[i] = old + dt(epsilon)
        up = loss()
        p[i] = old - dt(epsilon)
        down = loss()
        p[i] = old
        est[i] = (up - down) / (2 * dt(epsilon))
    return est.astype(model.params[param_name].dtype)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic), floor)


@dataclass
class GradCheckResult:
    worst: dict[str, float]          # parameter -> worst relative error
    worst_index: dict[str, tuple]
    tolerance: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.worst.values())

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.worst.items() if v > self.tolerance}


def gradient_check(model: ToyModel, tokens, targets, mask=None, epsilon: float = 1e-5,
                   tolerance: float = 1e-4, params: Sequence[str] | None = None,
                   grad_hook: Callable[[GradientSet], GradientSet] | None = None) -> GradCheckResult:
    """Compare analytic gradients with central differences on every coordinate.

    Differences are taken in double; coordinates whose error exceeds a tenth
    of the tolerance are re-estimated with the extended-precision oracle,
    since for tiny gradients double rounding alone can reach the tolerance.
    ``grad_hook`` lets callers tamper with the analytic gradients (negative
    controls).
    """
    _, grads = backward(model, tokens, targets, mask)
    if grad_hook is not None:
        grads = grad_hook(grads)
    names = list(params) if params is not None else model.trainable_names()
    worst, where, n = {}, {}, 0
    for name in names:
        fd = finite_diff_grad(model, tokens, targets, mask, name, epsilon)
        rel = relative_error(grads[name], fd)
        doubtful = [tuple(int(v) for v in i) for i in np.argwhere(rel > tolerance / 10)]
        if doubtful:
            fine = finite_diff_grad(model, tokens, targets, mask, name, epsilon, doubtful, extended=True)
            for i in doubtful:
                fd[i] = fine[i]
            rel = relative_error(grads[name], fd)
        k = np.unravel_index(int(np.argmax(rel)), rel.shape)
        worst[name] = float(rel[k])
        where[name] = tuple(int(i) for i in k)
        n += rel.size
    return GradCheckResult(worst, where, tolerance, n)


def randomize_trainable(model: ToyModel, seed: int = 0, scale: float = 0.3) -> None:
    """Move trainable parameters off their initial values (in place).

    At init the ``b`` factors are zero, which makes the ``a`` gradients
    exactly zero; gradient checks are more informative away from that point.
    """
    rng = np.random.default_rng(seed)
    for name in model.trainable_names():
        p = model.params[name]
        p += rng.normal(0.0, scale, size=p.shape).astype(p.dtype)


# ----------------------------------------------------------------- optimizers


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    ADAMW = "adamw"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_input_length: int = 128
    steps: int | None = None
    epochs: int | None = None
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    grad_clip: float | None = None
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.optimizer = OptimizerKind(self.optimizer)
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.steps is None and self.epochs is None:
            self.epochs = 1
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.value
        return d


@dataclass
class TrainState:
    """Everything besides the parameters needed to resume a run bit-exactly."""

    step: int = 0
    rng_state: dict | None = None
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    order: list[int] = field(default_factory=list)
    cursor: int = 0


class AdamW:
    def __init__(self, cfg: TrainConfig, state: TrainState):
        self.cfg = cfg
        self.state = state

    def step(self, params: dict[str, np.ndarray], grads: GradientSet, t: int) -> None:
        c = self.cfg
        m, v = self.state.moments, self.state.moments
        for name, g in grads.items():
            p = params[name]
            mk, vk = f"m.{name}", f"v.{name}"
            if mk not in m:
                m[mk] = np.zeros_like(p)
                v[vk] = np.zeros_like(p)
            m[mk] *= c.beta1
            m[mk] += (1 - c.beta1) * g
            v[vk] *= c.beta2
            v[vk] += (1 - c.beta2) * g * g
            mhat = m[mk] / (1 - c.beta1 ** t)
            vhat = v[vk] / (1 - c.beta2 ** t)
            if c.weight_decay:
                p -= c.learning_rate * c.weight_decay * p
            p -= c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)


class SGD:
    def __init__(self, cfg: TrainConfig, state: TrainState):
        self.cfg = cfg

    def step(self, params, grads, t):
        for name, g in grads.items():
            params[name] -= self.cfg.learning_rate * g


def _clip(grads: GradientSet, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total
    return total


@dataclass
class TrainResult:
    history: list[dict]
    state: TrainState


def _shift(tokens: np.ndarray, mask: np.ndarray):
    """Next-token inputs/targets/mask from full sequences."""
    return tokens[:, :-1], tokens[:, 1:], mask[:, 1:]


def train(
    model: ToyModel,
    dataset: Sequence[LabeledExample],
    config: TrainConfig,
    eval_set: Sequence[LabeledExample] | None = None,
    state: TrainState | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train the model's trainable registry on completion-only next-token loss.

    Batches are drawn from a seeded permutation of the dataset. The loop is
    deterministic given ``config.seed``, the data and the starting state.
    Raises :class:`DivergenceError` on a non-finite loss.
    """
    if not dataset:
        raise InputError("training needs a non-empty dataset")
    too_long = max(len(e.tokens) for e in dataset)
    if too_long - 1 > config.max_input_length:
        raise ConfigError(f"examples of {too_long} tokens exceed max_input_length "
                          f"{config.max_input_length}")
    tokens, mask = to_arrays(dataset)
    state = state or TrainState()
    rng = np.random.default_rng(config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    opt_cls = AdamW if config.optimizer is OptimizerKind.ADAMW else SGD
    opt = opt_cls(config, state)
    n = len(dataset)
    steps_per_epoch = max(1, -(-n // config.batch_size))
    total = config.steps if config.steps is not None else config.epochs * steps_per_epoch
    history: list[dict] = []

    def emit(rec):
        history.append(rec)
        if on_record is not None:
            on_record(rec)

    if eval_set and config.eval_every:
        emit({"step": state.step, "eval_accuracy": evaluate_accuracy(model, eval_set).accuracy})

    for _ in range(total):
        if state.cursor >= len(state.order):
            state.order = [int(i) for i in rng.permutation(n)]
            state.cursor = 0
        idx = state.order[state.cursor:state.cursor + config.batch_size]
        state.cursor += config.batch_size
        x, y, m = _shift(tokens[idx], mask[idx])
        if not m.any():
            continue
        loss, grads = backward(model, x, y, m)
        state.step += 1
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise DivergenceError(state.step, loss, model.lambdas())
        rec = {"step": state.step, "loss": loss}
        if config.grad_clip is not None:
            rec["grad_norm"] = _clip(grads, config.grad_clip)
        opt.step(model.params, grads, state.step)
        lams = model.lambdas()
        if lams:
            rec["lambda"] = lams
        if eval_set and config.eval_every and state.step % config.eval_every == 0:
            rec["eval_accuracy"] = evaluate_accuracy(model, eval_set).accuracy
        emit(rec)
    state.rng_state = rng.bit_generator.state
    return TrainResult(history, state)


def write_metrics(path, history: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
