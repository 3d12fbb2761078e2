import json

import numpy as np
import pytest

from difflora.adapters import AdapterPlacement
from difflora.errors import ConfigError, DegenerateBatchError, DivergenceError, InputError
from difflora.model import forward
from difflora.tasks import NeedleSpec, gen_needle
from difflora.training import (
    TrainConfig, backward, cross_entropy, finite_diff_grad, gradient_check, loss_fn,
    randomize_trainable, relative_error, train, write_metrics,
)
from tests.conftest import make_model

RNG = np.random.default_rng(0)
TOK = RNG.integers(64, size=9)
X, Y = TOK[:-1], TOK[1:]


def test_ce_uniform_logits():
    assert cross_entropy(np.zeros((3, 64)), [1, 2, 3]) == pytest.approx(np.log(64), rel=1e-14)
    assert np.log(64) == pytest.approx(4.1589, abs=1e-4)


def test_ce_confident_correct():
    logits = np.zeros((2, 8))
    logits[[0, 1], [3, 5]] = 200.0
    assert cross_entropy(logits, [3, 5]) < 1e-80


def test_ce_direct_summation():
    logits = RNG.normal(size=(2, 5))
    t = [4, 1]
    want = -np.mean([logits[i, t[i]] - np.log(np.sum(np.exp(logits[i]))) for i in range(2)])
    assert cross_entropy(logits, t) == pytest.approx(want, rel=1e-13)
    assert cross_entropy(logits, t, [0, 1]) == pytest.approx(
        -(logits[1, 1] - np.log(np.exp(logits[1]).sum())), rel=1e-13)


def test_ce_all_masked():
    with pytest.raises(DegenerateBatchError):
        cross_entropy(np.zeros((2, 4)), [0, 1], [0, 0])


def test_masked_logits_do_not_matter():
    logits = RNG.normal(size=(4, 6))
    mask = [1, 0, 1, 0]
    other = logits.copy()
    other[[1, 3]] += RNG.normal(size=(2, 6)) * 100
    assert cross_entropy(logits, [0, 1, 2, 3], mask) == cross_entropy(other, [0, 1, 2, 3], mask)


def test_zero_signal_gives_zero_gradients():
    m = make_model(variant="fulllora")
    randomize_trainable(m, seed=1)
    logits = forward(m, X)
    y = logits.argmax(-1)
    m.params["unembed"] *= 1e6  # saturate so the loss at the picked targets is exactly 0
    loss, grads = backward(m, X, y)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_fixed_lambda_has_no_gradient_entry():
    m = make_model()
    _, grads = backward(m, X, Y)
    assert set(grads) == m.trainable
    assert not any(k.endswith("lambda") for k in grads)
    m = make_model(lambda_mode="learnable")
    _, grads = backward(m, X, Y)
    assert set(grads) == m.trainable and sum(k.endswith("lambda") for k in grads) == 2


def test_strict_zero_init_is_a_stationary_point():
    """With both negative-term adapters zero, every adapter gradient vanishes exactly."""
    strict = make_model(k2_init="zero")
    _, grads = backward(strict, X, Y)
    assert all(not g.any() for g in grads.values())
    default = make_model()
    _, grads = backward(default, X, Y)
    assert any(grads[n].any() for n in grads if "q2" in n)


def test_finite_diff_on_exactly_linear_parameter():
    """Calibrate the oracle: logits are linear in the unembedding, so with a
    single target the central difference has no truncation error."""
    m = make_model(variant="baseline")
    x, y = TOK[:4], TOK[1:5]
    from difflora.model import forward_batch
    logits, _, cache = forward_batch(m, x[None], keep_cache=True)
    fd = finite_diff_grad(m, x, y, None, "unembed", epsilon=1e-3, index=[(0, 0), (5, 7)])
    fd_small = finite_diff_grad(m, x, y, None, "unembed", epsilon=1e-6, index=[(0, 0), (5, 7)])
    assert np.allclose(fd, fd_small, rtol=1e-6, atol=1e-12)


def test_extended_oracle_beats_double_rounding():
    m = make_model()
    randomize_trainable(m, seed=0)
    _, grads = backward(m, X, Y)
    name = "layers.0.attn.k2.b"
    ext = finite_diff_grad(m, X, Y, None, name, extended=True)
    dbl = finite_diff_grad(m, X, Y, None, name)
    assert np.abs(ext - grads[name]).max() <= np.abs(dbl - grads[name]).max()


def test_finite_diff_restores_parameter():
    m = make_model()
    randomize_trainable(m, seed=2)
    before = m.params["layers.0.attn.q2.a"].tobytes()
    finite_diff_grad(m, X, Y, None, "layers.0.attn.q2.a")
    assert m.params["layers.0.attn.q2.a"].tobytes() == before
    with pytest.raises(KeyError):
        finite_diff_grad(m, X, Y, None, "nope")


def test_lambda_gradient_three_tokens():
    m = make_model(lambda_mode="learnable", lambda_init=0.3)
    randomize_trainable(m, seed=3)
    x, y = TOK[:3], TOK[1:4]
    _, grads = backward(m, x, y)
    for name in ("layers.0.attn.lambda", "layers.1.attn.lambda"):
        fd = finite_diff_grad(m, x, y, None, name)
        assert relative_error(grads[name], fd).max() <= 1e-6


def test_group_norm_gain_gradient():
    m = make_model(placement=AdapterPlacement.both_terms(4), group_norm=True)
    randomize_trainable(m, seed=4)
    x, y = TOK[:3], TOK[1:4]
    _, grads = backward(m, x, y)
    fd = finite_diff_grad(m, x, y, None, "layers.1.attn.gn_gain")
    assert relative_error(grads["layers.1.attn.gn_gain"], fd).max() <= 1e-6


@pytest.mark.parametrize("kw", [
    dict(),
    dict(lambda_mode="learnable"),
    dict(placement=AdapterPlacement.both_terms(4), group_norm=True, lambda_mode="learnable"),
    dict(variant="fulllora", fulllora_rank=2),
])
def test_gradient_check_passes(kw):
    m = make_model(**kw)
    randomize_trainable(m, seed=5)
    res = gradient_check(m, X, Y)
    assert res.passed, res.failures()


def test_gradient_check_catches_corruption():
    m = make_model()
    randomize_trainable(m, seed=6)

    def corrupt(grads):
        grads["layers.1.attn.k2.a"] = grads["layers.1.attn.k2.a"] * 1.001
        return grads

    res = gradient_check(m, X, Y, grad_hook=corrupt)
    assert not res.passed
    assert set(res.failures()) == {"layers.1.attn.k2.a"}


def test_frozen_gradients_match_finite_differences():
    """The reverse pass also covers base weights (used when pretraining a base)."""
    m = make_model(variant="baseline")
    from difflora.model import backprop, forward_batch
    from difflora.training import _ce_with_grad
    names = ["tok_emb", "pos_emb", "layers.0.attn.w_q", "layers.1.mlp.w_up", "final_norm", "layers.0.norm1"]
    logits, _, cache = forward_batch(m, X[None], keep_cache=True)
    _, dl = _ce_with_grad(logits, Y[None], np.ones((1, 8)))
    grads = backprop(m, cache, dl, wrt=set(names))
    for n in names:
        idx = [tuple(int(v) for v in np.unravel_index(i, m.params[n].shape)) for i in (0, 7, m.params[n].size // 2)]
        fd = finite_diff_grad(m, X, Y, None, n, index=idx)
        for i in idx:
            assert abs(grads[n][i] - fd[i]) <= 1e-4 * max(abs(grads[n][i]), 1e-8) + 1e-10


def _data(n=24, seed=1):
    return gen_needle(NeedleSpec(seq_len=20, n_pairs=2, n_examples=n, seed=seed))


def test_zero_steps_leaves_model_unchanged():
    m = make_model()
    before = {k: v.tobytes() for k, v in m.params.items()}
    res = train(m, _data(), TrainConfig(steps=0))
    assert res.history == []
    assert all(m.params[k].tobytes() == v for k, v in before.items())


def test_zero_lr_constant_loss():
    m = make_model()
    data = _data(8)
    res = train(m, data, TrainConfig(learning_rate=0.0, batch_size=8, steps=4))
    losses = [r["loss"] for r in res.history]
    assert max(losses) - min(losses) <= 1e-12  # batch order only changes summation order


def test_determinism_and_frozen_digest():
    runs = []
    for _ in range(2):
        m = make_model(lambda_mode="learnable")
        digest = m.frozen_digest()
        res = train(m, _data(), TrainConfig(learning_rate=1e-2, batch_size=5, steps=7, seed=3))
        assert m.frozen_digest() == digest
        runs.append(([r["loss"] for r in res.history], {k: m.params[k].tobytes() for k in m.trainable}))
    assert runs[0] == runs[1]


def test_lambda_trajectory_recorded():
    m = make_model(lambda_mode="learnable")
    res = train(m, _data(), TrainConfig(learning_rate=1e-2, batch_size=4, steps=3))
    lams = [r["lambda"]["layers.0"] for r in res.history]
    assert len(lams) == 3 and lams[-1] != 0.1


def test_sgd_and_clip():
    m = make_model()
    res = train(m, _data(), TrainConfig(learning_rate=0.5, optimizer="sgd", grad_clip=1e-3, steps=2,
                                        batch_size=4))
    assert all("grad_norm" in r for r in res.history)


def test_divergence_error_reports_step_and_lambda():
    m = make_model(lambda_mode="learnable")
    m.params["layers.0.attn.lambda"][0, 0] = np.nan
    with pytest.raises(DivergenceError) as err:
        train(m, _data(), TrainConfig(steps=3, batch_size=4))
    assert err.value.step == 1 and "layers.0" in err.value.lambdas
    assert "step 1" in str(err.value)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    assert TrainConfig().learning_rate == 1e-4 and TrainConfig().batch_size == 64
    with pytest.raises(InputError):
        train(make_model(), [], TrainConfig(steps=1))


def test_metrics_jsonl(tmp_path):
    m = make_model(lambda_mode="learnable")
    res = train(m, _data(), TrainConfig(learning_rate=1e-3, batch_size=4, steps=3, eval_every=2),
                eval_set=_data(8, seed=2))
    write_metrics(tmp_path / "m.jsonl", res.history)
    recs = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert recs[0] == {"step": 0, "eval_accuracy": recs[0]["eval_accuracy"]}
    assert {"step", "loss", "lambda", "eval_accuracy"} <= set(recs[2])
