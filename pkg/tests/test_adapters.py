import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from difflora.adapters import (
    AdapterPlacement, LowRankAdapter, PlacementMode, apply_delta, fulllora_param_count,
    init_adapter, merged_weight, solve_fulllora_rank, trainable_param_count,
)
from difflora.errors import ConfigError, ShapeError


def test_init_shapes_and_zero_b():
    ad = init_adapter(8, 8, 4, alpha=8, seed=0)
    assert ad.b.shape == (8, 4) and ad.a.shape == (4, 8)
    assert not ad.b.any()
    assert abs(ad.a.std() - 0.02) < 0.01


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
def test_fresh_adapter_delta_is_exactly_zero(in_dim, out_dim, seed):
    rank = max(1, min(in_dim, out_dim) // 2)
    ad = init_adapter(in_dim, out_dim, rank, 2 * rank, seed)
    x = np.random.default_rng(seed).normal(size=(5, in_dim))
    assert np.array_equal(apply_delta(x, ad), np.zeros((5, out_dim)))


def test_same_seed_bit_identical():
    a = init_adapter(16, 8, 4, 8, seed=42).a
    b = init_adapter(16, 8, 4, 8, seed=42).a
    assert a.tobytes() == b.tobytes()
    assert init_adapter(16, 8, 4, 8, seed=43).a.tobytes() != a.tobytes()


def test_rank_too_large():
    with pytest.raises(ConfigError):
        init_adapter(4, 8, 5, 10, seed=0)


def test_gaussian_b_option():
    ad = init_adapter(8, 8, 2, 4, seed=0, zero_b=False)
    assert ad.b.any()


def test_identity_factorization():
    x = np.random.default_rng(0).normal(size=(3, 4))
    ad = LowRankAdapter(b=np.eye(4), a=np.eye(4), rank=4, alpha=4.0)
    assert np.array_equal(apply_delta(x, ad), x)


def test_apply_delta_dense_oracle(rng):
    x = rng.normal(size=(5, 6))
    b, a = rng.normal(size=(6, 2)), rng.normal(size=(2, 3))
    ad = LowRankAdapter(b=b, a=a, rank=2, alpha=3.0)
    dense = 1.5 * np.matmul(np.matmul(x, b), a)
    assert np.allclose(apply_delta(x, ad), dense, rtol=1e-13)


def test_apply_delta_shape_error():
    with pytest.raises(ShapeError):
        apply_delta(np.ones((2, 5)), init_adapter(4, 4, 2, 4, seed=0))


def test_merged_weight_zero_init_bit_identical(rng):
    w = rng.normal(size=(6, 6))
    assert merged_weight(w, init_adapter(6, 6, 3, 6, seed=1)).tobytes() == w.tobytes()


def test_merged_weight_zero_w_and_random(rng):
    b, a = rng.normal(size=(4, 2)), rng.normal(size=(2, 5))
    ad = LowRankAdapter(b=b, a=a, rank=2, alpha=4.0)
    w = rng.normal(size=(4, 5))
    assert np.allclose(merged_weight(np.zeros((4, 5)), ad), apply_delta(np.eye(4), ad), rtol=1e-14)
    assert np.allclose(merged_weight(w, ad), w + 2.0 * b @ a, rtol=1e-14)
    with pytest.raises(ShapeError):
        merged_weight(np.zeros((5, 4)), ad)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_apply_delta_equals_merged_zero(seed):
    r = np.random.default_rng(seed)
    ad = LowRankAdapter(b=r.normal(size=(7, 3)), a=r.normal(size=(3, 5)), rank=3, alpha=6.0)
    x = r.normal(size=(4, 7))
    assert np.allclose(apply_delta(x, ad), x @ merged_weight(np.zeros((7, 5)), ad), rtol=1e-12, atol=1e-14)


def test_placement_invariants():
    both = AdapterPlacement.both_terms(32)
    assert both.rank_positive == both.rank_negative == 32
    assert AdapterPlacement.negative_only(64).adapted_projections == ["q2", "k2"]
    assert both.adapted_projections == ["q1", "k1", "q2", "k2"]
    assert AdapterPlacement.matched_both_terms(64) == both
    with pytest.raises(ConfigError):
        AdapterPlacement(PlacementMode.BOTH_TERMS, 32, 16)
    with pytest.raises(ConfigError):
        AdapterPlacement(PlacementMode.NEGATIVE_ONLY, 8, 8)
    with pytest.raises(ConfigError):
        AdapterPlacement.matched_both_terms(7)


def _count(p, layers=1, n=16, d=16, lam=False, gn=False, hd=4, heads=4):
    return trainable_param_count(p, layers, n, d, lam, gn, hd, heads)


def test_count_negative_64_equals_both_32():
    for n, d in ((16, 16), (2048, 2048), (32, 48)):
        neg = _count(AdapterPlacement.negative_only(64), n=n, d=d)
        both = _count(AdapterPlacement.both_terms(32), n=n, d=d)
        assert neg == both == 2 * 64 * (n + d)


def test_count_zero_layers():
    assert _count(AdapterPlacement.negative_only(8), layers=0) == 0


def test_count_both_32_one_layer_with_lambda():
    assert _count(AdapterPlacement.both_terms(32), lam=True) == 4097


def test_count_by_enumeration():
    """Closed form against literally summing adapter shapes."""
    p = AdapterPlacement.both_terms(3)
    total = 0
    for _ in range(2):
        for proj in p.adapted_projections:
            ad = init_adapter(10, 12, p.rank_for(proj), 6, seed=0)
            total += ad.b.size + ad.a.size
        total += 1 + 4 * 3  # lambda + gains
    assert _count(p, layers=2, n=10, d=12, lam=True, gn=True, hd=3, heads=4) == total


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64).map(lambda r: 2 * r), st.integers(1, 4), st.integers(1, 300), st.integers(1, 300),
       st.booleans(), st.booleans())
def test_matching_law(r, layers, n, d, lam, gn):
    neg = trainable_param_count(AdapterPlacement.negative_only(r), layers, n, d, lam, gn, 4, 2)
    both = trainable_param_count(AdapterPlacement.both_terms(r // 2), layers, n, d, lam, gn, 4, 2)
    assert neg == both


def test_fulllora_solver_largest_fitting_rank():
    budget = _count(AdapterPlacement.negative_only(8), layers=2, n=32, d=32)
    assert budget == 2048
    r = solve_fulllora_rank(budget, 2, 32, 128)
    assert fulllora_param_count(r, 2, 32, 128) <= budget < fulllora_param_count(r + 1, 2, 32, 128)
    assert r == 1
