import numpy as np
import pytest

from difflora.adapters import AdapterPlacement
from difflora.model import ModelConfig, build_base, inject_adapters


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_model(variant="difflora", placement=None, seed=0, **kw):
    """Small double-precision model; DiffLoRA defaults to negative-only rank 8."""
    if variant == "difflora" and placement is None:
        placement = AdapterPlacement.negative_only(8)
    cfg = ModelConfig(variant=variant, placement=placement, seed=seed, **kw)
    base = build_base(ModelConfig(seed=seed, **{k: v for k, v in kw.items()
                                                if k in ("vocab_size", "d_model", "n_heads",
                                                         "n_layers", "max_seq_len", "mlp_hidden")}))
    if variant == "baseline":
        return base
    return inject_adapters(base, cfg)
