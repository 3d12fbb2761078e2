"""Toy decoder-only transformer hosting standard, Full-LoRA and DiffLoRA attention."""

from __future__ import annotations

import copy
import enum
import hashlib
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import linalg
from .adapters import (
    AdapterPlacement,
    LowRankAdapter,
    PlacementMode,
    apply_delta,
    delta_backward,
    fulllora_param_count,
    fulllora_shapes,
    init_adapter,
    solve_fulllora_rank,
    trainable_param_count,
)
from .attention import (
    AttnTrace,
    DiffAttnLayer,
    LambdaMode,
    LambdaState,
    _forward as attention_forward,
    attention_backward,
)
from .errors import ConfigError, InputError, StateError
from .linalg import CausalMask


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    FULL_LORA = "fulllora"
    DIFF_LORA = "difflora"


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 128
    mlp_hidden: int = 128
    variant: Variant = Variant.BASELINE
    placement: AdapterPlacement | None = None
    alpha: float | None = None  # None -> 2 * rank
    lambda_mode: LambdaMode = LambdaMode.FIXED
    lambda_init: float = 0.1
    group_norm: bool = False
    k2_init: str = "gaussian"  # "zero" gives the strict all-zero LoRA init (untrainable)
    fulllora_rank: int | None = None  # None -> solved against `placement`
    tie_embeddings: bool = False
    precision: str = "double"
    seed: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.lambda_mode = LambdaMode(self.lambda_mode)
        if isinstance(self.placement, dict):
            self.placement = AdapterPlacement(
                PlacementMode(self.placement["mode"]),
                int(self.placement["rank_negative"]),
                int(self.placement.get("rank_positive", 0)),
            )
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "max_seq_len", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.variant is Variant.DIFF_LORA and self.placement is None:
            raise ConfigError("the DiffLoRA variant needs an adapter placement")
        if self.group_norm and self.variant is not Variant.DIFF_LORA:
            raise ConfigError("group norm only applies to the DiffLoRA variant")
        if self.group_norm and not 0.0 < self.lambda_init < 1.0:
            raise ConfigError("group norm needs lambda_init in (0, 1)")
        if not np.isfinite(self.lambda_init):
            raise ConfigError("lambda_init must be finite")
        if self.k2_init not in ("gaussian", "zero"):
            raise ConfigError(f"k2_init must be 'gaussian' or 'zero', got {self.k2_init!r}")
        linalg.resolve_dtype(self.precision)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def dtype(self) -> np.dtype:
        return linalg.resolve_dtype(self.precision)

    def adapter_alpha(self, rank: int) -> float:
        return float(self.alpha) if self.alpha is not None else 2.0 * rank

    def resolved_fulllora_rank(self) -> int:
        if self.fulllora_rank is not None:
            return self.fulllora_rank
        reference = self.placement or AdapterPlacement.negative_only(8)
        return solve_fulllora_rank(
            self.difflora_budget(reference), self.n_layers, self.d_model, self.mlp_hidden
        )

    def difflora_budget(self, placement: AdapterPlacement) -> int:
        """Adapter-only count used as the Full-LoRA matching budget (lambda/gains excluded)."""
        return trainable_param_count(
            placement, self.n_layers, self.d_model, self.d_model,
            lambda_learnable=False, group_norm=False,
            head_dim=self.head_dim, n_heads=self.n_heads,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["lambda_mode"] = self.lambda_mode.value
        if self.placement is not None:
            d["placement"] = {
                "mode": self.placement.mode.value,
                "rank_negative": self.placement.rank_negative,
                "rank_positive": self.placement.rank_positive,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Block:
    attn: DiffAttnLayer
    norm1: np.ndarray
    norm2: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    mlp_adapters: dict[str, LowRankAdapter] = field(default_factory=dict)


class ToyModel:
    """Parameters live in ``self.params``; the ``layers`` objects hold views of
    the same arrays, so in-place updates to ``params`` are seen by forward."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 trainable: set[str], base_names: set[str], injected: bool):
        self.config = config
        self.params = params
        self.trainable = set(trainable)
        self.base_names = set(base_names)
        self.injected = injected
        unknown = self.trainable - set(params)
        if unknown:
            raise StateError(f"trainable names without parameters: {sorted(unknown)}")
        self.layers = self._assemble()

    @property
    def frozen(self) -> set[str]:
        return set(self.params) - self.trainable

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if n in self.trainable]

    def n_trainable(self) -> int:
        return sum(self.params[n].size for n in self.trainable)

    @property
    def unembed(self) -> np.ndarray:
        if self.config.tie_embeddings:
            return self.params["tok_emb"].T
        return self.params["unembed"]

    def lambdas(self) -> dict[str, float]:
        return {
            f"layers.{i}": float(blk.attn.lam.value)
            for i, blk in enumerate(self.layers)
            if blk.attn.lam is not None
        }

    def frozen_digest(self) -> str:
        return param_digest({n: self.params[n] for n in sorted(self.frozen)})

    def base_digest(self) -> str:
        return param_digest({n: self.params[n] for n in sorted(self.base_names)})

    def _adapter(self, prefix: str) -> LowRankAdapter | None:
        b = self.params.get(prefix + ".b")
        if b is None:
            return None
        a = self.params[prefix + ".a"]
        rank = b.shape[1]
        return LowRankAdapter(b=b, a=a, rank=rank, alpha=self.config.adapter_alpha(rank))

    def _assemble(self) -> list[Block]:
        cfg = self.config
        p = self.params
        layers = []
        for i in range(cfg.n_layers):
            pre = f"layers.{i}"
            adapters = {}
            for slot in ("q1", "k1", "q2", "k2", "v", "o"):
                ad = self._adapter(f"{pre}.attn.{slot}")
                if ad is not None:
                    adapters[slot] = ad
            lam = None
            if f"{pre}.attn.lambda" in p:
                mode = LambdaMode.LEARNABLE if f"{pre}.attn.lambda" in self.trainable else LambdaMode.FIXED
                lam = LambdaState(mode, cfg.lambda_init, param=p[f"{pre}.attn.lambda"])
            attn = DiffAttnLayer(
                w_q=p[f"{pre}.attn.w_q"], w_k=p[f"{pre}.attn.w_k"],
                w_v=p[f"{pre}.attn.w_v"], w_o=p[f"{pre}.attn.w_o"],
                n_heads=cfg.n_heads, adapters=adapters, lam=lam,
                gn_gain=p.get(f"{pre}.attn.gn_gain"),
            )
            mlp_adapters = {}
            for slot in ("up", "down"):
                ad = self._adapter(f"{pre}.mlp.{slot}")
                if ad is not None:
                    mlp_adapters[slot] = ad
            layers.append(Block(
                attn=attn, norm1=p[f"{pre}.norm1"], norm2=p[f"{pre}.norm2"],
                w_up=p[f"{pre}.mlp.w_up"], w_down=p[f"{pre}.mlp.w_down"],
                mlp_adapters=mlp_adapters,
            ))
        return layers

    def copy(self) -> "ToyModel":
        params = {n: a.copy() for n, a in self.params.items()}
        return ToyModel(copy.deepcopy(self.config), params, self.trainable, self.base_names,
                        self.injected)


def param_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def sub_seed(seed: int, name: str) -> int:
    """Deterministic per-tensor seed, independent of creation order."""
    return zlib.crc32(f"{seed}:{name}".encode())


def build_base(config: ModelConfig) -> ToyModel:
    """Seeded random initialization of the frozen base network."""
    config.validate()
    dt = config.dtype
    D, H, V, L = config.d_model, config.mlp_hidden, config.vocab_size, config.n_layers

    def normal(name, shape, std):
        rng = np.random.default_rng(sub_seed(config.seed, name))
        return rng.normal(0.0, std, size=shape).astype(dt)

    out_std = 1.0 / np.sqrt(2.0 * L)
    params: dict[str, np.ndarray] = {
        "tok_emb": normal("tok_emb", (V, D), 1.0),
        "pos_emb": normal("pos_emb", (config.max_seq_len, D), 0.5),
    }
    for i in range(L):
        pre = f"layers.{i}"
        params[f"{pre}.norm1"] = np.ones((1, D), dtype=dt)
        for w in ("w_q", "w_k", "w_v"):
            params[f"{pre}.attn.{w}"] = normal(f"{pre}.attn.{w}", (D, D), 1.0 / np.sqrt(D))
        params[f"{pre}.attn.w_o"] = normal(f"{pre}.attn.w_o", (D, D), out_std / np.sqrt(D))
        params[f"{pre}.norm2"] = np.ones((1, D), dtype=dt)
        params[f"{pre}.mlp.w_up"] = normal(f"{pre}.mlp.w_up", (D, H), 1.0 / np.sqrt(D))
        params[f"{pre}.mlp.w_down"] = normal(f"{pre}.mlp.w_down", (H, D), out_std / np.sqrt(H))
    params["final_norm"] = np.ones((1, D), dtype=dt)
    if not config.tie_embeddings:
        params["unembed"] = normal("unembed", (D, V), 1.0 / np.sqrt(D))
    return ToyModel(config, params, trainable=set(), base_names=set(params), injected=False)


def with_base_weights(config: ModelConfig, base: ToyModel) -> ToyModel:
    """A fresh, un-injected base under ``config`` reusing ``base``'s weights."""
    for name in ("vocab_size", "d_model", "n_heads", "n_layers", "max_seq_len", "mlp_hidden",
                 "tie_embeddings"):
        if getattr(config, name) != getattr(base.config, name):
            raise ConfigError(f"base checkpoint has {name}={getattr(base.config, name)}, "
                              f"config asks for {getattr(config, name)}")
    params = {n: base.params[n].astype(config.dtype, copy=True) for n in base.base_names}
    return ToyModel(config, params, trainable=set(), base_names=set(params), injected=False)


def inject_adapters(base: ToyModel, config: ModelConfig | None = None) -> ToyModel:
    """Return a copy of ``base`` with the variant's adapters added and registered trainable."""
    if base.injected:
        raise StateError("adapters were already injected into this model")
    config = copy.deepcopy(config or base.config)
    if config.variant is Variant.BASELINE:
        raise ConfigError("the baseline variant has no adapters to inject")
    model = base.copy()
    model.config = config
    dt = config.dtype
    params, trainable = model.params, set()
    D = config.d_model

    def add_adapter(prefix, in_dim, out_dim, rank, zero_b=True):
        ad = init_adapter(in_dim, out_dim, rank, config.adapter_alpha(rank),
                          seed=sub_seed(config.seed, prefix), dtype=dt, zero_b=zero_b)
        params[prefix + ".b"] = ad.b
        params[prefix + ".a"] = ad.a
        trainable.update({prefix + ".b", prefix + ".a"})

    for i in range(config.n_layers):
        pre = f"layers.{i}"
        if config.variant is Variant.DIFF_LORA:
            placement = config.placement
            for slot in placement.adapted_projections:
                zero_b = slot != "k2" or config.k2_init == "zero"
                add_adapter(f"{pre}.attn.{slot}", D, D, placement.rank_for(slot), zero_b)
            params[f"{pre}.attn.lambda"] = np.full((1, 1), config.lambda_init, dtype=dt)
            if config.lambda_mode is LambdaMode.LEARNABLE:
                trainable.add(f"{pre}.attn.lambda")
            if config.group_norm:
                params[f"{pre}.attn.gn_gain"] = np.ones((config.n_heads, config.head_dim), dtype=dt)
                trainable.add(f"{pre}.attn.gn_gain")
        else:
            rank = config.resolved_fulllora_rank()
            slot_names = {"attn.q": "attn.q1", "attn.k": "attn.k1", "attn.v": "attn.v",
                          "attn.o": "attn.o", "mlp.up": "mlp.up", "mlp.down": "mlp.down"}
            for key, (i_dim, o_dim) in fulllora_shapes(D, config.mlp_hidden).items():
                add_adapter(f"{pre}.{slot_names[key]}", i_dim, o_dim, rank)

    return ToyModel(config, params, trainable, base_names=base.base_names, injected=True)


def parameter_report(model: ToyModel) -> dict:
    """Trainable-parameter table: per-group counts plus the matching reference."""
    cfg = model.config
    groups: dict[str, int] = {}
    for name in model.trainable_names():
        parts = name.split(".")
        group = ".".join(parts[2:-1]) if name.startswith("layers.") else name
        if name.endswith(".lambda"):
            group = "lambda"
        elif name.endswith(".gn_gain"):
            group = "gn_gain"
        groups[group] = groups.get(group, 0) + model.params[name].size
    report = {"variant": cfg.variant.value, "total": model.n_trainable(), "groups": groups}
    if cfg.variant is Variant.DIFF_LORA:
        report["placement"] = cfg.placement.mode.value
        report["rank"] = cfg.placement.rank_negative
        report["formula"] = trainable_param_count(
            cfg.placement, cfg.n_layers, cfg.d_model, cfg.d_model,
            cfg.lambda_mode is LambdaMode.LEARNABLE, cfg.group_norm, cfg.head_dim, cfg.n_heads,
        )
    elif cfg.variant is Variant.FULL_LORA:
        rank = cfg.resolved_fulllora_rank()
        report["rank"] = rank
        report["formula"] = fulllora_param_count(rank, cfg.n_layers, cfg.d_model, cfg.mlp_hidden)
        reference = cfg.placement or AdapterPlacement.negative_only(8)
        report["matched_budget"] = cfg.difflora_budget(reference)
    return report


# --------------------------------------------------------------------- forward


def _check_tokens(model: ToyModel, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2) or tokens.shape[-1] == 0:
        raise InputError(f"tokens must be a non-empty sequence, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tokens.shape[-1] > model.config.max_seq_len:
        raise InputError(f"{tokens.shape[-1]} tokens exceed max_seq_len {model.config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise InputError(f"token ids must lie in [0, {model.config.vocab_size})")
    return tokens


def forward_batch(model: ToyModel, tokens: np.ndarray, keep_cache: bool = False):
    """Run ``(B, T)`` token ids; returns ``(logits (B,T,V), traces, cache)``."""
    tokens = _check_tokens(model, tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    cfg = model.config
    p = model.params
    T = tokens.shape[1]
    mask = CausalMask(T)
    differential = cfg.variant is Variant.DIFF_LORA
    h = p["tok_emb"][tokens] + p["pos_emb"][:T]
    traces: list[AttnTrace] = []
    caches = []
    for blk in model.layers:
        c: dict = {}
        a_in, c["n1"], c["r1"] = linalg.rmsnorm_forward(h, blk.norm1)
        c["a_in"] = a_in
        attn_out, trace, c["attn"] = attention_forward(a_in, blk.attn, mask, differential)
        traces.append(trace)
        h = h + attn_out
        m, c["n2"], c["r2"] = linalg.rmsnorm_forward(h, blk.norm2)
        c["m"] = m
        u = m @ blk.w_up
        if "up" in blk.mlp_adapters:
            u = u + apply_delta(m, blk.mlp_adapters["up"])
        g, c["gelu_t"] = linalg.gelu_with_tanh(u)
        mo = g @ blk.w_down
        if "down" in blk.mlp_adapters:
            mo = mo + apply_delta(g, blk.mlp_adapters["down"])
        c["u"], c["g"] = u, g
        h = h + mo
        if keep_cache:
            caches.append(c)
    f, nf, rf = linalg.rmsnorm_forward(h, p["final_norm"])
    logits = f @ model.unembed
    cache = None
    if keep_cache:
        cache = {"tokens": tokens, "layers": caches, "f": f, "nf": nf, "rf": rf}
    return logits, traces, cache


def forward(model: ToyModel, tokens, return_traces: bool = False):
    """Logits ``(T, V)`` for one token sequence; with ``return_traces`` also the
    per-layer :class:`AttnTrace` list."""
    tokens = _check_tokens(model, tokens)
    if tokens.ndim != 1:
        raise InputError("forward takes a single sequence; use forward_batch for batches")
    logits, traces, _ = forward_batch(model, tokens)
    logits = logits[0]
    if not return_traces:
        return logits
    single = [AttnTrace(t.a1[0], None if t.a2 is None else t.a2[0], t.lambda_used) for t in traces]
    return logits, single


def backprop(model: ToyModel, cache: dict, dlogits: np.ndarray,
             wrt: set[str] | None = None) -> dict[str, np.ndarray]:
    """Reverse pass from ``dlogits (B,T,V)``; returns gradients for ``wrt``
    (default: the trainable registry)."""
    wrt = model.trainable if wrt is None else set(wrt)
    p = model.params
    grads: dict[str, np.ndarray] = {}
    need_frozen = bool(wrt & model.base_names)

    def flat_outer(a, b):
        return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])

    f = cache["f"]
    if "unembed" in wrt:
        grads["unembed"] = flat_outer(f, dlogits)
    df = dlogits @ model.unembed.T
    if model.config.tie_embeddings and "tok_emb" in wrt:
        grads["tok_emb"] = flat_outer(dlogits, f)
    dh, dg_final = linalg.rmsnorm_backward(df, cache["nf"], cache["rf"], p["final_norm"])
    if "final_norm" in wrt:
        grads["final_norm"] = dg_final.reshape(-1, dg_final.shape[-1]).sum(axis=0, keepdims=True)

    for i in reversed(range(len(model.layers))):
        blk, c, pre = model.layers[i], cache["layers"][i], f"layers.{i}"
        # MLP branch
        dmo = dh
        g, u, m = c["g"], c["u"], c["m"]
        dg = dmo @ blk.w_down.T
        if f"{pre}.mlp.w_down" in wrt:
            grads[f"{pre}.mlp.w_down"] = flat_outer(g, dmo)
        if "down" in blk.mlp_adapters:
            dxg, grads[f"{pre}.mlp.down.b"], grads[f"{pre}.mlp.down.a"] = delta_backward(
                g, dmo, blk.mlp_adapters["down"])
            dg = dg + dxg
        du = dg * linalg.gelu_grad(u, c["gelu_t"])
        dm = du @ blk.w_up.T
        if f"{pre}.mlp.w_up" in wrt:
            grads[f"{pre}.mlp.w_up"] = flat_outer(m, du)
        if "up" in blk.mlp_adapters:
            dxm, grads[f"{pre}.mlp.up.b"], grads[f"{pre}.mlp.up.a"] = delta_backward(
                m, du, blk.mlp_adapters["up"])
            dm = dm + dxm
        dres, dgain2 = linalg.rmsnorm_backward(dm, c["n2"], c["r2"], blk.norm2)
        if f"{pre}.norm2" in wrt:
            grads[f"{pre}.norm2"] = dgain2.reshape(-1, dgain2.shape[-1]).sum(axis=0, keepdims=True)
        dh = dh + dres
        # attention branch
        da_in, agrads = attention_backward(dh, blk.attn, c["attn"], frozen_grads=need_frozen)
        for local, gval in agrads.items():
            grads[f"{pre}.attn.{local}"] = gval
        dres, dgain1 = linalg.rmsnorm_backward(da_in, c["n1"], c["r1"], blk.norm1)
        if f"{pre}.norm1" in wrt:
            grads[f"{pre}.norm1"] = dgain1.reshape(-1, dgain1.shape[-1]).sum(axis=0, keepdims=True)
        dh = dh + dres

    tokens = cache["tokens"]
    if "pos_emb" in wrt:
        gpos = np.zeros_like(p["pos_emb"])
        gpos[: tokens.shape[1]] = dh.sum(axis=0)
        grads["pos_emb"] = gpos
    if "tok_emb" in wrt:
        gtok = grads.get("tok_emb", np.zeros_like(p["tok_emb"]))
        np.add.at(gtok, tokens.reshape(-1), dh.reshape(-1, dh.shape[-1]))
        grads["tok_emb"] = gtok
    return {n: grads[n] for n in wrt if n in grads} | {
        n: np.zeros_like(p[n]) for n in wrt if n not in grads
    }
