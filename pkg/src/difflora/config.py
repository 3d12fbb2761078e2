"""Run configuration: one JSON document validated up front, unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .adapters import AdapterPlacement
from .attention import LambdaMode
from .errors import ConfigError
from .model import ModelConfig, Variant
from .tasks import NeedleMode, NeedleSpec, VocabLayout
from .training import TrainConfig

VARIANTS = ("baseline", "fulllora", "difflora-neg", "difflora-both")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


def parse_lambda(spec: str) -> tuple[LambdaMode, float]:
    """``"fixed:0.1"`` or ``"learnable:0.1"``; a bare mode uses 0.1."""
    mode, _, value = spec.partition(":")
    try:
        return LambdaMode(mode), float(value) if value else 0.1
    except ValueError:
        raise ConfigError(f"bad lambda spec {spec!r}; expected fixed:<v> or learnable:<v>") from None


class ModelSection(_Section):
    vocab_size: int = 64
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 128
    mlp_hidden: int = 128
    variant: Literal["baseline", "fulllora", "difflora-neg", "difflora-both"] = "difflora-neg"
    rank: int = Field(8, ge=1, description="adapter rank; for difflora-both this is the per-term rank")
    alpha: Optional[float] = None
    lambda_: str = Field("fixed:0.1", alias="lambda")
    group_norm: bool = False
    k2_init: Literal["gaussian", "zero"] = "gaussian"
    fulllora_rank: Optional[int] = None
    match_rank: int = Field(8, ge=1, description="negative-only rank whose budget Full-LoRA matches")
    tie_embeddings: bool = False
    precision: Literal["double", "single"] = "double"
    seed: int = 0

    @field_validator("lambda_")
    @classmethod
    def _lambda_ok(cls, v: str) -> str:
        parse_lambda(v)
        return v

    def to_model_config(self) -> ModelConfig:
        mode, init = parse_lambda(self.lambda_)
        placement = None
        if self.variant == "difflora-neg":
            placement = AdapterPlacement.negative_only(self.rank)
        elif self.variant == "difflora-both":
            placement = AdapterPlacement.both_terms(self.rank)
        elif self.variant == "fulllora":
            placement = AdapterPlacement.negative_only(self.match_rank)
        variant = {"baseline": Variant.BASELINE, "fulllora": Variant.FULL_LORA}.get(
            self.variant, Variant.DIFF_LORA)
        return ModelConfig(
            vocab_size=self.vocab_size, d_model=self.d_model, n_heads=self.n_heads,
            n_layers=self.n_layers, max_seq_len=self.max_seq_len, mlp_hidden=self.mlp_hidden,
            variant=variant, placement=placement, alpha=self.alpha, lambda_mode=mode,
            lambda_init=init, group_norm=self.group_norm, k2_init=self.k2_init,
            fulllora_rank=self.fulllora_rank, tie_embeddings=self.tie_embeddings,
            precision=self.precision, seed=self.seed,
        )


class TrainSection(_Section):
    learning_rate: float = Field(1e-4, ge=0)
    batch_size: int = Field(64, ge=1)
    max_input_length: int = 128
    steps: Optional[int] = Field(None, ge=0)
    epochs: Optional[int] = Field(None, ge=1)
    optimizer: Literal["adamw", "sgd"] = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    grad_clip: Optional[float] = None
    eval_every: int = 0
    seed: int = 0

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class TaskSection(_Section):
    kind: Literal["needle", "icl"] = "needle"
    seq_len: int = 64
    n_examples: int = 256
    seed: int = 0
    # needle
    mode: Literal["single_key", "multi_key", "multi_value"] = "single_key"
    n_pairs: int = 4
    n_queries: int = 1
    n_distractors: int = 2
    n_values: int = 3
    key_len: Optional[int] = None
    pair_sep: bool = False
    # icl
    n_classes: int = 4
    n_shots: int = 8
    pattern_len: int = 1

    def needle_spec(self, vocab_size: int = 64) -> NeedleSpec:
        return NeedleSpec(
            seq_len=self.seq_len, n_pairs=self.n_pairs, n_queries=self.n_queries,
            mode=NeedleMode(self.mode), n_distractors=self.n_distractors, n_values=self.n_values,
            key_len=self.key_len, pair_sep=self.pair_sep, n_examples=self.n_examples,
            seed=self.seed, layout=VocabLayout.default(vocab_size),
        )


class PathsSection(_Section):
    dataset: Optional[str] = None
    eval_dataset: Optional[str] = None
    base_checkpoint: Optional[str] = None
    checkpoint: Optional[str] = None
    out_dir: str = "runs/default"


class AnalysisSection(_Section):
    query_rows: Literal["last", "all-answer", "all"] = "last"
    n_probe: int = Field(64, ge=1)
    model_name: Optional[str] = None


class GradCheckSection(_Section):
    seq_len: int = Field(8, ge=2)
    epsilon: float = Field(1e-5, gt=0)
    tolerance: float = Field(1e-4, gt=0)
    seed: int = 0
    inject_fault: Optional[str] = Field(None, description="parameter whose analytic gradient is corrupted")


class PretrainSection(_Section):
    steps: int = Field(8000, ge=0)
    learning_rate: float = Field(2e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    seed: int = 0


class RunConfig(_Section):
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    task: TaskSection = Field(default_factory=TaskSection)
    paths: PathsSection = Field(default_factory=PathsSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)
    grad_check: GradCheckSection = Field(default_factory=GradCheckSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(by_alias=True), indent=2, sort_keys=True) + "\n"


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: dict, dotted: str, raw: str) -> None:
    """Set ``data["a"]["b"] = value`` for ``dotted = "a.b"``; values parse as JSON when possible."""
    *parents, leaf = dotted.split(".")
    node = data
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {p!r} is not a section")
    node[leaf] = _coerce(raw) if isinstance(raw, str) else raw


def load_run_config(path: str | Path | None = None, overrides: list[tuple[str, Any]] = ()) -> RunConfig:
    """Read a JSON config (or start from defaults), apply overrides, validate."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    for key, value in overrides:
        apply_override(data, key, value)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def _format_errors(exc: ValidationError) -> str:
    lines = ["invalid config:"]
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"])
        lines.append(f"  {where}: {err['msg']}")
    return "\n".join(lines)
