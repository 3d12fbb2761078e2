"""Synthetic retrieval and in-context classification datasets, and accuracy evaluation.

All generators are pure functions of their arguments: the same spec and seed
always produce the same examples.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

REGIONS = ("bos", "context", "needle", "query", "answer")

Span = tuple[int, int]


@dataclass(frozen=True)
class VocabLayout:
    """Disjoint symbol classes inside a vocabulary of ``vocab_size`` ids."""

    vocab_size: int = 64
    bos: int = 0
    sep: int = 1
    query: int = 2
    filler: tuple[int, ...] = ()
    keys: tuple[int, ...] = ()
    values: tuple[int, ...] = ()

    @classmethod
    def default(cls, vocab_size: int = 64) -> "VocabLayout":
        rest = list(range(3, vocab_size))
        if len(rest) < 5:
            raise ConfigError(f"vocab_size {vocab_size} is too small for a symbol layout")
        n_fill = max(1, len(rest) // 5)
        n_keys = (len(rest) - n_fill) // 2
        filler = tuple(rest[:n_fill])
        keys = tuple(rest[n_fill:n_fill + n_keys])
        values = tuple(rest[n_fill + n_keys:])
        return cls(vocab_size, 0, 1, 2, filler, keys, values)

    def __post_init__(self):
        groups = [(self.bos,), (self.sep,), (self.query,), self.filler, self.keys, self.values]
        flat = [s for g in groups for s in g]
        if len(flat) != len(set(flat)):
            raise ConfigError("symbol classes overlap")
        if flat and (min(flat) < 0 or max(flat) >= self.vocab_size):
            raise ConfigError("symbol outside the vocabulary")


class NeedleMode(str, enum.Enum):
    SINGLE_KEY = "single_key"
    MULTI_KEY = "multi_key"
    MULTI_VALUE = "multi_value"


@dataclass(frozen=True)
class NeedleSpec:
    """Key/value retrieval task.

    ``n_pairs`` pairs (including the needle) are scattered in filler.
    ``multi_key`` plants ``n_distractors`` extra keys sharing all but the last
    symbol with the needle's key; ``multi_value`` gives every key ``n_values``
    values, all of which must be produced in order.
    """

    seq_len: int = 64
    n_pairs: int = 4
    n_queries: int = 1
    mode: NeedleMode = NeedleMode.SINGLE_KEY
    n_distractors: int = 2
    n_values: int = 3
    key_len: int | None = None  # default: 1, or 2 for multi_key
    pair_sep: bool = False
    n_examples: int = 256
    seed: int = 0
    layout: VocabLayout = field(default_factory=VocabLayout.default)

    def __post_init__(self):
        object.__setattr__(self, "mode", NeedleMode(self.mode))

    @property
    def resolved_key_len(self) -> int:
        if self.key_len is not None:
            return self.key_len
        return 2 if self.mode is NeedleMode.MULTI_KEY else 1

    @property
    def values_per_key(self) -> int:
        return self.n_values if self.mode is NeedleMode.MULTI_VALUE else 1

    @property
    def total_pairs(self) -> int:
        extra = self.n_distractors if self.mode is NeedleMode.MULTI_KEY else 0
        return self.n_pairs + extra

    def min_length(self) -> int:
        kl, nv = self.resolved_key_len, self.values_per_key
        pair = kl + int(self.pair_sep) + nv
        return 1 + self.total_pairs * pair + self.n_queries * (1 + kl + nv)


@dataclass
class LabeledExample:
    tokens: list[int]
    loss_mask: list[int]
    answer: list[int]
    regions: dict[str, list[Span]]

    def __post_init__(self):
        if len(self.tokens) != len(self.loss_mask):
            raise InputError("tokens and loss_mask differ in length")

    @property
    def answer_positions(self) -> list[int]:
        return [i for i, m in enumerate(self.loss_mask) if m]

    def to_json(self) -> dict:
        return {
            "tokens": self.tokens,
            "mask": self.loss_mask,
            "answer": self.answer,
            "regions": {k: [list(s) for s in v] for k, v in self.regions.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "LabeledExample":
        return cls(
            tokens=[int(t) for t in d["tokens"]],
            loss_mask=[int(m) for m in d["mask"]],
            answer=[int(t) for t in d["answer"]],
            regions={k: [tuple(s) for s in v] for k, v in d["regions"].items()},
        )


def _finish_regions(n: int, named: dict[str, list[Span]]) -> dict[str, list[Span]]:
    """Fill ``context`` with every position not claimed by another region."""
    claimed = np.zeros(n, dtype=bool)
    for spans in named.values():
        for s, e in spans:
            claimed[s:e] = True
    context: list[Span] = []
    i = 0
    while i < n:
        if not claimed[i]:
            j = i
            while j < n and not claimed[j]:
                j += 1
            context.append((i, j))
            i = j
        else:
            i += 1
    out = {"bos": named.get("bos", []), "context": context}
    for r in ("needle", "query", "answer"):
        out[r] = named.get(r, [])
    return out


def _draw_keys(rng, spec: NeedleSpec) -> tuple[list[tuple[int, ...]], int]:
    """All context keys plus the index of the needle key."""
    kl = spec.resolved_key_len
    keys = spec.layout.keys
    need = spec.total_pairs
    if spec.mode is NeedleMode.MULTI_KEY:
        if len(keys) < spec.n_distractors + 1:
            raise ConfigError("not enough key symbols for the requested distractors")
        prefix = tuple(int(k) for k in rng.choice(keys, size=kl - 1)) if kl > 1 else ()
        last = rng.choice(keys, size=spec.n_distractors + 1, replace=False)
        family = [prefix + (int(s),) for s in last]
        pool = set(family)
        others = []
        while len(others) < spec.n_pairs - 1:
            cand = tuple(int(k) for k in rng.choice(keys, size=kl))
            if cand not in pool and (kl == 1 or cand[:-1] != prefix):
                pool.add(cand)
                others.append(cand)
        all_keys = family + others
        return all_keys, 0
    if len(keys) ** kl < need:
        raise ConfigError(f"{need} distinct keys requested but only {len(keys) ** kl} exist")
    pool: set[tuple[int, ...]] = set()
    out = []
    while len(out) < need:
        cand = tuple(int(k) for k in rng.choice(keys, size=kl))
        if cand not in pool:
            pool.add(cand)
            out.append(cand)
    return out, int(rng.integers(need))


def gen_needle(spec: NeedleSpec) -> list[LabeledExample]:
    """Needle-in-a-haystack examples of exactly ``spec.seq_len`` tokens each."""
    if spec.n_pairs < 1 or spec.n_queries < 1 or spec.n_examples < 0:
        raise ConfigError("n_pairs and n_queries must be >= 1")
    if spec.min_length() > spec.seq_len:
        raise ConfigError(
            f"{spec.total_pairs} pairs and {spec.n_queries} queries need "
            f"{spec.min_length()} tokens but seq_len is {spec.seq_len}"
        )
    lay = spec.layout
    nv = spec.values_per_key
    if len(lay.values) < spec.total_pairs * nv:
        raise ConfigError("not enough value symbols for distinct values")
    if spec.n_queries > 1 and spec.mode is NeedleMode.MULTI_KEY:
        raise ConfigError("multi-key examples carry a single query")
    rng = np.random.default_rng(spec.seed)
    examples = []
    for _ in range(spec.n_examples):
        keys, target = _draw_keys(rng, spec)
        flat_vals = [int(v) for v in rng.choice(lay.values, size=len(keys) * nv, replace=False)]
        vals = [tuple(flat_vals[i * nv:(i + 1) * nv]) for i in range(len(keys))]
        if spec.n_queries == 1:
            queried = [target]
        else:
            queried = [int(i) for i in rng.choice(len(keys), size=spec.n_queries, replace=False)]
        pair_chunks = []
        for k, v in zip(keys, vals):
            pair_chunks.append(list(k) + ([lay.sep] if spec.pair_sep else []) + list(v))
        n_filler = spec.seq_len - spec.min_length()
        chunks: list[tuple[int, list[int]]] = [(i, c) for i, c in enumerate(pair_chunks)]
        chunks += [(-1, [int(rng.choice(lay.filler))]) for _ in range(n_filler)]
        order = rng.permutation(len(chunks))
        tokens = [lay.bos]
        needle_spans: list[Span] = []
        for idx in order:
            pair_idx, chunk = chunks[idx]
            if pair_idx in queried:
                needle_spans.append((len(tokens), len(tokens) + len(chunk)))
            tokens.extend(chunk)
        mask = [0] * len(tokens)
        query_spans, answer_spans, answer = [], [], []
        for qi in queried:
            start = len(tokens)
            tokens.append(lay.query)
            tokens.extend(keys[qi])
            query_spans.append((start, len(tokens)))
            a0 = len(tokens)
            tokens.extend(vals[qi])
            mask.extend([0] * (a0 - start) + [1] * nv)
            answer_spans.append((a0, len(tokens)))
            answer.extend(vals[qi])
        regions = _finish_regions(len(tokens), {
            "bos": [(0, 1)], "needle": needle_spans, "query": query_spans, "answer": answer_spans,
        })
        examples.append(LabeledExample(tokens, mask, answer, regions))
    return examples


def gen_icl_classification(
    n_classes: int,
    n_shots: int,
    seq_len: int,
    seed: int,
    n_examples: int = 256,
    pattern_len: int = 1,
    layout: VocabLayout | None = None,
    label_symbols: Sequence[int] | None = None,
) -> list[LabeledExample]:
    """Episodes of ``pattern label`` demonstrations followed by a query pattern.

    Each episode draws a fresh pattern-to-label assignment, so the answer can
    only be recovered from the demonstrations.
    """
    layout = layout or VocabLayout.default()
    labels = tuple(label_symbols) if label_symbols is not None else layout.values
    if n_classes < 1 or n_shots < 1:
        raise ConfigError("n_classes and n_shots must be >= 1")
    if n_classes > len(labels) or n_classes > len(layout.keys) ** pattern_len:
        raise ConfigError(f"{n_classes} classes do not fit the symbol layout")
    length = 1 + n_shots * (pattern_len + 1) + 1 + pattern_len + 1
    if length > seq_len:
        raise ConfigError(f"{n_shots} shots need {length} tokens but seq_len is {seq_len}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_examples):
        patterns: list[tuple[int, ...]] = []
        while len(patterns) < n_classes:
            cand = tuple(int(k) for k in rng.choice(layout.keys, size=pattern_len))
            if cand not in patterns:
                patterns.append(cand)
        label_idx = rng.permutation(len(labels))[:n_classes]
        classes = list(range(n_classes)) if n_shots >= n_classes else []
        classes += [int(c) for c in rng.integers(n_classes, size=n_shots - len(classes))]
        classes = [classes[i] for i in rng.permutation(len(classes))]
        query_cls = int(rng.choice(sorted(set(classes))))
        tokens = [layout.bos]
        needle = []
        for c in classes:
            s = len(tokens)
            tokens.extend(patterns[c])
            tokens.append(int(labels[label_idx[c]]))
            if c == query_cls:
                needle.append((s, len(tokens)))
        q0 = len(tokens)
        tokens.append(layout.query)
        tokens.extend(patterns[query_cls])
        a0 = len(tokens)
        answer = [int(labels[label_idx[query_cls]])]
        tokens.extend(answer)
        mask = [0] * a0 + [1]
        regions = _finish_regions(len(tokens), {
            "bos": [(0, 1)], "needle": needle, "query": [(q0, a0)], "answer": [(a0, a0 + 1)],
        })
        out.append(LabeledExample(tokens, mask, answer, regions))
    return out


def recover_answer(example: LabeledExample, sep: int | None = None) -> list[int]:
    """Re-derive the answer by scanning the context for each queried key.

    A key is whatever sits between a query marker and its answer span; its
    answer is the run of tokens following the key's first occurrence before
    that query (skipping ``sep`` when given).
    """
    out: list[int] = []
    for a0, a1 in example.regions["answer"]:
        q = next((s for s in example.regions["query"] if s[1] == a0), None)
        if q is None:
            raise InputError(f"answer span at {a0} is not preceded by a query span")
        key = example.tokens[q[0] + 1:q[1]]
        ctx = example.tokens[:q[0]]
        for i in range(len(ctx) - len(key) + 1):
            if ctx[i:i + len(key)] == key:
                j = i + len(key)
                if sep is not None and j < len(ctx) and ctx[j] == sep:
                    j += 1
                out.extend(ctx[j:j + a1 - a0])
                break
    return out


# ------------------------------------------------------------------ datasets IO


def save_dataset(path: str | Path, examples: Iterable[LabeledExample]) -> str:
    """Write line-delimited JSON and return the sha256 of the written bytes."""
    lines = [json.dumps(e.to_json(), separators=(",", ":")) for e in examples]
    data = ("\n".join(lines) + "\n").encode() if lines else b""
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path: str | Path) -> list[LabeledExample]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(LabeledExample.from_json(json.loads(line)))
                except (KeyError, ValueError, TypeError) as exc:
                    raise InputError(f"{path}:{n}: bad dataset record ({exc})") from None
    return out


def dataset_checksum(examples: Iterable[LabeledExample]) -> str:
    lines = [json.dumps(e.to_json(), separators=(",", ":")) for e in examples]
    data = ("\n".join(lines) + "\n").encode() if lines else b""
    return hashlib.sha256(data).hexdigest()


def to_arrays(examples: Sequence[LabeledExample], pad: int = 0):
    """Stack examples into ``(N, L)`` token and mask arrays, right-padded.

    Right padding is exact for a causal model: padded positions come after
    every real one and carry a zero mask.
    """
    L = max(len(e.tokens) for e in examples)
    toks = np.full((len(examples), L), pad, dtype=np.int64)
    mask = np.zeros((len(examples), L), dtype=np.int64)
    for i, e in enumerate(examples):
        toks[i, : len(e.tokens)] = e.tokens
        mask[i, : len(e.loss_mask)] = e.loss_mask
    return toks, mask


# ------------------------------------------------------------------ evaluation


@dataclass
class AccuracyResult:
    accuracy: float
    n_scored: int
    n_excluded: int
    records: list[dict]


LogitsFn = Callable[[np.ndarray], np.ndarray]


def _logits_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    """Batched ``(B, L) -> (B, L, V)`` logits for a ToyModel or a per-sequence callable."""
    from .model import ToyModel, forward_batch

    if isinstance(model, ToyModel):
        return lambda toks: forward_batch(model, toks)[0]
    if callable(model):
        return lambda toks: np.stack([np.asarray(model(t)) for t in toks])
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def evaluate_accuracy(model, dataset: Sequence[LabeledExample], batch_size: int = 64) -> AccuracyResult:
    """Teacher-forced exact match over each example's answer span.

    Every answer token is predicted by the argmax of the logits one position
    earlier. ``model`` is a ToyModel or any callable mapping a token sequence
    to ``(T, V)`` logits.
    """
    fn = _logits_fn(model)
    records = []
    excluded = 0
    scored = [e for e in dataset if any(e.loss_mask)]
    excluded = len(dataset) - len(scored)
    if excluded:
        log.warning("%d example(s) without answer positions were excluded", excluded)
    by_len: dict[int, list[int]] = {}
    for i, e in enumerate(scored):
        by_len.setdefault(len(e.tokens), []).append(i)
    results: dict[int, dict] = {}
    for _, idx in sorted(by_len.items()):
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            toks = np.array([scored[i].tokens for i in chunk], dtype=np.int64)
            logits = fn(toks[:, :-1])
            for row, i in enumerate(chunk):
                pos = scored[i].answer_positions
                pred = [int(np.argmax(logits[row, p - 1])) for p in pos]
                gold = [scored[i].tokens[p] for p in pos]
                results[i] = {"index": i, "predicted": pred, "expected": gold,
                              "correct": pred == gold}
    records = [results[i] for i in range(len(scored))]
    acc = float(np.mean([r["correct"] for r in records])) if records else float("nan")
    return AccuracyResult(acc, len(records), excluded, records)
