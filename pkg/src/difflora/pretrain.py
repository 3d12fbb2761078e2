"""Pretraining corpus and loop for the frozen base.

A randomly initialized base has no notion of keys, values or the query
format, so adapters on top of it start from nothing. The base is instead
pretrained on a mixture of two episode kinds, both laid out in Markov filler:

* recall episodes: key/value pairs, then ``QUERY key`` followed by a value
  drawn uniformly from the pairs in context. The base learns the format and
  that answers are in-context values, but not which one, so it sits at
  chance on the retrieval task.
* induction episodes: key/value pairs, then some of the keys repeated, with
  loss on the value that followed each key earlier.

Filler positions after two filler tokens carry a small next-token loss too.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .model import ModelConfig, ToyModel, build_base
from .tasks import LabeledExample, VocabLayout
from .training import TrainConfig, train

MARKOV_SEED = 1234
PACKAGED = "packaged"
P_FOLLOW = 0.8


def filler_chain(layout: VocabLayout) -> np.ndarray:
    """Second-order transition table over filler indices."""
    n = len(layout.filler)
    return np.random.default_rng(MARKOV_SEED).integers(n, size=(n, n))


def _filler(rng, chain: np.ndarray, n: int) -> list[int]:
    k = chain.shape[0]
    f = [int(rng.integers(k)), int(rng.integers(k))]
    while len(f) < n:
        f.append(int(chain[f[-2], f[-1]]) if rng.random() < P_FOLLOW else int(rng.integers(k)))
    return f[:n]


def _context(rng, layout, chain, keys, vals, n_fill, p_fill):
    """BOS, then filler with the pairs inserted at random slots."""
    F = layout.filler
    f = _filler(rng, chain, n_fill)
    slots = sorted(rng.choice(n_fill + 1, size=len(keys), replace=False))
    toks, mask, pi = [layout.bos], [0], 0
    for s in range(n_fill + 1):
        while pi < len(keys) and slots[pi] == s:
            toks += [int(keys[pi]), int(vals[pi])]
            mask += [0, 0]
            pi += 1
        if s < n_fill:
            ok = toks[-1] in F and toks[-2] in F and rng.random() < p_fill
            toks.append(F[f[s]])
            mask.append(int(ok))
    return toks, mask


def recall_episodes(n: int, seed: int, layout: VocabLayout, seq_len: int = 64,
                    pairs: tuple[int, int] = (2, 8), p_fill: float = 0.05) -> list[LabeledExample]:
    rng = np.random.default_rng(seed)
    chain = filler_chain(layout)
    out = []
    for _ in range(n):
        n_pairs = int(rng.integers(pairs[0], pairs[1] + 1))
        keys = rng.choice(layout.keys, size=n_pairs, replace=False)
        vals = rng.choice(layout.values, size=n_pairs, replace=False)
        toks, mask = _context(rng, layout, chain, keys, vals, seq_len - 1 - 2 * n_pairs - 3, p_fill)
        ans = int(rng.choice(vals))
        toks += [layout.query, int(keys[rng.integers(n_pairs)]), ans]
        mask += [0, 0, 1]
        out.append(LabeledExample(toks, mask, [ans], {}))
    return out


def induction_episodes(n: int, seed: int, layout: VocabLayout, seq_len: int = 64,
                       pairs: tuple[int, int] = (2, 6), p_fill: float = 0.05) -> list[LabeledExample]:
    rng = np.random.default_rng(seed)
    chain = filler_chain(layout)
    out = []
    for _ in range(n):
        n_pairs = int(rng.integers(pairs[0], pairs[1] + 1))
        n_rep = int(rng.integers(1, n_pairs + 1))
        keys = rng.choice(layout.keys, size=n_pairs, replace=False)
        vals = rng.choice(layout.values, size=n_pairs, replace=False)
        toks, mask = _context(rng, layout, chain, keys, vals,
                              seq_len - 1 - 2 * n_pairs - 2 * n_rep, p_fill)
        answers = []
        for q in rng.choice(n_pairs, size=n_rep, replace=False):
            toks += [int(keys[q]), int(vals[q])]
            mask += [0, 1]
            answers.append(int(vals[q]))
        out.append(LabeledExample(toks, mask, answers, {}))
    return out


def pretrain_corpus(n: int, seed: int, layout: VocabLayout, seq_len: int = 64) -> list[LabeledExample]:
    """Recall and induction episodes, alternating."""
    half = n // 2
    rec = recall_episodes(n - half, seed, layout, seq_len)
    ind = induction_episodes(half, seed + 1, layout, seq_len)
    out = []
    for i in range(0, n, 2):
        out += rec[i // 2:i // 2 + 1] + ind[i // 2:i // 2 + 1]
    return out


def pretrain_base(
    config: ModelConfig,
    steps: int = 8000,
    learning_rate: float = 2e-3,
    batch_size: int = 32,
    seed: int = 0,
    on_record: Callable[[dict], None] | None = None,
) -> ToyModel:
    """Train every base weight on a single pass over a fresh corpus."""
    base = build_base(config)
    base.trainable = set(base.params)
    layout = VocabLayout.default(config.vocab_size)
    seq_len = min(64, config.max_seq_len)
    corpus = pretrain_corpus(max(steps * batch_size, batch_size), seed, layout, seq_len)
    train(base, corpus, TrainConfig(learning_rate=learning_rate, batch_size=batch_size,
                                    steps=steps, seed=seed), on_record=on_record)
    base.trainable = set()
    return base


def packaged_base_path() -> Path:
    """The base shipped with the package, made by ``difflora pretrain-base --pretrain-steps 8000``."""
    return Path(str(resources.files("difflora") / "data" / "base.dlra"))
