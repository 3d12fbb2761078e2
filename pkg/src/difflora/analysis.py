"""Attention-mass measurement.

For each layer, head, region and component map, the mass is the attention a
query row places on the region divided by the region's token count. The
components are ``main`` (the positive map ``a1``), ``denoiser`` (``lambda *
a2``) and ``effective`` (``a1 - lambda * a2``). Standard-attention traces have
a zero denoiser, so base and adapted models share one schema.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import AttnTrace
from .errors import AnnotationError, ComparisonError
from .tasks import LabeledExample, Span

COMPONENTS = ("main", "denoiser", "effective")
CSV_COLUMNS = ("model", "layer", "head", "region", "component", "mass", "tokens")
MEAN = "mean"


class QueryRows(str, enum.Enum):
    LAST = "last"
    ALL_ANSWER = "all-answer"
    ALL = "all"


def check_regions(regions: dict[str, list[Span]], seq_len: int) -> dict[str, np.ndarray]:
    """Validate that ``regions`` partition ``[0, seq_len)``; return index arrays."""
    owner = np.full(seq_len, -1)
    names = list(regions)
    for r, name in enumerate(names):
        for s, e in regions[name]:
            if not 0 <= s <= e <= seq_len:
                raise AnnotationError(f"span ({s}, {e}) of region {name!r} is outside [0, {seq_len})")
            clash = owner[s:e][owner[s:e] >= 0]
            if clash.size:
                raise AnnotationError(f"region {name!r} overlaps region {names[clash[0]]!r}")
            owner[s:e] = r
    if (owner < 0).any():
        raise AnnotationError(f"positions {np.flatnonzero(owner < 0).tolist()[:5]} belong to no region")
    return {name: np.flatnonzero(owner == r) for r, name in enumerate(names) if (owner == r).any()}


def select_rows(example_or_len, query_rows: QueryRows | str | Sequence[int]) -> np.ndarray:
    """Query rows for a selector.

    ``last`` and ``all-answer`` pick the rows whose logits produce answer
    tokens (one position before each answer token), i.e. where the model is
    answering. ``all`` picks every row.
    """
    if not isinstance(query_rows, str):
        rows = np.asarray(list(query_rows), dtype=int)
        if rows.size == 0:
            raise AnnotationError("empty query-row selection")
        return rows
    mode = QueryRows(query_rows)
    if isinstance(example_or_len, LabeledExample):
        n, answer = len(example_or_len.tokens), example_or_len.answer_positions
    else:
        n, answer = int(example_or_len), []
    if mode is QueryRows.ALL:
        return np.arange(n)
    rows = [p - 1 for p in answer if p > 0]
    if not rows:
        raise AnnotationError("example has no answer positions to select query rows from")
    return np.asarray(rows[-1:] if mode is QueryRows.LAST else rows)


def _component_maps(trace: AttnTrace) -> dict[str, np.ndarray]:
    lam = float(trace.lambda_used) if trace.a2 is not None else 0.0
    den = lam * trace.a2 if trace.a2 is not None else np.zeros_like(trace.a1)
    return {"main": trace.a1, "denoiser": den, "effective": trace.a1 - den}


@dataclass
class AttnMassReport:
    """Normalized masses indexed ``[layer, head, region, component]``.

    ``totals`` holds the unnormalized region sums averaged over query rows and
    examples; ``tokens`` the mean region size. ``mass = totals / tokens``, so
    ``sum_R mass[R] * tokens[R]`` reproduces the row sums exactly.
    """

    model: str
    regions: list[str]
    totals: np.ndarray  # (L, H, R, C)
    tokens: np.ndarray  # (R,)
    lambdas: list[float]
    query_rows: str
    n_examples: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def masses(self) -> np.ndarray:
        return self.totals / self.tokens[None, None, :, None]

    @property
    def n_layers(self) -> int:
        return self.totals.shape[0]

    @property
    def n_heads(self) -> int:
        return self.totals.shape[1]

    def mass(self, layer, head, region: str, component: str = "main") -> float:
        """One cell; ``layer``/``head`` may be ``"mean"`` to average over them."""
        m = self.masses[..., self.regions.index(region), COMPONENTS.index(component)]
        m = m.mean(axis=0) if layer == MEAN else m[layer]
        return float(m.mean() if head == MEAN else m[head])

    def conservation_error(self) -> float:
        """Largest deviation of the token-weighted mass sums from 1, lambda and 1 - lambda."""
        sums = (self.masses * self.tokens[None, None, :, None]).sum(axis=2)  # (L, H, C)
        lam = np.asarray(self.lambdas)[:, None]
        want = np.stack([np.ones_like(lam), lam, 1 - lam], axis=-1)
        return float(np.abs(sums - want).max())

    def rows(self):
        """CSV rows: every (layer, head) cell, then per-layer head means and the grand mean."""
        m = self.masses
        layers: list = list(range(self.n_layers)) + [MEAN]
        for li in layers:
            ml = m.mean(axis=0) if li == MEAN else m[li]
            heads: list = ([] if li == MEAN else list(range(self.n_heads))) + [MEAN]
            for hi in heads:
                mh = ml.mean(axis=0) if hi == MEAN else ml[hi]
                for r, region in enumerate(self.regions):
                    for c, comp in enumerate(COMPONENTS):
                        yield (self.model, li, hi, region, comp, float(mh[r, c]),
                               float(self.tokens[r]))

    def sidecar(self) -> dict:
        return {
            "model": self.model,
            "regions": self.regions,
            "region_tokens": dict(zip(self.regions, self.tokens.tolist())),
            "lambdas": self.lambdas,
            "query_rows": self.query_rows,
            "n_examples": self.n_examples,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "components": list(COMPONENTS),
            "unnormalized_totals": self.totals.tolist(),
            **self.meta,
        }

    def write(self, csv_path, json_path=None) -> None:
        csv_path = Path(csv_path)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in self.rows():
                w.writerow([*row[:5], repr(row[5]), repr(row[6])])
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        json_path.write_text(json.dumps(self.sidecar(), indent=2) + "\n")

    @classmethod
    def read(cls, csv_path, json_path=None) -> "AttnMassReport":
        """Rebuild a report from its sidecar (the CSV is derived data)."""
        csv_path = Path(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        meta = json.loads(json_path.read_text())
        known = {"model", "regions", "region_tokens", "lambdas", "query_rows", "n_examples",
                 "n_layers", "n_heads", "components", "unnormalized_totals"}
        return cls(
            model=meta["model"],
            regions=list(meta["regions"]),
            totals=np.asarray(meta["unnormalized_totals"], dtype=float),
            tokens=np.asarray([meta["region_tokens"][r] for r in meta["regions"]], dtype=float),
            lambdas=list(meta["lambdas"]),
            query_rows=meta["query_rows"],
            n_examples=meta["n_examples"],
            meta={k: v for k, v in meta.items() if k not in known},
        )


def attention_mass(
    traces: Sequence[AttnTrace],
    regions: dict[str, list[Span]],
    query_rows: QueryRows | str | Sequence[int] = QueryRows.ALL,
    model: str = "model",
    example: LabeledExample | None = None,
) -> AttnMassReport:
    """Mass report for one sequence's per-layer traces (``a1`` of shape ``(H, T, T)``).

    ``query_rows`` is a selector name or explicit row indices; the ``last`` and
    ``all-answer`` selectors need ``example`` to locate answer positions.
    """
    if not traces:
        raise AnnotationError("no traces given")
    T = traces[0].a1.shape[-1]
    idx = check_regions(regions, T)
    rows = select_rows(example if example is not None else T, query_rows)
    if rows.min() < 0 or rows.max() >= T:
        raise AnnotationError(f"query rows {rows.tolist()} out of range for length {T}")
    names = list(idx)
    totals = np.empty((len(traces), traces[0].n_heads, len(names), len(COMPONENTS)))
    for li, tr in enumerate(traces):
        for c, comp in enumerate(COMPONENTS):
            sel = _component_maps(tr)[comp][:, rows, :]  # (H, rows, T)
            for r, name in enumerate(names):
                totals[li, :, r, c] = sel[:, :, idx[name]].sum(axis=-1).mean(axis=-1)
    return AttnMassReport(
        model=model,
        regions=names,
        totals=totals,
        tokens=np.array([idx[n].size for n in names], dtype=float),
        lambdas=[float(t.lambda_used) if t.a2 is not None else 0.0 for t in traces],
        query_rows=query_rows if isinstance(query_rows, str) else "explicit",
    )


def merge_reports(reports: Sequence[AttnMassReport]) -> AttnMassReport:
    """Average reports over examples.

    Totals and region sizes are averaged separately, which keeps the
    token-weighted conservation law exact when region sizes vary.
    """
    if not reports:
        raise AnnotationError("nothing to merge")
    first = reports[0]
    for r in reports[1:]:
        _check_schema(first, r)
    n = sum(r.n_examples for r in reports)
    w = np.array([r.n_examples for r in reports], dtype=float) / n
    return AttnMassReport(
        model=first.model,
        regions=first.regions,
        totals=np.tensordot(w, np.stack([r.totals for r in reports]), axes=1),
        tokens=np.tensordot(w, np.stack([r.tokens for r in reports]), axes=1),
        lambdas=first.lambdas,
        query_rows=first.query_rows,
        n_examples=n,
        meta=dict(first.meta),
    )


def model_mass_report(model, examples: Sequence[LabeledExample], model_id: str = "model",
                      query_rows: QueryRows | str = QueryRows.LAST) -> AttnMassReport:
    """Run ``model`` over each example and merge the per-example reports."""
    from .model import forward

    reports = []
    for ex in examples:
        _, traces = forward(model, ex.tokens, return_traces=True)
        reports.append(attention_mass(traces, ex.regions, query_rows, model_id, example=ex))
    return merge_reports(reports)


def _check_schema(a: AttnMassReport, b: AttnMassReport) -> None:
    if sorted(a.regions) != sorted(b.regions):
        raise ComparisonError(f"region sets differ: {a.regions} vs {b.regions}")
    if a.totals.shape[:2] != b.totals.shape[:2]:
        raise ComparisonError(f"layer/head grids differ: {a.totals.shape[:2]} vs {b.totals.shape[:2]}")


@dataclass
class ReportDelta:
    """``b - a`` per cell, indexed like :attr:`AttnMassReport.masses` with ``a``'s region order."""

    regions: list[str]
    deltas: np.ndarray
    summary: dict[str, dict[str, float]]

    def delta(self, layer, head, region: str, component: str = "main") -> float:
        d = self.deltas[..., self.regions.index(region), COMPONENTS.index(component)]
        d = d.mean(axis=0) if layer == MEAN else d[layer]
        return float(d.mean() if head == MEAN else d[head])


def compare_reports(a: AttnMassReport, b: AttnMassReport) -> ReportDelta:
    """Cell-wise mass differences ``b - a`` plus BOS and needle summaries
    (grand means over layers and heads, per component)."""
    _check_schema(a, b)
    order = [b.regions.index(r) for r in a.regions]
    deltas = b.masses[:, :, order, :] - a.masses
    summary = {}
    for region in ("bos", "needle"):
        if region in a.regions:
            r = a.regions.index(region)
            summary[region] = {c: float(deltas[:, :, r, i].mean()) for i, c in enumerate(COMPONENTS)}
    return ReportDelta(list(a.regions), deltas, summary)
