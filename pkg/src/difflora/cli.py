"""Command-line entry point: ``difflora <command> [--config run.json] [overrides]``.

Exit codes: 0 success, 2 bad input or config, 3 training divergence,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, pretrain, tasks
from .config import RunConfig, load_run_config
from .errors import DiffLoRAError, DivergenceError
from .model import ModelConfig, ToyModel, Variant, build_base, inject_adapters, parameter_report
from .training import gradient_check, randomize_trainable, train, write_metrics

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4

log = logging.getLogger("difflora")

# flag -> (dotted config key, argparse kwargs)
_FLAT = {
    "--variant": ("model.variant", {}),
    "--rank": ("model.rank", {"type": int}),
    "--lambda": ("model.lambda", {"dest": "lambda_"}),
    "--group-norm": ("model.group_norm", {"action": "store_const", "const": True}),
    "--precision": ("model.precision", {}),
    "--steps": ("train.steps", {"type": int}),
    "--lr": ("train.learning_rate", {"type": float}),
    "--batch-size": ("train.batch_size", {"type": int}),
    "--eval-every": ("train.eval_every", {"type": int}),
    "--task": ("task.kind", {}),
    "--mode": ("task.mode", {}),
    "--n-examples": ("task.n_examples", {"type": int}),
    "--seq-len": ("task.seq_len", {"type": int}),
    "--n-pairs": ("task.n_pairs", {"type": int}),
    "--data-seed": ("task.seed", {"type": int}),
    "--dataset": ("paths.dataset", {}),
    "--eval-dataset": ("paths.eval_dataset", {}),
    "--base": ("paths.base_checkpoint", {}),
    "--checkpoint": ("paths.checkpoint", {}),
    "--out": ("paths.out_dir", {}),
    "--query-rows": ("analysis.query_rows", {}),
    "--name": ("analysis.model_name", {}),
    "--inject-fault": ("grad_check.inject_fault", {}),
    "--pretrain-steps": ("pretrain.steps", {"type": int}),
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. train.seed=3")
    common.add_argument("--seed", type=int, help="seed for model, training and data")
    for flag, (_, kw) in _FLAT.items():
        common.add_argument(flag, **kw)
    p = argparse.ArgumentParser(prog="difflora", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    sub.add_parser("pretrain-base", parents=[common], help="train a base model to freeze")
    sub.add_parser("train", parents=[common], help="train adapters on a frozen base")
    sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    sub.add_parser("attn-report", parents=[common], help="attention-mass CSV and JSON")
    cmp_ = sub.add_parser("attn-compare", help="cell-wise deltas between two mass reports")
    cmp_.add_argument("report_a")
    cmp_.add_argument("report_b")
    cmp_.add_argument("--out", help="write the deltas as JSON")
    return p


def _overrides(args) -> list[tuple[str, object]]:
    out: list[tuple[str, object]] = []
    if args.seed is not None:
        out += [("model.seed", args.seed), ("train.seed", args.seed), ("task.seed", args.seed)]
    for flag, (key, kw) in _FLAT.items():
        value = getattr(args, kw.get("dest", flag.lstrip("-").replace("-", "_")))
        if value is not None:
            out.append((key, value))
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise DiffLoRAError(f"--set expects KEY=VALUE, got {item!r}")
        out.append((key, value))
    return out


def _out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.paths.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(cfg.to_json())
    return d


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise FileNotFoundError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _base_config(cfg: RunConfig) -> ModelConfig:
    return _as_base(cfg.model).to_model_config()


def _as_base(section):
    return section.model_copy(update={"variant": "baseline", "group_norm": False})


def load_base(cfg: RunConfig) -> ToyModel:
    """The frozen base: a saved checkpoint when configured (``packaged`` names
    the pretrained base shipped with the package), else the seeded random init."""
    path = cfg.paths.base_checkpoint
    if path == pretrain.PACKAGED:
        path = str(pretrain.packaged_base_path())
    if path:
        return checkpoint.load_checkpoint(_need(path, "base checkpoint"))
    return build_base(_base_config(cfg))


def load_model(cfg: RunConfig) -> ToyModel:
    """The checkpoint named in ``paths.checkpoint``, or the bare base without one."""
    base = load_base(cfg)
    if not cfg.paths.checkpoint:
        return base
    return checkpoint.load_checkpoint(_need(cfg.paths.checkpoint, "checkpoint"), base=base)


def gen_dataset(cfg: RunConfig) -> list[tasks.LabeledExample]:
    t = cfg.task
    if t.kind == "icl":
        return tasks.gen_icl_classification(
            t.n_classes, t.n_shots, t.seq_len, t.seed, t.n_examples, t.pattern_len,
            tasks.VocabLayout.default(cfg.model.vocab_size))
    return tasks.gen_needle(t.needle_spec(cfg.model.vocab_size))


def print_param_table(report: dict, out=None) -> None:
    out = out or sys.stdout
    print(f"trainable parameters ({report['variant']})", file=out)
    for group, n in report["groups"].items():
        print(f"  {group:<12} {n:>10,}", file=out)
    print(f"  {'total':<12} {report['total']:>10,}", file=out)
    extra = [f"{k}={report[k]}" for k in ("placement", "rank", "formula", "matched_budget") if k in report]
    if extra:
        print("  " + "  ".join(extra), file=out)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> int:
    data = gen_dataset(cfg)
    out = _out_dir(cfg)
    path = Path(cfg.paths.dataset) if cfg.paths.dataset else out / "dataset.jsonl"
    digest = tasks.save_dataset(path, data)
    print(f"wrote {len(data)} examples to {path}")
    print(f"sha256 {digest}")
    return EXIT_OK


def cmd_pretrain_base(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    p = cfg.pretrain
    base = pretrain.pretrain_base(_base_config(cfg), steps=p.steps, learning_rate=p.learning_rate,
                                  batch_size=p.batch_size, seed=p.seed,
                                  on_record=lambda r: print(f"step {r['step']} loss {r['loss']:.4f}")
                                  if r["step"] % 500 == 0 else None)
    path = out / "base.dlra"
    checkpoint.save_checkpoint(base, path, extra={"pretrain": p.model_dump()})
    print(f"wrote base checkpoint {path} (digest {base.base_digest()[:16]})")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    data = tasks.load_dataset(_need(cfg.paths.dataset, "dataset"))
    eval_set = tasks.load_dataset(_need(cfg.paths.eval_dataset, "eval dataset")) \
        if cfg.paths.eval_dataset else None
    mc = cfg.model.to_model_config()
    if mc.variant is Variant.BASELINE:
        raise DiffLoRAError("the baseline variant has nothing to train")
    model = inject_adapters(load_base(cfg), mc)
    print_param_table(parameter_report(model))
    out = _out_dir(cfg)
    digest = model.frozen_digest()

    def show(rec):
        if "eval_accuracy" in rec:
            print(f"step {rec['step']} eval_accuracy {rec['eval_accuracy']:.4f}")

    try:
        result = train(model, data, cfg.train.to_train_config(), eval_set=eval_set, on_record=show)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if model.frozen_digest() != digest:
        print("frozen base weights changed during training", file=sys.stderr)
        return EXIT_VERIFY
    write_metrics(out / "metrics.jsonl", result.history)
    checkpoint.save_checkpoint(model, out / "adapter.dlra", state=result.state, adapter_only=True,
                               extra={"base_checkpoint": cfg.paths.base_checkpoint})
    last = next((r for r in reversed(result.history) if "loss" in r), None)
    if last:
        print(f"final step {last['step']} loss {last['loss']:.6f}")
    print(f"wrote {out / 'adapter.dlra'} and {out / 'metrics.jsonl'}")
    return EXIT_OK


GRAD_SUITE = (
    ("negative_only/fixed", {"variant": "difflora-neg", "rank": 8, "lambda": "fixed:0.1"}),
    ("negative_only/learnable", {"variant": "difflora-neg", "rank": 8, "lambda": "learnable:0.1"}),
    ("both_terms/fixed", {"variant": "difflora-both", "rank": 4, "lambda": "fixed:0.1"}),
    ("both_terms/learnable", {"variant": "difflora-both", "rank": 4, "lambda": "learnable:0.1"}),
    ("both_terms/fixed+gn", {"variant": "difflora-both", "rank": 4, "lambda": "fixed:0.1",
                             "group_norm": True}),
    ("both_terms/learnable+gn", {"variant": "difflora-both", "rank": 4, "lambda": "learnable:0.1",
                                 "group_norm": True}),
    ("fulllora", {"variant": "fulllora"}),
)


def grad_suite_model(cfg: RunConfig, overrides: dict) -> ToyModel:
    """A double-precision injected model with trainables moved off init."""
    section = cfg.model.model_copy(update={
        ("lambda_" if k == "lambda" else k): v for k, v in {**overrides, "precision": "double"}.items()})
    base = build_base(_as_base(section).to_model_config())
    model = inject_adapters(base, section.to_model_config())
    randomize_trainable(model, seed=cfg.grad_check.seed)
    return model


def grad_suite_batch(cfg: RunConfig):
    g = cfg.grad_check
    rng = np.random.default_rng(g.seed)
    toks = rng.integers(cfg.model.vocab_size, size=g.seq_len + 1)
    return toks[:-1], toks[1:], np.ones(g.seq_len, dtype=np.int64)


def cmd_grad_check(cfg: RunConfig) -> int:
    g = cfg.grad_check
    tokens, targets, mask = grad_suite_batch(cfg)
    hook = None
    if g.inject_fault:
        def hook(grads):
            hit = [n for n in grads if g.inject_fault in n]
            for n in hit:
                grads[n] = grads[n] * 1.01 + 1e-3
            return grads
    failed = []
    for label, ov in GRAD_SUITE:
        model = grad_suite_model(cfg, ov)
        res = gradient_check(model, tokens, targets, mask, g.epsilon, g.tolerance, grad_hook=hook)
        groups: dict[str, float] = {}
        for name, err in res.worst.items():
            group = name.split(".", 2)[-1] if name.startswith("layers.") else name
            groups[group] = max(groups.get(group, 0.0), err)
        status = "ok" if res.passed else "FAIL"
        print(f"[{status}] {label}: {res.n_coords} coordinates")
        for group, err in sorted(groups.items()):
            print(f"    {group:<14} worst rel err {err:.3e}")
        for name, err in res.failures().items():
            failed.append(f"{label}: {name}{list(res.worst_index[name])} rel err {err:.3e}")
    if failed:
        print(f"gradient check failed (tolerance {g.tolerance:g}):", file=sys.stderr)
        for line in failed:
            print(f"  {line}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all gradients within {g.tolerance:g}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    data = tasks.load_dataset(_need(cfg.paths.dataset, "dataset"))
    model = load_model(cfg)
    res = tasks.evaluate_accuracy(model, data)
    name = cfg.analysis.model_name or Path(cfg.paths.checkpoint or "base").stem
    out = _out_dir(cfg)
    table = {"model": name, "task": cfg.task.kind, "accuracy": res.accuracy,
             "n_scored": res.n_scored, "n_excluded": res.n_excluded}
    (out / "eval.json").write_text(json.dumps(table, indent=2) + "\n")
    print(f"{'model':<20} {'task':<8} {'accuracy':>9} {'n':>6} {'excluded':>9}")
    print(f"{name:<20} {cfg.task.kind:<8} {res.accuracy:>9.4f} {res.n_scored:>6} {res.n_excluded:>9}")
    return EXIT_OK


def cmd_attn_report(cfg: RunConfig) -> int:
    data = tasks.load_dataset(_need(cfg.paths.dataset, "dataset"))[: cfg.analysis.n_probe]
    model = load_model(cfg)
    name = cfg.analysis.model_name or Path(cfg.paths.checkpoint or "base").stem
    report = analysis.model_mass_report(model, data, name, cfg.analysis.query_rows)
    out = _out_dir(cfg)
    report.write(out / "attn_mass.csv")
    err = report.conservation_error()
    print(f"wrote {out / 'attn_mass.csv'} and {out / 'attn_mass.json'} "
          f"({len(data)} probes, conservation error {err:.2e})")
    for region in report.regions:
        print(f"  {region:<8} main {report.mass(analysis.MEAN, analysis.MEAN, region):.4f}  "
              f"denoiser {report.mass(analysis.MEAN, analysis.MEAN, region, 'denoiser'):.4f}")
    return EXIT_OK if err <= 1e-9 else EXIT_VERIFY


def cmd_attn_compare(args) -> int:
    a = analysis.AttnMassReport.read(_need(args.report_a, "report"))
    b = analysis.AttnMassReport.read(_need(args.report_b, "report"))
    delta = analysis.compare_reports(a, b)
    for region, comps in delta.summary.items():
        print(f"{region:<8} " + "  ".join(f"{c} {v:+.4f}" for c, v in comps.items()))
    if args.out:
        Path(args.out).write_text(json.dumps({"a": a.model, "b": b.model, "summary": delta.summary,
                                              "regions": delta.regions,
                                              "deltas": delta.deltas.tolist()}, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-base": cmd_pretrain_base,
    "train": cmd_train,
    "grad-check": cmd_grad_check,
    "eval": cmd_eval,
    "attn-report": cmd_attn_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "attn-compare":
            return cmd_attn_compare(args)
        cfg = load_run_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DiffLoRAError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
