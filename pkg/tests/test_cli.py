import json

import numpy as np
import pytest

from difflora import checkpoint, tasks
from difflora.adapters import trainable_param_count, AdapterPlacement
from difflora.cli import EXIT_INPUT, EXIT_OK, EXIT_VERIFY, main


def _gen(tmp_path, name="data.jsonl", *extra):
    path = tmp_path / name
    assert main(["gen-data", "--seq-len", "32", "--n-pairs", "2", "--n-examples", "16",
                 "--dataset", str(path), "--out", str(tmp_path / "gen"), *extra]) == EXIT_OK
    return path


def _train(tmp_path, out, *extra):
    data = tmp_path / "data.jsonl"
    if not data.exists():
        _gen(tmp_path)
    return main(["train", "--dataset", str(data), "--out", str(out), "--steps", "3",
                 "--batch-size", "4", "--lr", "1e-3", *extra])


def test_gen_data_checksum_is_reproducible(tmp_path, capsys):
    a = _gen(tmp_path, "a.jsonl")
    first = capsys.readouterr().out
    b = _gen(tmp_path, "b.jsonl")
    assert a.read_bytes() == b.read_bytes()
    digest = [l for l in first.splitlines() if l.startswith("sha256")][0].split()[1]
    assert digest == tasks.dataset_checksum(tasks.load_dataset(a))
    assert json.loads((tmp_path / "gen" / "config.json").read_text())["task"]["n_pairs"] == 2


def test_infeasible_needle_exits_2(tmp_path, capsys):
    code = main(["gen-data", "--seq-len", "8", "--n-pairs", "6", "--out", str(tmp_path)])
    assert code == EXIT_INPUT
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    assert main(["gen-data", "--set", "task.bogus=1", "--out", str(tmp_path)]) == EXIT_INPUT
    assert "bogus" in capsys.readouterr().err


def test_train_prints_param_table_matching_counts(tmp_path, capsys):
    assert _train(tmp_path, tmp_path / "run") == EXIT_OK
    out = capsys.readouterr().out
    want = trainable_param_count(AdapterPlacement.negative_only(8), 2, 32, 32, False, False, 8, 4)
    total = [l for l in out.splitlines() if l.strip().startswith("total")][0]
    assert int(total.split()[-1].replace(",", "")) == want
    model = checkpoint.load_checkpoint(tmp_path / "run" / "adapter.dlra")
    assert model.n_trainable() == want
    recs = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2, 3]


def test_train_zero_steps_and_baseline(tmp_path):
    assert _train(tmp_path, tmp_path / "z", "--steps", "0") == EXIT_OK
    assert (tmp_path / "z" / "metrics.jsonl").read_text() == ""
    assert _train(tmp_path, tmp_path / "b", "--variant", "baseline") == EXIT_INPUT


def test_train_is_deterministic(tmp_path):
    for out in ("r1", "r2"):
        assert _train(tmp_path, tmp_path / out, "--variant", "difflora-both", "--rank", "4",
                      "--lambda", "learnable:0.1", "--group-norm", "--seed", "7") == EXIT_OK
    for f in ("adapter.dlra", "metrics.jsonl"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()


def test_missing_files_exit_2(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["eval", "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["attn-compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == EXIT_INPUT


def test_eval_matches_direct_evaluation(tmp_path):
    data = _gen(tmp_path)
    assert _train(tmp_path, tmp_path / "run") == EXIT_OK
    ck = tmp_path / "run" / "adapter.dlra"
    assert main(["eval", "--dataset", str(data), "--checkpoint", str(ck), "--out", str(tmp_path / "ev")]) == 0
    got = json.loads((tmp_path / "ev" / "eval.json").read_text())
    want = tasks.evaluate_accuracy(checkpoint.load_checkpoint(ck), tasks.load_dataset(data))
    assert got["accuracy"] == want.accuracy and got["n_scored"] == want.n_scored


def test_attn_report_and_compare(tmp_path, capsys):
    data = _gen(tmp_path)
    assert _train(tmp_path, tmp_path / "run") == EXIT_OK
    assert main(["attn-report", "--dataset", str(data), "--out", str(tmp_path / "base"),
                 "--name", "base"]) == EXIT_OK
    assert main(["attn-report", "--dataset", str(data), "--checkpoint",
                 str(tmp_path / "run" / "adapter.dlra"), "--out", str(tmp_path / "tuned")]) == EXIT_OK
    header = (tmp_path / "tuned" / "attn_mass.csv").read_text().splitlines()[0]
    assert header == "model,layer,head,region,component,mass,tokens"
    capsys.readouterr()
    assert main(["attn-compare", str(tmp_path / "base" / "attn_mass.csv"),
                 str(tmp_path / "tuned" / "attn_mass.csv"), "--out", str(tmp_path / "d.json")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("bos") and "needle" in out
    summary = json.loads((tmp_path / "d.json").read_text())["summary"]
    assert all(np.isfinite(v) for comps in summary.values() for v in comps.values())


@pytest.mark.slow
def test_grad_check_suite_and_fault(capsys):
    assert main(["grad-check"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("[ok]") == 7
    assert main(["grad-check", "--inject-fault", "attn.k2.a"]) == EXIT_VERIFY
    err = capsys.readouterr().err
    assert "layers.0.attn.k2.a" in err and "rel err" in err


def test_pretrain_base_then_train_on_it(tmp_path):
    assert main(["pretrain-base", "--pretrain-steps", "2", "--set", "pretrain.batch_size=2",
                 "--out", str(tmp_path / "pre")]) == EXIT_OK
    base = tmp_path / "pre" / "base.dlra"
    assert _train(tmp_path, tmp_path / "run", "--base", str(base)) == EXIT_OK
    # the adapter checkpoint refuses a different base
    data = tmp_path / "data.jsonl"
    code = main(["eval", "--dataset", str(data), "--checkpoint", str(tmp_path / "run" / "adapter.dlra"),
                 "--out", str(tmp_path / "ev")])
    assert code == EXIT_INPUT
