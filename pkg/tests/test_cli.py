import csv
import json

import numpy as np
import pytest

from intglab import cli
from intglab.data import MCTask, Vocabulary, save_tasks
from intglab.errors import NumericalAbort
from intglab.toydata import make_corpus, make_tasks
from intglab.verify import Check

TOY = ["--preset", "toy", "--max-seq-len", "64", "--seq-len", "32"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "c.txt"
    path.write_text(make_corpus(60_000, seed=2))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def only_run_dir(out, command):
    dirs = sorted(out.glob(f"{command}-*"))
    assert len(dirs) == 1
    return dirs[0]


def losses(run_dir):
    with open(run_dir / "loss.csv") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("trained")
    assert run("train", *TOY, "--corpus", corpus, "--steps", 500, "--batch-size", 8, "--lr", 3e-3,
               "--warmup", 50, "--out", out) == 0
    return only_run_dir(out, "train")


def test_missing_corpus_exits_3(tmp_path, capsys):
    assert run("train", *TOY, "--corpus", tmp_path / "nope.txt", "--out", tmp_path) == 3
    assert "nope.txt" in capsys.readouterr().err


def test_zero_steps_writes_init_only(tmp_path, corpus):
    assert run("train", *TOY, "--corpus", corpus, "--steps", 0, "--out", tmp_path) == 0
    d = only_run_dir(tmp_path, "train")
    names = {p.name for p in d.iterdir()}
    assert {"init.iatl", "vocab.json", "config.json", "manifest.json"} <= names
    assert "final.iatl" not in names


def test_toy_training_drops_loss(trained):
    curve = losses(trained)
    assert len(curve) == 500
    assert curve[-1] <= 0.7 * curve[0]
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 0
    assert {"config", "inputs", "outputs", "version", "wall_clock_s", "started_at"} <= set(manifest)
    assert "final.iatl" in manifest["outputs"]


def test_training_reruns_identically(tmp_path, corpus):
    args = [*TOY, "--corpus", corpus, "--steps", 5, "--batch-size", 2, "--variant", "diff", "--seed", 4]
    assert run("train", *args, "--out", tmp_path / "a") == 0
    assert run("train", *args, "--out", tmp_path / "b") == 0
    a, b = only_run_dir(tmp_path / "a", "train"), only_run_dir(tmp_path / "b", "train")
    assert (a / "loss.csv").read_bytes() == (b / "loss.csv").read_bytes()
    assert (a / "final.iatl").read_bytes() == (b / "final.iatl").read_bytes()


def test_config_precedence(tmp_path, corpus):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"d_model": 32, "variant": "cog", "train": {"lr": 0.002, "batch_size": 3}}))
    assert run("train", *TOY, "--config", cfg, "--variant", "intg", "--batch-size", 2, "--corpus", corpus,
               "--steps", 0, "--out", tmp_path) == 0
    resolved = json.loads((only_run_dir(tmp_path, "train") / "manifest.json").read_text())["config"]
    assert resolved["model"]["d_model"] == 32          # file over preset
    assert resolved["model"]["variant"] == "intg"      # flag over file
    assert resolved["model"]["n_layers"] == 2          # preset default
    assert resolved["train"]["lr"] == 0.002
    assert resolved["train"]["batch_size"] == 2


@pytest.mark.parametrize("bad", [{"d_model": 15}, {"width": 3}, {"train": {"speed": 1}}, "not json"])
def test_config_errors_exit_2(tmp_path, corpus, bad):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(bad if isinstance(bad, str) else json.dumps(bad))
    assert run("train", *TOY, "--config", cfg, "--corpus", corpus, "--steps", 0, "--out", tmp_path) == 2


def test_numerical_abort_exits_4(tmp_path, corpus, monkeypatch):
    def boom(self):
        raise NumericalAbort("non-finite loss at step 0")

    monkeypatch.setattr(cli.Trainer, "train_step", boom)
    assert run("train", *TOY, "--corpus", corpus, "--steps", 2, "--out", tmp_path) == 4


def test_eval_gold_only_tasks(tmp_path, trained, capsys):
    tasks = tmp_path / "t.jsonl"
    save_tasks([MCTask("", t.context, [t.continuations[t.gold]], 0, task="only") for t in make_tasks(5)], tasks)
    assert run("eval", "--checkpoint", trained / "final.iatl", "--tasks", tasks, "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(only_run_dir(tmp_path, "eval") / "accuracy.csv")))
    assert [(r["task"], float(r["accuracy"])) for r in rows] == [("only", 1.0), ("Avg", 1.0)]
    assert "Avg" in capsys.readouterr().out


def test_eval_empty_tasks_exit_3(tmp_path, trained):
    (tmp_path / "e.jsonl").write_text("")
    assert run("eval", "--checkpoint", trained / "final.iatl", "--tasks", tmp_path / "e.jsonl",
               "--out", tmp_path) == 3


def test_eval_vocab_mismatch_exit_2(tmp_path, trained):
    Vocabulary.build("xyz").save(tmp_path / "v.json")
    assert run("eval", "--checkpoint", trained / "final.iatl", "--vocab", tmp_path / "v.json",
               "--out", tmp_path) == 2


def test_finetune_from_checkpoint(tmp_path, trained):
    tasks = tmp_path / "t.jsonl"
    save_tasks(make_tasks(4), tasks)
    assert run("train", "--init", trained / "final.iatl", "--tasks", tasks, "--steps", 2, "--batch-size", 2,
               "--warmup", 1, "--out", tmp_path) == 0
    d = only_run_dir(tmp_path, "train")
    assert (d / "vocab.json").read_text() == (trained / "vocab.json").read_text()


def test_analyze_outputs_all_metrics(tmp_path, trained):
    ckpts = ["--checkpoint", trained / "init.iatl", "--checkpoint", trained / "final.iatl"]
    assert run("analyze", *ckpts, "--samples-per-task", 6, "--out", tmp_path) == 0
    d = only_run_dir(tmp_path, "analyze")
    for m in cli.METRICS:
        assert (d / f"{m}.csv").exists() and (d / f"{m}.svg").exists()
    rows = list(csv.DictReader(open(d / "neg_fraction.csv")))
    assert rows and all(float(r["mean"]) == 0.0 for r in rows)


def test_analyze_errors(tmp_path, trained, capsys):
    ck = trained / "final.iatl"
    assert run("analyze", "--checkpoint", ck, "--metrics", "rank,attention_flow", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "attention_flow" in err and "bos_profile" in err and "rank_compare" in err
    assert run("analyze", "--checkpoint", ck, "--metrics", "rank_compare", "--out", tmp_path) == 2
    assert run("analyze", "--out", tmp_path) == 2


def test_verify_params(capsys):
    assert run("verify", "--scope", "params") == 0
    out = capsys.readouterr().out
    assert "125,015,808" in out and "PASS" in out


def test_verify_failure_exit_1(monkeypatch, tmp_path):
    monkeypatch.setitem(cli.SCOPES, "params", lambda: [Check("forced", 1.0, 0.0, False)])
    assert run("verify", "--scope", "params", "--out", tmp_path) == 1
    checks = json.loads((only_run_dir(tmp_path, "verify") / "checks.json").read_text())
    assert checks[0]["passed"] is False


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        run("serve")
    assert exc.value.code == 2
