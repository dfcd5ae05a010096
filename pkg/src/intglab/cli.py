"""Command-line entry point: ``intglab {train,eval,analyze,verify}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 data error, 4 numerical abort. ``INTG_LOG`` sets the log level.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, analysis, kernels
from .backbone import PRESETS, ModelConfig, TransformerLM, preset
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Vocabulary, build_prompt, load_tasks, pack_sequences, pad_batch, score_mc_task
from .errors import ConfigError, DataError, IntgError, NonFiniteError, NumericalAbort
from .training import TrainConfig, Trainer, write_loss_csv
from .verify import SCOPES

log = logging.getLogger("intglab")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
METRICS = ("bos_profile", "categories", "entropy", "neg_fraction", "rank", "rank_compare")

# CLI flag -> ModelConfig key
MODEL_FLAGS = ("variant", "signals", "denoise_ratio", "placement", "d_model", "n_layers", "n_heads",
               "intermediate_size", "vocab_size", "max_seq_len", "lambda_schedule", "seed")
TRAIN_FLAGS = ("steps", "batch_size", "grad_accum", "seq_len", "lr", "warmup_steps", "total_steps",
               "min_lr_ratio", "weight_decay", "grad_clip", "log_every", "checkpoint_every", "seed")


# ---------------------------------------------------------------------------
# Run directories and manifests
# ---------------------------------------------------------------------------
def make_run_dir(out: str | Path, command: str) -> Path:
    base = Path(out)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    path = base / f"{command}-{stamp}"
    n = 1
    while path.exists():
        path = base / f"{command}-{stamp}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def write_manifest(run_dir: Path, command: str, argv: Sequence[str], config: dict, seed: int | None,
                   inputs: dict, outputs: Sequence[str], started: float) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(outputs),
        "version": __version__,
        "backend": kernels.BACKEND,
        "started_at": datetime.fromtimestamp(started).isoformat(timespec="seconds"),
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_text(path: str | Path, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc.strerror}") from None


def _read_json_config(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return raw


def _vocab_for(ckpt_path: Path, explicit: str | None) -> Vocabulary:
    path = Path(explicit) if explicit else ckpt_path.parent / "vocab.json"
    if not path.exists():
        raise DataError(f"vocabulary file {path} not found (pass --vocab)")
    return Vocabulary.load(path)


def _load_model(ckpt_path: str, vocab_path: str | None) -> tuple[TransformerLM, Vocabulary]:
    path = Path(ckpt_path)
    ckpt = load_checkpoint(path)
    vocab = _vocab_for(path, vocab_path)
    if ckpt.vocab_hash and ckpt.vocab_hash != vocab.hash:
        raise ConfigError(f"vocabulary hash mismatch for {path}: checkpoint {ckpt.vocab_hash[:12]}, "
                          f"vocabulary {vocab.hash[:12]}")
    return TransformerLM.from_state(ckpt.config, ckpt.params), vocab


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------
def resolve_configs(args) -> tuple[ModelConfig, TrainConfig, bool, bool]:
    """Preset defaults, then the config file, then explicit flags.

    Returns the model config, the training config and whether ``vocab_size``
    and ``seq_len`` were set explicitly. An unset warmup is capped at the
    schedule length.
    """
    file_cfg = _read_json_config(args.config) if args.config else {}
    train_file = file_cfg.pop("train", {}) or {}
    model_kw = dict(PRESETS[args.preset]) if args.preset else {}
    explicit_vocab = "vocab_size" in file_cfg
    model_kw.update(file_cfg)
    for key in MODEL_FLAGS:
        val = getattr(args, key, None)
        if val is not None:
            model_kw[key] = val
            explicit_vocab |= key == "vocab_size"
    if "lambda_schedule" in model_kw:
        try:
            model_kw["lambda_schedule"] = float(model_kw["lambda_schedule"])
        except (TypeError, ValueError):
            pass
    config = ModelConfig.from_dict(model_kw)

    train_kw = TrainConfig().to_dict()
    unknown = set(train_file) - set(train_kw)
    if unknown:
        raise ConfigError(f"unknown training keys: {sorted(unknown)}")
    train_kw.update(train_file)
    for key in TRAIN_FLAGS:
        val = getattr(args, key, None)
        if val is not None:
            train_kw[key] = val
    tc = TrainConfig.from_dict(train_kw)
    explicit = set(train_file) | {k for k in TRAIN_FLAGS if getattr(args, k, None) is not None}
    if "warmup_steps" not in explicit:
        tc.warmup_steps = min(tc.warmup_steps, tc.schedule_steps)
    if tc.steps < 0 or tc.batch_size < 1 or tc.grad_accum < 1 or tc.seq_len < 1:
        raise ConfigError("steps must be >= 0 and batch_size, grad_accum, seq_len >= 1")
    if tc.warmup_steps > tc.schedule_steps and tc.steps > 0:
        raise ConfigError(f"warmup_steps {tc.warmup_steps} exceeds total steps {tc.schedule_steps}")
    return config, tc, explicit_vocab, "seq_len" in explicit


def cmd_train(args, argv: Sequence[str]) -> int:
    started = time.time()
    config, tc, explicit_vocab, explicit_seq = resolve_configs(args)

    init = None
    if args.init:
        init = load_checkpoint(args.init)
        vocab = _vocab_for(Path(args.init), args.vocab)
        if init.vocab_hash and init.vocab_hash != vocab.hash:
            raise ConfigError(f"vocabulary hash mismatch for {args.init}")
        config = init.config
    tasks = load_tasks(args.tasks) if args.tasks else None
    if tasks is not None and not tasks:
        raise DataError(f"task file {args.tasks} is empty")
    corpus = None
    if tasks is None:
        corpus_path = args.corpus or str(_bundled("corpus.txt"))
        corpus = _read_text(corpus_path, "corpus")
        if not corpus:
            raise DataError(f"corpus {corpus_path} is empty")
    if init is None:
        if args.vocab:
            vocab = Vocabulary.load(args.vocab)
        else:
            text = corpus if corpus is not None else ""
            if tasks is not None:
                text += "".join(t.sys_prompt + t.context + "".join(t.continuations) for t in tasks)
            vocab = Vocabulary.build(text, args.tokenizer)
        if explicit_vocab and config.vocab_size < len(vocab):
            raise ConfigError(f"vocab_size {config.vocab_size} is smaller than the {len(vocab)}-token vocabulary")
        if not explicit_vocab:
            config = config.with_overrides(vocab_size=len(vocab))

    if not explicit_seq:
        tc.seq_len = min(tc.seq_len, config.max_seq_len)
    if tasks is not None:
        seqs = [build_prompt(t, t.gold, vocab)[0] for t in tasks]
        windows, mask = pad_batch(seqs, vocab.pad_id)
    else:
        windows, mask = pack_sequences(vocab.tokenize(corpus), tc.seq_len + 1, vocab.pad_id)
    if windows.shape[1] - 1 > config.max_seq_len:
        raise ConfigError(f"training sequences of {windows.shape[1] - 1} tokens exceed max_seq_len "
                          f"{config.max_seq_len}")

    run_dir = make_run_dir(args.out, "train")
    vocab.save(run_dir / "vocab.json")
    config.save(run_dir / "config.json")
    outputs = ["vocab.json", "config.json"]
    if init is not None:
        model = TransformerLM.from_state(config, init.params)
    else:
        model = TransformerLM(config)
    trainer = Trainer(model, windows, tc, loss_mask=mask, vocab_hash=vocab.hash)
    save_checkpoint(trainer.checkpoint(), run_dir / "init.iatl")
    outputs.append("init.iatl")

    code = EXIT_OK
    try:
        if tc.steps > 0:
            trainer.run(tc.steps, run_dir)
            save_checkpoint(trainer.checkpoint(), run_dir / "final.iatl")
            outputs.append("final.iatl")
    except (NumericalAbort, NonFiniteError) as exc:
        print(f"numerical abort: {exc}; diagnostic checkpoint in {run_dir}", file=sys.stderr)
        outputs.append("diagnostic.iatl")
        code = EXIT_NUMERIC
    write_loss_csv(trainer.records, run_dir / "loss.csv")
    outputs.append("loss.csv")
    outputs += [p.name for p in run_dir.glob("step*.iatl")]
    write_manifest(run_dir, "train", argv, {"model": config.to_dict(), "train": tc.to_dict()}, tc.seed,
                   {"config": args.config, "corpus": None if tasks else (args.corpus or "bundled"),
                    "tasks": args.tasks, "init": args.init}, outputs, started)
    if trainer.records:
        first, last = trainer.records[0].loss, trainer.records[-1].loss
        print(f"trained {len(trainer.records)} steps: loss {first:.4f} -> {last:.4f}")
    print(run_dir)
    return code


def _bundled(name: str) -> Path:
    from .toydata import resource_path

    return resource_path(name)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------
def evaluate(model, vocab: Vocabulary, tasks, sys_prompt: str | None = None) -> dict[str, tuple[int, int]]:
    """Per task group: ``(correct, total)``."""
    out: dict[str, list[int]] = {}
    for t in tasks:
        pred, _ = score_mc_task(model, t, vocab, sys_prompt)
        c = out.setdefault(t.task, [0, 0])
        c[0] += int(pred == t.gold)
        c[1] += 1
    return {k: (v[0], v[1]) for k, v in out.items()}


def accuracy_table(results: dict[str, tuple[int, int]]) -> list[tuple[str, int, float]]:
    rows = [(name, n, correct / n) for name, (correct, n) in sorted(results.items())]
    avg = float(np.mean([r[2] for r in rows]))
    rows.append(("Avg", sum(r[1] for r in rows), avg))
    return rows


def cmd_eval(args, argv: Sequence[str]) -> int:
    started = time.time()
    model, vocab = _load_model(args.checkpoint, args.vocab)
    tasks = load_tasks(args.tasks or _bundled("tasks.jsonl"))
    if not tasks:
        raise DataError(f"task file {args.tasks} is empty")
    rows = accuracy_table(evaluate(model, vocab, tasks, args.sys_prompt))
    run_dir = make_run_dir(args.out, "eval")
    with open(run_dir / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "n", "accuracy"])
        for name, n, acc in rows:
            w.writerow([name, n, repr(acc)])
    width = max(len(r[0]) for r in rows)
    print(f"{'Model':<12}" + "".join(f"{name:>{max(width, 8) + 2}}" for name, _, _ in rows))
    print(f"{model.config.variant:<12}" + "".join(f"{100 * acc:>{max(width, 8) + 2}.1f}" for _, _, acc in rows))
    write_manifest(run_dir, "eval", argv, {"model": model.config.to_dict(), "sys_prompt": args.sys_prompt},
                   model.config.seed, {"checkpoint": args.checkpoint, "tasks": args.tasks or "bundled"},
                   ["accuracy.csv"], started)
    print(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------
def _parse_metrics(spec: str | None, n_ckpt: int) -> list[str]:
    if spec is None:
        return [m for m in METRICS if m != "rank_compare" or n_ckpt == 2]
    names = [m.strip() for m in spec.split(",") if m.strip()]
    bad = [m for m in names if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metric(s) {', '.join(bad)}; valid metrics: {', '.join(METRICS)}")
    if "rank_compare" in names and n_ckpt != 2:
        raise ConfigError(f"rank_compare needs exactly 2 checkpoints, got {n_ckpt}")
    return names


def _labels(models: list[TransformerLM]) -> list[str]:
    labels = [m.config.variant for m in models]
    if len(set(labels)) < len(labels):
        labels = [f"{lab}#{i}" for i, lab in enumerate(labels)]
    return labels


def cmd_analyze(args, argv: Sequence[str]) -> int:
    started = time.time()
    paths = args.checkpoint or []
    if not paths:
        raise ConfigError("analyze needs at least one --checkpoint")
    metrics = _parse_metrics(args.metrics, len(paths))
    loaded = [_load_model(p, args.vocab) for p in paths]
    models = [m for m, _ in loaded]
    tasks = load_tasks(args.tasks or _bundled("tasks.jsonl"))
    if not tasks:
        raise DataError(f"task file {args.tasks} is empty")
    samples = analysis.select_samples(tasks, args.samples_per_task, args.seed)
    captures = [[analysis.capture_sample(m, v, t, sample_id=i) for i, t in samples] for m, v in loaded]
    labels = _labels(models)

    single = {
        "bos_profile": analysis.bos_report,
        "categories": lambda c, model: analysis.category_distribution(c, args.normalization, model),
        "entropy": analysis.attention_entropy,
        "neg_fraction": analysis.negative_fraction_bos,
        "rank": analysis.rank_report,
    }
    run_dir = make_run_dir(args.out, "analyze")
    outputs = []
    for metric in metrics:
        if metric == "rank_compare":
            report = analysis.rank_compare_report(captures[0], captures[1], model=f"{labels[0]} vs {labels[1]}")
        else:
            reports = [single[metric](c, model=lab) for c, lab in zip(captures, labels)]
            report = reports[0]
            if len(reports) > 1:
                report = analysis.AnalysisReport(metric, ",".join(labels), len(samples))
                for lab, r in zip(labels, reports):
                    report.flags += [f"{lab}: {f}" for f in r.flags]
                    for name, pts in r.series.items():
                        report.series[f"{lab}:{name}"] = list(pts)
        for fmt in ("csv", "svg", "json"):
            analysis.export(report, run_dir / f"{metric}.{fmt}")
            outputs.append(f"{metric}.{fmt}")
        for flag in report.flags:
            log.warning("%s: %s", metric, flag)
        print(f"{metric}: {len(report.rows())} rows")
    write_manifest(run_dir, "analyze", argv,
                   {"metrics": metrics, "samples_per_task": args.samples_per_task,
                    "normalization": args.normalization, "models": [m.config.to_dict() for m in models]},
                   args.seed, {f"checkpoint{i}": p for i, p in enumerate(paths)} | {"tasks": args.tasks or "bundled"},
                   outputs, started)
    print(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------
def cmd_verify(args, argv: Sequence[str]) -> int:
    started = time.time()
    scopes = list(SCOPES) if args.scope == "all" else [args.scope]
    checks = []
    for scope in scopes:
        print(f"[{scope}]")
        for c in SCOPES[scope]():
            print("  " + c.line())
            checks.append((scope, c))
    failed = sum(not c.passed for _, c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    if args.out:
        run_dir = make_run_dir(args.out, "verify")
        (run_dir / "checks.json").write_text(json.dumps(
            [{"scope": s, "name": c.name, "value": c.value, "tol": c.tol, "passed": c.passed, "note": c.note}
             for s, c in checks], indent=2) + "\n")
        write_manifest(run_dir, "verify", argv, {"scopes": scopes}, None, {}, ["checks.json"], started)
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="intglab", description="Attention-variant language model lab.")
    p.add_argument("--version", action="version", version=f"intglab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a character corpus or on task gold sequences")
    t.add_argument("--config", help="JSON model config; an optional 'train' object holds training keys")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--variant", choices=("vanilla", "cog", "diff", "intg"))
    t.add_argument("--signals", type=int)
    t.add_argument("--denoise-ratio", dest="denoise_ratio", type=float)
    t.add_argument("--placement", choices=("top", "bottom"))
    t.add_argument("--lambda-schedule", dest="lambda_schedule")
    for key in ("d_model", "n_layers", "n_heads", "intermediate_size", "vocab_size", "max_seq_len"):
        t.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--grad-accum", dest="grad_accum", type=int)
    t.add_argument("--seq-len", dest="seq_len", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", dest="warmup_steps", type=int)
    t.add_argument("--total-steps", dest="total_steps", type=int)
    t.add_argument("--min-lr-ratio", dest="min_lr_ratio", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--grad-clip", dest="grad_clip", type=float)
    t.add_argument("--log-every", dest="log_every", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--corpus", help="training text (default: bundled corpus)")
    t.add_argument("--tasks", help="train on the gold sequences of this task file instead of a corpus")
    t.add_argument("--init", help="start from this checkpoint (its vocab.json is reused)")
    t.add_argument("--vocab", help="vocabulary JSON to use instead of building one")
    t.add_argument("--tokenizer", choices=("char", "word"), default="char")
    t.add_argument("--out", default="runs")

    e = sub.add_parser("eval", help="multiple-choice accuracy by lowest perplexity")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", help="JSONL task file (default: bundled tasks)")
    e.add_argument("--vocab")
    e.add_argument("--sys-prompt", dest="sys_prompt", default=None)
    e.add_argument("--out", default="runs")

    a = sub.add_parser("analyze", help="attention metrics over sampled task prompts")
    a.add_argument("--checkpoint", action="append", help="repeat for several models")
    a.add_argument("--tasks")
    a.add_argument("--vocab")
    a.add_argument("--metrics", help=f"comma-separated subset of {', '.join(METRICS)}")
    a.add_argument("--samples-per-task", dest="samples_per_task", type=int, default=100)
    a.add_argument("--normalization", choices=("linear", "softmax"), default="linear")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default="runs")

    v = sub.add_parser("verify", help="run a verification battery")
    v.add_argument("--scope", choices=(*SCOPES, "all"), default="all")
    v.add_argument("--out", help="also write checks.json and a manifest here")
    return p


def _setup_logging() -> None:
    level = getattr(logging, os.environ.get("INTG_LOG", "WARNING").upper(), None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "verify": cmd_verify}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalAbort, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IntgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
