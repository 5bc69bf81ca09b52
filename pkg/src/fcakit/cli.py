"""Command-line entry point: ``fcakit <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis
from .config import ConfigError, RunConfig
from .data import (SYNTHETIC_KINDS, DataError, TaskSpec, Vocab, ingest_dataset,
                   synthetic_task_generator, to_dataset)
from .encoder import CheckpointError, EncoderModel, load_checkpoint
from .fca import FrozenEncoder, LengthSchedule, ScheduleError
from .informativeness import dispersion_stats, write_dispersion_csv
from .pipeline import evaluate, run_pipeline, stage3_retrain

log = logging.getLogger("fcakit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _log_config(cfg: RunConfig, out_dir: Path | None) -> None:
    resolved = json.dumps(cfg.to_dict(), sort_keys=True)
    log.info("resolved configuration: %s", resolved)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig.from_dict({"version": 1})


def _regression(cfg: RunConfig) -> bool:
    return cfg.train.loss == "mse"


def _num_classes(cfg: RunConfig, labels) -> int:
    if _regression(cfg) or cfg.task.input_format == "passage_question_answer":
        return 1
    return len(labels)


def _read_split(path, spec: TaskSpec, vocab, labels, cfg: RunConfig):
    corpus = ingest_dataset(path, spec, vocab=vocab, labels=labels, seed=cfg.train.seed,
                            regression=_regression(cfg))
    return corpus, to_dataset(corpus.examples, spec.max_len)


def _checkpoint_context(extra: dict) -> tuple[Vocab, list | None, TaskSpec, str]:
    try:
        return (Vocab(extra["vocab"]), extra.get("labels"), TaskSpec(**extra["task"]),
                extra.get("loss", "cross_entropy"))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint lacks tokenizer/task metadata ({e})") from None


# --- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out)
    spec = cfg.task
    stages = _int_list(args.stages)
    if args.resume:
        model, extra = load_checkpoint(args.resume)
        vocab, labels, _, _ = _checkpoint_context(extra)
        _, train = _read_split(args.train, spec, vocab, labels, cfg)
    else:
        if 1 not in stages:
            raise UsageError("stages without 1 need --resume with a stage-1 checkpoint")
        corpus, train = _read_split(args.train, spec, None, None, cfg)
        vocab, labels = corpus.vocab, corpus.labels
        model = EncoderModel.init(cfg.encoder_config(len(vocab), _num_classes(cfg, labels)),
                                  seed=cfg.train.seed)
    cfg.model = asdict(model.config)
    _log_config(cfg, out)
    dev = _read_split(args.dev, spec, vocab, labels, cfg)[1] if args.dev else None
    schedule = LengthSchedule.load(args.schedule) if args.schedule else None
    extra = {"vocab": vocab.to_list(), "labels": labels, "task": cfg.task.__dict__,
             "loss": cfg.train.loss}
    result = run_pipeline(model, train, cfg.train, cfg.fca, dev=dev, stages=stages,
                          schedule=schedule, metric=spec.metric, out_dir=out, extra=extra)
    for rep in result.reports:
        print(f"stage {rep.stage}: final loss {rep.losses[-1] if rep.losses else float('nan'):.6f}"
              + (f", dev {spec.metric} {rep.metric:.4f}" if rep.metric is not None else ""))
    if result.schedule is not None:
        print(f"schedule k={result.schedule.k} k_prime={result.schedule.k_prime} "
              f"total={analysis.schedule_token_total(result.schedule)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    vocab, labels, spec, loss = _checkpoint_context(extra)
    cfg = RunConfig(task=spec)
    cfg.train.loss = loss
    _log_config(cfg, None)
    _, data = _read_split(args.data, spec, vocab, labels, cfg)
    schedule = LengthSchedule.load(args.schedule) if args.schedule else None
    value = evaluate(model, data, schedule, spec.metric, loss)
    print(f"{spec.metric if loss != 'mse' else 'neg_mse'}: {value:.6f}")
    return EXIT_OK


def cmd_schedule(args) -> int:
    s = LengthSchedule.load(args.file)
    print(f"k: {', '.join(map(str, s.k))}")
    print(f"k_prime: {s.k_prime}")
    print(f"mode: {s.mode}")
    print(f"total: {analysis.schedule_token_total(s)}")
    return EXIT_OK


def cmd_profile_flops(args) -> int:
    cfg = _load_config(args.config)
    _log_config(cfg, None)
    enc = cfg.encoder_config()
    length = args.full_length or enc.max_len
    schedule = LengthSchedule.load(args.schedule) if args.schedule else None
    report = analysis.count_flops(enc, schedule, length)
    for layer, (n_in, n_out) in enumerate(report.lengths, start=1):
        print(f"layer {layer}: length {n_in} -> {n_out}, {sum(report.layers[layer - 1].values()) / 1e9:.4f}G")
    print(f"total: {report.total / 1e9:.2f}G ({report.total} FLOPs)")
    if schedule is not None:
        full = analysis.count_flops(enc, None, length)
        print(f"speedup vs full length: {report.speedup(full):.2f}x")
    if args.csv:
        analysis.write_flops_csv(report, args.csv)
    return EXIT_OK


def _train_dev(args, cfg):
    corpus, train = _read_split(args.train, cfg.task, None, None, cfg)
    dev = _read_split(args.dev, cfg.task, corpus.vocab, corpus.labels, cfg)[1]
    return corpus, train, dev


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    _log_config(cfg, out.parent)
    corpus, train, dev = _train_dev(args, cfg)
    enc = cfg.encoder_config(len(corpus.vocab), _num_classes(cfg, corpus.labels))
    points = analysis.tradeoff_sweep(_float_list(args.lambdas), enc, train, dev, cfg.train,
                                     cfg.fca, _int_list(args.seeds), cfg.task.metric)
    analysis.write_tradeoff_csv(points, out)
    print(analysis.emit_tradeoff_csv(points), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    _log_config(cfg, out.parent)
    model, extra = load_checkpoint(args.checkpoint)
    vocab, labels, _, _ = _checkpoint_context(extra)
    _, train = _read_split(args.train, cfg.task, vocab, labels, cfg)
    dev = _read_split(args.dev, cfg.task, vocab, labels, cfg)[1]
    schedule = LengthSchedule.load(args.schedule)
    metric = cfg.task.metric
    enc = model.config
    _, fca_rep = stage3_retrain(model, schedule, train, cfg.train, dev, metric)
    prune = analysis.prune_baseline(model, schedule, train, dev, cfg.train, metric)
    pool = analysis.pool_all_baseline(model, schedule, train, dev, cfg.train, metric)
    pruned = analysis.prune_schedule(schedule)
    rows = [
        {"method": "fca", "metric": fca_rep.metric, "token_total": analysis.schedule_token_total(schedule),
         "flops": analysis.count_flops(enc, schedule).total},
        {"method": "prune", "metric": prune.metric, "token_total": analysis.schedule_token_total(pruned),
         "flops": analysis.count_flops(enc, pruned).total},
        {"method": "pool_all", "metric": pool.metric, "token_total": analysis.schedule_token_total(schedule),
         "flops": analysis.count_flops(enc, schedule).total},
    ]
    analysis.write_comparison_csv(rows, out)
    for r in rows:
        print(f"{r['method']}: {metric} {r['metric']:.4f}, FLOPs {r['flops']}")
    return EXIT_OK


def cmd_distance(args) -> int:
    model_a, extra = load_checkpoint(args.checkpoint_a)
    model_b, _ = load_checkpoint(args.checkpoint_b)
    vocab, labels, spec, loss = _checkpoint_context(extra)
    cfg = RunConfig(task=spec)
    cfg.train.loss = loss
    _, data = _read_split(args.data, spec, vocab, labels, cfg)
    a = FrozenEncoder(model_a, LengthSchedule.load(args.schedule_a) if args.schedule_a else None)
    b = FrozenEncoder(model_b, LengthSchedule.load(args.schedule_b) if args.schedule_b else None)
    dist = analysis.cls_distance(a, b, data.ids)
    print(f"distance: {dist:.6f}")
    if args.out:
        analysis.write_distance_csv([(Path(args.checkpoint_b).stem, dist)], args.out)
    return EXIT_OK


def cmd_export_stats(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    vocab, labels, spec, loss = _checkpoint_context(extra)
    cfg = RunConfig(task=spec)
    cfg.train.loss = loss
    _, data = _read_split(args.data, spec, vocab, labels, cfg)
    frozen = FrozenEncoder(model, LengthSchedule.load(args.schedule) if args.schedule else None)
    ids = data.ids.reshape(-1, data.ids.shape[-1])
    per_layer, masks = None, None
    for start in range(0, len(ids), 256):
        trace = frozen.trace(ids[start:start + 256], collect=True)
        if per_layer is None:
            per_layer, masks = [[s] for s in trace.scores], [[m] for m in trace.masks]
        else:
            for l, (s, m) in enumerate(zip(trace.scores, trace.masks)):
                per_layer[l].append(s)
                masks[l].append(m)
    rows = dispersion_stats([np.concatenate(s) for s in per_layer],
                            [np.concatenate(m) for m in masks])
    write_dispersion_csv(rows, args.out)
    for layer, var, std in rows:
        print(f"layer {layer}: normalized variance {var:.3e}, std {std:.3e}")
    return EXIT_OK


def cmd_synth(args) -> int:
    synthetic_task_generator(args.kind, args.size, args.seed, args.out, args.length)
    print(f"wrote {args.size} {args.kind} examples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fcakit", description="Hybrid fine/coarse attention toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="run training stages")
    t.add_argument("--config")
    t.add_argument("--train", required=True)
    t.add_argument("--dev")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--stages", default="1,2,3")
    t.add_argument("--resume", help="stage-1 checkpoint to continue from")
    t.add_argument("--schedule", help="frozen schedule for stage 3 without stage 2")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--schedule")
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("schedule", help="print a stored length schedule")
    s.add_argument("--file", required=True)
    s.set_defaults(func=cmd_schedule)

    f = sub.add_parser("profile-flops", help="FLOPs report for a configuration")
    f.add_argument("--config")
    f.add_argument("--full-length", type=int)
    f.add_argument("--schedule")
    f.add_argument("--csv")
    f.set_defaults(func=cmd_profile_flops)

    w = sub.add_parser("sweep", help="lambda sweep of the full pipeline")
    w.add_argument("--config")
    w.add_argument("--train", required=True)
    w.add_argument("--dev", required=True)
    w.add_argument("--lambdas", required=True)
    w.add_argument("--seeds", default="0")
    w.add_argument("--out", required=True, help="trade-off CSV path")
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="FCA vs prune vs pool-all at one schedule")
    c.add_argument("--config")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--schedule", required=True)
    c.add_argument("--train", required=True)
    c.add_argument("--dev", required=True)
    c.add_argument("--out", required=True, help="comparison CSV path")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("distance", help="CLS distance between two models")
    d.add_argument("--checkpoint-a", required=True)
    d.add_argument("--checkpoint-b", required=True)
    d.add_argument("--schedule-a")
    d.add_argument("--schedule-b")
    d.add_argument("--data", required=True)
    d.add_argument("--out")
    d.set_defaults(func=cmd_distance)

    x = sub.add_parser("export-stats", help="per-layer informativeness dispersion CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--schedule")
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_stats)

    g = sub.add_parser("synth", help="write a synthetic TSV task")
    g.add_argument("--kind", choices=SYNTHETIC_KINDS, required=True)
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--length", type=int, default=60)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
    except UsageError as e:
        print(f"fcakit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"fcakit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ScheduleError, ConfigError, OSError) as e:
        print(f"fcakit: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"fcakit: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"fcakit: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
