"""FLOPs accounting, schedule totals, baselines, trade-off sweeps and CLS distance.

FLOPs convention: every multiply-accumulate in a matrix product counts 2;
softmax, layer-norm and GeLU count 5 per element; embeddings and the
gather/pool bookkeeping of the hybrid sub-layer are not counted.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .encoder import EncoderConfig, EncoderModel
from .fca import FcaConfig, FrozenEncoder, LengthSchedule, ScheduleError
from .pipeline import TrainConfig, retrain_pool_all, run_pipeline, stage3_retrain

log = logging.getLogger(__name__)

ELEMENTWISE_FLOPS = 5
COMPONENTS = ("qkv_projection", "attention_scores", "attention_values",
              "output_projection", "ffn", "elementwise")


@dataclass
class FlopsReport:
    layers: list[dict[str, int]]
    lengths: list[tuple[int, int]]      # (attention length, FFN length) per layer

    @property
    def total(self) -> int:
        return sum(sum(layer.values()) for layer in self.layers)

    def speedup(self, reference: "FlopsReport") -> float:
        return reference.total / self.total

    def rows(self) -> list[tuple[int, str, int]]:
        return [(l, c, layer[c]) for l, layer in enumerate(self.layers, start=1) for c in COMPONENTS]


def layer_lengths(num_layers: int, full_length: int,
                  schedule: LengthSchedule | None = None) -> list[tuple[int, int]]:
    """(attention length, FFN length) per layer, CLS included."""
    if schedule is None:
        return [(full_length, full_length)] * num_layers
    if len(schedule.k) != num_layers:
        raise ScheduleError(f"schedule has {len(schedule.k)} layers, model has {num_layers}")
    out, n = [], full_length
    for k in schedule.k:
        if k > n - 1:
            raise ScheduleError(f"k={k} exceeds the {n - 1} tokens available")
        n_out = 1 + k + min(schedule.k_prime, n - 1 - k)
        out.append((n, n_out))
        n = n_out
    return out


def count_flops(cfg: EncoderConfig, schedule: LengthSchedule | None = None,
                full_length: int | None = None) -> FlopsReport:
    """Forward FLOPs for one example of ``full_length`` tokens (default ``max_len``)."""
    d, f, h = cfg.d_hidden, cfg.d_ff, cfg.num_heads
    lengths = layer_lengths(cfg.num_layers, full_length or cfg.max_len, schedule)
    layers = []
    for n, n_out in lengths:
        layers.append({
            "qkv_projection": 2 * 3 * n * d * d,
            "attention_scores": 2 * n * n * d,
            "attention_values": 2 * n * n * d,
            "output_projection": 2 * n * d * d,
            "ffn": 2 * 2 * n_out * d * f,
            "elementwise": ELEMENTWISE_FLOPS * (h * n * n + n * d + n_out * d + n_out * f),
        })
    return FlopsReport(layers, lengths)


def write_flops_csv(report: FlopsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "component", "flops"])
        w.writerows(report.rows())


def schedule_token_total(schedule) -> int:
    """Fine tokens processed over all layers (CLS and coarse units not counted)."""
    k = schedule.k if isinstance(schedule, LengthSchedule) else schedule
    return int(sum(k))


# --- CLS distance ---------------------------------------------------------------

def _as_frozen(model) -> FrozenEncoder:
    return FrozenEncoder(model) if isinstance(model, EncoderModel) else model


def cls_distance(model_a, model_b, token_ids, batch_size: int = 256) -> float:
    """Sum over instances of the Euclidean distance between final CLS states."""
    a, b = _as_frozen(model_a), _as_frozen(model_b)
    ids = np.asarray(token_ids)
    ids = ids.reshape(-1, ids.shape[-1])
    if len(ids) == 0:
        raise ValueError("distance needs at least one instance")
    total = 0.0
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        ca, cb = a.cls_states(chunk), b.cls_states(chunk)
        if ca.shape[1] != cb.shape[1]:
            raise ValueError(f"hidden width mismatch: {ca.shape[1]} vs {cb.shape[1]}")
        total += float(np.sqrt(((ca - cb) ** 2).sum(axis=1)).sum())
    return total


def write_distance_csv(rows: Sequence[tuple[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "distance"])
        for name, dist in rows:
            w.writerow([name, repr(dist)])


# --- baselines -------------------------------------------------------------------

@dataclass
class BaselineResult:
    method: str
    metric: float
    lengths: list[int]
    model: EncoderModel | None = None


def prune_schedule(schedule: LengthSchedule) -> LengthSchedule:
    return LengthSchedule(schedule.k, 0, schedule.mode)


def pool_units_for(schedule: LengthSchedule) -> list[int]:
    """Pooled units per layer so the pool-everything sequence matches FCA's length."""
    return [k + schedule.k_prime for k in schedule.k]


def prune_baseline(model: EncoderModel, schedule: LengthSchedule, train: Dataset,
                   dev: Dataset, cfg: TrainConfig, metric: str = "accuracy") -> BaselineResult:
    """FCA retraining with the coarse units removed: uninformative tokens are dropped."""
    pruned = prune_schedule(schedule)
    trained, report = stage3_retrain(model, pruned, train, cfg, dev, metric)
    lengths = [n for _, n in layer_lengths(model.config.num_layers, model.config.max_len, pruned)]
    return BaselineResult("prune", report.metric, lengths, trained)


def pool_all_baseline(model: EncoderModel, schedule: LengthSchedule, train: Dataset,
                      dev: Dataset, cfg: TrainConfig, metric: str = "accuracy") -> BaselineResult:
    """Pool every non-CLS token, layer by layer, to FCA's per-layer length."""
    units = pool_units_for(schedule)
    trained, report = retrain_pool_all(model, units, train, cfg, dev, metric)
    return BaselineResult("pool_all", report.metric, [1 + u for u in units], trained)


def write_comparison_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "metric", "token_total", "flops"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in w.fieldnames})


# --- trade-off sweep -------------------------------------------------------------

@dataclass
class TradeoffPoint:
    lam: float
    flops: int
    metric: float
    schedule: list[int] = field(default_factory=list)
    error: str = ""


def tradeoff_sweep(lams: Sequence[float], config: EncoderConfig, train: Dataset, dev: Dataset,
                   cfg: TrainConfig, fca: FcaConfig, seeds: Sequence[int] = (0,),
                   metric: str = "accuracy") -> list[TradeoffPoint]:
    """Full three-stage run per lambda (and seed); FLOPs and metric averaged over seeds."""
    if len(lams) < 2:
        raise ValueError("a sweep needs at least two lambda values")
    points = []
    for lam in lams:
        flops, metrics, schedules, errors = [], [], [], []
        for seed in seeds:
            run_cfg = TrainConfig(**{**cfg.__dict__, "lam": lam, "seed": seed})
            try:
                model = EncoderModel.init(config, seed=seed)
                result = run_pipeline(model, train, run_cfg, fca, dev=dev, metric=metric)
            except (FloatingPointError, ValueError) as e:
                log.warning("sweep lambda=%g seed=%d failed: %s", lam, seed, e)
                errors.append(f"seed {seed}: {e}")
                continue
            flops.append(count_flops(config, result.schedule).total)
            metrics.append(result.metric(3))
            schedules.append(result.schedule.k)
        if not flops:
            points.append(TradeoffPoint(lam, 0, math.nan, [], "; ".join(errors)))
            continue
        points.append(TradeoffPoint(lam, int(round(np.mean(flops))), float(np.mean(metrics)),
                                    schedules[0], "; ".join(errors)))
    return points


def emit_tradeoff_csv(points: Sequence[TradeoffPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "flops", "metric", "schedule", "error"])
    for p in points:
        w.writerow([repr(p.lam), p.flops, repr(p.metric), " ".join(map(str, p.schedule)), p.error])
    return buf.getvalue()


def parse_tradeoff_csv(text: str) -> list[TradeoffPoint]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [TradeoffPoint(float(r["lambda"]), int(r["flops"]), float(r["metric"]),
                          [int(v) for v in r["schedule"].split()], r["error"]) for r in rows]


def write_tradeoff_csv(points: Sequence[TradeoffPoint], path) -> None:
    Path(path).write_text(emit_tradeoff_csv(points))
