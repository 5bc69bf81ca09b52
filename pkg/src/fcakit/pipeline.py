"""Three-stage training: plain fine-tuning, retention learning, hard-schedule retraining."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import METRIC_FUNCTIONS, Dataset
from .encoder import EncoderModel, save_checkpoint
from .fca import (FcaConfig, LengthSchedule, RetentionParams, derive_schedule, run_encoder)
from .optim import Adam
from .tensor import NumericError, Tape, Tensor, cross_entropy, mse

log = logging.getLogger(__name__)

LOSS_KINDS = ("cross_entropy", "mse")
DISTANCE_EPS = 1e-12


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: list[int] = field(default_factory=lambda: [3, 3, 3])
    batch_size: int = 16
    lr: float = 1e-3
    lr_retention: float = 2e-3
    lam: float = 1e-3
    seed: int = 0
    loss: str = "cross_entropy"
    stage3_init: str = "stage2"
    distance_weight: float = 0.0

    def __post_init__(self):
        self.epochs = [int(e) for e in self.epochs]
        if len(self.epochs) != 3 or min(self.epochs) < 0:
            raise ValueError("epochs must list three non-negative per-stage counts")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lr <= 0 or self.lr_retention <= 0:
            raise ValueError("learning rates must be positive")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.stage3_init not in ("stage1", "stage2"):
            raise ValueError("stage3_init must be 'stage1' or 'stage2'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StageReport:
    stage: int
    losses: list[float] = field(default_factory=list)
    metric: float | None = None
    schedule: dict | None = None
    retention_sums: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# --- losses ------------------------------------------------------------------

def joint_loss(task_loss: Tensor, retention: RetentionParams, lam: float) -> Tensor:
    """task loss + lam * sum_l l * sum(R_l)."""
    if lam == 0:
        return task_loss
    return task_loss + retention.penalty() * lam


def distance_term(cls_states: Tensor, reference: np.ndarray) -> Tensor:
    """Summed per-instance Euclidean distance to frozen reference CLS states.

    A tiny epsilon under the root keeps the gradient finite at zero distance.
    """
    diff = cls_states - Tensor(reference)
    return ((diff * diff).sum(axis=-1) + DISTANCE_EPS).sqrt().sum()


def distance_regularized_loss(task_loss: Tensor, retention: RetentionParams, lam: float,
                              distance) -> Tensor:
    return joint_loss(task_loss, retention, lam) + distance


def task_loss(logits: Tensor, labels: np.ndarray, kind: str, num_choices: int | None) -> Tensor:
    if num_choices:
        logits = logits.reshape(-1, num_choices)
    if kind == "mse":
        return mse(logits[:, 0], labels)
    return cross_entropy(logits, labels)


def _flat(ids: np.ndarray) -> np.ndarray:
    return ids.reshape(-1, ids.shape[-1])


# --- evaluation ----------------------------------------------------------------

def predict(model: EncoderModel, data: Dataset, schedule: LengthSchedule | None = None,
            pool_units: list[int] | None = None, batch_size: int = 256) -> np.ndarray:
    """Raw logits ``[N, classes]`` (``[N, choices]`` for multiple choice)."""
    out = []
    for start in range(0, len(data), batch_size):
        ids = data.ids[start:start + batch_size]
        logits = run_encoder(model, _flat(ids), schedule=schedule, pool_units=pool_units).logits.data
        if data.num_choices:
            logits = logits.reshape(-1, data.num_choices)
        out.append(logits)
    return np.concatenate(out)


def evaluate(model: EncoderModel, data: Dataset, schedule: LengthSchedule | None = None,
             metric: str = "accuracy", loss: str = "cross_entropy",
             pool_units: list[int] | None = None) -> float:
    """Task metric on ``data``; for regression, the negated mean squared error."""
    logits = predict(model, data, schedule, pool_units)
    if loss == "mse":
        return -float(np.mean((logits[:, 0] - data.labels) ** 2))
    return METRIC_FUNCTIONS[metric](logits.argmax(axis=-1), data.labels)


# --- training loop -------------------------------------------------------------

def _train(model: EncoderModel, data: Dataset, cfg: TrainConfig, stage: int, *,
           schedule: LengthSchedule | None = None, retention: RetentionParams | None = None,
           pool_units: list[int] | None = None, reference: EncoderModel | None = None,
           report: StageReport) -> None:
    epochs = cfg.epochs[stage - 1]
    rng = np.random.default_rng([cfg.seed, stage])
    opt = Adam(model.parameters(), lr=cfg.lr)
    ropt = Adam(retention.layers, lr=cfg.lr_retention) if retention else None
    for epoch in range(epochs):
        perm = rng.permutation(len(data))
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(data), cfg.batch_size)):
            batch = data.subset(perm[start:start + cfg.batch_size])
            ids = _flat(batch.ids)
            try:
                with Tape() as tape:
                    trace = run_encoder(model, ids, schedule=schedule, retention=retention,
                                        pool_units=pool_units)
                    loss = task_loss(trace.logits, batch.labels, cfg.loss, batch.num_choices)
                    if retention is not None:
                        loss = joint_loss(loss, retention, cfg.lam)
                    if reference is not None and cfg.distance_weight > 0:
                        ref = run_encoder(reference, ids).final.hidden.data[:, 0, :]
                        loss = loss + distance_term(trace.final.hidden[:, 0, :], ref) * cfg.distance_weight
            except NumericError as e:
                raise NonFiniteLossError(
                    f"stage {stage}, epoch {epoch + 1}, step {step}: {e}") from None
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(f"stage {stage}, epoch {epoch + 1}, step {step}: loss={value}")
            opt.zero_grad()
            if ropt:
                ropt.zero_grad()
            tape.backward(loss)
            opt.step()
            if ropt:
                ropt.step()
                retention.clamp()
            total += value * len(batch)
            count += len(batch)
        report.losses.append(total / max(count, 1))
        if retention is not None:
            report.retention_sums.append(retention.sums())
        log.info("stage %d epoch %d loss %.6f", stage, epoch + 1, report.losses[-1])


def stage1_finetune(model: EncoderModel, data: Dataset, cfg: TrainConfig,
                    dev: Dataset | None = None, metric: str = "accuracy"):
    """Train the plain encoder on the task loss. Returns (new model, report)."""
    model = model.copy()
    report = StageReport(1)
    _train(model, data, cfg, 1, report=report)
    if dev is not None:
        report.metric = evaluate(model, dev, metric=metric, loss=cfg.loss)
    return model, report


def stage2_learn_retention(model: EncoderModel, data: Dataset, cfg: TrainConfig,
                           fca: FcaConfig, dev: Dataset | None = None,
                           metric: str = "accuracy", reference: EncoderModel | None = None):
    """Jointly train weights and retention values; derive the length schedule.

    Returns (model, retention, schedule, report).
    """
    model = model.copy()
    rng = np.random.default_rng([cfg.seed, 2, 1])
    retention = RetentionParams.uniform(model.config.num_layers, model.config.max_len - 1, rng)
    report = StageReport(2)
    report.retention_sums.append(retention.sums())
    _train(model, data, cfg, 2, retention=retention, reference=reference, report=report)
    schedule = derive_schedule(retention, fca.k_prime, fca.mode)
    report.schedule = schedule.to_dict()
    if dev is not None:
        report.metric = evaluate(model, dev, schedule, metric, cfg.loss)
    return model, retention, schedule, report


def stage3_retrain(model: EncoderModel, schedule: LengthSchedule, data: Dataset,
                   cfg: TrainConfig, dev: Dataset | None = None, metric: str = "accuracy",
                   reference: EncoderModel | None = None):
    """Retrain under the frozen hard schedule with the task loss."""
    model = model.copy()
    report = StageReport(3, schedule=schedule.to_dict())
    _train(model, data, cfg, 3, schedule=schedule, reference=reference, report=report)
    if dev is not None:
        report.metric = evaluate(model, dev, schedule, metric, cfg.loss)
    return model, report


def retrain_pool_all(model: EncoderModel, pool_units: list[int], data: Dataset,
                     cfg: TrainConfig, dev: Dataset | None = None, metric: str = "accuracy"):
    """Stage-3-style retraining where every layer pools all tokens."""
    model = model.copy()
    report = StageReport(3)
    _train(model, data, cfg, 3, pool_units=pool_units, report=report)
    if dev is not None:
        report.metric = evaluate(model, dev, metric=metric, loss=cfg.loss, pool_units=pool_units)
    return model, report


# --- orchestration -------------------------------------------------------------

@dataclass
class PipelineResult:
    models: dict[int, EncoderModel]
    reports: list[StageReport]
    schedule: LengthSchedule | None = None
    retention: RetentionParams | None = None

    @property
    def final_model(self) -> EncoderModel:
        return self.models[max(self.models)]

    def metric(self, stage: int) -> float | None:
        for r in self.reports:
            if r.stage == stage:
                return r.metric
        return None


def run_pipeline(model: EncoderModel, train: Dataset, cfg: TrainConfig, fca: FcaConfig,
                 dev: Dataset | None = None, stages=(1, 2, 3),
                 schedule: LengthSchedule | None = None, metric: str = "accuracy",
                 out_dir=None, extra: dict | None = None) -> PipelineResult:
    """Run the requested stages in order.

    When stage 1 is skipped, ``model`` is taken to be the stage-1 result (for
    example a reloaded checkpoint). Stage 3 without stage 2 needs ``schedule``.
    """
    stages = sorted(set(stages))
    if not stages or not set(stages) <= {1, 2, 3}:
        raise ValueError(f"stages must be a subset of 1,2,3, got {stages}")
    if 3 in stages and 2 not in stages and schedule is None:
        raise ValueError("stage 3 without stage 2 needs a schedule")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    models = {}
    reports = []
    retention = None
    stage1 = model
    reference = None
    if 1 in stages:
        stage1, rep = stage1_finetune(model, train, cfg, dev, metric)
        models[1] = stage1
        reports.append(rep)
    if cfg.distance_weight > 0:
        reference = stage1
    current = stage1
    if 2 in stages:
        current, retention, schedule, rep = stage2_learn_retention(
            stage1, train, cfg, fca, dev, metric, reference)
        models[2] = current
        reports.append(rep)
    if 3 in stages:
        start = stage1 if cfg.stage3_init == "stage1" else current
        final, rep = stage3_retrain(start, schedule, train, cfg, dev, metric, reference)
        models[3] = final
        reports.append(rep)
    if out:
        for stage, m in models.items():
            save_checkpoint(m, out / f"stage{stage}.json", extra)
        if schedule is not None:
            schedule.save(out / "schedule.json")
        (out / "reports.json").write_text(
            json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    return PipelineResult(models, reports, schedule, retention)
