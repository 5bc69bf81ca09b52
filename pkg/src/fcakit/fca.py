"""Fine- and coarse-granularity hybrid attention.

After each layer's attention sub-layer the non-CLS tokens are ranked by
informativeness. The top ``k_l`` stay as individual (fine) units; the rest are
pooled, in position order, into at most ``k_prime`` contiguous coarse units.
The sequence ``[CLS, fine..., coarse...]`` is what the FFN and every later
layer see, so the length shrinks layer by layer.

Stage-2 training instead scales each token by a learnable retention value
chosen by its informativeness rank; the per-layer sums of those values become
the frozen schedule ``k_l``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import (EncodedSequence, EncoderModel, attend, attention_block, classify,
                      embed, ffn_block)
from .informativeness import rank_order, score_tensor, score_tokens
from .tensor import Tensor, concat, layer_norm, matmul, softmax_rows, take_rows

POOLING_MODES = ("average", "weighted")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class FcaConfig:
    mode: str = "average"
    k_prime: int = 1

    def __post_init__(self):
        if self.mode not in POOLING_MODES:
            raise ValueError(f"pooling mode must be one of {POOLING_MODES}, got {self.mode!r}")
        if self.k_prime < 0:
            raise ValueError("k_prime must be >= 0")


@dataclass
class LengthSchedule:
    """Frozen per-layer fine-token counts plus the shared coarse-unit count."""
    k: list[int]
    k_prime: int = 0
    mode: str = "average"

    def __post_init__(self):
        self.k = [int(v) for v in self.k]
        if any(v < 0 for v in self.k):
            raise ScheduleError(f"negative fine count in {self.k}")
        if any(b > a for a, b in zip(self.k, self.k[1:])):
            raise ScheduleError(f"schedule must be non-increasing, got {self.k}")
        FcaConfig(self.mode, self.k_prime)

    @property
    def config(self) -> FcaConfig:
        return FcaConfig(self.mode, self.k_prime)

    @classmethod
    def full(cls, num_layers: int, max_len: int) -> "LengthSchedule":
        """Every non-CLS slot fine at every layer, no coarse units."""
        return cls([max_len - 1] * num_layers, 0)

    def to_dict(self) -> dict:
        return {"k": list(self.k), "k_prime": self.k_prime, "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "LengthSchedule":
        unknown = set(d) - {"k", "k_prime", "mode"}
        if unknown:
            raise ScheduleError(f"unknown schedule keys: {sorted(unknown)}")
        if "k" not in d:
            raise ScheduleError("schedule file needs a 'k' list")
        return cls(d["k"], d.get("k_prime", 0), d.get("mode", "average"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "LengthSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RetentionParams:
    """One retention vector per layer, indexed by informativeness rank."""
    layers: list[Tensor] = field(default_factory=list)

    @classmethod
    def uniform(cls, num_layers: int, length: int, rng: np.random.Generator) -> "RetentionParams":
        return cls([Tensor(rng.uniform(0.0, 1.0, size=length), requires_grad=True)
                    for _ in range(num_layers)])

    @classmethod
    def constant(cls, num_layers: int, length: int, value: float = 1.0) -> "RetentionParams":
        return cls([Tensor(np.full(length, value), requires_grad=True) for _ in range(num_layers)])

    def clamp(self) -> None:
        for r in self.layers:
            np.clip(r.data, 0.0, 1.0, out=r.data)

    def sums(self) -> list[float]:
        return [float(r.data.sum()) for r in self.layers]

    def penalty(self) -> Tensor:
        """Layer-index-weighted total, sum_l l * sum(R_l)."""
        total = self.layers[0].sum()
        for l, r in enumerate(self.layers[1:], start=2):
            total = total + r.sum() * float(l)
        return total


def chunk_sizes(count: int, k_prime: int) -> list[int]:
    """Contiguous chunk sizes, as equal as possible, larger chunks first."""
    if count <= 0 or k_prime <= 0:
        return []
    units = min(count, k_prime)
    q, r = divmod(count, units)
    return [q + 1] * r + [q] * (units - r)


def chunk_assignment(count: int, k_prime: int) -> list[np.ndarray]:
    bounds = np.cumsum([0] + chunk_sizes(count, k_prime))
    return [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def _membership(count: int, k_prime: int) -> np.ndarray:
    chunks = chunk_assignment(count, k_prime)
    member = np.zeros((len(chunks), count), dtype=bool)
    for j, c in enumerate(chunks):
        member[j, c] = True
    return member


def aggregate_average(x_un, k_prime: int) -> Tensor:
    """Mean of each contiguous chunk of the ``[m, d]`` uninformative tokens."""
    x = x_un if isinstance(x_un, Tensor) else Tensor(x_un)
    member = _membership(x.shape[0], k_prime)
    return matmul(Tensor(member / member.sum(axis=1, keepdims=True)), x)


def aggregate_weighted(x_un, scores, k_prime: int) -> Tensor:
    """Per chunk, the softmax(informativeness)-weighted sum of its tokens."""
    x = x_un if isinstance(x_un, Tensor) else Tensor(x_un)
    s = scores if isinstance(scores, Tensor) else Tensor(scores)
    member = _membership(x.shape[0], k_prime)
    logits = s.reshape(1, -1) + Tensor(np.zeros(member.shape))
    return matmul(softmax_rows(logits, member), x)


# --- batched sub-layers ----------------------------------------------------

@dataclass
class Reduction:
    """How one hybrid sub-layer rebuilt the sequence.

    ``select`` maps the input onto the CLS and fine slots; ``member`` marks,
    for every coarse slot, which input tokens it pools. Empty coarse slots
    point at CLS and are masked.
    """
    select: np.ndarray   # [B, 1+k, n]
    member: np.ndarray   # [B, u, n] bool
    mask: np.ndarray     # [B, 1+k+u]
    positions: np.ndarray

    @property
    def units(self) -> int:
        return self.member.shape[1]


def _order_by_position(idx: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return idx[np.lexsort((idx, positions[idx]))]


def plan_reduction(seq: EncodedSequence, scores: np.ndarray, k: int, k_prime: int) -> Reduction:
    B, n = seq.mask.shape
    m = n - 1
    if not 0 <= k <= m:
        raise ScheduleError(f"k={k} outside [0, {m}] for a length-{n} sequence")
    u = min(k_prime, m - k)
    select = np.zeros((B, 1 + k, n))
    select[:, 0, 0] = 1.0
    member = np.zeros((B, u, n), dtype=bool)
    member[:, :, 0] = True
    out_mask = np.zeros((B, 1 + k + u), dtype=bool)
    out_mask[:, 0] = True
    out_pos = np.zeros((B, 1 + k + u))
    for b in range(B):
        pos, mask = seq.positions[b], seq.mask[b]
        order = rank_order(scores[b], mask[1:]) + 1
        fine = _order_by_position(order[:k], pos)
        rest = order[k:]
        rest = _order_by_position(rest[mask[rest]], pos)
        select[b, np.arange(1, k + 1), fine] = 1.0
        out_mask[b, 1:k + 1] = mask[fine]
        out_pos[b, :k + 1] = pos[np.concatenate([[0], fine])]
        for j, chunk in enumerate(chunk_assignment(len(rest), u)):
            member[b, j, 0] = False
            member[b, j, rest[chunk]] = True
            out_mask[b, k + 1 + j] = True
            out_pos[b, k + 1 + j] = pos[rest[chunk]].mean()
    return Reduction(select, member, out_mask, out_pos)


def apply_reduction(seq: EncodedSequence, plan: Reduction, mode: str = "average",
                    scores: Tensor | None = None) -> EncodedSequence:
    x = seq.hidden
    if plan.units == 0:
        hidden = matmul(Tensor(plan.select), x)
    elif mode == "average":
        pool = plan.member / plan.member.sum(axis=2, keepdims=True)
        hidden = matmul(Tensor(np.concatenate([plan.select, pool], axis=1)), x)
    else:
        B, n = seq.mask.shape
        full = concat([Tensor(np.zeros((B, 1))), scores], axis=1).reshape(B, 1, n)
        logits = full + Tensor(np.zeros(plan.member.shape))
        weights = softmax_rows(logits, plan.member)
        hidden = concat([matmul(Tensor(plan.select), x), matmul(weights, x)], axis=1)
    return EncodedSequence(hidden, plan.positions, plan.mask)


def _is_identity(seq: EncodedSequence, plan: Reduction) -> bool:
    n = seq.length
    return (plan.units == 0 and plan.select.shape[1] == n
            and bool(np.all(plan.select == np.eye(n)[None])))


def fca_hybrid_sublayer(x: EncodedSequence, maps: Tensor, k: int,
                        cfg: FcaConfig, scores=None) -> EncodedSequence:
    """Shorten ``x`` to ``[CLS, top-k fine tokens, <= k_prime coarse units]``.

    ``maps`` are the attention maps of the sub-layer that produced ``x``.
    ``scores`` (``[B, n-1]``) overrides scoring from the maps when given.
    """
    score_t = None
    if scores is None:
        if cfg.mode == "weighted":
            score_t = score_tensor(maps, x.mask)
            scores = score_t.data
        else:
            scores = score_tokens(maps, x.mask, check=False).scores
    elif isinstance(scores, Tensor):
        score_t, scores = scores, scores.data
    scores = np.atleast_2d(scores)
    plan = plan_reduction(x, scores, k, cfg.k_prime)
    if _is_identity(x, plan):
        return x
    if cfg.mode == "weighted" and score_t is None:
        score_t = Tensor(scores)
    return apply_reduction(x, plan, cfg.mode, score_t)


def pool_all_sublayer(x: EncodedSequence, units: int) -> EncodedSequence:
    """Average-pool every non-CLS token into ``units`` contiguous chunks."""
    B, n = x.mask.shape
    u = min(units, n - 1)
    if u == n - 1 and x.mask.all():
        return x
    member = np.zeros((B, u, n), dtype=bool)
    member[:, :, 0] = True
    out_mask = np.zeros((B, 1 + u), dtype=bool)
    out_mask[:, 0] = True
    out_pos = np.zeros((B, 1 + u))
    for b in range(B):
        real = _order_by_position(np.flatnonzero(x.mask[b, 1:]) + 1, x.positions[b])
        for j, chunk in enumerate(chunk_assignment(len(real), u)):
            member[b, j, 0] = False
            member[b, j, real[chunk]] = True
            out_mask[b, 1 + j] = True
            out_pos[b, 1 + j] = x.positions[b, real[chunk]].mean()
    select = np.zeros((B, 1, n))
    select[:, 0, 0] = 1.0
    return apply_reduction(x, Reduction(select, member, out_mask, out_pos), "average")


def apply_retention(x: EncodedSequence, scores, r: Tensor) -> EncodedSequence:
    """Scale each non-CLS token by ``r[rank]``, rank 0 being the most informative."""
    scores = np.atleast_2d(getattr(scores, "scores", scores))
    B, n = x.mask.shape
    if r.shape[0] < n - 1:
        raise ScheduleError(f"retention vector of length {r.shape[0]} for {n - 1} tokens")
    ranks = np.empty((B, n - 1), dtype=np.int64)
    for b in range(B):
        ranks[b, rank_order(scores[b], x.mask[b, 1:])] = np.arange(n - 1)
    scale = concat([Tensor(np.ones((B, 1))), take_rows(r, ranks)], axis=1)
    return EncodedSequence(x.hidden * scale.reshape(B, n, 1), x.positions, x.mask)


def derive_schedule(retention: RetentionParams, k_prime: int = 0,
                    mode: str = "average") -> LengthSchedule:
    """k_l = ceil(sum of layer l's retention), made non-increasing, clamped to [1, n]."""
    ks, prev = [], None
    for r in retention.layers:
        k = math.ceil(float(r.data.sum()))
        if prev is not None:
            k = min(k, prev)
        prev = k
        ks.append(k)
    ks = [min(max(k, 1), len(r.data)) for k, r in zip(ks, retention.layers)]
    return LengthSchedule(ks, k_prime, mode)


# --- whole-encoder forwards ------------------------------------------------

@dataclass
class ForwardTrace:
    logits: Tensor
    final: EncodedSequence
    lengths: list[int] = field(default_factory=list)
    scores: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)


def run_encoder(model: EncoderModel, token_ids, *, schedule: LengthSchedule | None = None,
                retention: RetentionParams | None = None, pool_units: list[int] | None = None,
                collect: bool = False) -> ForwardTrace:
    """Encoder forward with at most one length-control mechanism active.

    ``schedule`` runs the hard hybrid sub-layer, ``retention`` the stage-2
    soft scaling (full length), ``pool_units`` the pool-everything ablation.
    With none of them this is the standard encoder.
    """
    if sum(v is not None for v in (schedule, retention, pool_units)) > 1:
        raise ValueError("choose one of schedule, retention, pool_units")
    L = model.config.num_layers
    for plan in (schedule.k if schedule else None, retention.layers if retention else None,
                 pool_units):
        if plan is not None and len(plan) != L:
            raise ScheduleError(f"plan has {len(plan)} layers, model has {L}")
    cfg = schedule.config if schedule else None
    seq = embed(model, token_ids)
    trace = ForwardTrace(None, seq)
    for l, w in enumerate(model.layers):
        seq, maps = attention_block(seq, w, model.config.num_heads)
        scores = None
        if collect or retention is not None:
            scores = score_tokens(maps, seq.mask, layer=l + 1, check=False).scores
            if collect:
                trace.scores.append(scores)
                trace.masks.append(seq.mask[:, 1:].copy())
        if retention is not None:
            seq = apply_retention(seq, scores, retention.layers[l])
        elif schedule is not None:
            seq = fca_hybrid_sublayer(seq, maps, schedule.k[l], cfg)
        elif pool_units is not None:
            seq = pool_all_sublayer(seq, pool_units[l])
        seq = ffn_block(seq, w)
        trace.lengths.append(seq.length)
    trace.final = seq
    trace.logits = classify(seq, model)
    return trace


def fca_encoder_forward(token_ids, model: EncoderModel, schedule: LengthSchedule,
                        cfg: FcaConfig | None = None) -> Tensor:
    if cfg is not None:
        schedule = LengthSchedule(schedule.k, cfg.k_prime, cfg.mode)
    return run_encoder(model, token_ids, schedule=schedule).logits


# --- token-level variant: shorten K and V, keep every query ----------------

def fca_attention_kv(x: EncodedSequence, w, num_heads: int, maps_prev, k: int,
                     cfg: FcaConfig, scores=None) -> tuple[EncodedSequence, Tensor, Reduction]:
    """Attention with full-length queries over hybrid-shortened keys/values.

    Returns the attention output (same length as ``x``), the ``[B, h, n,
    1+k+u]`` maps and the reduction plan used for K/V.
    """
    if scores is None:
        scores = score_tokens(maps_prev, x.mask, check=False).scores
    scores = np.atleast_2d(scores)
    plan = plan_reduction(x, scores, k, cfg.k_prime)
    kv = x if _is_identity(x, plan) else apply_reduction(
        x, plan, cfg.mode, Tensor(scores) if cfg.mode == "weighted" else None)
    out, maps = attend(x.hidden, kv.hidden, w, num_heads, kv.mask)
    return EncodedSequence(out, x.positions, x.mask), maps, plan


def _expand_unit_scores(maps: Tensor, plan: Reduction, mask: np.ndarray) -> np.ndarray:
    """Per-token informativeness from rectangular (token x unit) maps.

    A unit's score is the mass real queries draw from it (a fine token's own
    query excluded); pooled tokens share their unit's score equally.
    """
    a = maps.data
    own = np.concatenate([plan.select, np.zeros(plan.member.shape)], axis=1)  # [B, units, n]
    weights = mask[:, :, None] * (1.0 - own.transpose(0, 2, 1))
    unit_mass = np.einsum("bhiu,biu->bu", a, weights) / a.shape[1]
    member = np.concatenate([plan.select, plan.member / np.maximum(
        plan.member.sum(axis=2, keepdims=True), 1)], axis=1)
    member[:, 0, :] = 0.0
    token = np.einsum("bu,bun->bn", unit_mass, member)
    return np.where(mask[:, 1:], token[:, 1:], 0.0)


def fca_kv_encode(model: EncoderModel, token_ids, schedule: LengthSchedule) -> EncodedSequence:
    """Token-level encoder: every layer keeps all positions; K/V use the hybrid form.

    The first layer attends over the full sequence; layer l+1 ranks tokens
    with the scores read off layer l's maps.
    """
    cfg = schedule.config
    seq = embed(model, token_ids)
    scores = None
    for l, w in enumerate(model.layers):
        if scores is None:
            out, maps = attend(seq.hidden, seq.hidden, w, model.config.num_heads, seq.mask)
            next_scores = score_tokens(maps, seq.mask, check=False).scores
        else:
            out_seq, maps, plan = fca_attention_kv(seq, w, model.config.num_heads, None,
                                                   schedule.k[l], cfg, scores=scores)
            out = out_seq.hidden
            next_scores = _expand_unit_scores(maps, plan, seq.mask)
        h = EncodedSequence(layer_norm(seq.hidden + out, w.ln1_gain, w.ln1_bias),
                            seq.positions, seq.mask)
        seq = ffn_block(h, w)
        scores = next_scores
    return seq


class FrozenEncoder:
    """Inference wrapper: a model plus its (optional) length control."""

    def __init__(self, model: EncoderModel, schedule: LengthSchedule | None = None,
                 pool_units: list[int] | None = None):
        self.model = model
        self.schedule = schedule
        self.pool_units = pool_units

    def trace(self, token_ids, collect: bool = False) -> ForwardTrace:
        return run_encoder(self.model, token_ids, schedule=self.schedule,
                           pool_units=self.pool_units, collect=collect)

    def logits(self, token_ids) -> np.ndarray:
        return self.trace(token_ids).logits.data

    def cls_states(self, token_ids) -> np.ndarray:
        return self.trace(token_ids).final.hidden.data[:, 0, :]
