import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_ids, tiny_config
from fcakit import analysis
from fcakit.analysis import (TradeoffPoint, cls_distance, count_flops, emit_tradeoff_csv,
                             layer_lengths, parse_tradeoff_csv, pool_units_for, prune_schedule,
                             schedule_token_total, tradeoff_sweep, write_flops_csv)
from fcakit.data import Dataset
from fcakit.encoder import EncoderConfig, EncoderModel, forward
from fcakit.fca import FcaConfig, FrozenEncoder, LengthSchedule, ScheduleError, run_encoder
from fcakit.pipeline import TrainConfig

QQP = [85, 78, 73, 69, 61, 57, 54, 52, 46, 41, 35, 35]


def test_flops_by_hand():
    cfg = EncoderConfig(num_layers=1, num_heads=1, d_hidden=4, d_ff=8, vocab_size=10, max_len=2)
    layer = count_flops(cfg).layers[0]
    # n=2, d=4, f=8
    assert layer["qkv_projection"] == 3 * 2 * (2 * 4 * 4)
    assert layer["attention_scores"] == 2 * (2 * 2 * 4)
    assert layer["attention_values"] == 2 * (2 * 2 * 4)
    assert layer["output_projection"] == 2 * (2 * 4 * 4)
    assert layer["ffn"] == 2 * (2 * 4 * 8) + 2 * (2 * 8 * 4)
    assert layer["elementwise"] == 5 * (1 * 2 * 2 + 2 * 4 + 2 * 4 + 2 * 8)
    assert count_flops(cfg).total == 756


def test_layer_lengths_example():
    s = LengthSchedule([5, 3], 2)
    assert layer_lengths(2, 10, s) == [(10, 8), (8, 6)]
    with pytest.raises(ScheduleError):
        layer_lengths(2, 10, LengthSchedule([12, 3], 2))
    with pytest.raises(ScheduleError):
        layer_lengths(3, 10, s)


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 40), st.integers(0, 5), st.data())
def test_flops_strictly_increase_with_k(n, kp, data):
    k = data.draw(st.integers(1, n - 2))
    if k + 1 + kp >= n - 1:
        return
    cfg = EncoderConfig(num_layers=2, num_heads=2, d_hidden=8, d_ff=16, vocab_size=10, max_len=n)
    lo = count_flops(cfg, LengthSchedule([k, 1], kp)).total
    hi = count_flops(cfg, LengthSchedule([k + 1, 1], kp)).total
    assert hi > lo


@pytest.mark.parametrize("kp", [0, 1, 4, 30])
def test_flops_full_length_ignores_k_prime(kp):
    cfg = EncoderConfig(num_layers=3, num_heads=2, d_hidden=8, d_ff=16, vocab_size=10, max_len=16)
    full = count_flops(cfg).total
    assert count_flops(cfg, LengthSchedule([15, 15, 15], kp)).total == full


def test_flops_csv(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "f.csv"
    report = count_flops(cfg)
    write_flops_csv(report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,component,flops"
    assert len(lines) == 1 + 6 * cfg.num_layers
    assert sum(int(l.split(",")[2]) for l in lines[1:]) == report.total


def test_token_totals():
    assert schedule_token_total(QQP) == 686
    assert schedule_token_total(LengthSchedule([128] * 12, 0)) == 1536
    assert schedule_token_total([0] * 12) == 0


@settings(max_examples=50)
@given(st.lists(st.integers(0, 200), min_size=1, max_size=12), st.data())
def test_token_total_linear(a, data):
    b = data.draw(st.lists(st.integers(0, 200), min_size=len(a), max_size=len(a)))
    assert schedule_token_total([x + y for x, y in zip(a, b)]) == \
        schedule_token_total(a) + schedule_token_total(b)


def test_qqp_speedup_in_range():
    cfg = EncoderConfig(num_layers=12, num_heads=12, d_hidden=768, d_ff=3072, max_len=128)
    s = count_flops(cfg, LengthSchedule(QQP, 2)).speedup(count_flops(cfg))
    assert 1.9 <= s <= 2.5


# --- distance ---

def test_distance_self_is_zero(tiny_model, rng):
    assert cls_distance(tiny_model, tiny_model, random_ids(rng, 5, 8, 20)) == 0.0


def test_distance_offset(tiny_model, rng):
    ids = random_ids(rng, 6, 8, 20)
    a = FrozenEncoder(tiny_model)

    class Shifted:
        def cls_states(self, x):
            return a.cls_states(x) + delta

    delta = np.array([3.0, -4.0] + [0.0] * 6)
    assert abs(cls_distance(a, Shifted(), ids) - 6 * 5.0) < 1e-9


def test_distance_loop_oracle_and_metric(rng):
    cfg = tiny_config()
    m = [EncoderModel.init(cfg, seed=s, std=0.5) for s in range(3)]
    ids = random_ids(rng, 7, 8, 20)
    ref = 0.0
    for row in ids:
        ca = run_encoder(m[0], row[None]).final.hidden.data[0, 0]
        cb = run_encoder(m[1], row[None]).final.hidden.data[0, 0]
        ref += math.sqrt(sum((x - y) ** 2 for x, y in zip(ca, cb)))
    d01 = cls_distance(m[0], m[1], ids, batch_size=3)
    assert abs(d01 - ref) < 1e-9
    assert d01 == pytest.approx(cls_distance(m[1], m[0], ids), abs=1e-12)
    assert d01 <= cls_distance(m[0], m[2], ids) + cls_distance(m[2], m[1], ids) + 1e-12


def test_distance_width_mismatch(rng):
    a = EncoderModel.init(tiny_config(), seed=0)
    b = EncoderModel.init(tiny_config(d_hidden=12, num_heads=2), seed=0)
    with pytest.raises(ValueError, match="width"):
        cls_distance(a, b, random_ids(rng, 2, 8, 20))
    with pytest.raises(ValueError):
        cls_distance(a, a, np.zeros((0, 8), dtype=int))


# --- baselines ---

def test_prune_schedule_drops_coarse():
    s = prune_schedule(LengthSchedule([5, 3], 2, "weighted"))
    assert s.k == [5, 3] and s.k_prime == 0
    assert pool_units_for(LengthSchedule([5, 3], 2)) == [7, 5]


def test_prune_equals_fca_without_coarse(tiny_model, rng):
    ids = random_ids(rng, 4, 8, 20)
    sched = LengthSchedule([4, 2], 3)
    a = run_encoder(tiny_model, ids, schedule=prune_schedule(sched)).logits.data
    b = run_encoder(tiny_model, ids, schedule=LengthSchedule([4, 2], 0)).logits.data
    assert np.array_equal(a, b)


def test_pool_all_full_length_is_standard(tiny_model, rng):
    ids = random_ids(rng, 3, 8, 20, pad_tail=False)
    pooled = run_encoder(tiny_model, ids, pool_units=[7, 7]).logits.data
    assert np.max(np.abs(pooled - forward(tiny_model, ids).data)) < 1e-12


def test_pool_all_lengths(tiny_model, rng):
    ids = random_ids(rng, 3, 8, 20, pad_tail=False)
    assert run_encoder(tiny_model, ids, pool_units=[4, 2]).lengths == [5, 3]


# --- sweep ---

def _toy_data():
    r = np.random.default_rng(0)
    labels = r.integers(0, 2, size=16)
    ids = r.integers(6, 20, size=(16, 8))
    ids[:, 0] = 0
    ids[:, 1] = 4 + labels
    return Dataset(ids, labels)


def test_sweep_needs_two_lambdas():
    with pytest.raises(ValueError):
        tradeoff_sweep([0.1], tiny_config(), _toy_data(), _toy_data(), TrainConfig(), FcaConfig())


def test_sweep_records_failure(monkeypatch):
    real = analysis.run_pipeline

    def flaky(model, train, cfg, fca, **kw):
        if cfg.lam > 1:
            raise FloatingPointError("loss became nan")
        return real(model, train, cfg, fca, **kw)

    monkeypatch.setattr(analysis, "run_pipeline", flaky)
    cfg = tiny_config(num_classes=2)
    data = _toy_data()
    points = tradeoff_sweep([0.01, 5.0], cfg, data, data, TrainConfig(epochs=[1, 1, 1], batch_size=8),
                            FcaConfig("average", 1))
    assert len(points) == 2
    assert points[0].error == "" and points[0].flops > 0 and len(points[0].schedule) == 2
    assert math.isnan(points[1].metric) and "nan" in points[1].error
    back = parse_tradeoff_csv(emit_tradeoff_csv(points))
    assert back[0] == points[0]
    assert back[1].error == points[1].error and math.isnan(back[1].metric)


def test_tradeoff_csv_round_trip():
    pts = [TradeoffPoint(0.001, 1234, 0.875, [5, 4, 4]), TradeoffPoint(0.1, 99, 0.5, [1], "x")]
    text = emit_tradeoff_csv(pts)
    assert text.splitlines()[0] == "lambda,flops,metric,schedule,error"
    assert parse_tradeoff_csv(text) == pts


def test_sweep_flops_non_increasing_in_lambda():
    r = np.random.default_rng(3)
    labels = r.integers(0, 2, size=32)
    ids = r.integers(6, 20, size=(32, 12))
    ids[:, 0] = 0
    ids[:, 1] = 4 + labels
    data = Dataset(ids, labels)
    cfg = tiny_config(num_classes=2, max_len=12)
    tc = TrainConfig(epochs=[1, 2, 1], batch_size=8, lr_retention=0.05)
    points = tradeoff_sweep([0.0, 0.05, 1.0], cfg, data, data, tc, FcaConfig("average", 1),
                            seeds=(0, 1, 2))
    flops = [p.flops for p in points]
    assert all(b <= a for a, b in zip(flops, flops[1:])), flops
    assert flops[-1] < flops[0]
