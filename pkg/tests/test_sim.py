"""Serving simulator: conservation laws, FIFO admission, metric divergence."""

import csv
import json

import numpy as np
import pytest

from kvrot.cache import BF16, INT4
from kvrot.errors import ConfigError, RequestTooLargeError
from kvrot.sim import (
    CostModel,
    RequestRecord,
    ServingTrace,
    WorkloadSpec,
    default_cost_model,
    metric_divergence,
    simulate,
    summarize,
    tps_req,
    tps_sys,
    ttft,
    write_summary_json,
    write_trace_csv,
)

BUDGET_4MIB = 4 << 20


def _workload(**kw):
    defaults = dict(concurrency=8, input_len_mean=256, output_len=64, num_requests=24, seed=0)
    defaults.update(kw)
    return WorkloadSpec(**defaults)


def test_tps_from_constructed_trace():
    # 100 tokens across a 5 second span pin the system rate at 20
    trace = ServingTrace(precision=INT4, concurrency=1, capacity=1000)
    trace.rows.append(RequestRecord(request_id=0, submit=0.0, first_token=1.0, end=5.0, out_tokens=100))
    assert tps_sys(trace) == 20.0
    assert tps_req(trace) == 25.0  # decode span is 4 seconds
    waits, mean = ttft(trace)
    assert waits.tolist() == [1.0] and mean == 1.0

    empty = ServingTrace(precision=INT4, concurrency=1, capacity=1000)
    assert tps_sys(empty) == 0.0 and tps_req(empty) == 0.0


def test_simulation_conserves_requests_and_tokens():
    wl = _workload()
    trace = simulate(wl, INT4, BUDGET_4MIB)
    assert len(trace.rows) == wl.num_requests
    assert [r.request_id for r in trace.rows] == list(range(wl.num_requests))
    assert all(r.out_tokens == wl.output_len for r in trace.rows)
    assert all(r.submit <= r.first_token < r.end for r in trace.rows)


def test_recomputed_system_throughput_matches():
    wl = _workload()
    trace = simulate(wl, BF16, BUDGET_4MIB)
    span = max(r.end for r in trace.rows) - min(r.submit for r in trace.rows)
    total = sum(r.out_tokens for r in trace.rows)
    assert tps_sys(trace) == pytest.approx(total / span, rel=1e-12)
    s = summarize(trace)
    assert s["num_requests"] == wl.num_requests
    assert s["tps_sys"] == tps_sys(trace)
    assert s["capacity_tokens"] == trace.capacity


def test_fifo_order_and_sequential_prefill():
    wl = _workload(num_requests=32)
    trace = simulate(wl, INT4, BUDGET_4MIB)
    # strict FIFO: later ids never reach their first token earlier
    ft = [r.first_token for r in trace.rows]
    assert all(b >= a for a, b in zip(ft, ft[1:]))
    sub = [r.submit for r in trace.rows]
    assert all(b >= a for a, b in zip(sub, sub[1:]))


def test_reservations_never_exceed_capacity():
    wl = _workload(concurrency=16, num_requests=48)
    trace = simulate(wl, BF16, BUDGET_4MIB)
    lens = wl.input_lengths()
    # a request holds its full footprint at least over [first_token, end)
    events = sorted(r.first_token for r in trace.rows)
    for t in events:
        held = sum(
            int(lens[r.request_id]) + wl.output_len
            for r in trace.rows
            if r.first_token <= t < r.end
        )
        assert held <= trace.capacity


def test_single_client_waits_are_prefill_costs():
    wl = _workload(concurrency=1, num_requests=5)
    cost = default_cost_model()
    trace = simulate(wl, INT4, BUDGET_4MIB, cost=cost)
    lens = wl.input_lengths()
    waits, _ = ttft(trace)
    expected = [cost.prefill_cost(int(lens[r.request_id])) for r in trace.rows]
    np.testing.assert_allclose(waits, expected, rtol=1e-12)


def test_decode_run_cost_closed_form():
    cost = default_cost_model()
    for steps, batch, cached in ((1, 1, 0), (7, 3, 100), (64, 16, 5000)):
        looped = sum(
            cost.decode_step_cost(batch, cached + i * batch) for i in range(steps)
        )
        assert cost.decode_run_cost(steps, batch, cached) == pytest.approx(looped, rel=1e-12)


def test_simulation_is_deterministic():
    wl = _workload()
    a = simulate(wl, INT4, BUDGET_4MIB)
    b = simulate(wl, INT4, BUDGET_4MIB)
    assert a.rows == b.rows
    assert a.capacity == b.capacity


def test_int4_capacity_is_4x():
    wl = _workload()
    assert simulate(wl, INT4, BUDGET_4MIB).capacity == 4 * simulate(wl, BF16, BUDGET_4MIB).capacity


def test_throughput_divergence_smoke():
    # INT4 admits more concurrent work from the same budget: system tokens
    # per second rise while each request's own decode rate falls
    wl = _workload(concurrency=16, num_requests=64)
    int4_s = summarize(simulate(wl, INT4, BUDGET_4MIB))
    bf16_s = summarize(simulate(wl, BF16, BUDGET_4MIB))
    assert int4_s["tps_sys"] > bf16_s["tps_sys"]
    assert bf16_s["tps_req"] > int4_s["tps_req"]
    assert metric_divergence(int4_s, bf16_s)


def test_metric_divergence_truth_table():
    def s(sys_, req):
        return {"tps_sys": sys_, "tps_req": req}

    assert metric_divergence(s(10, 1), s(5, 2))
    assert not metric_divergence(s(4, 1), s(5, 2))
    assert not metric_divergence(s(10, 3), s(5, 2))
    assert not metric_divergence(s(4, 3), s(5, 2))


def test_request_too_large():
    wl = _workload(input_len_mean=10**6)
    with pytest.raises(RequestTooLargeError):
        simulate(wl, BF16, BUDGET_4MIB)


def test_workload_and_cost_validation():
    with pytest.raises(ConfigError):
        WorkloadSpec(concurrency=0, input_len_mean=10, output_len=5, num_requests=1)
    with pytest.raises(ConfigError):
        WorkloadSpec(concurrency=1, input_len_mean=10, output_len=0, num_requests=1)
    with pytest.raises(ConfigError):
        CostModel(prefill_base=-1.0)
    with pytest.raises(ConfigError):
        CostModel(decode_base=0.0, decode_per_seq=0.0)


def test_input_lengths_deterministic_and_bounded():
    wl = _workload(input_len_mean=200, num_requests=500)
    lens = wl.input_lengths()
    np.testing.assert_array_equal(lens, wl.input_lengths())
    assert lens.min() >= 100 and lens.max() <= 300
    other = _workload(input_len_mean=200, num_requests=500, seed=1).input_lengths()
    assert not np.array_equal(lens, other)


def test_unfused_rotation_surcharge_slows_everything():
    wl = _workload()
    fused = simulate(wl, INT4, BUDGET_4MIB)
    slow_cost = CostModel(unfused_rotation_cost=1e-4)
    unfused = simulate(wl, INT4, BUDGET_4MIB, cost=slow_cost)
    assert max(r.end for r in unfused.rows) > max(r.end for r in fused.rows)
    assert tps_sys(unfused) < tps_sys(fused)


def test_trace_csv_round_trip(tmp_path):
    trace = simulate(_workload(num_requests=6), INT4, BUDGET_4MIB)
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["request_id", "submit", "first_token", "end", "out_tokens"]
    assert len(rows) == 7
    for parsed, r in zip(rows[1:], trace.rows):
        assert int(parsed[0]) == r.request_id
        assert float(parsed[1]) == r.submit
        assert float(parsed[3]) == r.end


def test_summary_json_schema(tmp_path):
    s = summarize(simulate(_workload(num_requests=4), BF16, BUDGET_4MIB))
    path = tmp_path / "summary.json"
    write_summary_json([s], path)
    payload = json.loads(path.read_text())
    assert payload["schema_version"] == 1
    assert payload["rows"][0]["precision"] == BF16
