"""Discrete-event serving simulator over the paged-cache capacity model.

Closed-loop workload: a fixed client count, each client holding exactly one
outstanding request and resubmitting on completion. Admission is FIFO with
full reservation (input + output tokens claimed up front, no eviction, no
skip-ahead). Admitted requests prefill sequentially, then decode in lockstep
batch steps of one token per active request. Decode stretches between
completions are advanced in closed form, so runtime scales with completions,
not tokens.

Precision enters only through token capacity: INT4 pages hold 4x the tokens
of BF16 for the same byte budget. Step costs are precision-agnostic in token
counts, which is exactly what makes the two throughput metrics diverge: more
admitted requests raise system throughput while each request's own decode
steps get slower.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cache import capacity_tokens
from .errors import ConfigError, RequestTooLargeError
from .layout import HeadLayout


@dataclass(frozen=True)
class WorkloadSpec:
    """Closed-loop workload: concurrency clients, num_requests total.

    Input lengths are uniform integers in [mean/2, 3*mean/2]; output length
    is fixed per workload (long-context summarization shape).
    """

    concurrency: int
    input_len_mean: int
    output_len: int
    num_requests: int
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.concurrency, self.input_len_mean, self.output_len, self.num_requests) < 1:
            raise ConfigError("workload fields must be positive")

    def input_lengths(self) -> np.ndarray:
        """Per-request input lengths, drawn once for the whole run."""
        rng = np.random.Generator(
            np.random.Philox(key=np.array([self.seed & (2**64 - 1), 11], dtype=np.uint64))
        )
        lo = self.input_len_mean // 2
        hi = (3 * self.input_len_mean) // 2
        return rng.integers(lo, hi + 1, size=self.num_requests)


@dataclass(frozen=True)
class CostModel:
    """Engine step costs in seconds.

    decode_step_cost is affine in batch size and total cached tokens, the
    usual flat-overhead + per-sequence + memory-bandwidth split. The
    unfused_rotation_cost surcharge models a non-fused append path writing
    rotated intermediates through memory (per token, prefill and decode).
    """

    prefill_base: float = 5e-3
    prefill_per_token: float = 6e-5
    decode_base: float = 2e-2
    decode_per_seq: float = 5e-5
    decode_per_cached_token: float = 3e-8
    unfused_rotation_cost: float = 0.0

    def __post_init__(self) -> None:
        if min(
            self.prefill_base,
            self.prefill_per_token,
            self.decode_base,
            self.decode_per_seq,
            self.decode_per_cached_token,
            self.unfused_rotation_cost,
        ) < 0:
            raise ConfigError("cost coefficients must be >= 0")
        if self.decode_base <= 0 and self.decode_per_seq <= 0:
            raise ConfigError("decode step cost must be positive")

    def prefill_cost(self, tokens: int) -> float:
        return self.prefill_base + tokens * (self.prefill_per_token + self.unfused_rotation_cost)

    def decode_step_cost(self, batch: int, cached_tokens: int) -> float:
        return (
            self.decode_base
            + batch * (self.decode_per_seq + self.unfused_rotation_cost)
            + cached_tokens * self.decode_per_cached_token
        )

    def decode_run_cost(self, steps: int, batch: int, cached_tokens: int) -> float:
        """Cost of `steps` lockstep steps; the cache grows by batch per step."""
        return steps * (self.decode_base + batch * (self.decode_per_seq + self.unfused_rotation_cost)) + (
            self.decode_per_cached_token
            * (steps * cached_tokens + batch * steps * (steps - 1) // 2)
        )


def default_cost_model() -> CostModel:
    return CostModel()


@dataclass(frozen=True)
class RequestRecord:
    request_id: int
    submit: float
    first_token: float
    end: float
    out_tokens: int


@dataclass
class ServingTrace:
    precision: str
    concurrency: int
    capacity: int
    rows: list[RequestRecord] = field(default_factory=list)


@dataclass
class _Active:
    request_id: int
    input_len: int
    generated: int = 0


def simulate(
    workload: WorkloadSpec,
    precision: str,
    pool_budget_bytes: int,
    cost: Optional[CostModel] = None,
    layout: Optional[HeadLayout] = None,
) -> ServingTrace:
    """Run one closed-loop serving benchmark and return its trace.

    Raises:
        RequestTooLargeError: some request's full reservation exceeds even an
            empty pool, so it could never be admitted.
    """
    cost = cost or default_cost_model()
    layout = layout or HeadLayout(num_q_heads=8, num_kv_heads=8, head_dim=128, rot_order=128)
    capacity = capacity_tokens(pool_budget_bytes, layout, precision)
    input_lens = workload.input_lengths()
    worst = int(input_lens.max()) + workload.output_len
    if worst > capacity:
        raise RequestTooLargeError(
            f"request footprint {worst} tokens exceeds pool capacity {capacity}"
        )

    trace = ServingTrace(precision=precision, concurrency=workload.concurrency, capacity=capacity)
    now = 0.0
    free = capacity
    next_request = 0
    pending: list[tuple[float, int]] = []  # (submit, request_id), FIFO
    active: list[_Active] = []
    first_token: dict[int, float] = {}
    submit_time: dict[int, float] = {}
    completed = 0

    # every client fires its first request at t=0, in client order
    for _ in range(min(workload.concurrency, workload.num_requests)):
        submit_time[next_request] = 0.0
        pending.append((0.0, next_request))
        next_request += 1

    def admit() -> None:
        nonlocal now, free
        while pending:
            _, rid = pending[0]
            footprint = int(input_lens[rid]) + workload.output_len
            if footprint > free:
                return  # head-of-line blocking: strict FIFO
            pending.pop(0)
            free -= footprint
            now += cost.prefill_cost(int(input_lens[rid]))
            first_token[rid] = now
            active.append(_Active(request_id=rid, input_len=int(input_lens[rid])))

    admit()
    while completed < workload.num_requests:
        if not active:
            raise RuntimeError("simulator stalled with pending work")  # unreachable by construction
        batch = len(active)
        cached = sum(a.input_len + a.generated for a in active)
        steps = min(workload.output_len - a.generated for a in active)
        now += cost.decode_run_cost(steps, batch, cached)
        for a in active:
            a.generated += steps
        done = [a for a in active if a.generated >= workload.output_len]
        active = [a for a in active if a.generated < workload.output_len]
        for a in sorted(done, key=lambda a: a.request_id):
            free += a.input_len + workload.output_len
            trace.rows.append(
                RequestRecord(
                    request_id=a.request_id,
                    submit=submit_time[a.request_id],
                    first_token=first_token[a.request_id],
                    end=now,
                    out_tokens=workload.output_len,
                )
            )
            completed += 1
            if next_request < workload.num_requests:
                submit_time[next_request] = now
                pending.append((now, next_request))
                next_request += 1
        admit()

    trace.rows.sort(key=lambda r: r.request_id)
    return trace


# -- metrics ------------------------------------------------------------------


def tps_sys(trace: ServingTrace) -> float:
    """Total output tokens over benchmark wall-clock span."""
    if not trace.rows:
        return 0.0
    span = max(r.end for r in trace.rows) - min(r.submit for r in trace.rows)
    return sum(r.out_tokens for r in trace.rows) / span


def tps_req(trace: ServingTrace) -> float:
    """Mean per-request decode-phase token rate (time before first token excluded)."""
    if not trace.rows:
        return 0.0
    return sum(r.out_tokens / (r.end - r.first_token) for r in trace.rows) / len(trace.rows)


def ttft(trace: ServingTrace) -> tuple[np.ndarray, float]:
    """Per-request time to first token and its mean."""
    waits = np.array([r.first_token - r.submit for r in trace.rows], dtype=np.float64)
    if not trace.rows:
        return waits, math.nan
    return waits, float(waits.mean())


def summarize(trace: ServingTrace) -> dict:
    _, ttft_mean = ttft(trace)
    return {
        "precision": trace.precision,
        "concurrency": trace.concurrency,
        "capacity_tokens": trace.capacity,
        "num_requests": len(trace.rows),
        "tps_sys": tps_sys(trace),
        "tps_req": tps_req(trace),
        "ttft_mean": ttft_mean,
        "makespan": max(r.end for r in trace.rows) if trace.rows else 0.0,
    }


def metric_divergence(int4_summary: dict, bf16_summary: dict) -> bool:
    """True when the capacity gain inverts the two throughput readings."""
    return (
        int4_summary["tps_sys"] > bf16_summary["tps_sys"]
        and bf16_summary["tps_req"] > int4_summary["tps_req"]
    )


def write_trace_csv(trace: ServingTrace, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["request_id", "submit", "first_token", "end", "out_tokens"])
        for r in trace.rows:
            w.writerow([r.request_id, repr(r.submit), repr(r.first_token), repr(r.end), r.out_tokens])


def write_summary_json(summaries: list[dict], path: str) -> None:
    with open(path, "w") as f:
        json.dump({"schema_version": 1, "rows": summaries}, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
