"""Command-line surface: calibrate, bench-quant, bench-attn, serve-sim, selftest.

Every run is reproducible from config + seed alone: all randomness is
Philox-keyed, all emitted files use canonical formatting, and nothing
timestamps its output except the timing benchmark (whose numbers are
wall-clock by nature). Config is JSON with a schema_version field; unknown
keys anywhere in the tree are rejected. Precedence: flag > file > env/default.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from typing import Optional

import numpy as np

from . import __version__
from ._kernels import available_backends, get_backend
from .artifact import CalibrationArtifact, load_artifact, save_artifact
from .attention import DecodeRequest, decode_step, decode_step_fp
from .cache import BF16, INT4, PageTable, capacity_tokens
from .errors import (
    CapacityExceededError,
    ConfigError,
    EmptyCalibrationError,
    EmptySequenceError,
    InvalidOrderError,
    KvrotError,
    NibbleRangeError,
    NonFiniteInputError,
    RequestTooLargeError,
    SequenceNotFoundError,
    ShapeError,
    TooFewSamplesError,
)
from .hadamard import block_hadamard_matrix
from .harness import (
    ErrorReport,
    SyntheticSpec,
    default_correlated_spec,
    default_layout,
    default_methods,
    default_outlier_spec,
    emit_report,
    generate_kv,
    method_from_name,
    run_profile,
)
from .jacobi import jacobi_eigh
from .layout import HeadLayout
from .rotation import (
    RotationSpec,
    SecondMoment,
    accumulate_queries,
    apply_block_rotation,
    learn_rotation,
    make_signs,
)
from .sim import (
    CostModel,
    WorkloadSpec,
    metric_divergence,
    simulate,
    summarize,
    write_summary_json,
    write_trace_csv,
)
from .vq import CodebookKind, fit_codebook

OUTPUT_DIR_ENV = "KVROT_OUTPUT_DIR"
SCHEMA_VERSION = 1

# every library error maps to its own exit code; 70 is the unexpected-crash bucket
_EXIT_CODES: tuple[tuple[type, int], ...] = (
    (ConfigError, 2),
    (NonFiniteInputError, 3),
    (ShapeError, 4),
    (InvalidOrderError, 5),
    (NibbleRangeError, 6),
    (TooFewSamplesError, 7),
    (EmptyCalibrationError, 8),
    (CapacityExceededError, 9),
    (SequenceNotFoundError, 10),
    (EmptySequenceError, 11),
    (RequestTooLargeError, 12),
)
EXIT_SELFTEST_FAILED = 13
EXIT_UNEXPECTED = 70


# -- config -------------------------------------------------------------------

_ALLOWED_KEYS = {
    "": {"schema_version", "layout", "seed", "output_dir", "calibrate", "bench_quant",
         "serve_sim", "bench_attn"},
    "layout": {"num_q_heads", "num_kv_heads", "head_dim", "rot_order", "page_tokens"},
    "calibrate": {"samples_file", "tokens", "queries", "layers", "alpha", "hessian",
                  "codebook_size"},
    "bench_quant": {"methods", "seeds", "num_seeds", "profile", "tokens", "queries",
                    "format"},
    "serve_sim": {"precisions", "concurrency", "input_len_mean", "output_len",
                  "num_requests", "pool_budget_bytes", "cost"},
    "serve_sim.cost": {"prefill_base", "prefill_per_token", "decode_base",
                       "decode_per_seq", "decode_per_cached_token",
                       "unfused_rotation_cost"},
    "bench_attn": {"rows", "iters", "tokens"},
}


def _check_keys(obj: dict, section: str) -> None:
    allowed = _ALLOWED_KEYS[section]
    for key in obj:
        if key not in allowed:
            where = section or "top level"
            raise ConfigError(f"unknown config key {key!r} in {where}")


def load_config(path: str) -> dict:
    """Parse and strictly validate a config file's key structure."""
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version must be {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}"
        )
    _check_keys(cfg, "")
    for section in ("layout", "calibrate", "bench_quant", "serve_sim", "bench_attn"):
        sub = cfg.get(section)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        _check_keys(sub, section)
    cost = (cfg.get("serve_sim") or {}).get("cost")
    if cost is not None:
        if not isinstance(cost, dict):
            raise ConfigError("serve_sim.cost must be an object")
        _check_keys(cost, "serve_sim.cost")
    return cfg


def _layout_from_config(cfg: dict) -> HeadLayout:
    lay = cfg.get("layout")
    if lay is None:
        return default_layout()
    base = default_layout()
    try:
        return HeadLayout(
            num_q_heads=lay.get("num_q_heads", base.num_q_heads),
            num_kv_heads=lay.get("num_kv_heads", base.num_kv_heads),
            head_dim=lay.get("head_dim", base.head_dim),
            rot_order=lay.get("rot_order", base.rot_order),
            page_tokens=lay.get("page_tokens", base.page_tokens),
        )
    except (InvalidOrderError, ShapeError, ConfigError):
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad layout config: {e}") from e


class _Run:
    """Resolved common settings: flag > config file > env/default."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.cfg = load_config(args.config) if args.config else {}
        self.layout = _layout_from_config(self.cfg)
        self.seed = args.seed if args.seed is not None else int(self.cfg.get("seed", 0))
        out = args.output_dir or self.cfg.get("output_dir") or os.environ.get(OUTPUT_DIR_ENV) or "."
        self.output_dir = out
        os.makedirs(out, exist_ok=True)

    def section(self, name: str) -> dict:
        return self.cfg.get(name) or {}

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)


# -- calibrate ----------------------------------------------------------------


def _calibration_rows(run: _Run, sec: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Calibration (keys, values, queries) from file or synthetic generator."""
    samples_file = sec.get("samples_file")
    if samples_file:
        try:
            data = np.load(samples_file)
        except OSError as e:
            raise ConfigError(f"cannot read samples file: {e}") from e
        try:
            ks, vs, qs = (np.asarray(data[n], dtype=np.float64) for n in ("keys", "values", "queries"))
        except KeyError as e:
            raise ConfigError(f"samples file missing array {e}") from e
        if ks.size == 0 or qs.size == 0:
            raise EmptyCalibrationError("samples file contains no calibration rows")
        return ks, vs, qs
    tokens = sec.get("tokens", 256)
    queries = sec.get("queries", 64)
    if tokens == 0 or queries == 0:
        raise EmptyCalibrationError("calibration set is empty (tokens=0 or queries=0)")
    spec = SyntheticSpec(layout=run.layout, tokens=tokens, queries=queries)
    return generate_kv(spec, run.seed, stream=1)


def cmd_calibrate(args: argparse.Namespace) -> int:
    run = _Run(args)
    sec = run.section("calibrate")
    ks, vs, qs = _calibration_rows(run, sec)
    d = run.layout.head_dim
    layers = sec.get("layers", 1)
    alpha = sec.get("alpha", 0.01)
    hessian = sec.get("hessian", True)
    book_size = sec.get("codebook_size")

    rotations = {}
    for layer in range(layers):
        signs = make_signs(run.seed, layer, d, run.layout.rot_order)
        spec = RotationSpec(order=run.layout.rot_order, signs=signs)
        if hessian:
            rows = apply_block_rotation(qs.reshape(-1, d), run.layout, spec)
            acc = accumulate_queries(SecondMoment.empty(d), rows)
            spec = replace(spec, learned=learn_rotation(acc, alpha=alpha))
        rotations[layer] = spec

    codebooks = {}
    if book_size:
        base = rotations[0]
        rows_k = apply_block_rotation(ks.reshape(-1, d), run.layout, base)
        codebooks["key"] = fit_codebook(rows_k, book_size, run.seed, kind=CodebookKind.KEY)
        rows_v = vs.reshape(-1, d)
        codebooks["value"] = fit_codebook(rows_v, book_size, run.seed, kind=CodebookKind.VALUE)

    art = CalibrationArtifact(
        layout=run.layout, alpha=alpha, seed=run.seed, rotations=rotations, codebooks=codebooks
    )
    path = run.path("calibration.kvca")
    save_artifact(art, path)
    load_artifact(path)  # reject anything we could not read back
    print(f"wrote {path} ({layers} layer(s), {len(codebooks)} codebook(s))")
    return 0


# -- bench-quant ----------------------------------------------------------------


def cmd_bench_quant(args: argparse.Namespace) -> int:
    run = _Run(args)
    sec = run.section("bench_quant")
    if args.methods:
        names = [n.strip() for n in args.methods.split(",") if n.strip()]
    else:
        names = sec.get("methods") or [m.name for m in default_methods()]
    methods = [method_from_name(n) for n in names]
    seeds = sec.get("seeds")
    if seeds is None:
        num = args.num_seeds if args.num_seeds is not None else sec.get("num_seeds", 3)
        seeds = [run.seed + i for i in range(num)]
    profile_name = sec.get("profile", "outlier")
    if profile_name == "outlier":
        profile = default_outlier_spec(run.layout)
    elif profile_name == "correlated":
        profile = default_correlated_spec(run.layout)
    else:
        raise ConfigError(f"unknown profile {profile_name!r}")
    if "tokens" in sec or "queries" in sec:
        profile = replace(
            profile,
            tokens=sec.get("tokens", profile.tokens),
            queries=sec.get("queries", profile.queries),
        )

    report = ErrorReport()
    for seed in seeds:
        report.rows.extend(run_profile(methods, profile, seed).rows)

    fmt = args.format or sec.get("format", "csv")
    wrote = []
    if fmt in ("csv", "both"):
        path = run.path("bench_quant.csv")
        emit_report(report, path, fmt="csv")
        wrote.append(path)
    if fmt in ("json", "both"):
        path = run.path("bench_quant.json")
        emit_report(report, path, fmt="json")
        wrote.append(path)
    if not wrote:
        raise ConfigError(f"unknown report format {fmt!r}")
    for path in wrote:
        print(f"wrote {path} ({len(report.rows)} rows)")
    return 0


# -- serve-sim ------------------------------------------------------------------


def cmd_serve_sim(args: argparse.Namespace) -> int:
    run = _Run(args)
    sec = run.section("serve_sim")
    precisions = sec.get("precisions", [BF16, INT4])
    for p in precisions:
        if p not in (BF16, INT4):
            raise ConfigError(f"unknown precision {p!r}")
    if args.concurrency:
        conc_list = [int(c) for c in args.concurrency.split(",")]
    else:
        conc = sec.get("concurrency", [8, 32])
        conc_list = [conc] if isinstance(conc, int) else [int(c) for c in conc]
    input_len_mean = sec.get("input_len_mean", 16384)
    output_len = sec.get("output_len", 1024)
    budget = sec.get("pool_budget_bytes")
    if budget is None:
        # room for roughly two max-footprint BF16 long-context requests
        budget = 200 * 1024 * 1024
    cost_cfg = sec.get("cost") or {}
    cost = CostModel(**cost_cfg)

    summaries = []
    divergence = []
    for conc in conc_list:
        per_precision = {}
        for precision in precisions:
            workload = WorkloadSpec(
                concurrency=conc,
                input_len_mean=input_len_mean,
                output_len=output_len,
                num_requests=sec.get("num_requests") or 2 * conc,
                seed=run.seed,
            )
            trace = simulate(workload, precision, budget, cost=cost, layout=run.layout)
            path = run.path(f"trace_c{conc}_{precision}.csv")
            write_trace_csv(trace, path)
            print(f"wrote {path}")
            summary = summarize(trace)
            summaries.append(summary)
            per_precision[precision] = summary
        if INT4 in per_precision and BF16 in per_precision:
            divergence.append(
                {
                    "concurrency": conc,
                    "metric_divergence": metric_divergence(per_precision[INT4], per_precision[BF16]),
                }
            )

    json_path = run.path("serve_sim_summary.json")
    with open(json_path, "w") as f:
        json.dump(
            {"schema_version": 1, "rows": summaries, "divergence": divergence},
            f, sort_keys=True, separators=(",", ":"),
        )
        f.write("\n")
    csv_path = run.path("serve_sim_summary.csv")
    cols = ["precision", "concurrency", "capacity_tokens", "num_requests",
            "tps_sys", "tps_req", "ttft_mean", "makespan"]
    with open(csv_path, "w", newline="") as f:
        f.write(",".join(cols) + "\n")
        for s in summaries:
            f.write(",".join(
                repr(s[c]) if isinstance(s[c], float) else str(s[c]) for c in cols
            ) + "\n")
    print(f"wrote {json_path}")
    print(f"wrote {csv_path}")
    return 0


# -- bench-attn -----------------------------------------------------------------


def _time_op(fn, iters: int) -> float:
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(iters):
        fn()
    return (time.perf_counter() - start) / iters


def cmd_bench_attn(args: argparse.Namespace) -> int:
    run = _Run(args)
    sec = run.section("bench_attn")
    rows = sec.get("rows", 4096)
    iters = sec.get("iters", 20)
    tokens = sec.get("tokens", 512)
    d = run.layout.head_dim
    rng = np.random.Generator(np.random.Philox(key=np.uint64(run.seed)))
    x = rng.standard_normal((rows, d))

    records = []
    for name, mod in sorted(available_backends().items()):
        work = np.ascontiguousarray(x)
        records.append((name, "fwht_rows", _time_op(lambda: mod.fwht_rows(work.copy(), run.layout.rot_order), iters)))
        packed, scale, zp = mod.quantize_rows(work)
        records.append((name, "quantize_rows", _time_op(lambda: mod.quantize_rows(work), iters)))
        records.append(
            (name, "dequantize_rows", _time_op(lambda: mod.dequantize_rows(packed, scale, zp, d), iters))
        )

    table = PageTable(run.layout, precision=INT4, num_pages=tokens // run.layout.page_tokens + 1)
    table.create_sequence(0)
    spec = RotationSpec(order=run.layout.rot_order, signs=make_signs(run.seed, 0, d, run.layout.rot_order))
    h = run.layout.num_kv_heads
    ks = rng.standard_normal((tokens, h, d))
    vs = rng.standard_normal((tokens, h, d))
    for t in range(tokens):
        table.append_token(0, ks[t], vs[t], spec)
    q = rng.standard_normal((run.layout.num_q_heads, d))
    req = DecodeRequest(q=q, seq=0)
    records.append(
        (get_backend(), f"decode_step[{tokens} tokens]", _time_op(lambda: decode_step(req, table, spec), max(1, iters // 4)))
    )

    path = run.path("bench_attn.csv")
    with open(path, "w", newline="") as f:
        f.write("backend,op,rows,dim,mean_seconds\n")
        for name, op, secs in records:
            n = tokens if op.startswith("decode") else rows
            f.write(f"{name},{op},{n},{d},{secs:.9f}\n")
    print(f"wrote {path}")
    for name, op, secs in records:
        print(f"{name:>8}  {op:<28} {secs * 1e6:12.1f} us")
    return 0


# -- selftest -------------------------------------------------------------------


def _st_fwht_dense(rng: np.random.Generator, layout: HeadLayout) -> None:
    x = rng.standard_normal((64, layout.head_dim))
    spec = RotationSpec(order=layout.rot_order)
    got = apply_block_rotation(x, layout, spec)
    want = x @ block_hadamard_matrix(layout.head_dim, layout.rot_order)
    assert np.max(np.abs(got - want)) < 1e-10, "fwht diverges from dense Hadamard"


def _st_backends(rng: np.random.Generator, layout: HeadLayout) -> None:
    mods = available_backends()
    x = rng.standard_normal((128, layout.head_dim))
    results = []
    for _, mod in sorted(mods.items()):
        w = x.copy()
        mod.fwht_rows(w, layout.rot_order)
        packed, scale, zp = mod.quantize_rows(x)
        results.append((w.tobytes(), packed.tobytes(), scale.tobytes(), zp.tobytes()))
    for other in results[1:]:
        assert other == results[0], "backends disagree bitwise"


def _st_fused_unfused(rng: np.random.Generator, layout: HeadLayout) -> None:
    h, d = layout.num_kv_heads, layout.head_dim
    ks = rng.standard_normal((40, h, d))
    vs = rng.standard_normal((40, h, d))
    spec = RotationSpec(order=layout.rot_order, signs=make_signs(1, 0, d, layout.rot_order))
    a = PageTable(layout, precision=INT4, num_pages=8)
    b = PageTable(layout, precision=INT4, num_pages=8)
    a.create_sequence(0)
    b.create_sequence(0)
    for t in range(40):
        a.append_token(0, ks[t], vs[t], spec)
    b.append_tokens_two_pass(0, ks, vs, spec)
    pa, pb = a._pages, b._pages
    for pga, pgb in zip(pa, pb):
        if pga is None:
            assert pgb is None
            continue
        assert pga.k_payload.tobytes() == pgb.k_payload.tobytes(), "fused/unfused bit mismatch"
        assert pga.k_scale.tobytes() == pgb.k_scale.tobytes()
        assert pga.v_payload.tobytes() == pgb.v_payload.tobytes()


def _st_paged_flat(rng: np.random.Generator, layout: HeadLayout) -> None:
    h, d = layout.num_kv_heads, layout.head_dim
    table = PageTable(layout, precision=INT4, num_pages=8)
    table.create_sequence(0)
    for _ in range(33):
        table.append_token(0, rng.standard_normal((h, d)), rng.standard_normal((h, d)))
    k_hat, v_hat = table.read_sequence(0)
    q = rng.standard_normal((layout.num_q_heads, d))
    got = decode_step(DecodeRequest(q=q, seq=0), table)
    want = decode_step_fp(q, k_hat, v_hat, layout)
    assert np.max(np.abs(got - want)) < 1e-10, "paged decode diverges from flat oracle"


def _st_pack_unpack(rng: np.random.Generator, layout: HeadLayout) -> None:
    from .int4 import pack, unpack

    nibbles = rng.integers(0, 16, size=64).astype(np.uint8)
    assert np.array_equal(unpack(pack(nibbles)), nibbles), "pack/unpack not bijective"


def _st_jacobi(rng: np.random.Generator, layout: HeadLayout) -> None:
    a = rng.standard_normal((24, 24))
    a = (a + a.T) / 2
    w, v = jacobi_eigh(a)
    assert np.max(np.abs(v @ np.diag(w) @ v.T - a)) < 1e-8, "jacobi reconstruction failed"


def cmd_selftest(args: argparse.Namespace) -> int:
    layout = HeadLayout(num_q_heads=4, num_kv_heads=2, head_dim=64, rot_order=16)
    checks = [
        ("fast transform matches dense Hadamard", _st_fwht_dense),
        ("compiled and reference backends agree bitwise", _st_backends),
        ("fused append equals two-pass append bitwise", _st_fused_unfused),
        ("paged decode equals flat decode", _st_paged_flat),
        ("nibble pack/unpack round-trips", _st_pack_unpack),
        ("jacobi eigendecomposition reconstructs", _st_jacobi),
    ]
    failed = 0
    for i, (label, fn) in enumerate(checks):
        rng = np.random.Generator(np.random.Philox(key=np.uint64(1000 + i)))
        try:
            fn(rng, layout)
        except Exception as e:  # noqa: BLE001 - report and count every failure
            print(f"FAIL {label}: {e}")
            failed += 1
        else:
            print(f"PASS {label}")
    print(f"backend: {get_backend()}")
    if failed:
        print(f"{failed}/{len(checks)} checks failed")
        return EXIT_SELFTEST_FAILED
    print(f"all {len(checks)} checks passed")
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvrot",
        description="INT4 KV-cache quantization toolkit: rotations, paged cache, serving sim",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", "-c", help="JSON config file")
        p.add_argument("--output-dir", "-o", help=f"output directory (default ${OUTPUT_DIR_ENV} or .)")
        p.add_argument("--seed", type=int, default=None, help="base RNG seed")

    p = sub.add_parser("calibrate", help="fit rotations/codebooks, write calibration artifact")
    common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bench-quant", help="run the quantization error matrix")
    common(p)
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--num-seeds", type=int, default=None)
    p.add_argument("--format", choices=["csv", "json", "both"], default=None)
    p.set_defaults(func=cmd_bench_quant)

    p = sub.add_parser("bench-attn", help="time kernels per backend and a decode step")
    common(p)
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("serve-sim", help="closed-loop serving capacity simulation")
    common(p)
    p.add_argument("--concurrency", help="comma-separated client counts")
    p.set_defaults(func=cmd_serve_sim)

    p = sub.add_parser("selftest", help="fast oracle equivalence checks")
    common(p)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KvrotError as e:
        print(f"error: {e}", file=sys.stderr)
        for cls, code in _EXIT_CODES:
            if isinstance(e, cls):
                return code
        return EXIT_UNEXPECTED
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"unexpected error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
