"""Synthetic KV quantization error harness.

Generates key/value/query tensors with the failure modes that break shared
quantization grids (heavy tails, hot channels, cross-channel correlation),
pushes them through a configurable matrix of quantization routes, and scores
each route against the float64 originals at three levels: raw reconstruction,
attention logits, and attention outputs. All randomness is Philox-keyed by
(seed, stream) so every row is reproducible from its config alone.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .attention import _softmax_rows
from .cache import bf16_bits_to_float, float_to_bf16_bits
from .errors import ConfigError
from .int4 import dequantize_rows, quantize_rows
from .layout import HeadLayout
from .rotation import (
    RotationSpec,
    SecondMoment,
    accumulate_queries,
    apply_block_rotation,
    apply_inverse_rotation,
    learn_rotation,
    make_signs,
    value_branch_spec,
)
from .vq import Codebook, CodebookKind, decode_rows, encode_rows, fit_codebook

REPORT_COLUMNS = ("method", "kv_mse", "logit_rmse", "attn_out_rmse", "worst_channel_err", "seed")


def default_layout() -> HeadLayout:
    return HeadLayout(num_q_heads=8, num_kv_heads=8, head_dim=128, rot_order=128)


@dataclass(frozen=True)
class SyntheticSpec:
    """Distribution knobs for one synthetic KV profile.

    Base draws are Student-t (heavy-tailed); outlier_channels coordinates are
    scaled up by outlier_scale in both K and V; mix_strength > 0 additionally
    mixes all channels through identity + a dense rank-mix_rank perturbation,
    correlating the full dimension.
    """

    layout: HeadLayout = field(default_factory=default_layout)
    tokens: int = 256
    queries: int = 16
    base_dist: str = "student"
    base_sigma: float = 1.0
    query_sigma: float = 0.1
    student_df: float = 4.0
    outlier_channels: int = 2
    outlier_scale: float = 50.0
    outlier_fixed: bool = False
    query_outlier_gain: float = 1.0
    channel_mean_sigma: float = 0.0
    mix_strength: float = 0.0
    mix_rank: int = 4

    def __post_init__(self) -> None:
        if self.tokens < 0 or self.queries < 1:
            raise ConfigError("tokens must be >= 0 and queries positive")
        if self.base_dist not in ("student", "gaussian", "uniform", "rademacher"):
            raise ConfigError(f"unknown base_dist {self.base_dist!r}")
        if not (self.student_df > 2.0 and math.isfinite(self.student_df)):
            raise ConfigError("student_df must be finite and exceed 2")
        if not 0 <= self.outlier_channels <= self.layout.head_dim:
            raise ConfigError("outlier_channels out of range")


def default_outlier_spec(layout: Optional[HeadLayout] = None) -> SyntheticSpec:
    """Hot-channel profile: the regime where a naive shared grid collapses.

    One fixed-magnitude hot channel stretches every row's range to ~28x the
    bulk scale, so the shared 16-level grid leaves the remaining 127 channels
    with a step of ~1.9x their own magnitude. Their values then round to
    nearly double themselves, which both corrupts the stored vectors and
    sharpens softmax. A flat binary bulk keeps that failure identical on
    every row; rotation dilutes the hot channel by sqrt(order) and escapes
    the regime entirely.
    """
    return SyntheticSpec(
        layout=layout or default_layout(),
        base_dist="rademacher",
        outlier_channels=1,
        outlier_scale=27.0,
        outlier_fixed=True,
        query_sigma=1.0,
    )


def default_correlated_spec(layout: Optional[HeadLayout] = None) -> SyntheticSpec:
    """Hot channels plus dense cross-channel mixing over the full dimension."""
    return SyntheticSpec(
        layout=layout or default_layout(),
        outlier_scale=100.0,
        mix_strength=0.75,
    )


def generate_kv(
    spec: SyntheticSpec, seed: int, stream: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (keys, values, queries) for a profile.

    Returns keys/values shaped (tokens, kv_heads, dim) and queries shaped
    (queries, q_heads, dim), float64. stream separates eval and calibration
    draws under one seed.
    """
    d = spec.layout.head_dim
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed & (2**64 - 1), stream], dtype=np.uint64))
    )
    channels = (
        rng.choice(d, size=spec.outlier_channels, replace=False)
        if spec.outlier_channels
        else np.empty(0, dtype=np.int64)
    )
    mix = None
    if spec.mix_strength > 0:
        a = rng.standard_normal((d, spec.mix_rank))
        b = rng.standard_normal((spec.mix_rank, d))
        mix = np.eye(d) + (spec.mix_strength / math.sqrt(spec.mix_rank * d)) * (a @ b)

    def _base(count: int, heads: int) -> np.ndarray:
        shape = (count, heads, d)
        if spec.base_dist == "gaussian":
            return rng.standard_normal(shape) * spec.base_sigma
        if spec.base_dist == "uniform":
            # same variance as the gaussian branch but bounded support
            return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=shape) * spec.base_sigma
        if spec.base_dist == "rademacher":
            # unit-variance binary channels, the flattest possible bulk
            return np.where(rng.random(shape) < 0.5, -1.0, 1.0) * spec.base_sigma
        # normalize the t draw so per-channel std equals base_sigma
        unit = math.sqrt(spec.student_df / (spec.student_df - 2.0))
        return rng.standard_t(spec.student_df, size=shape) * (spec.base_sigma / unit)

    def _tensor(count: int, heads: int, query: bool = False) -> np.ndarray:
        if query:
            # cool queries keep softmax in its smooth regime, so output error
            # reflects stored-value fidelity instead of top-1 flips
            x = rng.standard_normal((count, heads, d)) * spec.query_sigma
            if channels.size and spec.query_outlier_gain != 1.0:
                # queries read the hot key channels hard, the usual pairing
                x[..., channels] *= spec.query_outlier_gain
            return x
        x = _base(count, heads)
        if mix is not None:
            x = x @ mix.T
        if channels.size:
            if spec.outlier_fixed:
                # constant-magnitude hot channels, sign kept from the draw
                x[..., channels] = np.sign(x[..., channels]) * spec.outlier_scale
            else:
                x[..., channels] *= spec.outlier_scale
        if spec.channel_mean_sigma > 0:
            # static per-channel offsets shared by every token
            x += rng.standard_normal((heads, d)) * spec.channel_mean_sigma
        return x

    ks = _tensor(spec.tokens, spec.layout.num_kv_heads)
    vs = _tensor(spec.tokens, spec.layout.num_kv_heads)
    qs = _tensor(spec.queries, spec.layout.num_q_heads, query=True)
    return ks, vs, qs


def generate_clustered(
    n: int, dim: int, clusters: int = 16, spread: float = 3.0, within_sigma: float = 0.05, seed: int = 0
) -> np.ndarray:
    """Rows drawn around well-separated cluster centers (VQ-friendly data)."""
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed & (2**64 - 1), 7], dtype=np.uint64))
    )
    centers = rng.standard_normal((clusters, dim)) * spread
    assign = rng.integers(0, clusters, size=n)
    return centers[assign] + rng.standard_normal((n, dim)) * within_sigma


# -- method matrix ----------------------------------------------------------


@dataclass(frozen=True)
class MethodConfig:
    """One quantization route.

    storage "fp" passes values through untouched, "bf16" round-trips 16-bit
    truncated floats, "int4" is the packed-nibble path. rot_order switches on
    the sign + block-Hadamard transform; hessian additionally learns a dense
    rotation from calibration queries; codebook_size inserts a k-means stage
    whose residual is INT4-coded.
    """

    name: str
    rot_order: Optional[int] = None
    hessian: bool = False
    codebook_size: Optional[int] = None
    storage: str = "int4"

    def __post_init__(self) -> None:
        if self.storage not in ("fp", "bf16", "int4"):
            raise ConfigError(f"unknown storage {self.storage!r}")
        if self.storage != "int4" and (self.rot_order or self.hessian or self.codebook_size):
            raise ConfigError(f"method {self.name}: transforms require int4 storage")
        if self.hessian and self.rot_order is None:
            raise ConfigError(f"method {self.name}: hessian requires rot_order")


_METHOD_GRAMMAR = re.compile(
    r"^(?:fp|bf16|int4"
    r"|(?P<hess>hessian-)?bdr-(?P<order>\d+)"
    r"|km-(?P<c>\d+)(?:-bdr-(?P<korder>\d+))?)$"
)


def method_from_name(name: str) -> MethodConfig:
    """Parse a method name: fp | bf16 | int4 | [hessian-]bdr-N | km-C[-bdr-N]."""
    m = _METHOD_GRAMMAR.match(name)
    if m is None:
        raise ConfigError(f"unknown method name {name!r}")
    if name == "fp":
        return MethodConfig(name, storage="fp")
    if name == "bf16":
        return MethodConfig(name, storage="bf16")
    if name == "int4":
        return MethodConfig(name)
    if m.group("c") is not None:
        order = int(m.group("korder")) if m.group("korder") else None
        return MethodConfig(name, rot_order=order, codebook_size=int(m.group("c")))
    return MethodConfig(name, rot_order=int(m.group("order")), hessian=bool(m.group("hess")))


def default_methods() -> tuple[MethodConfig, ...]:
    names = (
        "fp",
        "bf16",
        "int4",
        "bdr-16",
        "bdr-64",
        "bdr-128",
        "hessian-bdr-128",
        "km-1",
        "km-16",
        "km-16-bdr-128",
    )
    return tuple(method_from_name(n) for n in names)


@dataclass(frozen=True)
class MethodResult:
    method: str
    kv_mse: float
    logit_rmse: float
    attn_out_rmse: float
    worst_channel_err: float
    seed: int


@dataclass
class ErrorReport:
    rows: list[MethodResult] = field(default_factory=list)


def _build_spec(method: MethodConfig, layout: HeadLayout, seed: int, calib_q: np.ndarray
                ) -> tuple[Optional[RotationSpec], HeadLayout]:
    """Rotation spec for a method, plus the layout pinned to its order."""
    if method.rot_order is None:
        return None, layout
    lay = replace(layout, rot_order=method.rot_order)
    signs = make_signs(seed, 0, lay.head_dim, method.rot_order)
    spec = RotationSpec(order=method.rot_order, signs=signs)
    if method.hessian:
        rows = calib_q.reshape(-1, lay.head_dim)
        acc = accumulate_queries(SecondMoment.empty(lay.head_dim), apply_block_rotation(rows, lay, spec))
        spec = replace(spec, learned=learn_rotation(acc))
    return spec, lay


def _route_rows(
    rows: np.ndarray,
    method: MethodConfig,
    spec: Optional[RotationSpec],
    layout: HeadLayout,
    book: Optional[Codebook],
) -> np.ndarray:
    """Quantize rows along one route and come back to original space."""
    if method.storage == "fp":
        return rows.copy()
    if method.storage == "bf16":
        return bf16_bits_to_float(float_to_bf16_bits(rows)).reshape(rows.shape)
    stored = apply_block_rotation(rows, layout, spec) if spec is not None else rows
    if book is not None:
        ids, packed, scale, zp = encode_rows(stored, book)
        stored_hat = decode_rows(ids, packed, scale, zp, book)
    else:
        packed, scale, zp = quantize_rows(stored)
        stored_hat = dequantize_rows(packed, scale, zp, rows.shape[1])
    if spec is not None:
        return apply_inverse_rotation(stored_hat, layout, spec)
    return stored_hat


def compute_metrics(
    ks: np.ndarray,
    vs: np.ndarray,
    k_hat: np.ndarray,
    v_hat: np.ndarray,
    queries: np.ndarray,
    layout: HeadLayout,
) -> dict[str, float]:
    """Original-space error metrics for one reconstructed (K, V) pair."""
    k_err = k_hat - ks
    v_err = v_hat - vs
    kv_mse = float((np.mean(k_err**2) + np.mean(v_err**2)) / 2.0)
    per_channel = np.sqrt(
        (np.mean(k_err**2, axis=(0, 1)) + np.mean(v_err**2, axis=(0, 1))) / 2.0
    )
    worst = float(per_channel.max())

    scale = 1.0 / math.sqrt(layout.head_dim)
    logit_sq = 0.0
    out_sq = 0.0
    logit_n = 0
    out_n = 0
    for qh in range(layout.num_q_heads):
        kv = layout.kv_head_for(qh)
        q = queries[:, qh, :]  # (nq, d)
        l_ref = q @ ks[:, kv, :].T * scale
        l_hat = q @ k_hat[:, kv, :].T * scale
        logit_sq += float(np.sum((l_hat - l_ref) ** 2))
        logit_n += l_ref.size
        o_ref = _softmax_rows(l_ref) @ vs[:, kv, :]
        o_hat = _softmax_rows(l_hat) @ v_hat[:, kv, :]
        out_sq += float(np.sum((o_hat - o_ref) ** 2))
        out_n += o_ref.size
    return {
        "kv_mse": kv_mse,
        "logit_rmse": math.sqrt(logit_sq / logit_n),
        "attn_out_rmse": math.sqrt(out_sq / out_n),
        "worst_channel_err": worst,
    }


def run_matrix(
    methods: Sequence[MethodConfig],
    ks: np.ndarray,
    vs: np.ndarray,
    queries: np.ndarray,
    layout: HeadLayout,
    seed: int = 0,
    calib: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
) -> ErrorReport:
    """Score every method on one (K, V, Q) instance.

    calib supplies held-out (keys, values, queries) for codebook fitting and
    rotation learning; without it the eval tensors themselves are used
    (in-sample calibration, fine for smoke runs).
    """
    calib_k, calib_v, calib_q = calib if calib is not None else (ks, vs, queries)
    d = layout.head_dim
    report = ErrorReport()
    for method in methods:
        spec, lay = _build_spec(method, layout, seed, calib_q)
        v_spec = value_branch_spec(spec) if spec is not None else None
        k_book = v_book = None
        if method.codebook_size is not None:
            rows_k = calib_k.reshape(-1, d)
            rows_v = calib_v.reshape(-1, d)
            if spec is not None:
                rows_k = apply_block_rotation(rows_k, lay, spec)
            if v_spec is not None:
                rows_v = apply_block_rotation(rows_v, lay, v_spec)
            k_book = fit_codebook(rows_k, method.codebook_size, seed, kind=CodebookKind.KEY)
            v_book = fit_codebook(rows_v, method.codebook_size, seed, kind=CodebookKind.VALUE)
        k_hat = _route_rows(ks.reshape(-1, d), method, spec, lay, k_book).reshape(ks.shape)
        v_hat = _route_rows(vs.reshape(-1, d), method, v_spec, lay, v_book).reshape(vs.shape)
        metrics = compute_metrics(ks, vs, k_hat, v_hat, queries, layout)
        report.rows.append(MethodResult(method=method.name, seed=seed, **metrics))
    return report


def run_profile(
    methods: Sequence[MethodConfig], spec: SyntheticSpec, seed: int
) -> ErrorReport:
    """Generate a profile draw plus a calibration draw, then run the matrix."""
    ks, vs, qs = generate_kv(spec, seed, stream=0)
    calib = generate_kv(spec, seed, stream=1)
    return run_matrix(methods, ks, vs, qs, spec.layout, seed=seed, calib=calib)


def emit_report(report: ErrorReport, path: str, fmt: str = "csv") -> None:
    """Write a report deterministically (repr floats, fixed row order)."""
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for row in report.rows:
                d = asdict(row)
                w.writerow([d["method"]] + [repr(float(d[c])) for c in REPORT_COLUMNS[1:-1]] + [d["seed"]])
    elif fmt == "json":
        payload = {"schema_version": 1, "rows": [asdict(r) for r in report.rows]}
        with open(path, "w") as f:
            json.dump(payload, f, sort_keys=True, separators=(",", ":"))
            f.write("\n")
    else:
        raise ConfigError(f"unknown report format {fmt!r}")


# -- anisotropic-query objective profile -------------------------------------


def hessian_gap_trial(
    seed: int,
    dim: int = 32,
    n_keys: int = 256,
    n_queries: int = 1024,
    outlier_scale: float = 30.0,
    decay: float = 0.85,
) -> tuple[np.ndarray, np.ndarray]:
    """Keys with one hot channel; anisotropic queries with a dense eigenbasis.

    Query covariance has geometrically decaying (hence distinct) eigenvalues
    in a random orthogonal basis, so its principal directions never align
    with coordinate axes or Hadamard block structure.
    """
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed & (2**64 - 1), 3], dtype=np.uint64))
    )
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    evals = decay ** np.arange(dim)
    queries = (rng.standard_normal((n_queries, dim)) * np.sqrt(evals)) @ basis.T
    keys = rng.standard_t(4.0, size=(n_keys, dim))
    keys[:, int(rng.integers(dim))] *= outlier_scale
    return keys, queries


def hessian_objective_gap(seed: int, dim: int = 32, order: int = 4) -> tuple[float, float]:
    """Mean weighted key error (Hadamard-only, learned-compose) for one trial.

    The weight matrix M is the raw-frame query second moment; errors are
    measured in raw space, so the two routes compete on equal footing.
    """
    keys, queries = hessian_gap_trial(seed, dim=dim)
    layout = HeadLayout(num_q_heads=1, num_kv_heads=1, head_dim=dim, rot_order=order)
    base = RotationSpec(order=order, signs=make_signs(seed, 0, dim, order))
    m = accumulate_queries(SecondMoment.empty(dim), queries).mean()

    def weighted(spec: RotationSpec) -> float:
        stored = apply_block_rotation(keys, layout, spec)
        packed, scale, zp = quantize_rows(stored)
        k_hat = apply_inverse_rotation(dequantize_rows(packed, scale, zp, dim), layout, spec)
        delta = k_hat - keys
        return float(np.mean(np.einsum("nd,de,ne->n", delta, m, delta)))

    acc = accumulate_queries(
        SecondMoment.empty(dim), apply_block_rotation(queries, layout, base)
    )
    learned = replace(base, learned=learn_rotation(acc))
    return weighted(base), weighted(learned)
