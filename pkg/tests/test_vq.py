"""Residual VQ: Lloyd fitting, SSE monotonicity, encode/decode round trips."""

import numpy as np
import pytest

from kvrot.errors import ShapeError, TooFewSamplesError
from kvrot.vq import (
    Codebook,
    CodebookKind,
    _repair_empty,
    decode,
    decode_rows,
    encode,
    encode_rows,
    fit_codebook,
    fit_codebook_with_history,
)


def _clustered(rng, n_per=60, centers=((0.0, 0.0), (8.0, 0.0), (0.0, 8.0), (8.0, 8.0))):
    parts = [rng.standard_normal((n_per, 2)) * 0.5 + np.asarray(c) for c in centers]
    return np.concatenate(parts)


def test_single_centroid_is_the_mean(rng):
    x = rng.standard_normal((50, 6)) * 3 + 1.5
    book, history = fit_codebook_with_history(x, c=1, seed=0)
    np.testing.assert_array_equal(book.centroids, x.mean(axis=0, keepdims=True))
    assert history == [pytest.approx(float(np.sum((x - x.mean(axis=0)) ** 2)))]


def test_sse_never_increases(rng):
    x = _clustered(rng)
    for seed in range(8):
        _, history = fit_codebook_with_history(x, c=7, seed=seed)
        assert len(history) >= 1
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_more_centroids_never_hurt(rng):
    x = _clustered(rng)
    _, h1 = fit_codebook_with_history(x, c=1, seed=3)
    _, h8 = fit_codebook_with_history(x, c=8, seed=3)
    assert h8[-1] < h1[-1]


def test_final_assignments_are_nearest(rng):
    x = _clustered(rng)
    book = fit_codebook(x, c=5, seed=1)
    ids, _, _, _ = encode_rows(x, book)
    for i in range(0, x.shape[0], 7):
        brute = np.array([np.sum((x[i] - c) ** 2) for c in book.centroids])
        assert brute[ids[i]] == pytest.approx(brute.min(), abs=1e-12)


def test_fit_is_deterministic(rng):
    x = _clustered(rng)
    a = fit_codebook(x, c=6, seed=42)
    b = fit_codebook(x, c=6, seed=42)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert a.kind is CodebookKind.KEY
    v = fit_codebook(x, c=6, seed=42, kind=CodebookKind.VALUE)
    assert v.kind is CodebookKind.VALUE


def test_encode_decode_round_trip_bound(rng):
    # the half-step residual bound applies when the residual straddles
    # zero; same-sign residuals clip at the grid edge, where the error is
    # still no worse than dropping the residual entirely
    x = _clustered(rng)
    x = np.hstack([x, rng.standard_normal((x.shape[0], 14)) * 0.5])
    book = fit_codebook(x, c=4, seed=0)
    straddled = 0
    for i in range(0, x.shape[0], 11):
        code = encode(x[i], book)
        xhat = decode(code, book)
        _, params = code.residual
        r = x[i] - book.centroids[code.centroid_id]
        err = np.max(np.abs(x[i] - xhat))
        if r.min() <= 0.0 <= r.max():
            straddled += 1
            bound = (params.scale / 2 if params.scale > 0 else 0.0) + 1e-9
            assert err <= bound
        else:
            assert err <= np.abs(r).max() + 1e-9
    assert straddled >= 15


def test_vectorized_encode_matches_per_row(rng):
    x = _clustered(rng)
    x = np.hstack([x, x * 0.3])  # dim 4
    book = fit_codebook(x, c=5, seed=2)
    ids, packed, scale, zp = encode_rows(x, book)
    decoded = decode_rows(ids, packed, scale, zp, book)
    for i in range(0, x.shape[0], 13):
        code = encode(x[i], book)
        assert code.centroid_id == ids[i]
        np.testing.assert_array_equal(decoded[i], decode(code, book))


def test_too_few_samples(rng):
    with pytest.raises(TooFewSamplesError):
        fit_codebook(rng.standard_normal((3, 4)), c=5, seed=0)
    # plenty of rows but only two distinct points
    dup = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0]]), 10, axis=0)
    with pytest.raises(TooFewSamplesError):
        fit_codebook(dup, c=3, seed=0)


def test_codebook_validation():
    with pytest.raises(ShapeError):
        Codebook(centroids=np.array([[1.0, 2.0], [1.0, 2.0]]))
    with pytest.raises(ShapeError):
        Codebook(centroids=np.array([[np.inf, 0.0]]))
    with pytest.raises(ShapeError):
        Codebook(centroids=np.ones(4))


def test_encode_validates_dim(rng):
    book = fit_codebook(rng.standard_normal((20, 4)), c=2, seed=0)
    with pytest.raises(ShapeError):
        encode(np.ones(6), book)
    with pytest.raises(ShapeError):
        encode_rows(np.ones((3, 6)), book)


def test_empty_cluster_repair_steals_farthest():
    # white box: cluster 1 starts empty; the repair hands it the sample
    # farthest from its current centroid, keeping the donor nonempty
    x = np.array([[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [5.0, 0.0]])
    assign = np.zeros(4, dtype=np.intp)
    counts = np.array([4, 0])
    centroids = np.array([[0.0, 0.0], [99.0, 99.0]])
    _repair_empty(x, assign, centroids, counts)
    assert counts.tolist() == [3, 1]
    assert assign.tolist() == [0, 0, 0, 1]
    np.testing.assert_array_equal(centroids[1], [5.0, 0.0])
