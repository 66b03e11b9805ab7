"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``SURGVAE_NUMBA`` is not
``0``. Both paths are always importable so tests and the benchmark can
compare them directly.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("SURGVAE_NUMBA", "1") != "0"


def _njit(fn):
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)


# ---------------------------------------------------------------------------
# single-head scaled dot-product attention over a batch of token sequences
# q, k, v: (n, L, d)


def attention_forward_numpy(q, k, v):
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = np.matmul(q, np.swapaxes(k, 1, 2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return np.matmul(p, v), p


def attention_backward_numpy(q, k, v, p, gout):
    scale = 1.0 / math.sqrt(q.shape[-1])
    gv = np.matmul(np.swapaxes(p, 1, 2), gout)
    dp = np.matmul(gout, np.swapaxes(v, 1, 2))
    ds = p * (dp - (p * dp).sum(axis=-1, keepdims=True)) * scale
    gq = np.matmul(ds, k)
    gk = np.matmul(np.swapaxes(ds, 1, 2), q)
    return gq, gk, gv


# numba path: scores in a compiled loop, exponentials through the numpy
# ufunc (vectorized), normalization and value mixing compiled again.


@_njit
def _attention_scores_nb(q, k):
    n, L, d = q.shape
    scale = 1.0 / math.sqrt(d)
    s = np.empty((n, L, L))
    qi = np.empty(d)
    for b in range(n):
        for i in range(L):
            for c in range(d):
                qi[c] = q[b, i, c] * scale
            row = s[b, i]
            if d == 2:
                q0 = qi[0]
                q1 = qi[1]
                for j in range(L):
                    row[j] = q0 * k[b, j, 0] + q1 * k[b, j, 1]
            else:
                for j in range(L):
                    acc = 0.0
                    for c in range(d):
                        acc += qi[c] * k[b, j, c]
                    row[j] = acc
            m = row.max()
            for j in range(L):
                row[j] -= m
    return s


@_njit
def _attention_mix_nb(p, v):
    # p holds unnormalized exponentials on entry and probabilities on exit
    n, L, _ = p.shape
    d = v.shape[2]
    out = np.zeros((n, L, d))
    for b in range(n):
        for i in range(L):
            row = p[b, i]
            tot = 0.0
            for j in range(L):
                tot += row[j]
            inv = 1.0 / tot
            if d == 2:
                a0 = 0.0
                a1 = 0.0
                for j in range(L):
                    pij = row[j] * inv
                    row[j] = pij
                    a0 += pij * v[b, j, 0]
                    a1 += pij * v[b, j, 1]
                out[b, i, 0] = a0
                out[b, i, 1] = a1
                continue
            for j in range(L):
                pij = row[j] * inv
                row[j] = pij
                for c in range(d):
                    out[b, i, c] += pij * v[b, j, c]
    return out


@_njit
def _attention_backward_nb(q, k, v, p, gout):
    n, L, d = q.shape
    scale = 1.0 / math.sqrt(d)
    gq = np.zeros((n, L, d))
    gk = np.zeros((n, L, d))
    gv = np.zeros((n, L, d))
    dp = np.empty(L)
    qi = np.empty(d)
    acc = np.empty(d)
    for b in range(n):
        for i in range(L):
            row = p[b, i]
            r = 0.0
            if d == 2:
                g0 = gout[b, i, 0]
                g1 = gout[b, i, 1]
                for j in range(L):
                    t = g0 * v[b, j, 0] + g1 * v[b, j, 1]
                    gv[b, j, 0] += row[j] * g0
                    gv[b, j, 1] += row[j] * g1
                    dp[j] = t
                    r += row[j] * t
                q0 = q[b, i, 0] * scale
                q1 = q[b, i, 1] * scale
                a0 = 0.0
                a1 = 0.0
                for j in range(L):
                    ds = row[j] * (dp[j] - r)
                    a0 += ds * k[b, j, 0]
                    a1 += ds * k[b, j, 1]
                    gk[b, j, 0] += ds * q0
                    gk[b, j, 1] += ds * q1
                gq[b, i, 0] = a0 * scale
                gq[b, i, 1] = a1 * scale
                continue
            for j in range(L):
                t = 0.0
                for c in range(d):
                    t += gout[b, i, c] * v[b, j, c]
                    gv[b, j, c] += row[j] * gout[b, i, c]
                dp[j] = t
                r += row[j] * t
            for c in range(d):
                qi[c] = q[b, i, c] * scale
                acc[c] = 0.0
            for j in range(L):
                ds = row[j] * (dp[j] - r)
                for c in range(d):
                    acc[c] += ds * k[b, j, c]
                    gk[b, j, c] += ds * qi[c]
            for c in range(d):
                gq[b, i, c] = acc[c] * scale
    return gq, gk, gv


def attention_forward_numba(q, k, v):
    s = _attention_scores_nb(np.ascontiguousarray(q), np.ascontiguousarray(k))
    np.exp(s, out=s)
    return _attention_mix_nb(s, np.ascontiguousarray(v)), s


def attention_backward_numba(q, k, v, p, gout):
    return _attention_backward_nb(
        np.ascontiguousarray(q),
        np.ascontiguousarray(k),
        np.ascontiguousarray(v),
        p,
        np.ascontiguousarray(gout),
    )


# ---------------------------------------------------------------------------
# t-SNE: perplexity-calibrated conditional affinities and the KL gradient


def _row_entropy(d2_row, beta):
    # d2_row excludes the point itself
    shifted = d2_row - d2_row.min()
    w = np.exp(-shifted * beta)
    tot = w.sum()
    p = w / tot
    h = math.log(tot) + beta * float(np.dot(shifted, p))
    return h, p


def tsne_affinities_numpy(d2, perplexity, tol=1e-5, max_iter=50):
    n = d2.shape[0]
    target = math.log(perplexity)
    cond = np.zeros((n, n))
    achieved = np.empty(n)
    for i in range(n):
        row = np.concatenate([d2[i, :i], d2[i, i + 1 :]])
        beta, lo, hi = 1.0, 0.0, np.inf
        h, p = _row_entropy(row, beta)
        for _ in range(max_iter):
            if abs(math.exp(h) - perplexity) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            h, p = _row_entropy(row, beta)
        achieved[i] = math.exp(h)
        cond[i, :i] = p[:i]
        cond[i, i + 1 :] = p[i:]
    return cond, achieved


@_njit
def _row_entropy_nb(d2, i, beta, p):
    n = d2.shape[0]
    dmin = np.inf
    for j in range(n):
        if j != i and d2[i, j] < dmin:
            dmin = d2[i, j]
    tot = 0.0
    for j in range(n):
        if j == i:
            p[j] = 0.0
        else:
            w = math.exp(-(d2[i, j] - dmin) * beta)
            p[j] = w
            tot += w
    hsum = 0.0
    for j in range(n):
        p[j] /= tot
        if j != i:
            hsum += (d2[i, j] - dmin) * p[j]
    return math.log(tot) + beta * hsum


@_njit
def _tsne_affinities_nb(d2, perplexity, tol, max_iter):
    n = d2.shape[0]
    target = math.log(perplexity)
    cond = np.zeros((n, n))
    achieved = np.empty(n)
    p = np.empty(n)
    for i in range(n):
        beta = 1.0
        lo = 0.0
        hi = np.inf
        h = _row_entropy_nb(d2, i, beta, p)
        for _ in range(max_iter):
            if abs(math.exp(h) - perplexity) < tol:
                break
            if h > target:
                lo = beta
                if hi == np.inf:
                    beta = beta * 2.0
                else:
                    beta = 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            h = _row_entropy_nb(d2, i, beta, p)
        achieved[i] = math.exp(h)
        for j in range(n):
            cond[i, j] = p[j]
    return cond, achieved


def tsne_affinities_numba(d2, perplexity, tol=1e-5, max_iter=50):
    return _tsne_affinities_nb(np.ascontiguousarray(d2), float(perplexity), tol, max_iter)


def tsne_grad_numpy(y, p):
    """Gradient of KL(P||Q) w.r.t. the embedding, and the KL value."""
    sq = (y * y).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (y @ y.T), 0.0)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    pq = (p - q) * num
    grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
    mask = p > 0
    kl = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    return grad, kl


@_njit
def _tsne_grad_nb(y, p):
    n, dim = y.shape
    num = np.zeros((n, n))
    zsum = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d2 = 0.0
            for c in range(dim):
                t = y[i, c] - y[j, c]
                d2 += t * t
            w = 1.0 / (1.0 + d2)
            num[i, j] = w
            num[j, i] = w
            zsum += 2.0 * w
    grad = np.zeros((n, dim))
    kl = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            q = max(num[i, j] / zsum, 1e-12)
            pij = p[i, j]
            if pij > 0.0:
                kl += pij * math.log(pij / q)
            coef = 4.0 * (pij - q) * num[i, j]
            for c in range(dim):
                grad[i, c] += coef * (y[i, c] - y[j, c])
    return grad, kl


def tsne_grad_numba(y, p):
    return _tsne_grad_nb(np.ascontiguousarray(y), np.ascontiguousarray(p))


if USE_NUMBA:
    attention_forward = attention_forward_numba
    attention_backward = attention_backward_numba
    tsne_affinities = tsne_affinities_numba
    tsne_grad = tsne_grad_numba
else:
    attention_forward = attention_forward_numpy
    attention_backward = attention_backward_numpy
    tsne_affinities = tsne_affinities_numpy
    tsne_grad = tsne_grad_numpy
