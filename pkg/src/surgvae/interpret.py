"""Integrated Gradients attributions and an exact t-SNE projector."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _accel
from . import autodiff as ad
from .errors import UsageError
from .model import Parameters, encode, predict_heads

# scorer(points: m x F) -> (values: m x C, grads: C x m x F)
Scorer = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]


def model_scorer(params: Parameters, outcomes=None) -> Scorer:
    """Sigmoid head outputs through the deterministic (eps = 0, mu) path."""
    cfg = params.cfg
    cols = list(range(cfg.n_outcomes)) if outcomes is None else [int(c) for c in np.atleast_1d(outcomes)]
    for c in cols:
        if not 0 <= c < cfg.n_outcomes:
            raise UsageError(f"outcome index {c} outside [0, {cfg.n_outcomes})")

    def score(points):
        g = ad.Graph()
        P = params.bind(g, trainable=False)
        x = g.param(points, name="x")
        enc = encode(x, P, cfg)
        prob = ad.sigmoid(predict_heads(enc.mu, P, cfg.n_outcomes))
        values = prob.value[:, cols]
        grads = np.stack([ad.backward(g, ad.sum(ad.slice_cols(prob, c, c + 1)), [x])[0] for c in cols])
        return values, grads

    return score


def linear_scorer(w: np.ndarray, b: float = 0.0) -> Scorer:
    w = np.asarray(w, dtype=float)

    def score(points):
        return (points @ w + b)[:, None], np.broadcast_to(w, points.shape)[None].copy()

    return score


@dataclass
class Attribution:
    values: np.ndarray  # C x F
    residual: np.ndarray  # C
    score_x: np.ndarray
    score_baseline: np.ndarray


def integrated_gradients(scorer: Scorer, x, baseline=None, steps: int = 64) -> Attribution:
    """Midpoint-rule path integral of gradients from ``baseline`` (zeros) to ``x``."""
    if steps < 1:
        raise UsageError("steps must be >= 1")
    x = np.asarray(x, dtype=float).ravel()
    b = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=float).ravel()
    if b.shape != x.shape:
        raise UsageError(f"baseline shape {b.shape} differs from input {x.shape}")
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    points = b[None, :] + alphas[:, None] * (x - b)[None, :]
    ends = np.stack([x, b])
    _, grads = scorer(points)
    end_vals, _ = scorer(ends)
    ig = (x - b)[None, :] * grads.mean(axis=1)
    residual = np.abs(ig.sum(axis=1) - (end_vals[0] - end_vals[1]))
    return Attribution(ig, residual, end_vals[0], end_vals[1])


def normalize_importance(attributions) -> np.ndarray | None:
    """Mean |IG| per feature over rows, as percentages; None when all zero."""
    a = np.abs(np.atleast_2d(np.asarray(attributions, dtype=float)))
    if a.shape[0] < 1:
        raise UsageError("need at least one attributed row")
    score = a.mean(axis=0)
    total = score.sum()
    if total == 0.0:
        return None
    return 100.0 * score / total


def top_k(importances, k: int = 10) -> list[int]:
    """Feature indices by descending importance; ties go to the lower index."""
    imp = np.asarray(importances, dtype=float)
    if not 0 <= k <= imp.size:
        raise UsageError(f"k={k} outside [0, {imp.size}]")
    order = np.lexsort((np.arange(imp.size), -imp))
    return [int(i) for i in order[:k]]


# ---------------------------------------------------------------------------
# t-SNE


@dataclass
class Projection2D:
    coords: np.ndarray
    kl_initial: float
    kl_final: float
    iterations: int
    seed: int
    perplexity: np.ndarray  # achieved per point


def sq_distances(points: np.ndarray) -> np.ndarray:
    sq = (points**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def joint_affinities(points: np.ndarray, perplexity: float) -> tuple[np.ndarray, np.ndarray]:
    n = points.shape[0]
    cond, achieved = _accel.tsne_affinities(sq_distances(points), perplexity)
    P = (cond + cond.T) / (2.0 * n)
    return np.maximum(P, 1e-12), achieved


def tsne(points, perplexity: float = 30.0, iterations: int = 1000, learning_rate: float = 200.0,
         seed: int = 0, exaggeration: float = 12.0, exaggeration_iters: int = 250) -> Projection2D:
    """Exact t-SNE with gains, momentum 0.5 then 0.8, early exaggeration."""
    X = np.asarray(points, dtype=float)
    if X.ndim != 2:
        raise UsageError("points must be a 2-d array")
    n = X.shape[0]
    if n > 10_000:
        raise UsageError(f"exact t-SNE is limited to 10000 points, got {n}")
    if not 0 < perplexity < n / 3.0:
        raise UsageError(f"perplexity {perplexity} infeasible for {n} points (need 0 < perplexity < n/3)")
    P, achieved = joint_affinities(X, perplexity)
    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    _, kl0 = _accel.tsne_grad(Y, P)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(iterations):
        ex = exaggeration if it < exaggeration_iters else 1.0
        grad, _ = _accel.tsne_grad(Y, P * ex)
        momentum = 0.5 if it < exaggeration_iters else 0.8
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
    _, kl = _accel.tsne_grad(Y, P)
    if not np.isfinite(Y).all():
        raise UsageError("t-SNE diverged")
    return Projection2D(Y, float(kl0), float(kl), iterations, seed, achieved)


def silhouette(points: np.ndarray, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance."""
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise UsageError("silhouette needs at least two labels")
    d = np.sqrt(sq_distances(np.asarray(points, dtype=float)))
    n = labels.size
    s = np.zeros(n)
    masks = [labels == u for u in uniq]
    for i in range(n):
        own = labels[i]
        a = b = math.inf
        for u, m in zip(uniq, masks):
            cnt = m.sum()
            if u == own:
                a = d[i, m].sum() / (cnt - 1) if cnt > 1 else 0.0
                if cnt == 1:
                    a = None
            else:
                b = min(b, d[i, m].mean())
        if a is None:
            s[i] = 0.0
        else:
            s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())
