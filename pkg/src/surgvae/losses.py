"""Objective terms: reconstruction, KL, total correlation, MMD, contrastive, prediction.

Every term is returned as a penalty to be minimized.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, UsageError

LOG_2PI = math.log(2.0 * math.pi)
TERMS = ("recon", "kld", "tc", "mmd", "contrastive", "prediction")


@dataclass(frozen=True)
class LossWeights:
    w_recon: float = 1.0
    w_kld: float = 0.05
    w_tc: float = 0.05
    w_mmd: float = 1.0
    w_con: float = 0.3
    w_pred: float = 100.0
    margin: float = 1.0
    kernel_bandwidth: float | str = "median"

    def __post_init__(self):
        for name in ("w_recon", "w_kld", "w_tc", "w_mmd", "w_con", "w_pred"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if not self.margin > 0:
            raise ConfigError("margin must be > 0")
        bw = self.kernel_bandwidth
        if isinstance(bw, str):
            if bw != "median":
                raise ConfigError("kernel_bandwidth must be a positive number or 'median'")
        elif not bw > 0:
            raise ConfigError("kernel_bandwidth must be positive")

    def weight_of(self, term: str) -> float:
        key = {"contrastive": "w_con", "prediction": "w_pred"}.get(term, f"w_{term}")
        return getattr(self, key)

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    recon: float
    kld: float
    tc: float
    mmd: float
    contrastive: float
    prediction: float
    total: float
    weights: LossWeights
    flags: list[str] = field(default_factory=list)

    def terms(self) -> dict[str, float]:
        return {t: getattr(self, t) for t in TERMS}

    def to_dict(self):
        d = self.terms()
        d["total"] = self.total
        return d


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def recon_loss(x, xhat: ad.Node) -> ad.Node:
    """Mean squared error, averaged over features then rows."""
    g = xhat.graph
    x = g._lift(x)
    _same_shape("recon_loss", x, xhat)
    return ad.mean(ad.square(ad.sub(x, xhat)))


def kld_loss(mu: ad.Node, logvar: ad.Node) -> ad.Node:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over dims, averaged over rows."""
    _same_shape("kld_loss", mu, logvar)
    inner = ad.add_scalar(ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), logvar), -1.0)
    return ad.scale(ad.sum(inner), 0.5 / mu.shape[0])


def importance_log_weights(batch_size: int, dataset_size: int) -> np.ndarray:
    """Log weights of the stratified minibatch estimator of the aggregate posterior.

    Row i weights its own posterior by 1/N, one other member by (N - M)/(N M)
    and the remaining members by 1/M, with M = batch_size - 1; rows sum to 1.
    """
    n = batch_size
    N = max(int(dataset_size), n)
    M = n - 1
    W = np.full((n, n), 1.0 / M)
    strat = (N - M) / (N * M)
    idx = np.arange(n)
    W[idx, idx] = 1.0 / N
    W[idx, (idx + 1) % n] = strat
    return np.log(np.maximum(W, 1e-300))


def tc_loss(z: ad.Node, mu: ad.Node, logvar: ad.Node, dataset_size: int) -> ad.Node:
    """Minibatch estimate of KL(q(z) || prod_j q(z_j))."""
    n, d = z.shape
    if n < 2:
        raise UsageError("tc_loss needs a batch of at least 2 rows")
    _same_shape("tc_loss", z, mu)
    _same_shape("tc_loss", z, logvar)
    zi = ad.reshape(z, (n, 1, d))
    mum = ad.reshape(mu, (1, n, d))
    lvm = ad.reshape(logvar, (1, n, d))
    sq = ad.square(ad.sub(zi, mum))
    lp = ad.scale(ad.add_scalar(ad.add(lvm, ad.mul(sq, ad.exp(ad.scale(lvm, -1.0)))), LOG_2PI), -0.5)
    logw = importance_log_weights(n, dataset_size)
    joint = ad.logsumexp(ad.add(ad.sum(lp, axis=2), logw), axis=1)
    marg = ad.logsumexp(ad.add(lp, logw[:, :, None]), axis=1)
    return ad.mean(ad.sub(joint, ad.sum(marg, axis=1)))


def mmd_group_pairs(groups, min_rows: int = 2) -> list[tuple[int, int]]:
    groups = np.asarray(groups)
    labels, counts = np.unique(groups, return_counts=True)
    ok = [int(g) for g, c in zip(labels, counts) if c >= min_rows]
    return [(a, b) for i, a in enumerate(ok) for b in ok[i + 1 :]]


def _median_sqdist(sq: ad.Node) -> ad.Node | None:
    n = sq.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    flat = iu * n + ju
    vals = sq.value.reshape(-1)[flat]
    order = np.argsort(vals, kind="mergesort")
    m = vals.size
    mid = [order[m // 2]] if m % 2 else [order[m // 2 - 1], order[m // 2]]
    med = ad.mean(ad.take_flat(sq, flat[mid]))
    if float(med.value) <= 0.0:
        return None
    return med


def mmd_loss(z1: ad.Node, groups, bandwidth: float | str = "median", min_rows: int = 2) -> ad.Node:
    """Average Gaussian-kernel MMD (V-statistic) over eligible group pairs."""
    g = z1.graph
    groups = np.asarray(groups)
    n = z1.shape[0]
    if groups.shape != (n,):
        raise DimensionError(f"groups must have length {n}")
    pairs = mmd_group_pairs(groups, min_rows)
    if not pairs:
        return g.const(0.0)
    sq = ad.pairwise_sqdist(z1, z1)
    if bandwidth == "median":
        med = _median_sqdist(sq) if n > 1 else None
        # sigma^2 = median / 2, so 2 sigma^2 = median
        scaled = ad.div(sq, med) if med is not None else ad.scale(sq, 0.5)
    else:
        scaled = ad.scale(sq, 1.0 / (2.0 * float(bandwidth)))
    K = ad.exp(ad.scale(scaled, -1.0))
    W = np.zeros((n, n))
    for a, b in pairs:
        ia = (groups == a).astype(float)
        ib = (groups == b).astype(float)
        na, nb = ia.sum(), ib.sum()
        W += np.outer(ia, ia) / na**2 + np.outer(ib, ib) / nb**2
        W -= (np.outer(ia, ib) + np.outer(ib, ia)) / (na * nb)
    W /= len(pairs)
    return ad.sum(ad.mul(K, W))


def contrastive_loss(z2: ad.Node, groups, margin: float = 1.0) -> ad.Node:
    """Pull same-group pairs together, push cross-group pairs past ``margin``; 1/N scaled."""
    groups = np.asarray(groups)
    n = z2.shape[0]
    if groups.shape != (n,):
        raise DimensionError(f"groups must have length {n}")
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    same = groups[:, None] == groups[None, :]
    pos = (same & upper).astype(float)
    neg = (~same & upper).astype(float)
    sq = ad.pairwise_sqdist(z2, z2)
    pull = ad.sum(ad.mul(sq, pos))
    if not neg.any():
        return ad.scale(pull, 1.0 / n)
    hinge = ad.relu(ad.scale(ad.add_scalar(ad.sqrt(sq), -margin), -1.0))
    push = ad.sum(ad.mul(ad.square(hinge), neg))
    return ad.scale(ad.add(pull, push), 1.0 / n)


def prediction_loss(logits: ad.Node, y, mask) -> ad.Node:
    """Per-outcome masked binary cross-entropy from logits, averaged over outcomes."""
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if logits.shape != y.shape or y.shape != mask.shape:
        raise DimensionError(f"prediction_loss: shapes {logits.shape}, {y.shape}, {mask.shape} differ")
    bce = ad.sub(ad.softplus(logits), ad.mul(logits, y))
    per = ad.sum(ad.mul(bce, mask), axis=0)
    count = mask.sum(axis=0)
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1.0), 0.0)
    return ad.scale(ad.sum(ad.mul(per, inv)), 1.0 / y.shape[1])


def total_loss(x, xhat, enc, logits, y, mask, groups, weights: LossWeights, dataset_size: int,
               on_term=None):
    """Weighted sum of all six terms.

    Returns ``(total_node, breakdown)``. ``on_term(name, thunk)`` may wrap
    each term's construction (training uses it to attribute numerical
    failures to a term).
    """
    def build(name, fn):
        return on_term(name, fn) if on_term is not None else fn()

    flags = []
    nodes = {
        "recon": build("recon", lambda: recon_loss(x, xhat)),
        "kld": build("kld", lambda: kld_loss(enc.mu, enc.logvar)),
        "tc": build("tc", lambda: tc_loss(enc.z, enc.mu, enc.logvar, dataset_size)),
        "mmd": build("mmd", lambda: mmd_loss(enc.z1, groups, weights.kernel_bandwidth)),
        "contrastive": build("contrastive", lambda: contrastive_loss(enc.z2, groups, weights.margin)),
        "prediction": build("prediction", lambda: prediction_loss(logits, y, mask)),
    }
    if not mmd_group_pairs(groups):
        flags.append("mmd_no_eligible_pair")
    if len(np.unique(groups)) < 2:
        flags.append("contrastive_no_negative_pairs")
    total = None
    for t in TERMS:
        part = ad.scale(nodes[t], weights.weight_of(t))
        total = part if total is None else ad.add(total, part)
    vals = {t: float(nodes[t].value) for t in TERMS}
    breakdown = LossBreakdown(**vals, total=float(total.value), weights=weights, flags=flags)
    return total, breakdown
