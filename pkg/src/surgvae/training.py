"""Optimizer, batching, the training loop, cross-validation and the logistic baseline."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import OUTCOMES, Dataset, FoldAssignment, NormStats, apply_normalizer, fit_normalizer, stratified_folds
from .errors import ConfigError, NonFiniteError, DomainError, TrainingAborted, UsageError
from .losses import TERMS, LossWeights, mmd_loss, total_loss
from .metrics import auprc, auroc, macro_average, metrics_at_sensitivity
from .model import ModelConfig, Parameters, decode, encode, infer, init_params, predict_heads

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 5
    lr_schedule: str = "cosine"  # per-epoch half-cosine decay towards zero, or "constant"
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size < 2 or self.eval_every <= 0:
            raise ConfigError("epochs and eval_every must be positive, batch_size >= 2")
        if not self.learning_rate > 0 or not self.eps > 0:
            raise ConfigError("learning_rate and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used throughout ``epoch`` (1-based)."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / self.epochs))

    def to_dict(self):
        d = asdict(self)
        d.pop("weights")
        return d


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, t: int, lr=1e-3, beta1=0.9, beta2=0.999,
              eps=1e-8):
    """Bias-corrected Adam update, in place. ``t`` is the 1-based step count."""
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t
    return params, state


# ---------------------------------------------------------------------------
# batches


def training_pool(folds: FoldAssignment, test_fold: int) -> np.ndarray:
    if not 0 <= test_fold < folds.k:
        raise UsageError(f"test_fold {test_fold} outside [0, {folds.k})")
    return np.flatnonzero(folds.folds != test_fold)


def _batch_ok(groups, need_groups):
    _, counts = np.unique(groups, return_counts=True)
    return counts.size >= need_groups and counts.max() >= 2


def make_batches(ds: Dataset, folds: FoldAssignment, test_fold: int, batch_size: int, seed: int,
                 epoch: int = 0) -> list[np.ndarray]:
    """Shuffle the training pool for ``epoch`` and cut consecutive batches.

    A batch that lacks two groups (when the pool has two) or a group with two
    rows is merged into its predecessor (the first batch into its successor).
    """
    pool = training_pool(folds, test_fold)
    if pool.size == 0:
        raise UsageError("training pool is empty")
    rng = np.random.default_rng([seed, epoch])
    order = pool[rng.permutation(pool.size)]
    batches = [order[i : i + batch_size] for i in range(0, order.size, batch_size)]
    need = min(2, np.unique(ds.groups[pool]).size)
    merged: list[np.ndarray] = []
    carry = None
    for b in batches:
        if carry is not None:
            b = np.concatenate([carry, b])
            carry = None
        if _batch_ok(ds.groups[b], need) or len(batches) == 1:
            merged.append(b)
        elif merged:
            merged[-1] = np.concatenate([merged[-1], b])
        else:
            carry = b
    if carry is not None:
        merged.append(carry)
    return merged


def batch_eps(seed: int, epoch: int, batch: int, shape) -> np.ndarray:
    """Counter-based standard normal draw keyed on (seed, epoch, batch)."""
    key = np.random.SeedSequence([seed, epoch, batch]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(shape)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def to_dict(self):
        return {"epochs": self.epochs, "snapshots": self.snapshots}


def latent_separation(mu: np.ndarray, groups: np.ndarray, cfg: ModelConfig) -> tuple[float, float]:
    """(z1 cross-group MMD, mean cross-group z2 distance) on posterior means."""
    g = ad.Graph()
    mmd = float(mmd_loss(g.const(mu[:, : cfg.d1]), groups, "median").value)
    z2 = mu[:, cfg.d1 :]
    d = np.sqrt(((z2[:, None, :] - z2[None, :, :]) ** 2).sum(-1))
    cross = groups[:, None] != groups[None, :]
    dist = float(d[cross].mean()) if cross.any() else 0.0
    return mmd, dist


def _eval_macro(prob, labels, mask):
    aucs, aps = [], []
    for c in range(labels.shape[1]):
        m = mask[:, c]
        aucs.append(auroc(prob[m, c], labels[m, c]))
        aps.append(auprc(prob[m, c], labels[m, c]))
    return macro_average(aucs).value, macro_average(aps).value


def train_step(params: Parameters, ds: Dataset, rows: np.ndarray, eps: np.ndarray, weights: LossWeights,
               dataset_size: int, where=""):
    """One forward/backward pass; returns (gradients by name, LossBreakdown)."""
    cfg = params.cfg
    g = ad.Graph()
    P = params.bind(g)

    def guarded(name, fn):
        try:
            return fn()
        except (NonFiniteError, DomainError) as exc:
            raise TrainingAborted(name, where, detail=str(exc)) from exc

    x = ds.features[rows]
    enc = guarded("encoder", lambda: encode(g.const(x), P, cfg, eps))
    xhat = guarded("decoder", lambda: decode(enc.z, P))
    logits = guarded("heads", lambda: predict_heads(enc.z, P, cfg.n_outcomes))
    total, br = total_loss(x, xhat, enc, logits, ds.labels[rows], ds.label_mask[rows], ds.groups[rows],
                           weights, dataset_size, on_term=guarded)
    nodes = [P[k] for k in params.names()]
    grads = ad.backward(g, total, nodes)
    return dict(zip(params.names(), grads)), br


def train(ds: Dataset, folds: FoldAssignment, test_fold: int, model_cfg: ModelConfig, train_cfg: TrainConfig,
          on_batch=None) -> tuple[Parameters, TrainHistory]:
    """Fit on the training pool of ``test_fold``. ``ds`` must already be normalized."""
    params = init_params(model_cfg)
    state = AdamState.zeros_like(params.values)
    history = TrainHistory()
    pool = training_pool(folds, test_fold)
    test_rows = folds.test_rows(test_fold)
    probe_rng = np.random.default_rng([train_cfg.seed, 999])
    probe = np.sort(probe_rng.choice(pool, size=min(512, pool.size), replace=False))
    w = train_cfg.weights
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        batches = make_batches(ds, folds, test_fold, train_cfg.batch_size, train_cfg.seed, epoch)
        sums = dict.fromkeys((*TERMS, "total"), 0.0)
        lr = train_cfg.lr_at(epoch)
        for b, rows in enumerate(batches):
            if on_batch is not None:
                on_batch(epoch, b, rows)
            eps = batch_eps(train_cfg.seed, epoch, b, (rows.size, model_cfg.d))
            try:
                grads, br = train_step(params, ds, rows, eps, w, pool.size, where=b)
            except TrainingAborted as exc:
                raise TrainingAborted(exc.term, b, epoch, exc.detail) from exc
            if not math.isfinite(br.total):
                raise TrainingAborted("total", b, epoch)
            step += 1
            adam_step(params.values, grads, state, step, lr, train_cfg.beta1,
                      train_cfg.beta2, train_cfg.eps)
            for k, v in br.to_dict().items():
                sums[k] += v
        history.epochs.append({"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}})
        if epoch == 1 or epoch == train_cfg.epochs or epoch % train_cfg.eval_every == 0:
            snap = {"epoch": epoch}
            pr = infer(params, ds.features[probe])
            snap["z1_mmd"], snap["z2_cross_distance"] = latent_separation(pr["mu"], ds.groups[probe], model_cfg)
            if test_rows.size:
                te = infer(params, ds.features[test_rows])
                snap["val_macro_auroc"], snap["val_macro_auprc"] = _eval_macro(
                    te["prob"], ds.labels[test_rows], ds.label_mask[test_rows])
            history.snapshots.append(snap)
            log.info("epoch %d total %.4f snapshot %s", epoch, history.epochs[-1]["total"], snap)
    return params, history


# ---------------------------------------------------------------------------
# logistic-regression baseline


@dataclass
class LogRegModel:
    weights: np.ndarray  # F x C
    intercepts: np.ndarray  # C
    iterations: np.ndarray
    converged: np.ndarray
    grad_norm: np.ndarray

    def decision(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights + self.intercepts

    @property
    def warnings(self) -> list[str]:
        return [f"{OUTCOMES[c] if c < len(OUTCOMES) else c}: not converged (grad norm {self.grad_norm[c]:.2e})"
                for c in np.flatnonzero(~self.converged)]


def fit_logreg(x: np.ndarray, y: np.ndarray, mask: np.ndarray, l2: float = 1e-2, max_iter: int = 10_000,
               tol: float = 1e-6) -> LogRegModel:
    """Independent L2-regularized logistic models per column, full-batch accelerated gradient descent.

    Objective per outcome: mean masked log-loss + l2/2 * ||w||^2 (intercept
    unpenalized). Step size 1/L from the spectral bound of the Hessian;
    Nesterov momentum with gradient-based restart. The iterate with the
    smallest gradient norm is returned.
    """
    n, F = x.shape
    C = y.shape[1]
    mask = mask.astype(float)
    count = np.maximum(mask.sum(axis=0), 1.0)
    xa = np.hstack([x, np.ones((n, 1))])
    steps = np.empty(C)
    for c in range(C):
        xm = xa * np.sqrt(mask[:, c:c + 1])
        lam = np.linalg.eigvalsh(xm.T @ xm / count[c])[-1]
        steps[c] = 1.0 / (0.25 * lam + l2)

    def grad(theta):
        W, b = theta[:F], theta[F]
        r = (0.5 * (1.0 + np.tanh(0.5 * (x @ W + b))) - y) * mask / count
        return np.vstack([x.T @ r + l2 * W, r.sum(axis=0)[None, :]])

    theta = np.zeros((F + 1, C))
    look = theta.copy()
    tk = np.ones(C)
    best = theta.copy()
    best_norm = np.full(C, np.inf)
    iters = np.zeros(C, dtype=np.int64)
    active = np.ones(C, dtype=bool)
    for it in range(max_iter + 1):
        g_theta = grad(theta)
        gnorm = np.sqrt((g_theta**2).sum(axis=0))
        better = gnorm < best_norm
        best[:, better] = theta[:, better]
        best_norm = np.where(better, gnorm, best_norm)
        active &= gnorm >= tol
        if not active.any() or it == max_iter:
            break
        g_look = grad(look) if it else g_theta
        new = look - steps * g_look
        # restart momentum where the step opposes the previous direction
        restart = ((g_look * (new - theta)).sum(axis=0) > 0) | ~active
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        beta = np.where(restart, 0.0, (tk - 1.0) / t_next)
        tk = np.where(restart, 1.0, t_next)
        new[:, ~active] = theta[:, ~active]
        look = new + beta * (new - theta)
        theta = new
        iters[active] += 1
    return LogRegModel(best[:F], best[F], iters, best_norm < tol, best_norm)


def train_logreg_baseline(ds: Dataset, folds: FoldAssignment, test_fold: int, l2: float = 1e-2,
                          max_iter: int = 10_000, tol: float = 1e-6) -> LogRegModel:
    pool = training_pool(folds, test_fold)
    model = fit_logreg(ds.features[pool], ds.labels[pool], ds.label_mask[pool], l2, max_iter, tol)
    for msg in model.warnings:
        log.warning("logistic baseline fold %d %s", test_fold, msg)
    return model


# ---------------------------------------------------------------------------
# cross-validation


def score_outcomes(prob: np.ndarray, labels: np.ndarray, mask: np.ndarray, sensitivity: float = 0.85) -> dict:
    """Per-outcome AUROC/AUPRC/operating point plus macro averages."""
    outcomes = {}
    for c in range(labels.shape[1]):
        m = mask[:, c]
        s, y = prob[m, c], labels[m, c]
        op = metrics_at_sensitivity(s, y, sensitivity)
        outcomes[OUTCOMES[c]] = {
            "n": int(m.sum()),
            "n_positive": int(y.sum()),
            "auroc": auroc(s, y),
            "auprc": auprc(s, y),
            "at_sensitivity": op.to_dict() if op is not None else None,
        }
    mauc = macro_average(o["auroc"] for o in outcomes.values())
    maps = macro_average(o["auprc"] for o in outcomes.values())
    return {
        "outcomes": outcomes,
        "macro_auroc": mauc.value,
        "macro_auprc": maps.value,
        "excluded_auroc": mauc.n_excluded,
        "excluded_auprc": maps.n_excluded,
    }


def _mean_se(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return mean, se


def aggregate_folds(fold_reports: list[dict]) -> dict:
    """Mean and standard error over folds; macro values average the aggregated outcomes."""
    names = list(fold_reports[0]["outcomes"])
    out = {}
    for name in names:
        entry = {}
        for metric in ("auroc", "auprc"):
            mean, se = _mean_se([f["outcomes"][name][metric] for f in fold_reports])
            entry[f"{metric}_mean"], entry[f"{metric}_se"] = mean, se
        for metric in ("specificity", "precision", "accuracy", "sensitivity"):
            vals = [f["outcomes"][name]["at_sensitivity"] for f in fold_reports]
            mean, se = _mean_se([v[metric] if v else None for v in vals])
            entry[f"{metric}_at_sensitivity_mean"], entry[f"{metric}_at_sensitivity_se"] = mean, se
        out[name] = entry
    mauc = macro_average(e["auroc_mean"] for e in out.values())
    maps = macro_average(e["auprc_mean"] for e in out.values())
    fold_auc = _mean_se([f["macro_auroc"] for f in fold_reports])
    fold_ap = _mean_se([f["macro_auprc"] for f in fold_reports])
    return {
        "outcomes": out,
        "macro_auroc": mauc.value,
        "macro_auprc": maps.value,
        "macro_auroc_se": fold_auc[1],
        "macro_auprc_se": fold_ap[1],
        "excluded_auroc": mauc.n_excluded,
        "excluded_auprc": maps.n_excluded,
    }


@dataclass
class FoldResult:
    fold: int
    test_rows: np.ndarray
    prob: np.ndarray
    report: dict
    norm: NormStats
    params: Parameters | None = None
    history: TrainHistory | None = None
    baseline_prob: np.ndarray | None = None
    baseline_report: dict | None = None
    baseline_warnings: list = field(default_factory=list)


def run_fold(raw: Dataset, folds: FoldAssignment, fold: int, model_cfg: ModelConfig | None,
             train_cfg: TrainConfig | None, sensitivity: float = 0.85, baseline_l2: float | None = 1e-2
             ) -> FoldResult:
    """Normalize on the training pool, fit, and score target rows of ``fold``."""
    pool = training_pool(folds, fold)
    stats = fit_normalizer(raw, pool)
    ds = apply_normalizer(raw, stats)
    test = folds.test_rows(fold)
    labels, mask = ds.labels[test], ds.label_mask[test]
    res = FoldResult(fold, test, None, None, stats)
    if model_cfg is not None:
        try:
            params, history = train(ds, folds, fold, model_cfg, train_cfg)
        except TrainingAborted as exc:
            raise TrainingAborted(exc.term, exc.batch_index, exc.epoch, exc.detail, fold) from exc
        prob = infer(params, ds.features[test])["prob"]
        res.prob, res.params, res.history = prob, params, history
        res.report = {"fold": fold, "n_test": int(test.size), **score_outcomes(prob, labels, mask, sensitivity)}
    if baseline_l2 is not None:
        lr = train_logreg_baseline(ds, folds, fold, baseline_l2)
        bprob = 0.5 * (1.0 + np.tanh(0.5 * lr.decision(ds.features[test])))
        res.baseline_prob = bprob
        res.baseline_report = {"fold": fold, "n_test": int(test.size),
                               **score_outcomes(bprob, labels, mask, sensitivity)}
        res.baseline_warnings = lr.warnings
    return res


def cross_validate(raw: Dataset, k: int = 5, model_cfg: ModelConfig | None = None,
                   train_cfg: TrainConfig | None = None, target_group: int = 0, strat_outcome: int = 1,
                   fold_seed: int = 0, sensitivity: float = 0.85, baseline_l2: float | None = 1e-2,
                   jobs: int = 1):
    """k-fold evaluation on the target group; other groups always train.

    Returns ``(folds, fold_results, aggregate, baseline_aggregate)``.
    ``model_cfg=None`` runs only the logistic baseline.
    """
    folds = stratified_folds(raw, k, target_group, strat_outcome, fold_seed)
    args = [(raw, folds, f, model_cfg, train_cfg, sensitivity, baseline_l2) for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(run_fold, *zip(*args)))
    else:
        results = [run_fold(*a) for a in args]
    agg = aggregate_folds([r.report for r in results]) if model_cfg is not None else None
    base = aggregate_folds([r.baseline_report for r in results]) if baseline_l2 is not None else None
    return folds, results, agg, base
