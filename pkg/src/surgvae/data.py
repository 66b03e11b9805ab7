"""Cohort tables: CSV schema, normalization, fold assignment, synthetic draws."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CalibrationError, DimensionError, ParseError, SchemaError, UsageError

OUTCOMES = ("y_af", "y_arrest", "y_dvtpe", "y_aki", "y_transfusion", "y_intraop")
# AF, arrest, DVT/PE, AKI, transfusion, intraoperative events (cardiac cohort)
COHORT_RATES = (0.2587, 0.0040, 0.0217, 0.3216, 0.3104, 0.0451)
DEFAULT_F = 663


def feature_names(n_features: int) -> list[str]:
    return [f"f_{i:04d}" for i in range(1, n_features + 1)]


def outcome_index(name: str) -> int:
    key = name if name.startswith("y_") else f"y_{name}"
    if key not in OUTCOMES:
        raise UsageError(f"unknown outcome '{name}'; valid: {', '.join(OUTCOMES)}")
    return OUTCOMES.index(key)


@dataclass(frozen=True, eq=False)
class Dataset:
    case_ids: np.ndarray
    groups: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray
    features: np.ndarray
    feature_mask: np.ndarray

    def __post_init__(self):
        n = len(self.case_ids)
        for name in ("groups", "labels", "label_mask", "features", "feature_mask"):
            if getattr(self, name).shape[0] != n:
                raise DimensionError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if self.labels.shape != self.label_mask.shape:
            raise DimensionError("labels and label_mask shapes differ")
        if self.features.shape != self.feature_mask.shape:
            raise DimensionError("features and feature_mask shapes differ")
        if n and self.groups.min() < 0:
            raise UsageError("group indices must be nonnegative")
        obs = self.labels[self.label_mask]
        if not np.isin(obs, (0.0, 1.0)).all():
            raise UsageError("observed labels must be 0 or 1")
        for arr in (self.groups, self.labels, self.label_mask, self.features, self.feature_mask):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return len(self.case_ids)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_outcomes(self) -> int:
        return self.labels.shape[1]

    @property
    def n_groups(self) -> int:
        return int(self.groups.max()) + 1 if self.n else 0

    @property
    def feature_names(self) -> list[str]:
        return feature_names(self.n_features)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(
            case_ids=self.case_ids[rows],
            groups=self.groups[rows].copy(),
            labels=self.labels[rows].copy(),
            label_mask=self.label_mask[rows].copy(),
            features=self.features[rows].copy(),
            feature_mask=self.feature_mask[rows].copy(),
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.case_ids, other.case_ids)
            and np.array_equal(self.groups, other.groups)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.label_mask, other.label_mask)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.feature_mask, other.feature_mask)
        )


# ---------------------------------------------------------------------------
# CSV


def _header(n_features: int) -> list[str]:
    return ["case_id", "group", *OUTCOMES, *feature_names(n_features)]


def load_csv(path, expected_F: int | None = None) -> Dataset:
    """Read a cohort table. Empty cells are unobserved."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        fixed = ["case_id", "group", *OUTCOMES]
        for col in fixed:
            if col not in header:
                raise SchemaError(f"{path}: missing mandatory column '{col}'")
        if header[: len(fixed)] != fixed:
            raise SchemaError(f"{path}: columns must start with {','.join(fixed)}")
        n_feat = len(header) - len(fixed)
        if expected_F is not None and n_feat != expected_F:
            raise SchemaError(f"{path}: expected {expected_F} feature columns, found {n_feat}")
        if header[len(fixed) :] != feature_names(n_feat):
            expected = feature_names(n_feat)
            for got, want in zip(header[len(fixed) :], expected):
                if got != want:
                    raise SchemaError(f"{path}: feature column '{got}' found where '{want}' expected")
        rows = list(reader)

    n = len(rows)
    C = len(OUTCOMES)
    case_ids = np.empty(n, dtype=object)
    groups = np.empty(n, dtype=np.int64)
    labels = np.zeros((n, C))
    label_mask = np.zeros((n, C), dtype=bool)
    features = np.zeros((n, n_feat))
    feature_mask = np.zeros((n, n_feat), dtype=bool)
    width = len(header)
    for r, row in enumerate(rows):
        line = r + 2
        if len(row) != width:
            raise ParseError(f"{path}: row {line} has {len(row)} cells, expected {width}")
        case_ids[r] = row[0]
        try:
            g = int(row[1])
        except ValueError:
            raise ParseError(f"{path}: row {line}, column group: '{row[1]}' is not an integer") from None
        if g < 0:
            raise ParseError(f"{path}: row {line}, column group: negative group {g}")
        groups[r] = g
        for c in range(C):
            cell = row[2 + c].strip()
            if cell == "":
                continue
            if cell not in ("0", "1"):
                raise UsageError(f"{path}: row {line}, column {OUTCOMES[c]}: label '{cell}' not in {{0,1}}")
            labels[r, c] = float(cell)
            label_mask[r, c] = True
        for f, cell in enumerate(row[2 + C :]):
            if cell == "" or cell.isspace():
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: row {line}, column {header[2 + C + f]}: '{cell}' is not numeric"
                ) from None
            if not math.isfinite(v):
                raise ParseError(f"{path}: row {line}, column {header[2 + C + f]}: non-finite value")
            features[r, f] = v
            feature_mask[r, f] = True
    return Dataset(case_ids.astype(str), groups, labels, label_mask, features, feature_mask)


def save_csv(ds: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(ds.n_features))
        for i in range(ds.n):
            labs = [str(int(v)) if m else "" for v, m in zip(ds.labels[i], ds.label_mask[i])]
            feats = [repr(float(v)) if m else "" for v, m in zip(ds.features[i], ds.feature_mask[i])]
            w.writerow([ds.case_ids[i], int(ds.groups[i]), *labs, *feats])


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def fit_normalizer(ds: Dataset, rows=None) -> NormStats:
    """Per-feature mean and population std over observed entries of ``rows``."""
    rows = np.arange(ds.n) if rows is None else np.asarray(rows, dtype=np.intp)
    if rows.size == 0:
        raise UsageError("cannot fit normalizer on an empty row subset")
    x = ds.features[rows]
    m = ds.feature_mask[rows]
    count = m.sum(axis=0)
    safe = np.maximum(count, 1)
    mean = np.where(m, x, 0.0).sum(axis=0) / safe
    var = np.where(m, (x - mean) ** 2, 0.0).sum(axis=0) / safe
    std = np.sqrt(var)
    degenerate = (count == 0) | (std <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    std = np.where(degenerate, 1.0, std)
    mean = np.where(count == 0, 0.0, mean)
    return NormStats(mean, std)


def apply_normalizer(ds: Dataset, stats: NormStats) -> Dataset:
    """Standardize observed entries; unobserved entries become exactly 0."""
    if stats.mean.shape != (ds.n_features,) or stats.std.shape != (ds.n_features,):
        raise DimensionError(f"normalizer has length {stats.mean.shape[0]}, dataset has {ds.n_features} features")
    z = np.where(ds.feature_mask, (ds.features - stats.mean) / stats.std, 0.0)
    return replace(ds, features=z, feature_mask=ds.feature_mask.copy(), groups=ds.groups.copy(),
                   labels=ds.labels.copy(), label_mask=ds.label_mask.copy())


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    folds: np.ndarray
    k: int

    def test_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)


def stratified_folds(ds: Dataset, k: int = 5, target_group: int = 0, strat_outcome: int = 1,
                     seed: int = 0) -> FoldAssignment:
    """Deal target-group rows to ``k`` folds; other rows get fold -1.

    Positives of ``strat_outcome`` are dealt first, then the remaining rows
    ordered by the joint key of the other outcomes (shuffled within each
    key), continuing one round-robin pointer so fold sizes and positive
    counts each differ by at most one.
    """
    target = np.flatnonzero(ds.groups == target_group)
    if target.size < k:
        raise UsageError(f"target group has {target.size} rows, fewer than k={k}")
    rng = np.random.default_rng(seed)
    y = ds.labels[target]
    m = ds.label_mask[target]
    pos = m[:, strat_outcome] & (y[:, strat_outcome] == 1)
    pos_rows = rng.permutation(target[pos])

    rest = target[~pos]
    others = [c for c in range(ds.n_outcomes) if c != strat_outcome]
    if others:
        yr = np.where(m[~pos][:, others], y[~pos][:, others], -1.0)
        tiebreak = rng.permutation(rest.size)
        # primary key: joint label key; secondary: random order within key
        order = np.lexsort((tiebreak, *[yr[:, j] for j in reversed(range(len(others)))]))
        rest_rows = rest[order]
    else:
        rest_rows = rng.permutation(rest)

    folds = np.full(ds.n, -1, dtype=np.int64)
    sequence = np.concatenate([pos_rows, rest_rows])
    folds[sequence] = np.arange(sequence.size) % k
    return FoldAssignment(folds, k)


# ---------------------------------------------------------------------------
# planted-latent synthetic cohort


@dataclass(frozen=True)
class SynthConfig:
    rows_per_group: int = 6000
    groups: int = 4
    n_features: int = 128
    n_outcomes: int = 6
    latent_invariant: int = 8
    latent_specific: int = 4
    noise: float = 1.0
    signal: float = 2.5
    group_shift: float = 1.0
    group_mixing: float = 0.3
    rates: tuple = COHORT_RATES
    missing_rate: float = 0.1
    label_missing_rate: float = 0.0
    target_group: int = 0
    seed: int = 7

    def validate(self):
        if min(self.rows_per_group, self.groups, self.n_features, self.n_outcomes,
               self.latent_invariant, self.latent_specific) <= 0:
            raise UsageError("synthetic sizes and latent dims must be positive")
        if len(self.rates) != self.n_outcomes:
            raise UsageError(f"need {self.n_outcomes} target rates, got {len(self.rates)}")
        if not all(0.0 < r < 1.0 for r in self.rates):
            raise UsageError("target rates must lie in (0, 1)")
        if not 0.0 <= self.missing_rate < 1.0 or not 0.0 <= self.label_missing_rate < 1.0:
            raise UsageError("missingness rates must lie in [0, 1)")
        if self.noise < 0 or self.signal <= 0:
            raise UsageError("noise must be >= 0 and signal > 0")
        if not 0 <= self.target_group < self.groups:
            raise UsageError("target_group out of range")


@dataclass(frozen=True, eq=False)
class SynthDraw:
    dataset: Dataset
    oracle: np.ndarray  # n x C generating probabilities
    intercepts: np.ndarray
    latent_u: np.ndarray = field(repr=False)
    latent_v: np.ndarray = field(repr=False)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def calibrate_intercept(raw, uniforms, target, tol=0.005, steps=60):
    """Bisect an intercept so the empirical positive rate hits ``target``."""
    lo, hi = -40.0, 40.0

    def rate(b):
        return float(np.mean(uniforms < _sigmoid(raw + b)))

    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
    b = lo if abs(rate(lo) - target) <= abs(rate(hi) - target) else hi
    achieved = rate(b)
    if abs(achieved - target) > tol:
        raise CalibrationError(f"target rate {target:.4f} not reached; achieved {achieved:.4f}")
    return b


def synth_generate(cfg: SynthConfig) -> SynthDraw:
    """Linear-Gaussian cohort with shared and group-specific latents."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    G, F, C = cfg.groups, cfg.n_features, cfg.n_outcomes
    du, dv = cfg.latent_invariant, cfg.latent_specific

    A = rng.normal(size=(F, du)) / math.sqrt(du)
    B = rng.normal(size=(F, dv)) / math.sqrt(dv)
    B_g = B[None] + cfg.group_mixing * rng.normal(size=(G, F, dv)) / math.sqrt(dv)
    offsets = cfg.group_shift * rng.normal(size=(G, dv))
    beta = rng.normal(size=(C, du))
    gamma = rng.normal(size=(C, dv))
    norm = np.sqrt((beta**2).sum(1) + (gamma**2).sum(1))[:, None]
    beta, gamma = cfg.signal * beta / norm, cfg.signal * gamma / norm

    n = cfg.rows_per_group * G
    groups = np.repeat(np.arange(G), cfg.rows_per_group)
    u = rng.normal(size=(n, du))
    v = offsets[groups] + rng.normal(size=(n, dv))
    x = u @ A.T + np.einsum("nfk,nk->nf", B_g[groups], v) + cfg.noise * rng.normal(size=(n, F))
    raw = u @ beta.T + v @ gamma.T
    uniforms = rng.random((n, C))

    tg = groups == cfg.target_group
    intercepts = np.array(
        [calibrate_intercept(raw[tg, c], uniforms[tg, c], cfg.rates[c]) for c in range(C)]
    )
    prob = _sigmoid(raw + intercepts)
    labels = (uniforms < prob).astype(float)
    feature_mask = rng.random((n, F)) >= cfg.missing_rate
    label_mask = rng.random((n, C)) >= cfg.label_missing_rate
    width = len(str(n - 1))
    ds = Dataset(
        case_ids=np.array([f"S{i:0{width}d}" for i in range(n)]),
        groups=groups.astype(np.int64),
        labels=np.where(label_mask, labels, 0.0),
        label_mask=label_mask,
        features=np.where(feature_mask, x, 0.0),
        feature_mask=feature_mask,
    )
    return SynthDraw(ds, prob, intercepts, u, v)


def save_oracle_csv(case_ids: Sequence[str], oracle: np.ndarray, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", *[f"p_{o[2:]}" for o in OUTCOMES[: oracle.shape[1]]]])
        for cid, row in zip(case_ids, oracle):
            w.writerow([cid, *[repr(float(p)) for p in row]])


def load_oracle_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    ids = np.array([r[0] for r in rows])
    probs = np.array([[float(v) for v in r[1:]] for r in rows])
    return ids, probs
