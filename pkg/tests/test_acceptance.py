"""End-to-end acceptance checks.

The heavy criteria (6 to 9) share one run of ``surgvae synth`` plus
``surgvae crossval`` on the default configuration; it takes roughly 20
minutes on one core. A summary line per criterion is printed at the end of
the session.
"""
from __future__ import annotations

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from surgvae import autodiff as ad
from surgvae import cli
from surgvae import losses as L
from surgvae.checkpoint import load_checkpoint
from surgvae.data import OUTCOMES, SynthConfig, apply_normalizer, load_csv, load_oracle_csv, stratified_folds, synth_generate
from surgvae.interpret import integrated_gradients, linear_scorer, model_scorer, silhouette, tsne
from surgvae.metrics import auprc, auroc, metrics_at_sensitivity
from surgvae.model import infer
from surgvae.training import aggregate_folds, score_outcomes

from batches import grad_batch, term_checks, total_loss_of
from oracles import (
    auprc_rank_walk,
    auroc_pairs,
    kl_monte_carlo,
    mmd_two_point,
    random_metric_instance,
    sensitivity_sweep,
    three_blobs,
    total_correlation_monte_carlo,
)
from test_losses import correlated_batch, factorized_batch, tc_of

# Bayes-oracle macro-AUROC on the default synthetic set (seed 7), averaged over
# the five default folds the same way the report aggregates surgVAE.
RECORDED_ORACLE_MACRO_AUROC = 0.9123

criterion = pytest.mark.criterion


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


# ---------------------------------------------------------------------------
# shared heavy run


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_run")
    data = root / "data.csv"
    out = root / "cv"
    start = time.perf_counter()
    assert cli.main(["-q", "synth", "--out", str(data)]) == 0
    code = cli.main(["-q", "crossval", "--data", str(data), "--out", str(out)])
    elapsed = time.perf_counter() - start
    assert code == 0
    return root, elapsed


def read_report(root: Path) -> dict:
    return json.loads((root / "cv" / "report.json").read_text())


def prediction_folds(root: Path) -> dict[str, int]:
    with open(root / "cv" / "predictions.csv", newline="") as fh:
        return {r["case_id"]: int(r["fold"]) for r in csv.DictReader(fh)}


def oracle_aggregate(root: Path) -> dict:
    """Score the generating probabilities on the report's own folds, aggregated like the report."""
    ds = load_csv(root / "data.csv")
    ids, probs = load_oracle_csv(root / "data.oracle.csv")
    assert list(ids) == list(ds.case_ids)
    fold_of = prediction_folds(root)
    folds = np.array([fold_of.get(c, -1) for c in ds.case_ids])
    reports = []
    for f in range(5):
        rows = np.flatnonzero(folds == f)
        reports.append(score_outcomes(probs[rows], ds.labels[rows], ds.label_mask[rows]))
    return aggregate_folds(reports)


def learning_numbers(root: Path) -> dict:
    rep = read_report(root)
    return {
        "surgvae": rep["aggregate"]["macro_auroc"],
        "baseline": rep["baseline"]["aggregate"]["macro_auroc"],
        "oracle": oracle_aggregate(root)["macro_auroc"],
    }


def separation_trend(root: Path) -> list[tuple[bool, bool]]:
    out = []
    for fold in read_report(root)["folds"]:
        snaps = fold["history"]["snapshots"]
        first, last = snaps[0], snaps[-1]
        assert first["epoch"] == 1 and last["epoch"] == len(fold["history"]["epochs"])
        out.append((last["z1_mmd"] < first["z1_mmd"], last["z2_cross_distance"] > first["z2_cross_distance"]))
    return out


def trained_model(root: Path):
    ck = load_checkpoint(root / "cv" / "checkpoints" / "fold0.json")
    raw = load_csv(root / "data.csv")
    return ck, raw, apply_normalizer(raw, ck.norm)


def completeness(root: Path, n_rows=16):
    ck, raw, ds = trained_model(root)
    fold_of = prediction_folds(root)
    rows = [i for i, c in enumerate(raw.case_ids) if fold_of.get(c) == 0][:n_rows]
    scorer = model_scorer(ck.params)
    coarse = np.stack([integrated_gradients(scorer, ds.features[r], steps=8).residual for r in rows])
    fine = np.stack([integrated_gradients(scorer, ds.features[r], steps=256).residual for r in rows])
    return coarse, fine


FIGURE_OUTCOMES = ("y_af", "y_aki", "y_transfusion")


def outcome_silhouettes(root: Path, seed=0):
    """Silhouette by outcome class of held-out target cases, latent means vs raw features.

    Uses the fold-0 test rows (unseen by the fold-0 model) and the three common
    outcomes shown in the published latent-space figure.
    """
    ck, raw, ds = trained_model(root)
    fold_of = prediction_folds(root)
    rows = np.array([i for i, c in enumerate(raw.case_ids) if fold_of.get(c) == 0])
    x = ds.features[rows]
    mu = infer(ck.params, x)["mu"]
    emb = {"latent": tsne(mu, seed=seed), "raw": tsne(x, seed=seed)}
    out = {"perplexity_error": max(np.abs(e.perplexity - 30.0).max() for e in emb.values())}
    for name in FIGURE_OUTCOMES:
        c = OUTCOMES.index(name)
        m = ds.label_mask[rows, c]
        y = ds.labels[rows, c][m]
        out[name] = {
            "latent": silhouette(mu[m], y),
            "raw": silhouette(x[m], y),
            "latent_tsne": silhouette(emb["latent"].coords[m], y),
            "raw_tsne": silhouette(emb["raw"].coords[m], y),
        }
    # surgery-group structure, reported only: the invariant half of the latent is trained to hide it
    pool = np.array([i for i, c in enumerate(raw.case_ids) if fold_of.get(c) != 0])
    pick = np.sort(np.random.default_rng(seed).choice(pool, size=800, replace=False))
    out["by_surgery_group"] = (silhouette(infer(ck.params, ds.features[pick])["mu"], ds.groups[pick]),
                               silhouette(ds.features[pick], ds.groups[pick]))
    return out


# ---------------------------------------------------------------------------
# 1. gradients


@criterion(1, "gradient correctness of every loss term and the total")
def test_criterion_1_gradients(request):
    start = time.perf_counter()
    worst = 0.0
    for name, f, x0 in term_checks(seed=0, n=8, F=20, d=8):
        rep = ad.gradient_check(f, x0, h=1e-5, tol=1e-4)
        assert rep.passed, (name, rep.max_rel_error)
        worst = max(worst, rep.max_rel_error)
    batch = grad_batch(0, n=8, F=20, d=8)
    base, for_param = total_loss_of(batch)
    for name in base.names():
        rep = ad.gradient_check(for_param(name), base[name], h=1e-5, tol=1e-4)
        assert rep.passed, (name, rep.max_rel_error)
        worst = max(worst, rep.max_rel_error)
    elapsed = time.perf_counter() - start
    _detail(request, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 2. closed forms


@criterion(2, "closed-form loss oracles")
def test_criterion_2_closed_forms(request):
    g = ad.Graph()
    assert abs(float(L.kld_loss(g.const([[0.0]]), g.const([[0.0]])).value)) <= 1e-12
    assert abs(float(L.kld_loss(g.const([[1.0]]), g.const([[0.0]])).value) - 0.5) <= 1e-12

    rng = np.random.default_rng(0)
    mu = rng.normal(size=(4, 3))
    lv = rng.uniform(-1.0, 1.0, size=(4, 3))
    exact = float(L.kld_loss(g.const(mu), g.const(lv)).value)
    est, se = kl_monte_carlo(mu, lv, 100_000, rng)
    assert abs(est - exact) < 3 * se

    pts = rng.normal(size=(5, 3))
    assert abs(float(L.mmd_loss(g.const(np.vstack([pts, pts])), [0] * 5 + [1] * 5).value)) <= 1e-12
    a, b = np.array([0.2, -0.7, 1.0]), np.array([1.5, 0.1, -0.3])
    for s2 in (0.3, 1.0, 4.0):
        got = float(L.mmd_loss(g.const(np.vstack([a, b])), [0, 1], bandwidth=s2, min_rows=1).value)
        assert abs(got - mmd_two_point(a, b, s2)) <= 1e-12

    cases = [
        (np.ones((3, 2)), [0, 0, 0], 1.0, 0.0),
        (np.array([[0.0, 0.0], [0.6, 0.8]]), [0, 1], 1.0, 0.0),
        (np.array([[0.3], [0.3]]), [0, 1], 1.0, 0.5),
    ]
    for z, groups, margin, want in cases:
        assert abs(float(L.contrastive_loss(g.const(z), groups, margin).value) - want) <= 1e-12
    _detail(request, f"KL MC gap {abs(est - exact):.2e} (3 SE = {3 * se:.2e})")


# ---------------------------------------------------------------------------
# 3. total correlation


@criterion(3, "total-correlation estimator sanity")
def test_criterion_3_total_correlation(request):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    z, mu, lv, sd = factorized_batch()
    fact = tc_of(z, mu, lv)
    fact_oracle, _ = total_correlation_monte_carlo(mu, sd, 4000, rng)
    z, mu, lv, sd = correlated_batch()
    corr = tc_of(z, mu, lv)
    corr_oracle, corr_se = total_correlation_monte_carlo(mu, sd, 4000, rng)
    elapsed = time.perf_counter() - start
    _detail(request, f"factorized {fact:.4f} (oracle {fact_oracle:.1e}), correlated {corr:.3f} "
                     f"(oracle {corr_oracle:.3f}), {elapsed:.1f}s")
    assert abs(fact_oracle) < 0.05 and abs(fact) < 0.05
    assert corr_oracle > 0.5 and corr > 0.5
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 4. metrics


@criterion(4, "metric oracles on 1000 random instances")
def test_criterion_4_metric_oracles(request):
    rng = np.random.default_rng(2024)
    ties = 0
    for _ in range(1000):
        s, y = random_metric_instance(rng, n_max=12)
        ties += len(set(s.tolist())) < s.size
        s_l, y_l = s.tolist(), y.tolist()
        ref_auc, got_auc = auroc_pairs(s_l, y_l), auroc(s, y)
        assert (ref_auc is None) == (got_auc is None)
        if ref_auc is not None:
            assert abs(got_auc - ref_auc) <= 1e-12
        ref_ap, got_ap = auprc_rank_walk(s_l, y_l), auprc(s, y)
        assert (ref_ap is None) == (got_ap is None)
        if ref_ap is not None:
            assert abs(got_ap - ref_ap) <= 1e-12
        ref_op, got_op = sensitivity_sweep(s_l, y_l, 0.85), metrics_at_sensitivity(s, y, 0.85)
        assert (ref_op is None) == (got_op is None)
        if ref_op is not None:
            for key, val in ref_op.items():
                got = getattr(got_op, key)
                assert (val is None and got is None) or abs(got - val) <= 1e-12, key
    _detail(request, f"{ties} of 1000 instances contain ties")


# ---------------------------------------------------------------------------
# 5. stratification


@criterion(5, "stratified folds on the default synthetic set")
def test_criterion_5_stratification(request):
    ds = synth_generate(SynthConfig()).dataset
    target = np.flatnonzero(ds.groups == 0)
    assert target.size == 6000
    rates = ds.labels[target].mean(axis=0)
    rarest = int(np.argmin(rates))
    assert OUTCOMES[rarest] == "y_arrest" and abs(rates[rarest] - 0.0040) <= 0.0005
    fa = stratified_folds(ds, 5, strat_outcome=rarest)
    counts = [int(ds.labels[fa.test_rows(f), rarest].sum()) for f in range(5)]
    assert max(counts) - min(counts) <= 1
    tested = np.concatenate([fa.test_rows(f) for f in range(5)])
    assert np.array_equal(np.sort(tested), target)
    _detail(request, f"arrest rate {rates[rarest]:.4f}, positives per fold {counts}")


# ---------------------------------------------------------------------------
# 6 to 9: default run


@criterion(6, "end-to-end learning on the default benchmark")
def test_criterion_6_learning(request, default_run):
    root, elapsed = default_run
    n = learning_numbers(root)
    _detail(request, f"surgVAE {n['surgvae']:.4f}, logistic {n['baseline']:.4f}, oracle {n['oracle']:.4f}, "
                     f"{elapsed / 60:.1f} min")
    assert abs(n["oracle"] - RECORDED_ORACLE_MACRO_AUROC) < 5e-4
    assert n["surgvae"] >= 0.80
    assert n["surgvae"] >= n["oracle"] - 0.10
    assert n["surgvae"] >= n["baseline"] - 0.02
    assert elapsed < 30 * 60


@criterion(7, "disentanglement trend in at least 4 of 5 folds")
def test_criterion_7_disentanglement(request, default_run):
    trend = separation_trend(default_run[0])
    both = sum(a and b for a, b in trend)
    _detail(request, f"{both}/5 folds (z1 MMD down, z2 distance up per fold: {trend})")
    assert both >= 4


@criterion(8, "Integrated Gradients exactness and completeness")
def test_criterion_8_integrated_gradients(request, default_run):
    rng = np.random.default_rng(8)
    for steps in (1, 2, 3, 8, 64, 256, 1000):
        w, x = rng.normal(size=(2, 40))
        a = integrated_gradients(linear_scorer(w, 0.7), x, steps=steps)
        assert np.abs(a.values[0] - w * x).max() < 1e-12
    coarse, fine = completeness(default_run[0])
    _detail(request, f"max residual m=256 {fine.max():.2e}, mean m=8 {coarse.mean():.2e} vs m=256 {fine.mean():.2e}")
    assert fine.max() < 1e-3
    assert fine.mean() < coarse.mean()


@criterion(9, "t-SNE calibration, blob separation, latent outcome structure")
def test_criterion_9_tsne(request, default_run):
    pts, labels = three_blobs(seed=0, n=300, sigma=0.1, spacing=10.0)
    proj = tsne(pts, perplexity=30.0, seed=0)
    blob = silhouette(proj.coords, labels)
    assert np.abs(proj.perplexity - 30.0).max() < 1e-4
    assert blob > 0.6
    s = outcome_silhouettes(default_run[0])
    parts = [f"{o[2:]} latent {v['latent']:.3f} vs raw {v['raw']:.3f}, "
             f"t-SNE {v['latent_tsne']:.3f} vs {v['raw_tsne']:.3f}" for o, v in ((o, s[o]) for o in FIGURE_OUTCOMES)]
    g_lat, g_raw = s["by_surgery_group"]
    _detail(request, f"blobs {blob:.3f}; by outcome: " + "; ".join(parts)
            + f"; by surgery group (not asserted) latent {g_lat:.3f} vs raw {g_raw:.3f}")
    assert s["perplexity_error"] < 1e-4
    for o in FIGURE_OUTCOMES:
        assert s[o]["latent"] > s[o]["raw"], o
        assert s[o]["latent_tsne"] > s[o]["raw_tsne"], o


# ---------------------------------------------------------------------------
# 10. determinism


@criterion(10, "byte-identical cross-validation reruns")
def test_criterion_10_determinism(request, tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({
        "synth": {"rows_per_group": 100, "groups": 3, "n_features": 16, "rates": [0.2, 0.05, 0.1, 0.3, 0.3, 0.1]},
        "train": {"epochs": 3, "eval_every": 2},
        "model": {"enc_hidden": 16, "dec_hidden": 16, "head_hidden": 8, "d1": 4, "d2": 4},
    }))
    data = tmp_path / "d.csv"
    assert cli.main(["-q", "synth", "--config", str(cfg), "--out", str(data)]) == 0
    outs = []
    for name, jobs in (("a", "1"), ("b", "1"), ("c", "2")):
        out = tmp_path / name
        assert cli.main(["-q", "crossval", "--data", str(data), "--config", str(cfg), "--out", str(out),
                         "--jobs", jobs]) == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert any(f.suffix == ".json" and f.parent.name == "checkpoints" for f in files)
    assert any(f.suffix == ".csv" for f in files)
    for other in outs[1:]:
        assert sorted(p.relative_to(other) for p in other.rglob("*") if p.is_file()) == files
        for f in files:
            assert (outs[0] / f).read_bytes() == (other / f).read_bytes(), str(f)
    _detail(request, f"{len(files)} files identical across 3 runs (one with 2 jobs)")
