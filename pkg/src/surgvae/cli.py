"""Command-line entry point: synth, crossval, explain, project, baseline.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or data error,
4 numerical abort during training.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, dump_json, load_checkpoint, save_checkpoint
from .config import load_config
from .data import (OUTCOMES, Dataset, apply_normalizer, load_csv, outcome_index, save_csv, save_oracle_csv,
                   synth_generate)
from .errors import (ConfigError, NonFiniteError, ParseError, SchemaError, SurgVAEError, TrainingAborted,
                     UsageError)
from .interpret import integrated_gradients, model_scorer, normalize_importance, top_k, tsne
from .metrics import curve_points
from .model import infer
from .plots import line_plot, scatter_plot
from .training import cross_validate

log = logging.getLogger("surgvae")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
# attribution summary embedded in the cross-validation report
SUMMARY_ROWS, SUMMARY_STEPS = 32, 32


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v))


def _read_data(path, expected_F=None) -> Dataset:
    try:
        return load_csv(path, expected_F)
    except UsageError as exc:
        raise SchemaError(str(exc)) from exc


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _data_summary(path, ds: Dataset, target_group):
    return {
        "file": Path(path).name,
        "sha256": _sha256(path),
        "rows": ds.n,
        "target_rows": int((ds.groups == target_group).sum()),
        "groups": ds.n_groups,
        "n_features": ds.n_features,
    }


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    cfg = load_config(args.config)
    synth = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    draw = synth_generate(synth)
    out = Path(args.out)
    save_csv(draw.dataset, out)
    oracle_path = out.with_suffix(".oracle.csv")
    save_oracle_csv(draw.dataset.case_ids, draw.oracle, oracle_path)
    tg = draw.dataset.groups == synth.target_group
    rates = draw.dataset.labels[tg].mean(axis=0)
    log.info("wrote %s (%d rows) and %s; target rates %s", out, draw.dataset.n, oracle_path,
             ", ".join(f"{o}={r:.4f}" for o, r in zip(OUTCOMES, rates)))


# ---------------------------------------------------------------------------
# crossval / baseline


def _fold_block(report, history=None):
    block = dict(report)
    if history is not None:
        block["history"] = history.to_dict()
    return block


def _attribution_summary(result, ds: Dataset):
    """Top-10 mean |IG| features per outcome on the first test rows of one fold."""
    rows = result.test_rows[:SUMMARY_ROWS]
    x = apply_normalizer(ds, result.norm).features[rows]
    scorer = model_scorer(result.params)
    attrs = [integrated_gradients(scorer, xi, steps=SUMMARY_STEPS) for xi in x]
    out = {"fold": result.fold, "rows": int(rows.size), "steps": SUMMARY_STEPS, "outcomes": {}}
    names = ds.feature_names
    for c, name in enumerate(OUTCOMES[: result.params.cfg.n_outcomes]):
        pct = normalize_importance(np.stack([a.values[c] for a in attrs]))
        resid = max(float(a.residual[c]) for a in attrs)
        top = [] if pct is None else [{"feature": names[i], "percent": float(pct[i])} for i in top_k(pct, 10)]
        out["outcomes"][name] = {"top10": top, "max_completeness_residual": resid}
    return out


def _write_curves(out: Path, ds: Dataset, results, attr: str, stem: str):
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    for c, name in enumerate(OUTCOMES[: ds.n_outcomes]):
        roc_rows, pr_rows, roc_series, pr_series = [], [], [], []
        for r in results:
            prob = getattr(r, attr)
            m = ds.label_mask[r.test_rows, c]
            cur = curve_points(prob[m, c], ds.labels[r.test_rows, c][m])
            if cur is None:
                continue
            for t, fx, ty in zip(cur.roc_thresholds, cur.fpr, cur.tpr):
                roc_rows.append([r.fold, _fmt(t), _fmt(fx), _fmt(ty)])
            for t, rc, pc in zip(cur.pr_thresholds, cur.recall, cur.precision):
                pr_rows.append([r.fold, _fmt(t), _fmt(rc), _fmt(pc)])
            roc_series.append((f"fold {r.fold}", cur.fpr, cur.tpr))
            pr_series.append((f"fold {r.fold}", cur.recall, cur.precision))
        _write_csv(out / "curves" / f"{stem}roc_{name}.csv", ["fold", "threshold", "fpr", "tpr"], roc_rows)
        _write_csv(out / "curves" / f"{stem}pr_{name}.csv", ["fold", "threshold", "recall", "precision"], pr_rows)
        line_plot(out / "plots" / f"{stem}roc_{name}.svg", roc_series, f"ROC {name}", "1 - specificity",
                  "sensitivity", diagonal=True)
        line_plot(out / "plots" / f"{stem}pr_{name}.svg", pr_series, f"PR {name}", "recall", "precision")


def _write_predictions(path, ds: Dataset, results, attr: str):
    rows = []
    for r in results:
        prob = getattr(r, attr)
        for i, row in enumerate(r.test_rows):
            rows.append((int(row), [ds.case_ids[row], r.fold, *[_fmt(p) for p in prob[i]]]))
    rows.sort(key=lambda t: t[0])
    _write_csv(path, ["case_id", "fold", *[f"p_{o[2:]}" for o in OUTCOMES[: ds.n_outcomes]]], [r for _, r in rows])


def _run_cv(args, with_model: bool):
    cfg = load_config(args.config)
    ds = _read_data(args.data)
    d = cfg.data
    if ds.n_outcomes != len(OUTCOMES):
        raise SchemaError(f"expected {len(OUTCOMES)} outcomes, found {ds.n_outcomes}")
    model_cfg = cfg.model_config(ds.n_features, ds.n_groups) if with_model else None
    jobs = getattr(args, "jobs", 1)
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    folds, results, agg, base = cross_validate(
        ds, d.k, model_cfg, cfg.train, d.target_group, d.strat_index, d.fold_seed, d.sensitivity, d.baseline_l2,
        jobs=jobs)
    header = {
        "tool": "surgvae",
        "version": __version__,
        "seed": cfg.train.seed,
        "config": cfg.to_dict(),
        "data": _data_summary(args.data, ds, d.target_group),
    }
    baseline = {
        "model": "logistic_regression",
        "l2": d.baseline_l2,
        "folds": [_fold_block(r.baseline_report) for r in results],
        "aggregate": base,
        "warnings": [f"fold {r.fold} {w}" for r in results for w in r.baseline_warnings],
    }
    return cfg, ds, folds, results, agg, header, baseline


def cmd_crossval(args):
    cfg, ds, folds, results, agg, header, baseline = _run_cv(args, with_model=True)
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    for r in results:
        ck = Checkpoint(r.params, r.norm, cfg.train.seed, cfg.weights, r.fold, cfg.data.target_group)
        save_checkpoint(ck, out / "checkpoints" / f"fold{r.fold}.json")
    _write_curves(out, ds, results, "prob", "")
    _write_predictions(out / "predictions.csv", ds, results, "prob")
    report = {
        **header,
        "model": "surgvae",
        "folds": [_fold_block(r.report, r.history) for r in results],
        "aggregate": agg,
        "baseline": baseline,
        "attribution": _attribution_summary(results[0], ds),
    }
    dump_json(report, out / "report.json")
    log.info("macro AUROC %.4f (baseline %.4f), macro AUPRC %.4f", agg["macro_auroc"],
             baseline["aggregate"]["macro_auroc"], agg["macro_auprc"])
    undefined = agg["excluded_auroc"] or agg["excluded_auprc"]
    return 1 if undefined else 0


def cmd_baseline(args):
    cfg, ds, folds, results, agg, header, baseline = _run_cv(args, with_model=False)
    report = {**header, **baseline}
    dump_json(report, args.out)
    a = baseline["aggregate"]
    log.info("logistic macro AUROC %.4f, macro AUPRC %.4f", a["macro_auroc"], a["macro_auprc"])
    return 1 if a["excluded_auroc"] or a["excluded_auprc"] else 0


# ---------------------------------------------------------------------------
# explain / project


def _load_for_checkpoint(args):
    ck = load_checkpoint(args.checkpoint)
    ds = _read_data(args.data, ck.cfg.n_features)
    return ck, ds, apply_normalizer(ds, ck.norm)


def cmd_explain(args):
    try:
        c = outcome_index(args.outcome)
    except SurgVAEError as exc:
        raise CliError(EXIT_CONFIG, f"unknown outcome '{args.outcome}'; valid names: {', '.join(OUTCOMES)}") from exc
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    ck, raw, ds = _load_for_checkpoint(args)
    scorer = model_scorer(ck.params, c)
    attrs = [integrated_gradients(scorer, xi, steps=args.steps) for xi in ds.features]
    values = np.stack([a.values[0] for a in attrs])
    residual = max(float(a.residual[0]) for a in attrs)
    pct = normalize_importance(values)
    if pct is None:
        raise CliError(EXIT_IO, "all attributions are zero; importance undefined")
    raw_score = np.abs(values).mean(axis=0)
    order = top_k(pct, pct.size)
    rank = np.empty(pct.size, dtype=int)
    rank[order] = np.arange(1, pct.size + 1)
    names = raw.feature_names
    name = OUTCOMES[c]
    _write_csv(args.out, ["outcome", "feature", "raw_score", "percent", "rank", "completeness_residual"],
               [[name, names[f], _fmt(raw_score[f]), _fmt(pct[f]), int(rank[f]), _fmt(residual)]
                for f in range(pct.size)])
    top_path = Path(str(args.out) + ".top10.csv") if not str(args.out).endswith(".csv") else \
        Path(str(args.out)[:-4] + ".top10.csv")
    _write_csv(top_path, ["rank", "feature", "percent"],
               [[i + 1, names[f], _fmt(pct[f])] for i, f in enumerate(order[:10])])
    log.info("attributed %d rows for %s; max completeness residual %.2e", values.shape[0], name, residual)


def cmd_project(args):
    ck, raw, ds = _load_for_checkpoint(args)
    rows = np.flatnonzero(ds.groups == ck.target_group)
    if rows.size == 0:
        raise UsageError(f"no rows of target group {ck.target_group}")
    if rows.size > 10_000:
        raise UsageError(f"{rows.size} target rows exceed the exact t-SNE limit of 10000")
    mu = infer(ck.params, ds.features[rows])["mu"]
    proj = tsne(mu, perplexity=args.perplexity, seed=args.seed)
    out = Path(args.out)
    _write_csv(out, ["case_id", "dim1", "dim2", "group", *OUTCOMES[: raw.n_outcomes]],
               [[raw.case_ids[r], _fmt(x), _fmt(y), int(raw.groups[r]),
                 *[("" if not raw.label_mask[r, c] else int(raw.labels[r, c])) for c in range(raw.n_outcomes)]]
                for r, (x, y) in zip(rows, proj.coords)])
    colour = np.where(raw.label_mask[rows, 0], raw.labels[rows, 0].astype(int).astype(str), "missing")
    scatter_plot(out.with_suffix(".svg"), proj.coords, [f"{OUTCOMES[0]}={v}" for v in colour],
                 title=f"t-SNE of latent means (KL {proj.kl_final:.3f})")
    log.info("embedded %d rows; KL %.4f -> %.4f", rows.size, proj.kl_initial, proj.kl_final)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surgvae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"surgvae {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a planted-latent synthetic cohort")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("crossval", help="k-fold cross-validation of surgVAE on the target group")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("explain", help="Integrated Gradients attribution for one outcome")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--outcome", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=64)
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("project", help="t-SNE of target-group latent means")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--perplexity", type=float, default=30.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("baseline", help="cross-validated logistic-regression baseline")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        code = args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, UsageError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, SchemaError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SurgVAEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
