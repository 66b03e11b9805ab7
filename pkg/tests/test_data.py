from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surgvae.data import (
    COHORT_RATES,
    OUTCOMES,
    Dataset,
    SynthConfig,
    apply_normalizer,
    calibrate_intercept,
    feature_names,
    fit_normalizer,
    load_csv,
    load_oracle_csv,
    outcome_index,
    save_csv,
    save_oracle_csv,
    stratified_folds,
    synth_generate,
)
from surgvae.errors import CalibrationError, DimensionError, ParseError, SchemaError, UsageError
from surgvae.metrics import auroc

HEADER = "case_id,group," + ",".join(OUTCOMES)
# reachable exactly with 20 target rows
SMALL_RATES = (0.25, 0.05, 0.1, 0.3, 0.3, 0.05)


def _dataset(features, groups=None, labels=None, mask=None):
    x = np.asarray(features, dtype=float)
    n = x.shape[0]
    fm = np.ones_like(x, dtype=bool) if mask is None else np.asarray(mask)
    y = np.zeros((n, 6)) if labels is None else np.asarray(labels, dtype=float)
    return Dataset(
        case_ids=np.array([f"c{i}" for i in range(n)]),
        groups=np.zeros(n, dtype=np.int64) if groups is None else np.asarray(groups),
        labels=y,
        label_mask=np.ones_like(y, dtype=bool),
        features=np.where(fm, x, 0.0),
        feature_mask=fm,
    )


class TestCsv:
    def test_two_row_file(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text(HEADER + ",f_0001,f_0002\n" "a,0,1,0,,0,1,0,1.5,\n" "b,1,0,0,0,1,1,,,-2\n")
        ds = load_csv(p, expected_F=2)
        assert ds.n == 2 and ds.n_features == 2
        assert ds.feature_mask.tolist() == [[True, False], [False, True]]
        assert ds.label_mask[0, 2] == False  # noqa: E712
        assert ds.label_mask[1, 5] == False  # noqa: E712
        assert ds.features[0, 0] == 1.5 and ds.features[1, 1] == -2.0
        assert ds.groups.tolist() == [0, 1]

    def test_missing_group_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("case_id," + ",".join(OUTCOMES) + ",f_0001\n" "a,0,0,0,0,0,0,1\n")
        with pytest.raises(SchemaError, match="group"):
            load_csv(p)

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        p = tmp_path / "d.csv"
        names = ",".join(feature_names(7))
        cells = ["1"] * 6 + ["abc"]
        p.write_text(HEADER + "," + names + "\n" "a,0,0,0,0,0,0,0," + ",".join(cells) + "\n")
        with pytest.raises(ParseError, match=r"row 2.*f_0007"):
            load_csv(p)

    def test_bad_label(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text(HEADER + ",f_0001\n" "a,0,2,0,0,0,0,0,1\n")
        with pytest.raises(UsageError):
            load_csv(p)

    def test_expected_feature_count(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text(HEADER + ",f_0001\n" "a,0,0,0,0,0,0,0,1\n")
        with pytest.raises(SchemaError):
            load_csv(p, expected_F=3)

    def test_round_trip_is_exact(self, tmp_path):
        draw = synth_generate(SynthConfig(rows_per_group=40, n_features=9, groups=3, rates=SMALL_RATES))
        p = tmp_path / "s.csv"
        save_csv(draw.dataset, p)
        assert load_csv(p).equals(draw.dataset)
        save_csv(load_csv(p), tmp_path / "t.csv")
        assert p.read_bytes() == (tmp_path / "t.csv").read_bytes()

    def test_oracle_round_trip(self, tmp_path):
        draw = synth_generate(SynthConfig(rows_per_group=20, n_features=4, groups=2, rates=SMALL_RATES))
        p = tmp_path / "o.csv"
        save_oracle_csv(draw.dataset.case_ids, draw.oracle, p)
        ids, probs = load_oracle_csv(p)
        assert list(ids) == list(draw.dataset.case_ids)
        assert np.array_equal(probs, draw.oracle)


def test_outcome_index_accepts_short_names():
    assert outcome_index("af") == 0 and outcome_index("y_intraop") == 5
    with pytest.raises(UsageError):
        outcome_index("stroke")


def test_dataset_rejects_bad_rows():
    with pytest.raises(DimensionError):
        Dataset(np.array(["a"]), np.zeros(2, dtype=int), np.zeros((1, 6)), np.ones((1, 6), bool),
                np.zeros((1, 2)), np.ones((1, 2), bool))


class TestNormalizer:
    def test_hand_values(self):
        ds = _dataset([[1.0, 5.0, 0.0], [3.0, 5.0, 0.0], [0.0, 5.0, 0.0]],
                      mask=[[True, True, False], [True, True, False], [False, True, False]])
        st_ = fit_normalizer(ds)
        assert st_.mean.tolist() == [2.0, 5.0, 0.0]
        assert st_.std.tolist() == [1.0, 1.0, 1.0]
        z = apply_normalizer(ds, st_)
        assert z.features[1, 0] == 1.0
        assert z.features[2, 0] == 0.0  # missing -> 0
        assert z.features[0, 1] == 0.0  # equal to mean -> 0
        assert np.array_equal(z.feature_mask, ds.feature_mask)

    def test_empty_subset(self):
        with pytest.raises(UsageError):
            fit_normalizer(_dataset([[1.0]]), rows=[])

    def test_length_mismatch(self):
        ds = _dataset([[1.0, 2.0]])
        with pytest.raises(DimensionError):
            apply_normalizer(ds, fit_normalizer(_dataset([[1.0]])))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_refit_is_standard(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(3.0, 2.0, size=(25, 4))
        mask = rng.random((25, 4)) > 0.2
        mask[:2] = True
        ds = _dataset(x, mask=mask)
        z = apply_normalizer(ds, fit_normalizer(ds))
        again = fit_normalizer(z)
        assert np.abs(again.mean).max() < 1e-9
        assert np.abs(again.std - 1.0).max() < 1e-9


class TestFolds:
    def _labels(self, n, pos, col=1):
        y = np.zeros((n, 6))
        y[:pos, col] = 1.0
        return y

    def test_one_positive_per_fold(self):
        ds = _dataset(np.zeros((100, 1)), labels=self._labels(100, 5))
        fa = stratified_folds(ds, 5, strat_outcome=1, seed=3)
        counts = [int(ds.labels[fa.folds == f, 1].sum()) for f in range(5)]
        assert counts == [1, 1, 1, 1, 1]

    def test_26_positives(self):
        ds = _dataset(np.zeros((6502, 1)), labels=self._labels(6502, 26))
        fa = stratified_folds(ds, 5, strat_outcome=1, seed=0)
        counts = sorted(int(ds.labels[fa.folds == f, 1].sum()) for f in range(5))
        assert counts == [5, 5, 5, 5, 6]

    def test_non_target_rows_train_always(self):
        groups = np.array([0] * 10 + [1] * 4)
        ds = _dataset(np.zeros((14, 1)), groups=groups)
        fa = stratified_folds(ds, 5)
        assert (fa.folds[groups == 1] == -1).all()
        assert sorted(fa.folds[groups == 0].tolist()) == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]

    def test_too_few_rows(self):
        with pytest.raises(UsageError):
            stratified_folds(_dataset(np.zeros((3, 1))), 5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(5, 80), st.integers(0, 10), st.integers(2, 6), st.integers(0, 1000))
    def test_balance_properties(self, n, pos, k, seed):
        if n < k:
            return
        rng = np.random.default_rng(seed)
        y = (rng.random((n, 6)) < 0.3).astype(float)
        y[:, 1] = 0.0
        y[rng.permutation(n)[: min(pos, n)], 1] = 1.0
        ds = _dataset(np.zeros((n, 1)), labels=y)
        fa = stratified_folds(ds, k, seed=seed)
        sizes = np.bincount(fa.folds, minlength=k)
        pcounts = np.array([ds.labels[fa.folds == f, 1].sum() for f in range(k)])
        assert sizes.max() - sizes.min() <= 1
        assert pcounts.max() - pcounts.min() <= 1
        assert sorted(np.concatenate([fa.test_rows(f) for f in range(k)]).tolist()) == list(range(n))


class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig(rows_per_group=40, n_features=6, rates=SMALL_RATES)
        a, b = synth_generate(cfg), synth_generate(cfg)
        assert a.dataset.equals(b.dataset) and np.array_equal(a.oracle, b.oracle)

    def test_default_target_rates(self):
        draw = synth_generate(SynthConfig())
        ds = draw.dataset
        assert ds.n == 24_000 and ds.n_features == 128 and ds.n_groups == 4
        tg = ds.groups == 0
        rates = ds.labels[tg].mean(axis=0)
        assert np.all(np.abs(rates - np.array(COHORT_RATES)) <= 0.005)
        assert 0.0 <= rates[1] <= 0.009

    def test_missingness_rate(self):
        draw = synth_generate(SynthConfig(rows_per_group=500, n_features=20, missing_rate=0.25))
        assert abs(1.0 - draw.dataset.feature_mask.mean() - 0.25) < 0.01

    def test_oracle_beats_learned_scores_noise_free(self):
        draw = synth_generate(SynthConfig(rows_per_group=500, n_features=20, noise=0.0, missing_rate=0.0))
        ds = draw.dataset
        for c in range(6):
            oracle = auroc(draw.oracle[:, c], ds.labels[:, c])
            crude = auroc(ds.features[:, 0], ds.labels[:, c])
            assert oracle + 1e-12 >= crude

    def test_invalid_config(self):
        with pytest.raises(UsageError):
            synth_generate(SynthConfig(rates=(0.5,) * 5))
        with pytest.raises(UsageError):
            synth_generate(SynthConfig(missing_rate=1.0))

    def test_calibration_failure(self):
        raw = np.zeros(10)
        with pytest.raises(CalibrationError):
            calibrate_intercept(raw, np.full(10, 0.5), 0.123, steps=60)
