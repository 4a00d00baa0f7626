import csv
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfattn.data import (COLUMNS, FIELD_NAMES, DataError, EmptyDatasetError, FeatureSeries, MinMaxScaler,
                         PatientRecord, SchemaError, aggregate_death_counts, apply_zscore, fit_zscore,
                         generate_synthetic, inverse_zscore, load_csv, split_indices, train_test_split,
                         windowize, write_csv, zscore_normalize)


def rec(age=60.0, death=0, ef=40.0, sc=1.1, **kw):
    base = dict(age=age, anaemia=0, creatinine_phosphokinase=100.0, diabetes=0, ejection_fraction=ef,
                high_blood_pressure=0, platelets=250000.0, serum_creatinine=sc, serum_sodium=137.0, sex=1,
                smoking=0, time=100.0, death_event=death)
    base.update(kw)
    return PatientRecord(**base)


@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic(299, seed=0)


class TestRecord:
    def test_thirteen_fields(self):
        assert len(FIELD_NAMES) == 13 == len(COLUMNS)

    @pytest.mark.parametrize("kw", [dict(age=0.0), dict(ef=0.0), dict(ef=100.5), dict(sc=0.0),
                                    dict(anaemia=2), dict(death=-1), dict(time=float("nan"))])
    def test_invariants(self, kw):
        with pytest.raises(DataError):
            rec(**kw)


class TestLoad:
    def test_round_trip(self, tmp_path, synthetic):
        path = write_csv(synthetic, tmp_path / "hf.csv")
        back = load_csv(path)
        assert len(back) == 299
        for a, b in zip(synthetic, back):
            for f in FIELD_NAMES:
                assert abs(getattr(a, f) - getattr(b, f)) <= 1e-9

    def test_header_order_independent(self, tmp_path, synthetic):
        path = write_csv(synthetic[:5], tmp_path / "a.csv")
        with path.open() as fh:
            rows = list(csv.reader(fh))
        order = list(reversed(range(13)))
        with (tmp_path / "b.csv").open("w", newline="") as fh:
            csv.writer(fh).writerows([[r[i] for i in order] for r in rows])
        assert load_csv(tmp_path / "b.csv") == load_csv(path)

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "x.csv"
        cols = [c for c in COLUMNS if c != "platelets"]
        path.write_text(",".join(cols) + "\n" + ",".join(["1"] * 12) + "\n")
        with pytest.raises(SchemaError, match="platelets"):
            load_csv(path)

    def test_extra_column(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text(",".join(COLUMNS) + ",bmi\n")
        with pytest.raises(SchemaError, match="bmi"):
            load_csv(path)

    def test_header_only(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text(",".join(COLUMNS) + "\n")
        with pytest.raises(EmptyDatasetError):
            load_csv(path)

    @pytest.mark.parametrize("bad", ["", "abc"])
    def test_bad_cells(self, tmp_path, bad):
        path = tmp_path / "x.csv"
        vals = ["60", "0", "100", "0", "40", "0", "250000", "1.1", "137", "1", "0", "100", "1"]
        vals[2] = bad
        path.write_text(",".join(COLUMNS) + "\n" + ",".join(vals) + "\n")
        with pytest.raises(DataError, match="creatinine_phosphokinase"):
            load_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(tmp_path / "nope.csv")


class TestZScore:
    def test_hand_values(self):
        rows, stats = zscore_normalize([rec(age=a) for a in (1.0, 2.0, 3.0)], ["age"])
        np.testing.assert_allclose([r["age"] for r in rows], [-1.2247448713915890, 0.0, 1.2247448713915890],
                                   atol=1e-12)
        assert stats.mean["age"] == 2.0

    def test_idempotent_and_invertible(self, synthetic):
        feats = ["age", "platelets", "serum_creatinine"]
        rows, stats = zscore_normalize(synthetic, feats)
        again, _ = zscore_normalize(rows, feats)
        for a, b in zip(rows, again):
            for f in feats:
                assert abs(a[f] - b[f]) <= 1e-12
        back = inverse_zscore(rows, stats)
        for r, orig in zip(back, synthetic):
            for f in feats:
                assert abs(r[f] - getattr(orig, f)) <= 1e-12 * max(1.0, abs(getattr(orig, f)))

    def test_binary_untouched(self, synthetic):
        rows, stats = zscore_normalize(synthetic, ["age", "sex"])
        assert [r["sex"] for r in rows] == [x.sex for x in synthetic]
        assert "sex" not in stats.mean

    def test_zero_variance(self):
        with pytest.raises(DataError):
            zscore_normalize([rec(age=50.0), rec(age=50.0)], ["age"])

    def test_train_statistics_ignore_test(self, synthetic):
        train, test = train_test_split(synthetic, 0.2, 42)
        stats = fit_zscore(train, ["age"])
        shifted = [rec(age=r.age + 1000) for r in test]
        assert fit_zscore(train, ["age"]) == stats
        out = apply_zscore(shifted, stats)
        assert out[0]["age"] == pytest.approx((shifted[0].age - stats.mean["age"]) / stats.std["age"])


class TestAggregate:
    def test_hand_example(self):
        records = [rec(age=50.0, death=1), rec(age=50.0, death=0), rec(age=61.0, death=1)]
        s = aggregate_death_counts(records, "age", 10.0, start=50.0)
        assert s.bin_edges == (50.0, 60.0, 70.0)
        assert s.counts == (1, 1)

    def test_no_deaths(self, synthetic):
        alive = [rec(age=r.age, death=0) for r in synthetic]
        assert set(aggregate_death_counts(alive, "age").counts) == {0}

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            aggregate_death_counts([], "age")

    def test_bad_width(self, synthetic):
        with pytest.raises(ValueError):
            aggregate_death_counts(synthetic, "age", 0.0)

    @pytest.mark.parametrize("feature", ["age", "serum_creatinine", "ejection_fraction"])
    @pytest.mark.parametrize("width", [None, 0.1, 0.3, 1.0, 2.5, 7.0, 100.0])
    def test_partition(self, synthetic, feature, width):
        s = aggregate_death_counts(synthetic, feature, width)
        assert sum(s.counts) == sum(r.death_event for r in synthetic)
        assert len(s.counts) == len(s.bin_edges) - 1
        assert list(s.bin_edges) == sorted(s.bin_edges)

    def test_bins_cover_max_closed(self):
        records = [rec(age=50.0, death=1), rec(age=70.0, death=1)]
        s = aggregate_death_counts(records, "age", 10.0)
        assert s.counts == (1, 1)

    def test_fixed_grid_drops_out_of_range(self):
        records = [rec(age=50.0, death=1), rec(age=90.0, death=1)]
        s = aggregate_death_counts(records, "age", 10.0, start=50.0, n_bins=2)
        assert s.counts == (1, 0)

    def test_series_invariants(self):
        with pytest.raises(DataError):
            FeatureSeries("age", (0.0, 1.0), (1, 2))


class TestWindowize:
    def test_definition(self):
        w = windowize([1, 2, 3, 4], 2)
        raw_in = w.scaler.inverse(w.inputs[:, :, 0])
        raw_out = w.scaler.inverse(w.targets[:, 0])
        assert raw_in.tolist() == [[1.0, 2.0], [2.0, 3.0]]
        assert raw_out.tolist() == [3.0, 4.0]
        assert w.index.tolist() == [2, 3]

    @given(st.lists(st.integers(0, 40), min_size=2, max_size=60), st.integers(1, 10))
    def test_count_law_and_round_trip(self, counts, lookback):
        if len(counts) <= lookback:
            with pytest.raises(DataError):
                windowize(counts, lookback)
            return
        w = windowize(counts, lookback)
        assert len(w) == len(counts) - lookback
        assert w.inputs.shape == (len(counts) - lookback, lookback, 1)
        assert 0.0 <= w.inputs.min() and w.inputs.max() <= 1.0
        np.testing.assert_allclose(w.scaler.inverse(w.targets[:, 0]), counts[lookback:], atol=1e-12)

    def test_supplied_scaler(self):
        w = windowize([0, 5, 10, 20], 2, MinMaxScaler(0.0, 10.0))
        assert w.targets[:, 0].tolist() == [1.0, 2.0]


class TestSplit:
    def test_eight_two(self):
        train, test = train_test_split(range(10), 0.2, seed=1)
        assert (len(train), len(test)) == (8, 2)

    @given(st.integers(2, 200), st.floats(0.01, 0.99), st.integers(0, 2 ** 31))
    @settings(max_examples=50)
    def test_partition_and_determinism(self, n, frac, seed):
        a = train_test_split(range(n), frac, seed)
        assert a == train_test_split(range(n), frac, seed)
        assert Counter(a[0] + a[1]) == Counter(range(n))
        assert a[0] and a[1]

    def test_errors(self):
        with pytest.raises(ValueError):
            train_test_split(range(10), 1.0)
        with pytest.raises(DataError):
            train_test_split([1], 0.5)

    def test_indices_sorted(self):
        tr, te = split_indices(30, 0.2, 5)
        assert sorted(tr.tolist() + te.tolist()) == list(range(30))


class TestSynthetic:
    def test_count_and_validity(self, synthetic):
        assert len(synthetic) == 299
        assert all(isinstance(r, PatientRecord) for r in synthetic)

    def test_seeded(self):
        assert generate_synthetic(50, 3) == generate_synthetic(50, 3)
        assert generate_synthetic(50, 3) != generate_synthetic(50, 4)

    def test_too_small(self):
        with pytest.raises(ValueError):
            generate_synthetic(9)

    def test_ejection_fraction_monotone(self):
        big = generate_synthetic(10_000, seed=11)
        low = [r.death_event for r in big if r.ejection_fraction < 30]
        high = [r.death_event for r in big if r.ejection_fraction > 50]
        assert np.mean(low) > np.mean(high)

    def test_creatinine_monotone(self):
        big = generate_synthetic(10_000, seed=12)
        low = [r.death_event for r in big if r.serum_creatinine < 1.0]
        high = [r.death_event for r in big if r.serum_creatinine > 2.0]
        assert np.mean(high) > np.mean(low)
