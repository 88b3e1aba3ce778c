import itertools

import numpy as np
import pytest

from prosub.data import (
    DatasetError,
    DatasetFormatError,
    DatasetShapeError,
    MeasurementDataset,
    NonFiniteDataError,
    SyntheticSpec,
    fit_normalization,
    generate_synthetic,
    load_csv,
    load_dataset,
    make_folds,
    nearest_rank_percentile,
    normalize,
    save_csv,
    save_dataset,
    subset_lstsq_mse,
)


def small(samples, subjects=None):
    samples = np.asarray(samples, dtype=np.float64)
    subjects = subjects or ["a"] * samples.shape[0]
    return MeasurementDataset(samples, [f"m{j}" for j in range(samples.shape[1])], subjects)


def test_constant_dataset_global_mode():
    ds, spec = normalize(small(np.full((10, 3), 2.5)), "global_max99")
    np.testing.assert_array_equal(ds.samples, 1.0)
    assert spec.divisors == (2.5, 2.5, 2.5)


def test_nearest_rank_on_1_to_100():
    col = np.arange(1, 101, dtype=np.float64)
    assert nearest_rank_percentile(col) == 99.0
    ds, spec = normalize(small(np.column_stack([col, col[::-1] * 2])), "per_measurement_max99")
    assert spec.divisors == (99.0, 198.0)
    assert ds.samples[:, 0].max() == pytest.approx(100 / 99)


def test_nearest_rank_matches_sorted_order_statistic():
    rng = np.random.default_rng(0)
    for n in (1, 2, 7, 100, 101, 999):
        v = rng.normal(size=n)
        assert nearest_rank_percentile(v) == np.sort(v)[int(np.ceil(0.99 * n)) - 1]


def test_normalization_fits_training_subjects_only():
    x = np.array([[1.0, 1.0], [2.0, 2.0], [100.0, 100.0]])
    ds = small(x, ["tr", "tr", "te"])
    spec = fit_normalization(ds, "global_max99", train_subjects=["tr"])
    assert spec.divisors == (2.0, 2.0)


def test_normalize_is_idempotent_with_frozen_spec():
    ds, spec = normalize(small(np.arange(1.0, 13.0).reshape(4, 3)), "per_measurement_max99")
    again, spec2 = normalize(ds, spec=spec)
    assert spec2 == spec
    np.testing.assert_array_equal(again.samples, ds.samples)


def test_zero_divisor_rejected():
    with pytest.raises(DatasetError):
        normalize(small(np.zeros((5, 2))), "global_max99")


def test_dataset_validation():
    with pytest.raises(NonFiniteDataError):
        small([[1.0, np.nan]])
    with pytest.raises(DatasetShapeError):
        MeasurementDataset(np.zeros((2, 2)), ["a"], ["s", "s"])
    with pytest.raises(DatasetShapeError):
        MeasurementDataset(np.zeros((2, 2)), ["a", "b"], ["s"])


def test_binary_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(23, 5)).astype(np.float32).astype(np.float64)
    ds = small(x, [f"s{i % 4}" for i in range(23)])
    save_dataset(ds, tmp_path / "d.osds")
    back = load_dataset(tmp_path / "d.osds")
    assert back.samples.tobytes() == ds.samples.tobytes()
    assert back.subject_ids.tolist() == ds.subject_ids.tolist()
    assert back.measurement_ids == ds.measurement_ids
    save_dataset(back, tmp_path / "e.osds")
    assert (tmp_path / "d.osds").read_bytes() == (tmp_path / "e.osds").read_bytes()


def test_binary_errors(tmp_path):
    ds = small(np.ones((4, 3)))
    save_dataset(ds, tmp_path / "d.osds")
    raw = (tmp_path / "d.osds").read_bytes()
    cases = {
        "magic.osds": (b"XXXX" + raw[4:], DatasetFormatError),
        "short.osds": (raw[:10], DatasetFormatError),
        "trunc.osds": (raw[:-4], DatasetShapeError),
        "nan.osds": (raw[:-4] + np.array([np.nan], "<f4").tobytes(), NonFiniteDataError),
    }
    for name, (blob, err) in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(err):
            load_dataset(tmp_path / name)


def test_csv_round_trip(tmp_path):
    ds = small(np.random.default_rng(1).normal(size=(6, 4)), ["x", "x", "y", "y", "z", "z"])
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    np.testing.assert_allclose(back.samples, ds.samples, atol=1e-12, rtol=0)
    assert back.subject_ids.tolist() == ds.subject_ids.tolist()


def test_csv_errors(tmp_path):
    (tmp_path / "a.csv").write_text("subject,m0,m1\ns,1,2,3\n")
    with pytest.raises(DatasetShapeError):
        load_csv(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("subject,m0,m1\ns,1,abc\n")
    with pytest.raises(DatasetFormatError):
        load_csv(tmp_path / "b.csv")
    (tmp_path / "c.csv").write_text("subject,m0,m1\ns,1,nan\n")
    with pytest.raises(NonFiniteDataError):
        load_csv(tmp_path / "c.csv")


def test_folds_rotate_validation_and_test():
    folds = make_folds(["s1", "s2", "s3", "s4", "s5"] * 3, 5)
    assert len(folds) == 5
    assert sorted(f.validation_subjects[0] for f in folds) == ["s1", "s2", "s3", "s4", "s5"]
    for f in folds:
        assert f.validation_subjects != f.test_subjects
        assert len(f.train_subjects) == 3
        assert not set(f.train_subjects) & set(f.validation_subjects + f.test_subjects)
    with pytest.raises(DatasetError):
        make_folds(["a", "b"], 2)


def test_synthetic_is_seeded():
    a = generate_synthetic(SyntheticSpec(n=50, seed=4))
    b = generate_synthetic(SyntheticSpec(n=50, seed=4))
    assert a.samples.tobytes() == b.samples.tobytes()
    assert np.all(a.samples > 0)


def test_duplicates_reconstruct_exactly():
    spec = SyntheticSpec(n=500, N=6, k=2, groups=(0, 0, 0, 1, 1, 1))
    ds = generate_synthetic(spec)
    assert spec.designated_subset() == (0, 3)
    assert subset_lstsq_mse(ds.samples, (0, 3)) < 1e-25


def test_designated_subset_is_brute_force_minimum():
    spec = SyntheticSpec(n=2000, N=8, k=3, mix_std=0.3, seed=2)
    x = generate_synthetic(spec).samples
    errs = {c: subset_lstsq_mse(x, c) for c in itertools.combinations(range(8), 3)}
    assert len(errs) == 56
    best = min(errs.values())
    assert errs[spec.designated_subset()] <= best + 1e-20
    assert errs[spec.designated_subset()] < 1e-25
