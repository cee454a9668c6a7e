import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stratlearn import DataError, Dataset, ShiftSpec, load_csv, simulate_shift, standardize
from stratlearn.tabular import SHIFT_SCENARIOS, Standardization, beta_acceptance, save_csv


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_csv_roles_and_missing_labels(tmp_path):
    p = write(tmp_path, "a,b,y\n1,2,0.5\n3,4,\n5,6,1.5\n")
    d = load_csv(p, label_column="y")
    assert d.column_names == ("a", "b")
    assert d.s.tolist() == [1, 0, 1]
    assert d.y_observed.tolist() == [True, False, True]
    assert np.isnan(d.y[1])
    assert d.X.tolist() == [[1, 2], [3, 4], [5, 6]]


def test_load_csv_without_label_marks_all_source(tmp_path):
    d = load_csv(write(tmp_path, "a,b\n1,2\n3,4\n"))
    assert d.s.tolist() == [1, 1]
    assert d.y is None


def test_load_csv_indicator_column(tmp_path):
    d = load_csv(write(tmp_path, "a,y,s\n1,2,1\n3,4,0.0\n"), "y", "s")
    assert d.s.tolist() == [1, 0]
    assert d.target_labeled


@pytest.mark.parametrize(
    "text, match",
    [
        ("a,a\n1,2\n", "duplicate"),
        ("a,b\n1,x\n", "row 1, column 'b'"),
        ("a,s\n1,2\n", "indicator must be 0 or 1"),
        ("a,b\n1,nan\n2,inf\n", "non-finite"),
        ("a,b\n1\n", "expected 2 fields"),
        ("a\n", "no data rows"),
    ],
)
def test_load_csv_rejects_bad_files(tmp_path, text, match):
    with pytest.raises(DataError, match=match):
        load_csv(write(tmp_path, text), indicator_column="s" if ",s\n" in text else None)


def test_load_csv_lists_every_nonfinite_cell(tmp_path):
    with pytest.raises(DataError) as exc:
        load_csv(write(tmp_path, "a,b\n1,nan\ninf,2\n"))
    assert "row 1, column 'b'" in str(exc.value) and "row 2, column 'a'" in str(exc.value)


def test_missing_file_and_missing_label_column(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        load_csv(tmp_path / "nope.csv")
    with pytest.raises(DataError, match="label column"):
        load_csv(write(tmp_path, "a,b\n1,2\n"), label_column="y")


def test_source_row_without_label_is_rejected(tmp_path):
    with pytest.raises(DataError, match="source rows without labels"):
        load_csv(write(tmp_path, "a,y,s\n1,,1\n"), "y", "s")


def test_save_and_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.normal(size=6)
    obs = np.array([1, 1, 1, 0, 1, 0], bool)
    s = obs.astype(int)
    d = Dataset(rng.normal(size=(6, 3)), s, ("p", "q", "r"), np.where(obs, y, np.nan), obs, "target")
    save_csv(d, tmp_path / "o.csv")
    back = load_csv(tmp_path / "o.csv", "target", "s")
    assert np.array_equal(back.X, d.X)
    assert np.array_equal(back.s, d.s)
    assert np.array_equal(back.y_observed, d.y_observed)
    assert np.array_equal(back.y[obs], d.y[obs])


def test_dataset_arrays_are_read_only():
    d = Dataset(np.zeros((2, 1)), np.array([1, 0]), ("a",))
    with pytest.raises(ValueError):
        d.X[0, 0] = 1.0


def test_standardize_uses_pooled_sample_statistics_and_flags_constants():
    X = np.array([[1.0, 5.0], [2.0, 5.0], [4.0, 5.0]])
    d = Dataset(X, np.array([1, 0, 1]), ("a", "c"))
    out, rec = standardize(d)
    assert rec.mean[0] == pytest.approx(7 / 3)
    assert rec.scale[0] == pytest.approx(np.std(X[:, 0], ddof=1))
    assert rec.flagged == (False, True)
    assert np.all(out.X[:, 1] == 5.0)  # constant column left as is (mean 0, scale 1)
    assert np.std(out.X[:, 0], ddof=1) == pytest.approx(1.0)
    again = Standardization.from_text(rec.to_text())
    assert np.allclose(again.apply(X), out.X)


def test_beta_acceptance_matches_density_ratio_formula():
    u = np.linspace(0.01, 0.99, 99)
    a, b = 13.0, 4.0
    mode = (a - 1) / (a + b - 2)
    kernel = lambda x: x ** (a - 1) * (1 - x) ** (b - 1)  # noqa: E731
    assert np.allclose(beta_acceptance(u, a, b), kernel(u) / kernel(mode), atol=1e-12)
    assert beta_acceptance(np.array([mode]), a, b)[0] == pytest.approx(1.0)


def test_beta_acceptance_edge_shapes():
    u = np.array([0.0, 0.5, 1.0])
    assert np.all(beta_acceptance(u, 1, 1) == 1)
    assert beta_acceptance(u, 1, 3)[0] == pytest.approx(1.0)
    p = beta_acceptance(np.array([0.1, 0.5, 0.9]), 0.5, 0.5)
    assert p.max() == pytest.approx(1.0) and np.all(p > 0)
    with pytest.raises(DataError):
        beta_acceptance(u, 0, 2)


def test_shift_scenarios():
    assert SHIFT_SCENARIOS["medium"] == (13.0, 4.0)
    with pytest.raises(DataError):
        ShiftSpec(-1, 4)


def _labeled(n=20000, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 2))
    return Dataset(X, np.ones(n, int), ("u", "v"), X[:, 0] + X[:, 1])


def test_simulate_shift_is_deterministic_and_keeps_rows():
    d = _labeled(500)
    a = simulate_shift(d, ShiftSpec(13, 4, seed=7))
    b = simulate_shift(d, ShiftSpec(13, 4, seed=7))
    assert np.array_equal(a.s, b.s)
    assert np.array_equal(a.X, d.X) and np.array_equal(a.y, d.y)


def test_simulated_target_fraction_matches_mean_acceptance():
    # Monte Carlo oracle: the target fraction is the average acceptance probability
    d = _labeled()
    out = simulate_shift(d, ShiftSpec(13, 4, seed=1))
    col = d.X[:, 0]
    p = beta_acceptance((col - col.min()) / (col.max() - col.min()), 13, 4)
    se = np.sqrt(np.sum(p * (1 - p))) / d.n
    assert abs(out.n_target / d.n - p.mean()) < 4 * se


def test_simulate_shift_errors():
    d = _labeled(10)
    with pytest.raises(DataError):
        simulate_shift(d, ShiftSpec(13, 4, shift_column=5))
    const = Dataset(np.ones((5, 1)), np.ones(5, int), ("c",), np.arange(5.0))
    with pytest.raises(DataError, match="constant"):
        simulate_shift(const, ShiftSpec(13, 4))
    unlabeled = Dataset(np.random.default_rng(0).random((5, 1)), np.ones(5, int), ("c",))
    with pytest.raises(DataError):
        simulate_shift(unlabeled, ShiftSpec(13, 4))


@settings(max_examples=30, deadline=None)
@given(st.floats(1.01, 30), st.floats(1.01, 30))
def test_beta_acceptance_is_a_probability(a, b):
    mode = (a - 1) / (a + b - 2)
    p = beta_acceptance(np.r_[np.linspace(0, 1, 101), mode], a, b)
    assert np.all((p >= 0) & (p <= 1 + 1e-12))
    assert p[-1] == pytest.approx(1.0)


def test_standardize_is_idempotent():
    rng = np.random.default_rng(3)
    d = Dataset(rng.normal(5, 3, size=(50, 3)), rng.integers(0, 2, 50), ("a", "b", "c"))
    once, _ = standardize(d)
    twice, _ = standardize(once)
    assert np.allclose(once.X, twice.X, atol=1e-10)
