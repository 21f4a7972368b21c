import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blipvar.data import ObservedDataset
from blipvar.errors import ConfigError, ValidationError
from blipvar.learners import LearnerSpec
from blipvar.nuisance import CROSS_FITTED, FULL_SAMPLE, fit_nuisance, make_folds, truncate_g

from conftest import make_dataset

MEAN = [LearnerSpec("mean")]


def test_singleton_folds():
    plan = make_folds(10, 10, seed=1)
    assert sorted(np.bincount(plan.assignment)) == [1] * 10


def test_balanced_sizes():
    plan = make_folds(10, 3, seed=1)
    assert sorted(np.bincount(plan.assignment), reverse=True) == [4, 3, 3]


def test_folds_are_deterministic():
    a, b = make_folds(57, 5, seed=9), make_folds(57, 5, seed=9)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    assert not np.array_equal(a.assignment, make_folds(57, 5, seed=10).assignment)


def test_fold_errors():
    with pytest.raises(ValidationError):
        make_folds(3, 4, seed=0)
    with pytest.raises(ValidationError):
        make_folds(3, 1, seed=0)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 300), v=st.integers(2, 20), seed=st.integers(0, 2**32 - 1))
def test_folds_partition(n, v, seed):
    if v > n:
        return
    plan = make_folds(n, v, seed)
    sizes = np.bincount(plan.assignment, minlength=v)
    assert sizes.sum() == n and sizes.max() - sizes.min() <= 1
    for k in range(v):
        assert set(plan.training(k)).isdisjoint(plan.validation(k))
        assert len(plan.training(k)) + len(plan.validation(k)) == n


def test_known_constant_propensity(small_dataset):
    nu = fit_nuisance(small_dataset, MEAN, known_g=0.5)
    np.testing.assert_array_equal(nu.g1, 0.5)
    assert nu.g_known


def test_known_propensity_function(small_dataset):
    nu = fit_nuisance(small_dataset, MEAN, known_g=lambda w: 0.2 + 0.0 * w[:, 0])
    np.testing.assert_allclose(nu.g1, 0.2)


def test_truncation_rule():
    np.testing.assert_allclose(truncate_g([0.003, 0.5, 0.999], 0.01), [0.01, 0.5, 0.99])
    ds = make_dataset(50)
    nu = fit_nuisance(ds, MEAN, known_g=lambda w: np.full(w.shape[0], 0.003))
    np.testing.assert_allclose(nu.g1, 0.01)


def test_mean_learner_full_vs_cross_fitted():
    ds = make_dataset(60, seed=2)
    full = fit_nuisance(ds, MEAN, MEAN, mode=FULL_SAMPLE)
    np.testing.assert_allclose(full.qbar1, ds.y.mean())
    np.testing.assert_allclose(full.g1, ds.a.mean())
    plan = make_folds(ds.n, 5, seed=3)
    cv = fit_nuisance(ds, MEAN, MEAN, mode=CROSS_FITTED, fold_plan=plan)
    for k in range(5):
        idx = plan.validation(k)
        np.testing.assert_allclose(cv.qbar1[idx], ds.y[plan.training(k)].mean())
        np.testing.assert_allclose(cv.qbar0[idx], ds.y[plan.training(k)].mean())


def test_cross_fitted_predictions_do_not_leak():
    ds = make_dataset(120, seed=4)
    plan = make_folds(ds.n, 4, seed=5)
    lib = [LearnerSpec("logistic-main")]
    base = fit_nuisance(ds, lib, lib, mode=CROSS_FITTED, fold_plan=plan, seed=1)
    for k in range(4):
        y = ds.y.copy()
        idx = plan.validation(k)
        y[idx] = 1.0 - y[idx]
        other = fit_nuisance(ds.with_y(y), lib, lib, mode=CROSS_FITTED, fold_plan=plan, seed=1)
        np.testing.assert_array_equal(other.qbar1[idx], base.qbar1[idx])
        np.testing.assert_array_equal(other.qbar0[idx], base.qbar0[idx])
        rest = plan.training(k)
        assert not np.allclose(other.qbar1[rest], base.qbar1[rest])


def test_predictions_in_range():
    ds = make_dataset(150, seed=6)
    nu = fit_nuisance(ds, [LearnerSpec("logistic-main-interactions")], [LearnerSpec("logistic-main")], g_trunc=0.05)
    assert np.all((nu.qbar1 > 0) & (nu.qbar1 < 1) & (nu.qbar0 > 0) & (nu.qbar0 < 1))
    assert nu.g1.min() >= 0.05 and nu.g1.max() <= 0.95


def test_argument_errors(small_dataset):
    with pytest.raises(ConfigError):
        fit_nuisance(small_dataset, MEAN)
    with pytest.raises(ConfigError):
        fit_nuisance(small_dataset, MEAN, MEAN, known_g=0.5)
    with pytest.raises(ConfigError):
        fit_nuisance(small_dataset, MEAN, known_g=1.5)
    with pytest.raises(ConfigError):
        fit_nuisance(small_dataset, MEAN, MEAN, mode="bogus")


def test_fit_is_reproducible():
    ds = make_dataset(100, seed=7)
    lib = [LearnerSpec("mean"), LearnerSpec("logistic-main")]
    a = fit_nuisance(ds, lib, lib, seed=3)
    b = fit_nuisance(ds, lib, lib, seed=3)
    np.testing.assert_array_equal(a.qbar1, b.qbar1)
    np.testing.assert_array_equal(a.g1, b.g1)


def test_dataset_requires_enough_rows_for_folds():
    ds = ObservedDataset(np.zeros((5, 1)), np.array([0, 1, 0, 1, 0.0]), np.zeros(5))
    with pytest.raises(ValidationError):
        ds.check_folds(3)
