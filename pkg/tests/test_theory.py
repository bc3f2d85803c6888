import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semifl import theory
from semifl.errors import ConfigError
from semifl.theory import KernelClassifier, SyntheticTask, TheoryConfig


def brute_force_m(points, labels, h, q):
    """Direct box-kernel sum, used as the oracle for the indexed estimator."""
    d = np.linalg.norm(points[None, :, :] - q[:, None, :], axis=2)
    k = (d <= h).astype(float)
    tot = k.sum(axis=1)
    return np.where(tot > 0, (k * labels).sum(axis=1) / np.where(tot > 0, tot, 1), 0.0)


def test_hand_evaluated_box_kernel():
    clf = KernelClassifier([0.0, 1.0], [0, 1], 0.5)
    assert theory.nw_estimate(clf, [0.2])[0] == 0.0
    assert theory.nw_estimate(clf, [0.5])[0] == 0.5  # both endpoints are inside the closed ball
    assert theory.nw_estimate(clf, [3.0])[0] == 0.0
    assert theory.nw_estimate(KernelClassifier([0.0, 0.3], [1, 1], 0.5), [0.1])[0] == 1.0


def test_classify_boundary_convention():
    clf = KernelClassifier([0.0, 0.0, 0.0, 0.0, 0.0], [1, 1, 1, 1, 0], 1.0)
    assert theory.classify(clf, [0.0])[0] == 1  # m_hat 0.8
    assert theory.classify(KernelClassifier([0.0, 0.0], [1, 0], 1.0), [0.0])[0] == 1  # m_hat 0.5
    assert theory.classify(KernelClassifier([0.0] * 10, [1] + [0] * 9, 1.0), [0.0])[0] == 0  # m_hat 0.1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 40), st.floats(0.05, 2.0), st.integers(0, 2**32 - 1))
def test_indexed_estimate_matches_direct_sum(d, n, h, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, d))
    lab = rng.integers(0, 2, n).astype(float)
    q = rng.normal(size=(15, d))
    clf = KernelClassifier(pts, lab, h)
    got = theory.nw_estimate(clf, q if d > 1 else q[:, 0])
    assert np.allclose(got, brute_force_m(pts, lab, h, q), atol=1e-12)
    assert np.all((got >= 0) & (got <= 1))


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30, unique=True), st.integers(0, 29))
def test_isolated_stored_point_returns_its_label(xs, i):
    i %= len(xs)
    xs = np.array(xs)
    gap = np.min(np.abs(np.delete(xs, i) - xs[i])) if len(xs) > 1 else 1.0
    lab = (np.arange(len(xs)) % 2).astype(float)
    clf = KernelClassifier(xs, lab, gap / 2)
    assert theory.nw_estimate(clf, [xs[i]])[0] == lab[i]


def test_select_examples():
    assert theory.select_high_confidence(lambda x: np.full(len(x), 0.5), np.zeros((4, 1)), 0.49).size == 0
    vals = np.array([0.99, 0.02, 0.6])
    m = lambda x: vals  # noqa: E731
    assert theory.select_high_confidence(m, np.zeros((3, 1)), 0.05).tolist() == [0, 1]
    assert theory.select_high_confidence(m, np.zeros((3, 1)), 0.4999).tolist() == [0, 1, 2]
    with pytest.raises(ConfigError):
        theory.select_high_confidence(m, np.zeros((3, 1)), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.001, 0.499), st.floats(0.001, 0.499), st.integers(0, 2**32 - 1))
def test_selection_is_monotone_in_delta(a, b, seed):
    lo, hi = sorted((a, b))
    rng = np.random.default_rng(seed)
    x, y = SyntheticTask().sample_labeled(200, rng)
    clf = KernelClassifier(x, y, 0.3)
    xu = SyntheticTask().sample_unlabeled(300, rng)
    assert set(theory.select_high_confidence(clf, xu, lo)) <= set(theory.select_high_confidence(clf, xu, hi))


def test_unsupported_rows_are_not_confident():
    clf = KernelClassifier([0.0, 0.1], [0, 0], 0.5)
    xu = np.array([[0.05], [10.0]])
    assert theory.select_high_confidence(clf, xu, 0.1).tolist() == [0]
    assert theory.select_high_confidence(clf, xu, 0.1, require_support=False).tolist() == [0, 1]


def test_identity_and_shrink_operators():
    x = np.array([[-3.0], [0.5], [2.0]])
    m = lambda z: np.array([0.1, 0.7, 0.95])  # noqa: E731
    y, xt = theory.augment_and_pseudolabel(x, m, "identity", np.random.default_rng(0))
    assert y.tolist() == [0, 1, 1] and np.array_equal(xt, x)
    _, xs = theory.augment_and_pseudolabel(x, m, "shrink", np.random.default_rng(0))
    assert np.all(np.abs(xs) <= np.abs(x)) and np.all(np.sign(xs) * np.sign(x) >= 0)


def test_pseudo_label_error_is_bounded_by_delta_plus_estimation_error():
    task = SyntheticTask()
    rng = np.random.default_rng(3)
    x, y = task.sample_labeled(1000, rng)
    m_init = KernelClassifier(x, y, 1000 ** (-1 / 3))
    xu = task.sample_unlabeled(5000, rng)
    delta = 0.1
    sel = theory.select_high_confidence(m_init, xu, delta)
    y_hat, _ = theory.augment_and_pseudolabel(xu[sel], m_init, "identity", rng)
    m_true = task.m(xu[sel])
    err = np.where(y_hat == 1, 1 - m_true, m_true)  # probability the pseudo-label is wrong
    sup = np.abs(theory.nw_estimate(m_init, xu[sel]) - m_true).max()
    assert err.mean() <= delta + sup
    draws = rng.random(len(sel)) < m_true
    assert (draws != y_hat).mean() <= delta + sup + 3 * np.sqrt(0.25 / len(sel))


def test_train_ssl_union():
    dl = (np.array([[0.0], [1.0]]), np.array([0, 1]))
    empty = (np.empty(0), np.empty((0, 1)))
    only_l = theory.train_ssl(dl, empty, 0.4)
    ref = KernelClassifier(dl[0], dl[1], 0.4)
    q = np.linspace(-1, 2, 31)
    assert np.array_equal(theory.nw_estimate(only_l, q), theory.nw_estimate(ref, q))
    dh = (np.array([1, 1]), np.array([[0.1], [0.1]]))
    only_h = theory.train_ssl((np.empty((0, 1)), np.empty(0)), dh, 0.4)
    assert len(only_h) == 2 and theory.nw_estimate(only_h, [0.1])[0] == 1.0
    assert len(theory.train_ssl(dl, dh, 0.4)) == 4
    with pytest.raises(ConfigError):
        theory.train_ssl((np.empty((0, 1)), np.empty(0)), empty, 0.4)


class ConstantTask:
    dim = 1

    def m(self, x):
        return np.full(len(x), 0.9)

    def bayes(self, x):
        return np.ones(len(x), dtype=np.int64)

    def sample_labeled_x(self, n, rng):
        return rng.normal(size=(n, 1))


def test_excess_risk_examples():
    task = SyntheticTask()
    assert theory.excess_risk(task.bayes, task, 5000, 0) == (0.0, 0.0)
    r, _ = theory.excess_risk(lambda x: np.zeros(len(x)), ConstantTask(), 1000, 0)
    assert r == pytest.approx(0.8, abs=1e-12)
    with pytest.raises(ConfigError):
        theory.excess_risk(task.bayes, task, 0, 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_excess_risk_is_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    flips = rng.random() < 0.5
    r, se = theory.excess_risk(lambda x: (rng.random(len(x)) < 0.5) if flips else 1 - SyntheticTask().bayes(x),
                               SyntheticTask(), 500, seed)
    assert 0 <= r <= 1 and se >= 0


def test_rate_exponents_and_critical_zeta():
    cfg = TheoryConfig()
    assert theory.ssl_rate_exponent(cfg, 1) == pytest.approx(2 / 6)
    assert theory.labeled_rate_exponent(cfg, 1) == pytest.approx(2 / 5)
    assert theory.critical_zeta(cfg, 1) == pytest.approx(5 / 6)
    assert theory.ssl_bandwidth(cfg, 3200, 1) == pytest.approx(3200 ** (-1 / 6))


def test_config_validation():
    for bad in ({"delta": 0.5}, {"zeta": 1.0}, {"n_u_grid": (800, 200)}, {"operator": "rotate"}):
        with pytest.raises(ConfigError):
            TheoryConfig(**bad)


def test_single_cell_is_reproducible():
    cfg = TheoryConfig(n_u_grid=(400,), mc_samples=5000)
    a = theory.rate_experiment(SyntheticTask(), cfg, [7])
    b = theory.rate_experiment(SyntheticTask(), cfg, [7])
    assert len(a.rows) == 1 and a.rows == b.rows and a.slope_fit is None
    assert a.rows[0].n_la == round(400 ** 0.5)


def test_small_zeta_favours_augmentation_and_large_zeta_does_not():
    def last(zeta):
        t = theory.rate_experiment(SyntheticTask(), TheoryConfig(zeta=zeta, mc_samples=50000), range(5))
        cell = t.medians()[12800]
        return cell["risk_ssl"], cell["risk_labeled"]

    ssl_lo, lab_lo = last(0.3)
    ssl_hi, lab_hi = last(0.95)
    assert ssl_lo < lab_lo
    # above the critical exponent labeled-only is competitive
    assert lab_hi <= 2 * ssl_hi
    assert lab_hi / ssl_hi < lab_lo / ssl_lo


def test_slope_fit_on_exact_power_law():
    n = np.array([200, 800, 3200, 12800])
    assert theory.fit_loglog_slope(n, 3 * n ** -0.4) == pytest.approx(-0.4)
