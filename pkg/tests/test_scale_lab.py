import io
import itertools
import math

import numpy as np
import pytest
from scipy.optimize import check_grad

from grwsmooth import grw
from grwsmooth import scale_lab as sl
from grwsmooth.grw import GrwConfig
from grwsmooth.scale_lab import Config1D


def brute_loss(z):
    """Direct itertools oracle for (L_a, L_v)."""
    z = np.asarray(z, dtype=float)
    T = len(z)
    ells = []
    for rest in itertools.permutations(range(1, T)):
        a = np.diff(z[[0, *rest]], 2)
        ells.append(-0.5 * a @ a)
    a = np.diff(z, 2)
    L_a = -(-0.5 * a @ a) + math.log(sum(math.exp(e) for e in ells))
    v = np.diff(z)
    return L_a, 0.5 * v @ v


# ---------------------------------------------------------------- config types


def test_config_validation():
    with pytest.raises(ValueError):
        Config1D([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        Config1D([0.0, 2.0, 1.0])
    with pytest.raises(ValueError):
        Config1D([0.0, 1.0])
    cfg = Config1D([0.0, 0.5, 0.5, 3.0])
    assert cfg.T == 4 and cfg.R == 3.0


def test_uniform_config():
    assert np.array_equal(sl.uniform_config(3, 2.0).z, [0.0, 1.0, 2.0])
    assert np.array_equal(sl.uniform_config(5, 0.0).z, np.zeros(5))
    v = np.diff(sl.uniform_config(7, 3.3).z)
    np.testing.assert_allclose(v, 3.3 / 6, rtol=1e-14)
    with pytest.raises(ValueError):
        sl.uniform_config(4, -1.0)


# ---------------------------------------------------------------- loss values


@pytest.mark.parametrize("T", range(3, 8))
def test_loss_matches_brute_force(T):
    rng = np.random.default_rng(T)
    for _ in range(3):
        cfg = sl.random_config(T, rng)
        L_a, L_v, L = sl.loss_1d(cfg)
        b_a, b_v = brute_loss(cfg.z)
        assert L_a == pytest.approx(b_a, abs=1e-11)
        assert L_v == pytest.approx(b_v, abs=1e-12)
        assert L == pytest.approx(L_a + L_v, abs=1e-15)


@pytest.mark.parametrize("T", range(3, 10))
def test_collapsed_config(T):
    L_a, L_v, L = sl.loss_1d(Config1D(np.zeros(T)))
    assert L_v == 0.0
    assert L_a == pytest.approx(math.log(math.factorial(T - 1)), abs=1e-12)


@pytest.mark.parametrize("T", range(3, 21))
def test_uniform_velocity_term(T):
    assert abs(sl.velocity_loss(sl.uniform_config(T, T - 1)) - (T - 1) / 2) <= 1e-12


@pytest.mark.parametrize("T", range(3, 11))
def test_uniform_acceleration_term_below_log_factorial(T):
    L_a, L_v, _ = sl.loss_1d(sl.uniform_config(T, T - 1))
    assert L_a <= math.log(math.factorial(T - 1))
    assert L_v == pytest.approx((T - 1) / 2, abs=1e-12)


@pytest.mark.parametrize("T", range(3, 8))
def test_agrees_with_grw_loss(T):
    # one window of a d=1 clip with the speed weight at one is the same quantity
    rng = np.random.default_rng(100 + T)
    cfg = sl.random_config(T, rng)
    out = grw.smooth_loss(cfg.z[:, None], GrwConfig(T=T, alpha=1.0))
    assert float(out.smooth) == pytest.approx(sl.loss_1d(cfg)[2], abs=1e-10)


def test_large_T_rejected():
    with pytest.raises(ValueError):
        sl.loss_1d(sl.uniform_config(13, 12.0))
    with pytest.raises(ValueError):
        sl.minimize_config(13, restarts=1)


def test_chunks_cover_every_ordering_once():
    T = 11  # two-level split: 10 free points, chunked by one fixed prefix entry
    seen = 0
    first = set()
    for idx in sl._chunks(T):
        assert np.all(idx[:, 0] == 0)
        assert np.all(np.sort(idx, axis=1) == np.arange(T))
        seen += len(idx)
        first.update(np.unique(idx[:, 1]).tolist())
    assert seen == math.factorial(T - 1)
    assert first == set(range(1, T))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    for T in (3, 6, 11):
        u = rng.normal(size=T - 1)
        f = lambda x: sl._objective(x)[0]
        g = lambda x: sl._objective(x)[1]
        err = check_grad(f, g, u, epsilon=1e-6)
        assert err < 1e-5 * max(1.0, np.linalg.norm(g(u)))


# ---------------------------------------------------------------- lower bound


def test_lower_bound_on_random_configs():
    rng = np.random.default_rng(0)
    for i in range(1000):
        T = 3 + i % 8
        cfg = sl.random_config(T, rng)
        assert sl.check_lower_bound(cfg)


def test_lower_bound_equality_cases():
    u = sl.uniform_config(6, 4.0)
    assert sl.velocity_loss(u) == pytest.approx(sl.lower_bound(u), rel=1e-14)
    z = Config1D(np.zeros(5))
    assert sl.lower_bound(z) == 0.0 and sl.check_lower_bound(z)


# ---------------------------------------------------------------- minimizer


def test_minimize_T3_beats_collapse():
    res = sl.minimize_config(3, restarts=4)
    assert res.R_star > 0
    assert res.L_star < math.log(2)
    assert sl.check_lower_bound(res.config)


def test_minimize_T5_beats_uniform():
    res = sl.minimize_config(5, restarts=4)
    assert res.L_star <= sl.loss_1d(sl.uniform_config(5, 4.0))[2]
    assert res.L_star == pytest.approx(sl.loss_1d(res.config)[2], abs=1e-12)
    assert res.converged >= 1


def test_more_restarts_never_worse():
    few = sl.minimize_config(6, restarts=3, seed=1)
    many = sl.minimize_config(6, restarts=6, seed=1)
    # the first three runs are shared, so best-of can only go down
    assert many.losses[:3] == few.losses
    assert many.L_star <= few.L_star


def test_minimize_is_deterministic():
    a = sl.minimize_config(4, restarts=2, seed=7)
    b = sl.minimize_config(4, restarts=2, seed=7)
    assert np.array_equal(a.config.z, b.config.z)


def test_step_budget_reported_not_fatal():
    res = sl.minimize_config(6, restarts=2, steps=1)
    assert res.converged == 0
    assert np.isfinite(res.L_star)


# ---------------------------------------------------------------- study and CSV


def test_scaling_study_small():
    rows = sl.scaling_study(3, 5, restarts=3)
    assert [r.T for r in rows] == [3, 4, 5]
    for r in rows:
        assert r.lower_bound_ok
        assert r.L_star >= r.R_star ** 2 / (2 * (r.T - 1)) - 1e-10
        assert r.L_star <= r.bound_uniform + 1e-9
        assert r.ratio == pytest.approx(r.R_star / (r.T * math.sqrt(math.log(r.T))))
    buf = io.StringIO()
    sl.write_study_csv(rows, buf)
    lines = buf.getvalue().split("\r\n")
    assert lines[0] == ",".join(sl.CSV_COLUMNS)
    first = lines[1].split(",")
    assert first[0] == "3" and float(first[1]) == rows[0].R_star and first[-1] == "true"


def test_scaling_study_validates_range():
    with pytest.raises(ValueError):
        sl.scaling_study(2, 5)
    with pytest.raises(ValueError):
        sl.scaling_study(6, 5)
