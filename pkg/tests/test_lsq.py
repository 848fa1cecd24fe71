import math

import numpy as np
import pytest
from scipy.optimize import least_squares as scipy_least_squares

from shadowcast.lsq import FitResult, Model, least_squares, numerical_jacobian


def line(x, p):
    return p[0] + p[1] * x


LINE = Model(line, ("a", "b"), lambda x, p: np.column_stack([np.ones_like(x), x]))


def test_linear_exact_in_two_iterations():
    x = np.linspace(0, 1, 11)
    y = 2.0 - 3.0 * x
    res = least_squares(LINE, x, y, 1.0, [0.0, 0.0])
    assert res.converged
    assert res.iterations <= 2
    assert res.params["a"] == pytest.approx(2.0, abs=1e-12)
    assert res.params["b"] == pytest.approx(-3.0, abs=1e-12)


def test_linear_covariance_matches_normal_equations():
    rng = np.random.default_rng(1)
    x = np.linspace(-1, 2, 30)
    s = rng.uniform(0.5, 2.0, x.size)
    y = 1.0 + 0.5 * x + rng.normal(0, s)
    res = least_squares(LINE, x, y, s, [0.0, 0.0])
    a = np.column_stack([np.ones_like(x), x]) / s[:, None]
    np.testing.assert_allclose(res.covariance, np.linalg.inv(a.T @ a), rtol=1e-9)
    ref = least_squares(LINE, x, y, s, [0.0, 0.0], absolute_sigma=False)
    np.testing.assert_allclose(ref.covariance, res.covariance * res.chi2 / res.dof, rtol=1e-9)


def test_rosenbrock():
    rosen = Model(lambda x, p: np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]]), ("u", "v"))
    res = least_squares(rosen, None, np.zeros(2), 1.0, [-1.2, 1.0])
    assert res.params["u"] == pytest.approx(1.0, abs=1e-6)
    assert res.params["v"] == pytest.approx(1.0, abs=1e-6)


def test_numerical_jacobian():
    f = lambda x, p: p[0] * np.exp(-p[1] * x)
    x = np.linspace(0, 2, 5)
    p = np.array([2.0, 0.7])
    exact = np.column_stack([np.exp(-p[1] * x), -p[0] * x * np.exp(-p[1] * x)])
    np.testing.assert_allclose(numerical_jacobian(f, x, p), exact, rtol=1e-8)


def test_singular_not_converged():
    degenerate = Model(lambda x, p: (p[0] + p[1]) * x, ("a", "b"))
    x = np.linspace(0, 1, 5)
    res = least_squares(degenerate, x, 2 * x, 1.0, [0.3, 0.1])
    assert not res.converged
    assert all(math.isnan(v) for v in res.uncertainties.values())
    dead = Model(lambda x, p: p[0] * x, ("a", "b"))
    assert not least_squares(dead, x, x, 1.0, [1.0, 1.0]).converged


def test_bounds_respected():
    x = np.linspace(0, 1, 10)
    res = least_squares(LINE, x, 1.0 + 2 * x, 1.0, [0.0, 0.0], bounds=([-np.inf, -np.inf], [np.inf, 1.0]))
    assert res.params["b"] <= 1.0


def test_rejects_bad_sigma():
    with pytest.raises(ValueError):
        least_squares(LINE, np.arange(3.0), np.arange(3.0), [1.0, 0.0, 1.0], [0.0, 0.0])


def test_result_dict_round_trip():
    x = np.linspace(0, 1, 5)
    res = least_squares(LINE, x, 1 + x, 0.1, [0.0, 0.0])
    back = FitResult.from_dict(res.to_dict())
    assert back.params == res.params
    np.testing.assert_array_equal(back.covariance, res.covariance)


def _expdecay(x, p):
    return p[0] * np.exp(-x / p[1]) + p[2]


EXPDECAY = Model(_expdecay, ("amp", "tau", "base"))


def _grid_polish(x, y, s):
    """Independent route: coarse grid over the nonlinear parameter, linear solve for the rest,
    then a trust-region polish."""
    best = None
    for tau in np.geomspace(0.05, 20, 400):
        a = np.column_stack([np.exp(-x / tau), np.ones_like(x)]) / s[:, None]
        coef = np.linalg.lstsq(a, y / s, rcond=None)[0]
        cost = float(np.sum((a @ coef - y / s) ** 2))
        if best is None or cost < best[0]:
            best = (cost, [coef[0], tau, coef[1]])
    pol = scipy_least_squares(lambda p: (y - _expdecay(x, p)) / s, best[1], xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return 2 * pol.cost


def test_against_grid_polish_oracle():
    """Cost within 1e-6 relative of an independent grid + polish optimum on 20 instances."""
    rng = np.random.default_rng(99)
    for _ in range(20):
        x = np.linspace(0, 5, 25)
        truth = [rng.uniform(0.5, 3), rng.uniform(0.3, 3), rng.uniform(-1, 1)]
        s = np.full(x.size, 0.05)
        y = _expdecay(x, truth) + rng.normal(0, s)
        res = least_squares(EXPDECAY, x, y, s, [1.0, 1.0, 0.0])
        oracle = _grid_polish(x, y, s)
        assert res.converged
        assert res.chi2 <= oracle * (1 + 1e-6)
