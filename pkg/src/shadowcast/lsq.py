"""Weighted nonlinear least squares (Levenberg-Marquardt).

Minimizes ``sum(((y - f(x, p)) / sigma)**2)``. Steps are accepted only on a
strict decrease of the cost; the damping is Marquardt-scaled (columns of the
weighted Jacobian are normalized before solving) so the iteration path is
invariant to the units of each parameter. The first trial step of a fit is a
pure Gauss-Newton step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray
# condition-number limit of the column-scaled Jacobian; finite-difference
# Jacobians carry ~1e-10 relative noise, so exact degeneracy shows up above 1e-12
SINGULAR_RCOND = 1e-8


@dataclass(frozen=True)
class Model:
    """Parametric model ``func(x, p)`` with optional analytic ``jac(x, p)``.

    ``jac`` returns d f / d p with shape ``(len(x), len(p))``.
    """

    func: Callable[[Array, Array], Array]
    names: tuple[str, ...]
    jac: Callable[[Array, Array], Array] | None = None

    def __call__(self, x, p):
        return self.func(x, np.asarray(p, dtype=float))

    def jacobian(self, x, p):
        p = np.asarray(p, dtype=float)
        if self.jac is not None:
            return self.jac(x, p)
        return numerical_jacobian(self.func, x, p)


def numerical_jacobian(func, x, p, rel_step: float = 1e-6) -> Array:
    """Central-difference Jacobian of ``func(x, p)`` with respect to ``p``."""
    p = np.asarray(p, dtype=float)
    cols = []
    for k in range(p.size):
        h = rel_step * max(abs(p[k]), 1e-300)
        if p[k] == 0:
            h = rel_step
        up = p.copy()
        dn = p.copy()
        up[k] += h
        dn[k] -= h
        cols.append((np.asarray(func(x, up)) - np.asarray(func(x, dn))) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass
class FitResult:
    params: dict[str, float]
    uncertainties: dict[str, float]
    covariance: Array
    chi2: float
    dof: int
    converged: bool
    iterations: int = 0
    message: str = ""
    derived: dict[str, float] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.params)

    @property
    def values(self) -> Array:
        return np.array(list(self.params.values()))

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else math.nan

    def to_dict(self) -> dict:
        return {
            "params": dict(self.params),
            "uncertainties": dict(self.uncertainties),
            "covariance": np.asarray(self.covariance).tolist(),
            "chi2": self.chi2,
            "dof": self.dof,
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
            "derived": dict(self.derived),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(
            params=dict(d["params"]),
            uncertainties=dict(d["uncertainties"]),
            covariance=np.asarray(d["covariance"], dtype=float),
            chi2=float(d["chi2"]),
            dof=int(d["dof"]),
            converged=bool(d["converged"]),
            iterations=int(d.get("iterations", 0)),
            message=d.get("message", ""),
            derived=dict(d.get("derived", {})),
        )


def _residuals(model, x, y, sigma, p):
    return (y - np.asarray(model(x, p), dtype=float)) / sigma


def least_squares(
    model: Model,
    x,
    y,
    sigma,
    init: Sequence[float],
    bounds: tuple[Sequence[float], Sequence[float]] | None = None,
    absolute_sigma: bool = True,
    max_iter: int = 200,
    ftol: float = 1e-10,
) -> FitResult:
    """Levenberg-Marquardt fit of ``model`` to ``y(x) +/- sigma``.

    Terminates when an accepted step changes the cost by less than ``ftol``
    relative, when no step can reduce it by that much, or after ``max_iter``
    iterations. Parameters are projected onto ``bounds`` (lower, upper) after
    every step. With ``absolute_sigma=False`` the covariance is scaled by the
    reduced chi-square (use when ``sigma`` carries only relative weights).

    A singular or rank-deficient Jacobian yields ``converged=False``.
    """
    y = np.asarray(y, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)
    if np.any(~(sigma > 0)):
        raise ValueError("all sigma must be > 0")
    p = np.asarray(init, dtype=float).copy()
    if not np.all(np.isfinite(p)):
        raise ValueError("initial parameters must be finite")
    n = p.size
    if bounds is None:
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
    else:
        lo = np.asarray(bounds[0], dtype=float)
        hi = np.asarray(bounds[1], dtype=float)
    p = np.clip(p, lo, hi)

    names = tuple(model.names)
    r = _residuals(model, x, y, sigma, p)
    if not np.all(np.isfinite(r)):
        return _failed(names, p, r, "model not finite at initial parameters", 0)
    cost = float(r @ r)
    lam = 0.0
    converged = False
    message = "maximum iterations reached"
    it = 0
    if cost == 0.0:
        converged, message = True, "exact fit"
    while not converged and it < max_iter:
        it += 1
        jac = np.asarray(model.jacobian(x, p), dtype=float) / sigma[:, None]
        colnorm = np.linalg.norm(jac, axis=0)
        if not np.all(np.isfinite(jac)) or np.any(colnorm == 0):
            message = "singular normal equations (parameter without influence on the model)"
            break
        js = jac / colnorm
        accepted = False
        while not accepted:
            if lam == 0.0:
                step_s = np.linalg.lstsq(js, r, rcond=None)[0]
            else:
                a = np.vstack([js, math.sqrt(lam) * np.eye(n)])
                b = np.concatenate([r, np.zeros(n)])
                step_s = np.linalg.lstsq(a, b, rcond=None)[0]
            p_new = np.clip(p + step_s / colnorm, lo, hi)
            actual = (p_new - p) * colnorm
            predicted = cost - float(np.sum((r - js @ actual) ** 2))
            r_new = _residuals(model, x, y, sigma, p_new)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else math.inf
            if cost_new < cost:
                accepted = True
                rel = (cost - cost_new) / cost
                p, r, cost = p_new, r_new, cost_new
                lam = 0.0 if lam < 1e-6 else lam / 10.0
                if cost == 0.0:
                    converged, message = True, "exact fit"
                elif rel < ftol:
                    converged, message = True, "relative cost change below tolerance"
            elif predicted <= ftol * cost:
                converged, message = True, "no further decrease possible (stationary point)"
                break
            else:
                lam = max(10.0 * lam, 1e-3)
                if lam > 1e16:
                    message = "damping diverged without decrease"
                    break
        if converged or not accepted:
            break

    cov, singular = _covariance(model, x, sigma, p)
    dof = y.size - n
    chi2 = cost
    if singular:
        converged = False
        message = "singular normal equations at solution"
    elif not absolute_sigma and dof > 0:
        cov = cov * (chi2 / dof)
    errs = np.sqrt(np.clip(np.diag(cov), 0.0, None)) if not singular else np.full(n, math.nan)
    return FitResult(
        params=dict(zip(names, map(float, p))),
        uncertainties=dict(zip(names, map(float, errs))),
        covariance=cov,
        chi2=chi2,
        dof=dof,
        converged=converged,
        iterations=it,
        message=message,
    )


def _covariance(model, x, sigma, p):
    n = p.size
    jac = np.asarray(model.jacobian(x, p), dtype=float) / sigma[:, None]
    colnorm = np.linalg.norm(jac, axis=0)
    if not np.all(np.isfinite(jac)) or np.any(colnorm == 0):
        return np.full((n, n), math.nan), True
    js = jac / colnorm
    _, s, vt = np.linalg.svd(js, full_matrices=False)
    if s.size < n or s[-1] <= SINGULAR_RCOND * s[0]:
        return np.full((n, n), math.nan), True
    cov_s = (vt.T / s**2) @ vt
    cov = cov_s / np.outer(colnorm, colnorm)
    return 0.5 * (cov + cov.T), False


def _failed(names, p, r, message, it):
    n = len(names)
    return FitResult(
        params=dict(zip(names, map(float, p))),
        uncertainties=dict.fromkeys(names, math.nan),
        covariance=np.full((n, n), math.nan),
        chi2=math.nan,
        dof=len(r) - n,
        converged=False,
        iterations=it,
        message=message,
    )
