"""Calibration objective, gradient and bound-constrained MAP solvers.

The objective is the weighted data misfit over the whole observation window
plus a quadratic prior penalty:

    J(theta) = 1/2 sum_k || d_k - H z_k(theta) ||^2_{R^-1}
             + 1/2 || theta - theta_prior ||^2_{Gamma^-1},

minimized over the feasible box.  The gradient assembles the trajectory
sensitivities:  grad J = sum_k S_k^T H^T R^-1 (H z_k - d_k)
                       + Gamma^-1 (theta - theta_prior).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .errors import GridcalError
from .grid import as_theta
from .observation import ObservationSet


@dataclass(frozen=True)
class TruncatedGaussian:
    """Gaussian with box support: mean, SPD covariance, lower/upper bounds."""

    mean: np.ndarray
    covariance: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    _chol: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.covariance, dtype=float)
        n = mean.size
        lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if cov.shape != (n, n):
            raise GridcalError(f"covariance shape {cov.shape} does not match mean size {n}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
            raise GridcalError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = cho_factor(cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise GridcalError(f"covariance is not positive definite: {exc}") from exc
        if np.any(lower >= upper):
            raise GridcalError("box bounds must satisfy lower < upper componentwise")
        if np.any(mean < lower) or np.any(mean > upper):
            raise GridcalError("mean must lie inside the box")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def isotropic(cls, n: int, mean: float = 0.5, variance: float = 0.01,
                  lower: float = 0.0, upper: float = 1.0) -> "TruncatedGaussian":
        return cls(np.full(n, mean), variance * np.eye(n),
                   np.full(n, lower), np.full(n, upper))

    @property
    def dim(self) -> int:
        return self.mean.size

    def precision_apply(self, v: np.ndarray) -> np.ndarray:
        return cho_solve(self._chol, np.asarray(v, dtype=float))

    def precision(self) -> np.ndarray:
        return cho_solve(self._chol, np.eye(self.dim))

    def contains(self, theta: np.ndarray) -> bool:
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def clip(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)


@dataclass
class ObjectiveEvaluation:
    value: float
    misfit: float
    prior_term: float
    gradient: np.ndarray | None = None


@dataclass
class InversionResult:
    theta_map: np.ndarray
    iterations: int
    final_pgnorm: float
    converged: bool
    objective_trace: list[float]
    n_refresh: int = 0

    def to_dict(self) -> dict:
        return {
            "theta_map": self.theta_map.tolist(),
            "iterations": self.iterations,
            "final_pgnorm": self.final_pgnorm,
            "converged": self.converged,
            "objective_trace": list(self.objective_trace),
            "n_refresh": self.n_refresh,
        }


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 30
    pgtol: float = 1e-5
    memory: int = 10
    line_search_max_trials: int = 20


def _check_feasible(theta: np.ndarray, prior: TruncatedGaussian):
    if not prior.contains(theta):
        raise GridcalError(f"theta outside the feasible box: {theta}")


def _evaluate(theta, obs: ObservationSet, prior: TruncatedGaussian, forward,
              with_gradient: bool) -> ObjectiveEvaluation:
    theta = as_theta(theta, prior.dim)
    _check_feasible(theta, prior)
    if with_gradient:
        model, sens = forward.observations_and_sensitivities(theta)
    else:
        model = forward.observations(theta)
        sens = None
    r = model - obs.data                       # (K, N_obs)
    w = r / obs.r_diagonal[None, :]
    misfit = 0.5 * float(np.sum(r * w))
    dm = theta - prior.mean
    pm = prior.precision_apply(dm)
    prior_term = 0.5 * float(dm @ pm)
    grad = None
    if with_gradient:
        grad = np.einsum("kci,kc->i", sens, w) + pm
    return ObjectiveEvaluation(value=misfit + prior_term, misfit=misfit,
                               prior_term=prior_term, gradient=grad)


def objective(theta, obs, prior, forward) -> ObjectiveEvaluation:
    """J(theta) split into misfit and prior terms; no gradient."""
    return _evaluate(theta, obs, prior, forward, with_gradient=False)


def gradient(theta, obs, prior, forward) -> np.ndarray:
    """grad J(theta) via the trajectory sensitivities of ``forward``."""
    return _evaluate(theta, obs, prior, forward, with_gradient=True).gradient


def projected_gradient_norm(theta, grad, lower, upper) -> float:
    """Infinity norm of P(theta - grad) - theta (zero at a box-constrained
    stationary point)."""
    step = np.clip(theta - grad, lower, upper) - theta
    return float(np.abs(step).max(initial=0.0))


def solve_map(obs: ObservationSet, prior: TruncatedGaussian, forward,
              config: OptimizerConfig = OptimizerConfig(),
              initial=None) -> InversionResult:
    """Bound-constrained quasi-Newton MAP estimation (L-BFGS-B).

    Starts from the prior mean unless ``initial`` is given.  All iterates stay
    inside the box; the accepted-iterate objective trace is non-increasing.
    """
    x0 = prior.mean.copy() if initial is None else prior.clip(as_theta(initial, prior.dim))
    seen: dict[bytes, float] = {}

    def fun(th):
        ev = _evaluate(th, obs, prior, forward, with_gradient=True)
        seen[np.asarray(th).tobytes()] = ev.value
        return ev.value, ev.gradient

    trace: list[float] = []
    f0, _ = fun(x0)
    trace.append(f0)

    def callback(xk):
        key = np.asarray(xk).tobytes()
        trace.append(seen.get(key, _evaluate(xk, obs, prior, forward, False).value))

    res = minimize(
        fun, x0, jac=True, method="L-BFGS-B",
        bounds=list(zip(prior.lower, prior.upper)),
        callback=callback,
        options={
            "maxiter": config.max_iters,
            "maxcor": config.memory,
            "gtol": config.pgtol,
            "ftol": 1e-16,
            "maxls": config.line_search_max_trials,
        },
    )
    theta_map = prior.clip(np.asarray(res.x, dtype=float))
    ev = _evaluate(theta_map, obs, prior, forward, with_gradient=True)
    pg = projected_gradient_norm(theta_map, ev.gradient, prior.lower, prior.upper)
    if not trace or trace[-1] > ev.value:
        trace.append(ev.value)
    return InversionResult(
        theta_map=theta_map,
        iterations=int(res.nit),
        final_pgnorm=pg,
        converged=bool(res.status == 0 or pg < config.pgtol),
        objective_trace=trace,
    )


def solve_map_refreshed_tlm(obs: ObservationSet, prior: TruncatedGaussian,
                            forward_full, config: OptimizerConfig = OptimizerConfig(),
                            initial=None) -> InversionResult:
    """MAP search on the TLM surrogate with the linearization refreshed at
    every iterate where a gradient is required.

    Projected gradient steps with Armijo backtracking; line-search trials use
    the *current* stored surrogate (cheap), while each accepted iterate
    triggers a re-linearization of the dynamics (one forward + TLM solve).
    At the refresh point the surrogate gradient coincides with the full one.
    """
    theta = prior.mean.copy() if initial is None else prior.clip(as_theta(initial, prior.dim))
    surrogate = forward_full.linearize(theta)
    n_refresh = 1
    ev = _evaluate(theta, obs, prior, surrogate, with_gradient=True)
    trace = [ev.value]
    alpha = 1.0
    converged = False
    it = 0
    c1 = 1e-4
    for it in range(1, config.max_iters + 1):
        g = ev.gradient
        pg = projected_gradient_norm(theta, g, prior.lower, prior.upper)
        if pg < config.pgtol:
            converged = True
            it -= 1
            break
        accepted = None
        step = alpha
        for _ in range(config.line_search_max_trials):
            cand = prior.clip(theta - step * g)
            ev_c = _evaluate(cand, obs, prior, surrogate, with_gradient=False)
            if ev_c.value <= ev.value + c1 * float(g @ (cand - theta)):
                accepted = cand
                break
            step *= 0.5
        if accepted is None or np.array_equal(accepted, theta):
            break  # no descent on the surrogate within the trial budget
        alpha = min(step * 2.0, 1e3)
        theta = accepted
        surrogate = forward_full.linearize(theta)
        n_refresh += 1
        ev = _evaluate(theta, obs, prior, surrogate, with_gradient=True)
        trace.append(ev.value)
    pg = projected_gradient_norm(theta, ev.gradient, prior.lower, prior.upper)
    return InversionResult(
        theta_map=theta,
        iterations=it,
        final_pgnorm=pg,
        converged=converged or pg < config.pgtol,
        objective_trace=trace,
        n_refresh=n_refresh,
    )
