"""Truncated-Gaussian Laplace posterior at the MAP point.

The information (inverse covariance) matrix is assembled from the trajectory
sensitivities at the MAP estimate plus the prior precision,

    info = sum_k S_k^T H^T R^-1 H S_k + Gamma_prior^-1,   L L^T = info,

and samples are drawn as theta = theta_map + L^-T z (+ sqrt(lambda) z' under
inflation), accepted when they fall inside the box and inside the +-2 sigma
marginal band.  Covariance inflation replaces the sampling covariance with
Sigma_post + lambda I and never moves the MAP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import GridcalError, NewtonError, SamplingError
from .grid import as_theta
from .inversion import InversionResult, TruncatedGaussian
from .observation import ObservationSet, observe


@dataclass(frozen=True)
class PosteriorApprox:
    """MAP estimate plus the Cholesky factor of the information matrix."""

    theta_map: np.ndarray
    information_factor: np.ndarray      # lower triangular L with L L^T = info
    base_sigmas: np.ndarray             # sqrt(diag(info^-1)), before inflation
    inflation_lambda: float
    lower: np.ndarray
    upper: np.ndarray

    @property
    def dim(self) -> int:
        return self.theta_map.size

    @property
    def marginal_sigmas(self) -> np.ndarray:
        """Posterior marginal standard deviations including inflation."""
        return np.sqrt(self.base_sigmas ** 2 + self.inflation_lambda)

    def information_matrix(self) -> np.ndarray:
        L = self.information_factor
        return L @ L.T

    def covariance(self) -> np.ndarray:
        """Dense Sigma_post (+ lambda I when inflated)."""
        X = solve_triangular(self.information_factor, np.eye(self.dim), lower=True)
        return X.T @ X + self.inflation_lambda * np.eye(self.dim)


def build_posterior(result, obs: ObservationSet, prior: TruncatedGaussian,
                    forward) -> PosteriorApprox:
    """Assemble and factorize the information matrix at the MAP estimate."""
    theta_map = result.theta_map if isinstance(result, InversionResult) else as_theta(result)
    theta_map = np.asarray(theta_map, dtype=float)
    if not prior.contains(theta_map):
        raise GridcalError("MAP estimate lies outside the feasible box")
    _, sens = forward.observations_and_sensitivities(theta_map)
    weighted = sens / obs.r_diagonal[None, :, None]
    info = np.einsum("kci,kcj->ij", sens, weighted) + prior.precision()
    info = 0.5 * (info + info.T)
    try:
        L = np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        smallest = float(np.linalg.eigvalsh(info).min())
        raise GridcalError(
            f"information matrix is not positive definite "
            f"(smallest eigenvalue ~ {smallest:.3e})") from exc
    X = solve_triangular(L, np.eye(theta_map.size), lower=True)
    base_sigmas = np.sqrt(np.sum(X * X, axis=0))
    return PosteriorApprox(
        theta_map=theta_map,
        information_factor=L,
        base_sigmas=base_sigmas,
        inflation_lambda=0.0,
        lower=prior.lower.copy(),
        upper=prior.upper.copy(),
    )


def inflate(post: PosteriorApprox, lam: float) -> PosteriorApprox:
    """Posterior with sampling covariance Sigma_post + lambda I; the MAP and
    the acceptance-box center are unchanged."""
    if lam < 0:
        raise GridcalError(f"inflation factor must be >= 0, got {lam}")
    return replace(post, inflation_lambda=float(lam))


def _draw_batch(post: PosteriorApprox, count: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((post.dim, count))
    w = solve_triangular(post.information_factor.T, z, lower=False)
    if post.inflation_lambda > 0:
        w = w + np.sqrt(post.inflation_lambda) * rng.standard_normal((post.dim, count))
    return post.theta_map[None, :] + w.T


def _accept_mask(post: PosteriorApprox, draws: np.ndarray) -> np.ndarray:
    sig = post.marginal_sigmas
    lo = np.maximum(post.lower, post.theta_map - 2.0 * sig)
    hi = np.minimum(post.upper, post.theta_map + 2.0 * sig)
    return np.all((draws >= lo) & (draws <= hi), axis=1)


def _rejection_sample(post: PosteriorApprox, n: int, rng: np.random.Generator,
                      probe: int = 1000) -> np.ndarray:
    out = np.empty((n, post.dim))
    got = 0
    drawn = 0
    batch = max(probe, min(n, 100_000))
    while got < n:
        draws = _draw_batch(post, batch, rng)
        mask = _accept_mask(post, draws)
        acc = draws[mask]
        take = min(n - got, acc.shape[0])
        out[got: got + take] = acc[:take]
        got += take
        drawn += batch
        if drawn >= probe and got / drawn < 1e-3:
            raise SamplingError(
                f"acceptance rate collapsed: {got}/{drawn} accepted",
                acceptance_rate=got / drawn)
    return out


def sample_posterior(post: PosteriorApprox, n_samples: int, seed=None,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Exactly n_samples accepted draws from the truncated posterior,
    deterministic for a fixed seed."""
    if n_samples < 1:
        raise GridcalError("n_samples must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    return _rejection_sample(post, n_samples, rng)


@dataclass
class UncertaintyCone:
    """Per-time ensemble mean and standard deviation of predicted
    states/observations from posterior samples."""

    times: np.ndarray
    mean: np.ndarray        # (K, C)
    sigma: np.ndarray       # (K, C)
    n_samples: int
    space: str
    channel_names: tuple[str, ...] = ()
    n_redrawn: int = 0


def uncertainty_cones(post: PosteriorApprox, forward, n_samples: int, seed=None,
                      space: str = "observation",
                      rng: np.random.Generator | None = None) -> UncertaintyCone:
    """Push posterior samples through the forward dynamics and reduce to
    per-time, per-channel mean and sample standard deviation (N - 1).

    A sample whose simulation fails is recorded and redrawn, with the retry
    budget bounded by max(10, n_samples // 5) redraws.
    """
    if n_samples < 2:
        raise GridcalError("n_samples must be >= 2 for a spread estimate")
    if space not in ("observation", "state"):
        raise GridcalError(f"space must be 'observation' or 'state', got {space!r}")
    if rng is None:
        rng = np.random.default_rng(seed)
    samples = _rejection_sample(post, n_samples, rng)
    max_redraws = max(10, n_samples // 5)
    redrawn = 0

    def run(theta):
        traj = forward.trajectory(theta)
        if space == "state":
            return traj.states
        return observe(forward.operator, traj.states)

    values = []
    for i in range(n_samples):
        theta = samples[i]
        while True:
            try:
                values.append(run(theta))
                break
            except NewtonError:
                redrawn += 1
                if redrawn > max_redraws:
                    raise
                theta = _rejection_sample(post, 1, rng)[0]
    stack = np.stack(values)                      # (n, K, C)
    mean = stack.mean(axis=0)
    sigma = stack.std(axis=0, ddof=1)
    if space == "observation":
        names = tuple(forward.operator.channel_names)
    else:
        dyn = getattr(forward, "dynamics", None)
        names = tuple(dyn.state_names) if dyn is not None else ()
    return UncertaintyCone(
        times=np.asarray(forward.times, dtype=float).copy(),
        mean=mean, sigma=sigma, n_samples=n_samples, space=space,
        channel_names=names, n_redrawn=redrawn)


def export_cone(cone: UncertaintyCone, path) -> None:
    """CSV columns: time, channel, mean, sigma."""
    names = cone.channel_names or tuple(
        f"ch{j}" for j in range(cone.mean.shape[1]))
    with open(path, "w") as f:
        f.write("time,channel,mean,sigma\n")
        for k, t in enumerate(cone.times):
            for j, name in enumerate(names):
                f.write(f"{t!r},{name},{cone.mean[k, j]!r},{cone.sigma[k, j]!r}\n")


def export_posterior(post: PosteriorApprox, json_path, factor_path=None) -> None:
    """JSON summary (MAP, marginal sigmas, lambda, box) plus a CSV dump of the
    information factor L."""
    json_path = Path(json_path)
    doc = {
        "theta_map": post.theta_map.tolist(),
        "marginal_sigmas": post.marginal_sigmas.tolist(),
        "base_sigmas": post.base_sigmas.tolist(),
        "inflation_lambda": post.inflation_lambda,
        "lower": post.lower.tolist(),
        "upper": post.upper.tolist(),
    }
    json_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    factor_path = Path(factor_path) if factor_path else json_path.with_suffix(".factor.csv")
    np.savetxt(factor_path, post.information_factor, delimiter=",", fmt="%.17g")


def import_posterior(json_path, factor_path=None) -> PosteriorApprox:
    json_path = Path(json_path)
    doc = json.loads(json_path.read_text())
    factor_path = Path(factor_path) if factor_path else json_path.with_suffix(".factor.csv")
    L = np.atleast_2d(np.loadtxt(factor_path, delimiter=","))
    return PosteriorApprox(
        theta_map=np.array(doc["theta_map"], dtype=float),
        information_factor=L,
        base_sigmas=np.array(doc["base_sigmas"], dtype=float),
        inflation_lambda=float(doc["inflation_lambda"]),
        lower=np.array(doc["lower"], dtype=float),
        upper=np.array(doc["upper"], dtype=float),
    )
