"""Parameter-to-observable maps consumed by the inversion.

``DaeForward`` evaluates the full nonlinear dynamics and propagates the
tangent linear model for sensitivities; ``LinearizedForward`` replays a stored
linearization (the TLM surrogate).  Both expose the same protocol:

    observations(theta)                  -> (K, N_obs)
    observations_and_sensitivities(...)  -> ((K, N_obs), (K, N_obs, n_theta))
    trajectory(theta)                    -> Trajectory

A one-slot cache keyed on theta makes an objective evaluation followed by a
gradient at the same point cost a single forward solve plus one TLM sweep.
"""

from __future__ import annotations

import numpy as np

from .dynamics import Dynamics, ScenarioDynamics
from .grid import FaultScenario, GridModel, as_theta
from .observation import ObservationOperator, observe
from .simulate import (SimOptions, SensitivityTrajectory, Trajectory,
                       propagate_sensitivities, simulate, simulate_tlm_surrogate)


class DaeForward:
    """Full-dynamics forward map for one scenario and observation layout."""

    def __init__(self, dyn, scenario: FaultScenario | None,
                 operator: ObservationOperator, times,
                 options: SimOptions = SimOptions()):
        if isinstance(dyn, GridModel):
            dyn = Dynamics(dyn)
        self.dynamics = dyn if isinstance(dyn, Dynamics) else dyn.dynamics
        self.system = ScenarioDynamics(self.dynamics, scenario) \
            if isinstance(dyn, Dynamics) else dyn
        self.scenario = scenario
        self.operator = operator
        self.times = np.asarray(times, dtype=float)
        self.options = options
        self.n_theta = self.system.n_theta
        self._cache_key = None
        self._cache_traj: Trajectory | None = None
        self._cache_sens: SensitivityTrajectory | None = None

    def _lookup(self, theta: np.ndarray) -> Trajectory | None:
        if self._cache_key == theta.tobytes():
            return self._cache_traj
        return None

    def trajectory(self, theta) -> Trajectory:
        theta = as_theta(theta, self.n_theta)
        traj = self._lookup(theta)
        if traj is None:
            traj = simulate(self.system, theta, times=self.times, options=self.options)
            self._cache_key = theta.tobytes()
            self._cache_traj = traj
            self._cache_sens = None
        return traj

    def sensitivities(self, theta) -> SensitivityTrajectory:
        theta = as_theta(theta, self.n_theta)
        traj = self.trajectory(theta)
        if self._cache_sens is None:
            self._cache_sens = propagate_sensitivities(
                self.system, theta, traj, options=self.options)
        return self._cache_sens

    def observations(self, theta) -> np.ndarray:
        return observe(self.operator, self.trajectory(theta).states)

    def observations_and_sensitivities(self, theta):
        traj = self.trajectory(theta)
        sens = self.sensitivities(theta)
        obs = observe(self.operator, traj.states)
        obs_sens = sens.sensitivities[:, self.operator.indices, :]
        return obs, obs_sens

    def linearize(self, theta_ref) -> "LinearizedForward":
        """Freeze the TLM at theta_ref into a cheap linear surrogate."""
        theta_ref = as_theta(theta_ref, self.n_theta)
        traj = self.trajectory(theta_ref)
        sens = self.sensitivities(theta_ref)
        return LinearizedForward(theta_ref, traj, sens, self.operator)


class LinearizedForward:
    """First-order surrogate of a DaeForward around a reference parameter."""

    def __init__(self, theta_ref, ref_trajectory: Trajectory,
                 ref_sensitivities: SensitivityTrajectory,
                 operator: ObservationOperator):
        self.theta_ref = as_theta(theta_ref)
        self.ref_trajectory = ref_trajectory
        self.ref_sensitivities = ref_sensitivities
        self.operator = operator
        self.n_theta = self.theta_ref.size
        self.times = ref_trajectory.times

    def trajectory(self, theta) -> Trajectory:
        return simulate_tlm_surrogate(theta, self.theta_ref,
                                      self.ref_trajectory, self.ref_sensitivities)

    def observations(self, theta) -> np.ndarray:
        return observe(self.operator, self.trajectory(theta).states)

    def observations_and_sensitivities(self, theta):
        obs = self.observations(theta)
        obs_sens = self.ref_sensitivities.sensitivities[:, self.operator.indices, :]
        return obs, obs_sens


class LinearForward:
    """Explicit linear map obs_k = A_k theta + b_k (test oracle and toys)."""

    def __init__(self, times, design: np.ndarray, offset: np.ndarray | None = None):
        self.times = np.asarray(times, dtype=float)
        A = np.asarray(design, dtype=float)
        if A.ndim == 2:
            A = A[None, :, :].repeat(self.times.size, axis=0)
        self.design = A                      # (K, N_obs, n_theta)
        self.n_theta = A.shape[2]
        self.offset = np.zeros(A.shape[:2]) if offset is None else np.asarray(offset, dtype=float)

    def observations(self, theta) -> np.ndarray:
        theta = as_theta(theta, self.n_theta)
        return self.design @ theta + self.offset

    def observations_and_sensitivities(self, theta):
        return self.observations(theta), self.design.copy()


def make_forward(grid_or_dyn, scenario, operator, times, mode: str = "full",
                 theta_ref=None, options: SimOptions = SimOptions()):
    """Forward-map factory: mode 'full' or 'tlm' (needs theta_ref)."""
    fwd = DaeForward(grid_or_dyn, scenario, operator, times, options)
    if mode == "full":
        return fwd
    if mode == "tlm":
        if theta_ref is None:
            raise ValueError("mode 'tlm' requires theta_ref")
        return fwd.linearize(theta_ref)
    raise ValueError(f"unknown forward mode {mode!r}")
