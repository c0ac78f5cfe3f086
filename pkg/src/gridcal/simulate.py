"""Backward-Euler integration of the mass-matrix DAE and discrete forward
sensitivities.

The implicit step solves

    M z_{k+1} - N h(t_{k+1}, z_{k+1}; theta) = M z_k,
    M = blkdiag(I_n, 0),  N = blkdiag(dt * I_n, I_m),

by full Newton iteration with the exact iteration Jacobian A = M - N dh/dz.
Sensitivities are obtained by differentiating that same discretization:

    A(z_{k+1}) S_{k+1} = M S_k + N dh/dtheta(z_{k+1}),

so the tangent linear model is consistent with the forward map to solver
tolerance; finite differences of ``simulate`` arbitrate this in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .dynamics import Dynamics, ScenarioDynamics
from .errors import GridcalError, NewtonError
from .grid import FaultScenario, GridModel, as_theta

_ANCHOR_TOL = 1e-9


@dataclass(frozen=True)
class SimOptions:
    refine: int = 4             # internal substeps per observation interval
    newton_tol: float = 1e-8    # infinity norm of the step residual
    max_newton_iters: int = 20
    max_halvings: int = 8       # residual-increase line search

    def __post_init__(self):
        if self.refine < 1:
            raise GridcalError(f"refine must be >= 1, got {self.refine}")


@dataclass(frozen=True)
class SystemState:
    """Partitioned DAE state: differential block x, algebraic block y."""

    z: np.ndarray
    n: int

    @property
    def x(self) -> np.ndarray:
        return self.z[: self.n]

    @property
    def y(self) -> np.ndarray:
        return self.z[self.n:]


@dataclass
class Trajectory:
    """States sampled exactly at the requested times.

    ``internal_times``/``internal_states`` carry the full integration grid so
    sensitivity propagation can rewalk the identical discretization.
    """

    times: np.ndarray
    states: np.ndarray              # (K, N)
    n_diff: int
    internal_times: np.ndarray | None = field(default=None, repr=False)
    internal_states: np.ndarray | None = field(default=None, repr=False)
    sample_index: np.ndarray | None = field(default=None, repr=False)

    def state(self, k: int) -> SystemState:
        return SystemState(self.states[k], self.n_diff)

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class SensitivityTrajectory:
    """d z_k / d theta at the sampled times; shape (K, N, n_theta)."""

    times: np.ndarray
    sensitivities: np.ndarray


def _coerce_state(z, n: int) -> np.ndarray:
    if isinstance(z, SystemState):
        return np.asarray(z.z, dtype=float)
    return np.asarray(z, dtype=float)


def step_backward_euler(system, z_k, t_next: float, dt: float, theta,
                        options: SimOptions = SimOptions()):
    """One implicit step; returns z_{k+1} with residual below newton_tol.

    Raises NewtonError with the last residual norm if the iteration does not
    converge within max_newton_iters.
    """
    if dt <= 0:
        raise GridcalError(f"dt must be positive, got {dt}")
    theta = np.asarray(theta, dtype=float)
    wrap = isinstance(z_k, SystemState)
    z_prev = _coerce_state(z_k, system.n)
    z, _ = _newton_step(system, z_prev, t_next, dt, theta, options)
    return SystemState(z, system.n) if wrap else z


def _newton_step(system, z_prev, t, dt, theta, options, z_guess=None):
    """Newton solve of the backward-Euler residual; returns (z, lu_of_accepted).

    ``z_guess`` overrides the warm start (the step history term still uses
    z_prev); simulate() uses it to re-seed the algebraic block across network
    topology changes.
    """
    n = system.n

    def residual(z):
        h = system.rhs(t, z, theta)
        F = np.empty_like(z)
        F[:n] = z[:n] - z_prev[:n] - dt * h[:n]
        F[n:] = -h[n:]
        return F

    def iteration_matrix(z):
        J = system.jac_state(t, z, theta)
        A = -J
        A[:n, :] *= dt
        A[np.arange(n), np.arange(n)] += 1.0
        return A

    z = z_prev.copy() if z_guess is None else z_guess.copy()
    F = residual(z)
    norm = np.abs(F).max(initial=0.0)
    for it in range(options.max_newton_iters):
        if norm < options.newton_tol:
            return z, None
        A = iteration_matrix(z)
        try:
            lu = lu_factor(A)
        except ValueError as exc:
            raise NewtonError(f"singular iteration Jacobian at t={t:g}: {exc}",
                              t=t, residual=norm, iterations=it) from exc
        dz = lu_solve(lu, -F)
        scale = 1.0
        for _ in range(options.max_halvings + 1):
            z_trial = z + scale * dz
            F_trial = residual(z_trial)
            trial_norm = np.abs(F_trial).max(initial=0.0)
            if trial_norm < norm or scale <= 2.0 ** (-options.max_halvings):
                break
            scale *= 0.5
        z, F, norm = z_trial, F_trial, trial_norm
    if norm < options.newton_tol:
        return z, None
    raise NewtonError(
        f"Newton did not converge at t={t:g}: residual {norm:.3e} "
        f"after {options.max_newton_iters} iterations",
        t=t, residual=norm, iterations=options.max_newton_iters)


def _transition_step(system, z_prev, t, dt, theta, options, guess,
                     was_faulted: bool, now_faulted: bool):
    """Solve a step across a fault on/off jump by continuation on the shunt.

    The algebraic jump at a severe topology change can leave the target
    solution branch outside Newton's basin; homotopy over the fault
    conductance tracks the branch from the previous regime.  Only the final
    stage (full target network) defines the accepted state, so the step
    residual contract is unchanged.
    """
    partial = getattr(system, "partial_fault", None)
    if partial is None:
        raise NewtonError(f"step across regime change failed at t={t:g}",
                          t=t, residual=np.nan, iterations=options.max_newton_iters)
    f0 = 1.0 if was_faulted else 0.0
    f1 = 1.0 if now_faulted else 0.0
    zg = (guess if guess is not None else z_prev).copy()
    s_done, ds = 0.0, 0.5
    z = None
    while s_done < 1.0:
        s = min(1.0, s_done + ds)
        stage = partial(f0 + s * (f1 - f0))
        try:
            z, _ = _newton_step(stage, z_prev, t, dt, theta, options, z_guess=zg)
            zg = z
            s_done = s
            ds *= 2.0
        except NewtonError as exc:
            ds *= 0.5
            if ds < 1.0 / 128.0:
                raise NewtonError(
                    f"fault-transition continuation stalled at t={t:g} "
                    f"(reached fraction {s_done:.3f}): {exc}",
                    t=t, residual=exc.residual, iterations=exc.iterations) from exc
    return z


def build_time_grid(times: np.ndarray, t0: float, event_times: tuple[float, ...],
                    refine: int) -> tuple[np.ndarray, np.ndarray]:
    """Internal integration grid: requested times plus snapped event instants,
    each anchor interval split into ``refine`` equal substeps.

    Returns (grid, sample_index) with grid[sample_index] == times bitwise.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise GridcalError("times must be a non-empty 1-D array")
    if np.any(np.diff(times) <= 0):
        raise GridcalError("times must be strictly increasing")
    if times[0] < t0:
        raise GridcalError(f"times start at {times[0]} before t0={t0}")
    anchors = [t0] + list(times) if times[0] > t0 else list(times)
    horizon = times[-1]
    for ev in event_times:
        if t0 < ev < horizon and all(abs(ev - a) > _ANCHOR_TOL for a in anchors):
            anchors.append(ev)
    anchors = np.array(sorted(anchors))
    grid = [anchors[0]]
    for a, b in zip(anchors[:-1], anchors[1:]):
        for j in range(1, refine):
            grid.append(a + (b - a) * j / refine)
        grid.append(b)
    grid = np.array(grid)
    # requested times must appear bitwise; map by value
    pos = {t: i for i, t in enumerate(grid)}
    sample_index = np.array([pos[t] for t in times], dtype=int)
    return grid, sample_index


def _bind(dyn, scenario):
    if isinstance(dyn, GridModel):
        dyn = Dynamics(dyn)
    if isinstance(dyn, Dynamics):
        return ScenarioDynamics(dyn, scenario)
    return dyn  # already a bound system (e.g. a test stub)


def simulate(dyn, theta, z0=None, scenario: FaultScenario | None = None,
             times=None, options: SimOptions = SimOptions(), t0: float = 0.0) -> Trajectory:
    """Integrate the DAE and sample the trajectory exactly at ``times``.

    ``dyn`` may be a GridModel, a Dynamics, or an already scenario-bound
    system.  With z0 omitted the grid equilibrium is used.  Identical inputs
    produce bit-identical trajectories.
    """
    system = _bind(dyn, scenario)
    theta = as_theta(theta, getattr(system, "n_theta", None))
    if z0 is None:
        z0 = system.equilibrium()
    z0 = _coerce_state(z0, system.n)
    if times is None:
        raise GridcalError("times must be given")
    grid, sample_index = build_time_grid(
        np.asarray(times, dtype=float), t0, system.event_times(), options.refine)

    states = np.empty((grid.size, z0.size))
    states[0] = z0  # build_time_grid always anchors the grid at t0
    z = z0
    # algebraic variables jump at topology changes; seed Newton with the last
    # algebraic profile seen in the target regime so it lands on the branch
    # continuous with that network, not on a collapsed-voltage solution
    is_faulted = getattr(system, "is_faulted", lambda t: False)
    n = system.n
    last_in_regime = {is_faulted(grid[0]): z0}
    regime = is_faulted(grid[0])
    for k in range(1, grid.size):
        t_next = grid[k]
        dt = t_next - grid[k - 1]
        regime_next = is_faulted(t_next)
        guess = None
        if regime_next != regime and regime_next in last_in_regime:
            guess = z.copy()
            guess[n:] = last_in_regime[regime_next][n:]
        try:
            z, _ = _newton_step(system, z, t_next, dt, theta, options, z_guess=guess)
        except NewtonError:
            if regime_next == regime:
                raise
            z = _transition_step(system, z, t_next, dt, theta, options, guess,
                                 regime, regime_next)
        states[k] = z
        last_in_regime[regime_next] = z
        regime = regime_next
    return Trajectory(
        times=grid[sample_index].copy(),
        states=states[sample_index].copy(),
        n_diff=system.n,
        internal_times=grid,
        internal_states=states,
        sample_index=sample_index,
    )


def propagate_sensitivities(dyn, theta, trajectory: Trajectory,
                            scenario: FaultScenario | None = None,
                            options: SimOptions = SimOptions()) -> SensitivityTrajectory:
    """Discrete trajectory sensitivities d z_k / d theta at the sampled times.

    Walks the stored internal grid of ``trajectory``, solving the
    differentiated backward-Euler step with the Jacobian factorized at each
    accepted state.  S at t0 is zero: the equilibrium is theta-independent.
    """
    system = _bind(dyn, scenario)
    theta = as_theta(theta, getattr(system, "n_theta", None))
    if trajectory.internal_times is None or trajectory.internal_states is None:
        raise GridcalError("trajectory lacks internal integration states; "
                           "produce it with simulate()")
    grid = trajectory.internal_times
    states = trajectory.internal_states
    n = system.n
    n_theta = theta.size
    S = np.zeros((states.shape[1], n_theta))
    out = np.empty((trajectory.sample_index.size, S.shape[0], n_theta))
    want = {int(i): j for j, i in enumerate(trajectory.sample_index)}
    if 0 in want:
        out[want[0]] = S
    for k in range(1, grid.size):
        t_next = grid[k]
        dt = t_next - grid[k - 1]
        z_next = states[k]
        J = system.jac_state(t_next, z_next, theta)
        A = -J
        A[:n, :] *= dt
        A[np.arange(n), np.arange(n)] += 1.0
        Jt = system.jac_theta(t_next, z_next, theta)
        rhs = np.zeros_like(S)
        rhs[:n] = S[:n] + dt * Jt[:n]
        rhs[n:] = Jt[n:]
        try:
            lu = lu_factor(A)
        except ValueError as exc:
            raise NewtonError(f"singular step Jacobian at t={t_next:g}: {exc}",
                              t=t_next, residual=np.nan, iterations=0) from exc
        S = lu_solve(lu, rhs)
        if k in want:
            out[want[k]] = S
    return SensitivityTrajectory(times=trajectory.times.copy(), sensitivities=out)


def simulate_with_sensitivities(dyn, theta, z0=None, scenario=None, times=None,
                                options: SimOptions = SimOptions(), t0: float = 0.0):
    """Forward trajectory and its sensitivities in one pass."""
    system = _bind(dyn, scenario)
    traj = simulate(system, theta, z0=z0, times=times, options=options, t0=t0)
    sens = propagate_sensitivities(system, theta, traj, options=options)
    return traj, sens


def simulate_tlm_surrogate(theta, theta_ref, ref_trajectory: Trajectory,
                           ref_sensitivities: SensitivityTrajectory) -> Trajectory:
    """First-order surrogate trajectory linearized at theta_ref:

        z_k(theta) ~ z_k(theta_ref) + S_k(theta_ref) (theta - theta_ref).

    At theta = theta_ref this returns the reference trajectory exactly.
    """
    theta = as_theta(theta)
    theta_ref = as_theta(theta_ref)
    S = ref_sensitivities.sensitivities
    if S.shape[2] != theta.size or theta.size != theta_ref.size:
        raise GridcalError(
            f"theta length {theta.size} does not match sensitivity columns {S.shape[2]}")
    dtheta = theta - theta_ref
    states = ref_trajectory.states + S @ dtheta
    return Trajectory(times=ref_trajectory.times.copy(), states=states,
                      n_diff=ref_trajectory.n_diff)


def export_trajectory_csv(trajectory: Trajectory, state_names: list[str], path) -> None:
    """CSV export: header ``time`` plus one column per state variable."""
    if len(state_names) != trajectory.states.shape[1]:
        raise GridcalError("state name count does not match state dimension")
    with open(path, "w") as f:
        f.write("time," + ",".join(state_names) + "\n")
        for t, row in zip(trajectory.times, trajectory.states):
            f.write(f"{t!r}," + ",".join(repr(v) for v in row) + "\n")
