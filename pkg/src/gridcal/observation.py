"""PMU observation operator, Gaussian noise model and synthetic data.

The operator is a pure row selection of state components (rectangular voltage
phasor components per observed bus), so it is linear by construction and its
Jacobian is itself.  Noise draws are independent across time instants and
channels, with a diagonal covariance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import Dynamics
from .errors import GridcalError
from .grid import FaultScenario, as_theta
from .simulate import SimOptions, SystemState, Trajectory, simulate


@dataclass(frozen=True)
class ObservationOperator:
    """Selection of state components; one channel per selected index."""

    indices: np.ndarray                 # positions inside z, one per channel
    channel_names: tuple[str, ...]
    state_dim: int
    buses: tuple[int, ...] = ()

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int)
        if idx.ndim != 1:
            raise GridcalError("operator indices must be a vector")
        if np.any(idx < 0) or np.any(idx >= self.state_dim):
            raise GridcalError("operator index outside the state vector")
        object.__setattr__(self, "indices", idx)
        if len(self.channel_names) != idx.size:
            raise GridcalError("channel name count does not match index count")

    @property
    def n_obs(self) -> int:
        return self.indices.size

    def matrix(self) -> np.ndarray:
        """Explicit 0/1 selection matrix (N_obs x N); mostly for tests."""
        H = np.zeros((self.n_obs, self.state_dim))
        H[np.arange(self.n_obs), self.indices] = 1.0
        return H

    def __call__(self, state):
        return observe(self, state)


def voltage_operator(dyn: Dynamics, buses=None) -> ObservationOperator:
    """Operator observing both rectangular voltage components of the given
    buses (default: every bus)."""
    grid = dyn.grid
    if buses is None:
        buses = [b.id for b in grid.buses]
    indices = []
    names = []
    for bus in buses:
        ir, ii = dyn.voltage_index(bus)
        indices += [ir, ii]
        names += [f"v_re@{bus}", f"v_im@{bus}"]
    return ObservationOperator(
        indices=np.array(indices, dtype=int),
        channel_names=tuple(names),
        state_dim=dyn.size,
        buses=tuple(buses),
    )


def observe(operator: ObservationOperator, state):
    """Apply the selection to a state vector, a SystemState, or a (K, N)
    stack of states; pure component extraction, no noise."""
    z = state.z if isinstance(state, SystemState) else np.asarray(state, dtype=float)
    if z.shape[-1] != operator.state_dim:
        raise GridcalError(
            f"state dimension {z.shape[-1]} does not match operator ({operator.state_dim})")
    return z[..., operator.indices]


@dataclass
class ObservationSet:
    """Measured data: one vector per observation instant plus the noise model."""

    times: np.ndarray           # (K,)
    data: np.ndarray            # (K, N_obs)
    r_diagonal: np.ndarray      # (N_obs,) noise variances per channel
    operator: ObservationOperator
    seed: int | None = None
    theta_true: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.data = np.asarray(self.data, dtype=float)
        self.r_diagonal = np.asarray(self.r_diagonal, dtype=float)
        if self.data.shape != (self.times.size, self.operator.n_obs):
            raise GridcalError(
                f"data shape {self.data.shape} does not match "
                f"({self.times.size}, {self.operator.n_obs})")
        if self.r_diagonal.size == 1:
            self.r_diagonal = np.full(self.operator.n_obs, float(self.r_diagonal))
        if self.r_diagonal.shape != (self.operator.n_obs,):
            raise GridcalError("noise variance vector does not match channel count")
        if np.any(self.r_diagonal <= 0):
            raise GridcalError("noise variances must be positive")

    @property
    def n_times(self) -> int:
        return self.times.size


def perturb(truth: np.ndarray, r_diagonal, rng: np.random.Generator) -> np.ndarray:
    """Add one independent zero-mean Gaussian draw per (instant, channel)."""
    truth = np.asarray(truth, dtype=float)
    sig = np.sqrt(np.broadcast_to(np.asarray(r_diagonal, dtype=float), truth.shape[-1:]))
    return truth + rng.standard_normal(truth.shape) * sig


def synthesize_observations(theta_true, scenario: FaultScenario | None, grid,
                            operator: ObservationOperator, times, r_diagonal,
                            seed: int, options: SimOptions = SimOptions(),
                            truth_trajectory: Trajectory | None = None) -> ObservationSet:
    """Twin-experiment data: noiseless trajectory at theta_true plus noise.

    Deterministic for a fixed seed.  ``truth_trajectory`` short-circuits the
    forward solve when the caller already has it (replicate studies).
    """
    theta_true = as_theta(theta_true)
    if truth_trajectory is None:
        truth_trajectory = simulate(grid, theta_true, scenario=scenario,
                                    times=times, options=options)
    truth = observe(operator, truth_trajectory.states)
    rng = np.random.default_rng(seed)
    data = perturb(truth, r_diagonal, rng)
    return ObservationSet(times=np.asarray(times, dtype=float), data=data,
                          r_diagonal=r_diagonal, operator=operator,
                          seed=seed, theta_true=theta_true.copy())


def export_observations(obs: ObservationSet, csv_path, meta_path=None) -> None:
    """CSV (time, channel-id, value) plus a JSON sidecar with the operator
    spec, noise variances, seed and twin-experiment provenance."""
    csv_path = Path(csv_path)
    with open(csv_path, "w") as f:
        f.write("time,channel,value\n")
        for t, row in zip(obs.times, obs.data):
            for name, val in zip(obs.operator.channel_names, row):
                f.write(f"{t!r},{name},{val!r}\n")
    meta = {
        "operator": {
            "indices": obs.operator.indices.tolist(),
            "channel_names": list(obs.operator.channel_names),
            "state_dim": obs.operator.state_dim,
            "buses": list(obs.operator.buses),
        },
        "r_diagonal": obs.r_diagonal.tolist(),
        "seed": obs.seed,
        "theta_true": None if obs.theta_true is None else obs.theta_true.tolist(),
    }
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def import_observations(csv_path, meta_path=None) -> ObservationSet:
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text())
    op = ObservationOperator(
        indices=np.array(meta["operator"]["indices"], dtype=int),
        channel_names=tuple(meta["operator"]["channel_names"]),
        state_dim=int(meta["operator"]["state_dim"]),
        buses=tuple(meta["operator"]["buses"]),
    )
    by_name = {name: j for j, name in enumerate(op.channel_names)}
    rows: dict[float, np.ndarray] = {}
    order: list[float] = []
    with open(csv_path) as f:
        header = f.readline().strip()
        if header != "time,channel,value":
            raise GridcalError(f"{csv_path}: unexpected header {header!r}")
        for line in f:
            t_s, name, val = line.strip().split(",")
            t = float(t_s)
            if t not in rows:
                rows[t] = np.full(op.n_obs, np.nan)
                order.append(t)
            rows[t][by_name[name]] = float(val)
    times = np.array(order)
    data = np.stack([rows[t] for t in order]) if order else np.empty((0, op.n_obs))
    if np.any(np.isnan(data)):
        raise GridcalError(f"{csv_path}: missing channel values")
    theta_true = meta.get("theta_true")
    return ObservationSet(
        times=times, data=data, r_diagonal=np.array(meta["r_diagonal"]),
        operator=op, seed=meta.get("seed"),
        theta_true=None if theta_true is None else np.array(theta_true))
