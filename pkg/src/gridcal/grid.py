"""Static grid description: buses, branches, devices and the parameterized load law.

The grid file format is a small JSON schema (``"schema": "gridcal-grid/1"``)
with top-level keys ``buses``, ``branches``, ``generators``, ``loads`` and
``base_frequency``.  All electrical quantities are per-unit on a common system
base; angles are radians.  Loads carry either ``theta_index`` (the component of
the calibration vector that sets their mixture) or ``theta_fixed`` (a frozen
mixture value excluded from calibration).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GridFormatError, GridValidationError

SCHEMA_ID = "gridcal-grid/1"


@dataclass(frozen=True)
class BusSpec:
    id: int
    base_v: float = 1.0
    v0: float = 1.0
    angle0: float = 0.0


@dataclass(frozen=True)
class BranchSpec:
    from_bus: int
    to_bus: int
    y_series: complex
    y_shunt: complex = 0j  # total line charging, split half to each end


@dataclass(frozen=True)
class GeneratorSpec:
    bus: int
    h: float            # inertia constant, seconds
    d: float            # damping torque coefficient, per-unit
    xd_prime: float     # transient reactance, per-unit
    t_gov: float = 0.5  # governor lag time constant, seconds
    droop: float = 0.05  # speed droop; 0 disables the speed feedback


@dataclass(frozen=True)
class LoadSpec:
    bus: int
    p0: float
    q0: float
    theta_index: int | None = None
    theta_fixed: float | None = None


@dataclass(frozen=True)
class GridModel:
    """Validated, immutable network description.

    Safe to share across threads; every scenario-dependent modification
    (fault application) produces a separate view and never mutates the model.
    """

    buses: tuple[BusSpec, ...]
    branches: tuple[BranchSpec, ...]
    generators: tuple[GeneratorSpec, ...]
    loads: tuple[LoadSpec, ...]
    base_frequency: float = 60.0
    name: str = ""
    _bus_index: dict[int, int] = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(sorted(self.buses, key=lambda b: b.id)))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(sorted(self.generators, key=lambda g: g.bus)))
        object.__setattr__(self, "loads", tuple(sorted(self.loads, key=lambda l: (l.bus, l.theta_index if l.theta_index is not None else -1))))
        object.__setattr__(self, "_bus_index", {b.id: k for k, b in enumerate(self.buses)})
        self._validate()

    def _validate(self):
        if len(self._bus_index) != len(self.buses):
            seen = set()
            for b in self.buses:
                if b.id in seen:
                    raise GridValidationError(f"duplicate bus id {b.id}")
                seen.add(b.id)
        if self.base_frequency <= 0:
            raise GridValidationError(f"base_frequency must be positive, got {self.base_frequency}")
        for b in self.buses:
            if b.v0 <= 0:
                raise GridValidationError(f"bus {b.id}: steady-state voltage v0 must be positive, got {b.v0}")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in self._bus_index:
                    raise GridValidationError(
                        f"branch {br.from_bus}-{br.to_bus} references unknown bus {end}")
        gen_buses = set()
        for g in self.generators:
            if g.bus not in self._bus_index:
                raise GridValidationError(f"generator references unknown bus {g.bus}")
            if g.bus in gen_buses:
                raise GridValidationError(f"more than one generator at bus {g.bus}")
            gen_buses.add(g.bus)
            if g.h <= 0:
                raise GridValidationError(f"generator at bus {g.bus}: inertia h must be positive")
            if g.xd_prime <= 0:
                raise GridValidationError(f"generator at bus {g.bus}: xd_prime must be positive")
            if g.t_gov <= 0:
                raise GridValidationError(f"generator at bus {g.bus}: t_gov must be positive")
            if g.droop < 0:
                raise GridValidationError(f"generator at bus {g.bus}: droop must be >= 0")
        indices = []
        for l in self.loads:
            if l.bus not in self._bus_index:
                raise GridValidationError(f"load references unknown bus {l.bus}")
            if (l.theta_index is None) == (l.theta_fixed is None):
                raise GridValidationError(
                    f"load at bus {l.bus}: exactly one of theta_index / theta_fixed required")
            if l.theta_index is not None:
                if l.theta_index < 0:
                    raise GridValidationError(f"load at bus {l.bus}: negative theta_index")
                indices.append(l.theta_index)
            if l.theta_fixed is not None and not (0.0 <= l.theta_fixed <= 1.0):
                raise GridValidationError(
                    f"load at bus {l.bus}: theta_fixed {l.theta_fixed} outside [0, 1]")
        if indices:
            want = set(range(max(indices) + 1))
            have = set(indices)
            if have != want:
                missing = sorted(want - have)
                raise GridValidationError(f"theta indices must cover 0..{max(indices)}; missing {missing}")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_theta(self) -> int:
        """Number of calibrated load-mixture parameters."""
        idx = [l.theta_index for l in self.loads if l.theta_index is not None]
        return max(idx) + 1 if idx else 0

    def bus_position(self, bus_id: int) -> int:
        """Position of a bus in the sorted bus order."""
        try:
            return self._bus_index[bus_id]
        except KeyError:
            raise GridValidationError(f"unknown bus id {bus_id}") from None

    def admittance_matrix(self) -> np.ndarray:
        """Dense complex bus admittance matrix in sorted-bus order."""
        nb = self.n_bus
        Y = np.zeros((nb, nb), dtype=complex)
        for br in self.branches:
            i = self._bus_index[br.from_bus]
            j = self._bus_index[br.to_bus]
            Y[i, i] += br.y_series + br.y_shunt / 2.0
            Y[j, j] += br.y_series + br.y_shunt / 2.0
            Y[i, j] -= br.y_series
            Y[j, i] -= br.y_series
        return Y


@dataclass(frozen=True)
class Parameters:
    """Calibrated load-mixture vector; every component lies in [0, 1]."""

    theta: np.ndarray

    def __post_init__(self):
        th = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if th.ndim != 1:
            raise GridValidationError("theta must be a vector")
        if np.any(th < 0.0) or np.any(th > 1.0):
            raise GridValidationError(f"theta components outside [0, 1]: {th}")
        object.__setattr__(self, "theta", th)

    def __len__(self) -> int:
        return self.theta.size


def as_theta(theta, n_theta: int | None = None) -> np.ndarray:
    """Coerce Parameters / array-like to a validated 1-D float array."""
    th = theta.theta if isinstance(theta, Parameters) else np.atleast_1d(np.asarray(theta, dtype=float))
    if n_theta is not None and th.size != n_theta:
        raise GridValidationError(f"theta has length {th.size}, expected {n_theta}")
    return th


@dataclass(frozen=True)
class FaultScenario:
    """Three-phase-to-ground fault at a bus, held for [t_fault, t_clear)."""

    bus: int
    fault_impedance: float
    t_fault: float = 0.1
    t_clear: float | None = None  # None: cleared after two cycles of the grid frequency

    def __post_init__(self):
        if self.fault_impedance <= 0:
            raise GridValidationError(f"fault_impedance must be positive, got {self.fault_impedance}")
        if self.t_fault < 0:
            raise GridValidationError(f"t_fault must be >= 0, got {self.t_fault}")
        if self.t_clear is not None and not (self.t_fault < self.t_clear):
            raise GridValidationError(
                f"need t_fault < t_clear, got [{self.t_fault}, {self.t_clear}]")

    def clearing_time(self, base_frequency: float) -> float:
        if self.t_clear is not None:
            return self.t_clear
        return self.t_fault + 2.0 / base_frequency

    def label(self) -> str:
        return f"bus{self.bus}_z{self.fault_impedance:g}"


class FaultView:
    """Time-dependent network view for one scenario.

    Holds the pre-fault admittance blocks and a faulted copy with the shunt
    1/fault_impedance added at the faulted bus; ``conductance_at`` selects by
    time without ever touching the base matrices, so clearing the fault
    restores the original admittance exactly.
    """

    def __init__(self, grid: GridModel, scenario: FaultScenario | None,
                 g_base: np.ndarray, b_base: np.ndarray):
        self.scenario = scenario
        self.g_base = g_base
        self.b_base = b_base
        if scenario is None:
            self.g_fault = g_base
            self.b_fault = b_base
            self.t_fault = np.inf
            self.t_clear = np.inf
        else:
            pos = grid.bus_position(scenario.bus)
            gf = self.g_base.copy()
            gf[pos, pos] += 1.0 / scenario.fault_impedance
            self.g_fault = gf
            self.b_fault = b_base
            self.t_fault = scenario.t_fault
            self.t_clear = scenario.clearing_time(grid.base_frequency)

    def faulted(self, t: float) -> bool:
        # half-open window with a 1 ns guard so grid anchors that coincide
        # with an event instant (up to float rounding) resolve consistently
        return self.t_fault - 1e-9 <= t < self.t_clear - 1e-9

    def conductance_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        if self.faulted(t):
            return self.g_fault, self.b_fault
        return self.g_base, self.b_base

    def event_times(self) -> tuple[float, ...]:
        if self.scenario is None:
            return ()
        return (self.t_fault, self.t_clear)


def apply_fault(grid: GridModel, scenario: FaultScenario) -> FaultView:
    """Scenario-local admittance view; the shared grid is never mutated."""
    grid.bus_position(scenario.bus)  # raises for unknown bus
    Y = grid.admittance_matrix()
    return FaultView(grid, scenario, np.ascontiguousarray(Y.real), np.ascontiguousarray(Y.imag))


def load_injection(theta_i: float, v: float, v0: float, p0: float, q0: float):
    """Active/reactive power drawn by a load at voltage ``v``.

    The mixture ``theta_i`` interpolates between a constant-power draw
    (theta_i = 0) and a constant-impedance draw (theta_i = 1):

        p = theta_i * (v / v0)**2 * p0 + (1 - theta_i) * p0

    and identically for q.
    """
    if v0 <= 0:
        raise GridValidationError(f"v0 must be positive, got {v0}")
    ratio_sq = (v / v0) ** 2
    p = theta_i * ratio_sq * p0 + (1.0 - theta_i) * p0
    q = theta_i * ratio_sq * q0 + (1.0 - theta_i) * q0
    return p, q


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise GridFormatError(f"{where}: missing required field '{key}'")
    return record[key]


def grid_from_dict(doc: dict, name: str = "") -> GridModel:
    """Build and validate a GridModel from a parsed grid document."""
    if not isinstance(doc, dict):
        raise GridFormatError("grid document must be a JSON object")
    schema = doc.get("schema")
    if schema != SCHEMA_ID:
        raise GridFormatError(f"unsupported schema {schema!r}; expected {SCHEMA_ID!r}")
    buses = []
    for rec in _require(doc, "buses", "grid"):
        where = f"bus record {rec!r}"
        buses.append(BusSpec(
            id=int(_require(rec, "id", where)),
            base_v=float(rec.get("base_v", 1.0)),
            v0=float(_require(rec, "v0", where)),
            angle0=float(rec.get("angle0", 0.0)),
        ))
    branches = []
    for rec in _require(doc, "branches", "grid"):
        where = f"branch record {rec!r}"
        ys = _require(rec, "y_series", where)
        ysh = rec.get("y_shunt", [0.0, 0.0])
        branches.append(BranchSpec(
            from_bus=int(_require(rec, "from", where)),
            to_bus=int(_require(rec, "to", where)),
            y_series=complex(float(ys[0]), float(ys[1])),
            y_shunt=complex(float(ysh[0]), float(ysh[1])),
        ))
    generators = []
    for rec in doc.get("generators", []):
        where = f"generator record {rec!r}"
        generators.append(GeneratorSpec(
            bus=int(_require(rec, "bus", where)),
            h=float(_require(rec, "h", where)),
            d=float(rec.get("d", 0.0)),
            xd_prime=float(_require(rec, "xd_prime", where)),
            t_gov=float(rec.get("t_gov", 0.5)),
            droop=float(rec.get("droop", 0.05)),
        ))
    loads = []
    for rec in doc.get("loads", []):
        where = f"load record {rec!r}"
        ti = rec.get("theta_index")
        tf = rec.get("theta_fixed")
        loads.append(LoadSpec(
            bus=int(_require(rec, "bus", where)),
            p0=float(_require(rec, "p0", where)),
            q0=float(_require(rec, "q0", where)),
            theta_index=None if ti is None else int(ti),
            theta_fixed=None if tf is None else float(tf),
        ))
    return GridModel(
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        loads=tuple(loads),
        base_frequency=float(doc.get("base_frequency", 60.0)),
        name=name or str(doc.get("name", "")),
    )


def load_grid(path: str | Path) -> GridModel:
    """Load and validate a grid JSON file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise GridFormatError(f"cannot read grid file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GridFormatError(f"{path}: not valid JSON: {exc}") from exc
    return grid_from_dict(doc, name=path.stem)


def grid_to_dict(grid: GridModel) -> dict:
    """Inverse of grid_from_dict, for writing grid files."""
    return {
        "schema": SCHEMA_ID,
        "name": grid.name,
        "base_frequency": grid.base_frequency,
        "buses": [
            {"id": b.id, "base_v": b.base_v, "v0": b.v0, "angle0": b.angle0}
            for b in grid.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus,
             "y_series": [br.y_series.real, br.y_series.imag],
             "y_shunt": [br.y_shunt.real, br.y_shunt.imag]}
            for br in grid.branches
        ],
        "generators": [
            {"bus": g.bus, "h": g.h, "d": g.d, "xd_prime": g.xd_prime,
             "t_gov": g.t_gov, "droop": g.droop}
            for g in grid.generators
        ],
        "loads": [
            {k: v for k, v in
             [("bus", l.bus), ("p0", l.p0), ("q0", l.q0),
              ("theta_index", l.theta_index), ("theta_fixed", l.theta_fixed)]
             if v is not None}
            for l in grid.loads
        ],
    }


def bundled_case_path(name: str) -> Path:
    """Path of a grid file shipped with the package (e.g. 'wscc9', 'case39')."""
    p = Path(__file__).parent / "data" / f"{name}.json"
    if not p.exists():
        raise GridFormatError(f"no bundled case named {name!r}")
    return p
