"""Compiled DAE system for a grid: state layout, residual, Jacobians, equilibrium.

State vector z = (x, y):

* differential block x (size n = 3 per generator, sorted by bus id):
  ``delta`` rotor angle [rad], ``omega`` per-unit speed deviation,
  ``pm`` mechanical power [pu];
* algebraic block y (size m = 2 per bus, sorted by bus id):
  rectangular bus voltage components ``v_re``, ``v_im`` [pu].

Machine model: constant internal EMF behind the transient reactance, swing
equation with inertia and damping, plus a first-order governor lag with speed
droop.  The device interface is confined to this module; richer machine models
replace the per-generator constant/derivative tables without touching the
integrator.

The equilibrium is computed once per grid: generator-bus voltages are held at
their stored steady-state phasors and the remaining bus voltages are solved by
Newton iteration with every load drawing its base power.  Load reference
voltages are then rebased to the converged magnitudes, which makes the
equilibrium exact for every admissible mixture vector theta.
"""

from __future__ import annotations

import numpy as np

from .errors import PowerFlowError
from .grid import FaultScenario, FaultView, GridModel, apply_fault, as_theta


class _Regime:
    """One admittance regime (pre/during fault): matrices plus the constant
    algebraic Jacobian block they induce."""

    __slots__ = ("g", "b", "jnet")

    def __init__(self, g: np.ndarray, b: np.ndarray):
        self.g = g
        self.b = b
        nb = g.shape[0]
        jnet = np.zeros((2 * nb, 2 * nb))
        jnet[0::2, 0::2] = g
        jnet[0::2, 1::2] = -b
        jnet[1::2, 0::2] = b
        jnet[1::2, 1::2] = g
        self.jnet = jnet


class Dynamics:
    """Grid compiled to index arrays and device constants for fast evaluation."""

    def __init__(self, grid: GridModel, pf_tol: float = 1e-10, pf_max_iter: int = 40):
        self.grid = grid
        self.n_gen = len(grid.generators)
        self.n_bus = grid.n_bus
        self.n_theta = grid.n_theta
        self.n = 3 * self.n_gen
        self.m = 2 * self.n_bus
        self.size = self.n + self.m
        self.omega_s = 2.0 * np.pi * grid.base_frequency

        Y = grid.admittance_matrix()
        self._g_net = np.ascontiguousarray(Y.real)
        self._b_net = np.ascontiguousarray(Y.imag)

        gens = grid.generators
        self._gen_bus = np.array([grid.bus_position(g.bus) for g in gens], dtype=int)
        self._gen_h2 = np.array([2.0 * g.h for g in gens])
        self._gen_d = np.array([g.d for g in gens])
        self._gen_x = np.array([g.xd_prime for g in gens])
        self._gen_tg = np.array([g.t_gov for g in gens])
        self._gen_k = np.array([1.0 / g.droop if g.droop > 0 else 0.0 for g in gens])

        loads = grid.loads
        self._load_bus = np.array([grid.bus_position(l.bus) for l in loads], dtype=int)
        self._load_p0 = np.array([l.p0 for l in loads])
        self._load_q0 = np.array([l.q0 for l in loads])
        self._load_tidx = np.array(
            [l.theta_index if l.theta_index is not None else -1 for l in loads], dtype=int)
        self._load_tfix = np.array(
            [l.theta_fixed if l.theta_fixed is not None else 0.0 for l in loads])

        self._solve_equilibrium(pf_tol, pf_max_iter)
        self._build_constant_jacobian()

    # ------------------------------------------------------------------ layout

    @property
    def state_names(self) -> list[str]:
        names = []
        for g in self.grid.generators:
            names += [f"delta@{g.bus}", f"omega@{g.bus}", f"pm@{g.bus}"]
        for b in self.grid.buses:
            names += [f"v_re@{b.id}", f"v_im@{b.id}"]
        return names

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return z[: self.n], z[self.n:]

    def voltage_index(self, bus_id: int) -> tuple[int, int]:
        """(v_re, v_im) positions of a bus inside z."""
        pos = self.grid.bus_position(bus_id)
        return self.n + 2 * pos, self.n + 2 * pos + 1

    def voltage_magnitudes(self, z: np.ndarray) -> np.ndarray:
        vr = z[self.n:: 2]
        vi = z[self.n + 1:: 2]
        return np.hypot(vr, vi)

    def equilibrium(self) -> np.ndarray:
        return self._z0.copy()

    # ----------------------------------------------------------- steady state

    def _load_currents_fixed(self, vr, vi):
        """Constant-(p0, q0) load currents aggregated per bus (power flow)."""
        lb = self._load_bus
        u = vr[lb] ** 2 + vi[lb] ** 2
        ir = (self._load_p0 * vr[lb] + self._load_q0 * vi[lb]) / u
        ii = (self._load_p0 * vi[lb] - self._load_q0 * vr[lb]) / u
        out_r = np.zeros(self.n_bus)
        out_i = np.zeros(self.n_bus)
        np.add.at(out_r, lb, ir)
        np.add.at(out_i, lb, ii)
        return out_r, out_i

    def _solve_equilibrium(self, tol: float, max_iter: int):
        grid = self.grid
        nb = self.n_bus
        vr = np.array([b.v0 * np.cos(b.angle0) for b in grid.buses])
        vi = np.array([b.v0 * np.sin(b.angle0) for b in grid.buses])
        G, B = self._g_net, self._b_net
        is_gen = np.zeros(nb, dtype=bool)
        is_gen[self._gen_bus] = True
        free = np.flatnonzero(~is_gen)

        def mismatch(vr, vi):
            lr, li = self._load_currents_fixed(vr, vi)
            fr = G @ vr - B @ vi + lr
            fi = G @ vi + B @ vr + li
            return fr, fi

        if free.size:
            pick = np.stack([2 * free, 2 * free + 1], axis=1).ravel()
            for it in range(max_iter + 1):
                fr, fi = mismatch(vr, vi)
                resid = np.stack([fr[free], fi[free]], axis=1).ravel()
                norm = np.abs(resid).max(initial=0.0)
                if norm < tol:
                    break
                if it == max_iter:
                    raise PowerFlowError(
                        f"steady-state network solve did not converge: "
                        f"mismatch {norm:.3e} after {max_iter} iterations", mismatch=norm)
                J = self._pf_jacobian(vr, vi)
                try:
                    step = np.linalg.solve(J[np.ix_(pick, pick)], -resid)
                except np.linalg.LinAlgError as exc:
                    raise PowerFlowError(f"singular network Jacobian: {exc}", mismatch=norm) from exc
                dvr = np.zeros(nb)
                dvi = np.zeros(nb)
                dvr[free] = step[0::2]
                dvi[free] = step[1::2]
                # halving line search keeps poor initial guesses from diverging
                scale = 1.0
                for _ in range(8):
                    fr_t, fi_t = mismatch(vr + scale * dvr, vi + scale * dvi)
                    trial = max(np.abs(fr_t[free]).max(initial=0.0),
                                np.abs(fi_t[free]).max(initial=0.0))
                    if trial < norm or scale < 1e-2:
                        break
                    scale *= 0.5
                vr = vr + scale * dvr
                vi = vi + scale * dvi

        # generator constants from the converged point
        lr, li = self._load_currents_fixed(vr, vi)
        inet_r = G @ vr - B @ vi
        inet_i = G @ vi + B @ vr
        gb = self._gen_bus
        igr = inet_r[gb] + lr[gb]
        igi = inet_i[gb] + li[gb]
        v_g = vr[gb] + 1j * vi[gb]
        i_g = igr + 1j * igi
        e_cplx = v_g + 1j * self._gen_x * i_g
        emag = np.abs(e_cplx)
        if np.any(emag < 1e-9):
            bad = self.grid.generators[int(np.argmin(emag))].bus
            raise PowerFlowError(f"device initialization failed: zero internal EMF at bus {bad}")
        self._gen_e = emag
        delta0 = np.angle(e_cplx)
        pe0 = np.real(e_cplx * np.conj(i_g))
        self._gen_pm_set = pe0

        # rebase load reference voltages to the converged magnitudes so the
        # injection law returns exactly (p0, q0) at the equilibrium point
        self._load_v0sq = vr[self._load_bus] ** 2 + vi[self._load_bus] ** 2

        z0 = np.zeros(self.size)
        z0[0: self.n: 3] = delta0
        z0[2: self.n: 3] = pe0
        z0[self.n:: 2] = vr
        z0[self.n + 1:: 2] = vi
        self._z0 = z0

    def _pf_jacobian(self, vr, vi):
        """Jacobian of the fixed-load mismatch w.r.t. interleaved (vr, vi)."""
        J = np.zeros((self.m, self.m))
        J[0::2, 0::2] = self._g_net
        J[0::2, 1::2] = -self._b_net
        J[1::2, 0::2] = self._b_net
        J[1::2, 1::2] = self._g_net
        lb = self._load_bus
        x, y = vr[lb], vi[lb]
        u = x * x + y * y
        a, c = self._load_p0, self._load_q0
        s_r = a * x + c * y
        s_i = a * y - c * x
        d_rr = a / u - 2.0 * x * s_r / u ** 2
        d_ri = c / u - 2.0 * y * s_r / u ** 2
        d_ir = -c / u - 2.0 * x * s_i / u ** 2
        d_ii = a / u - 2.0 * y * s_i / u ** 2
        np.add.at(J, (2 * lb, 2 * lb), d_rr)
        np.add.at(J, (2 * lb, 2 * lb + 1), d_ri)
        np.add.at(J, (2 * lb + 1, 2 * lb), d_ir)
        np.add.at(J, (2 * lb + 1, 2 * lb + 1), d_ii)
        return J

    # ------------------------------------------------------------- evaluation

    def _load_mixture(self, theta: np.ndarray) -> np.ndarray:
        mix = self._load_tfix.copy()
        cal = self._load_tidx >= 0
        mix[cal] = theta[self._load_tidx[cal]]
        return mix

    def rhs(self, t: float, z: np.ndarray, theta: np.ndarray, regime: _Regime) -> np.ndarray:
        n = self.n
        delta = z[0:n:3]
        omega = z[1:n:3]
        pm = z[2:n:3]
        vr = z[n:: 2]
        vi = z[n + 1:: 2]

        h = np.empty(self.size)
        gb = self._gen_bus
        es = self._gen_e * np.sin(delta)
        ec = self._gen_e * np.cos(delta)
        pe = (es * vr[gb] - ec * vi[gb]) / self._gen_x
        h[0:n:3] = self.omega_s * omega
        h[1:n:3] = (pm - pe - self._gen_d * omega) / self._gen_h2
        h[2:n:3] = (self._gen_pm_set - self._gen_k * omega - pm) / self._gen_tg

        g_r = regime.g @ vr - regime.b @ vi
        g_i = regime.g @ vi + regime.b @ vr
        ir_gen = (es - vi[gb]) / self._gen_x
        ii_gen = (vr[gb] - ec) / self._gen_x
        np.subtract.at(g_r, gb, ir_gen)
        np.subtract.at(g_i, gb, ii_gen)

        lb = self._load_bus
        mix = self._load_mixture(theta)
        x, y = vr[lb], vi[lb]
        u = x * x + y * y
        a = (1.0 - mix) * self._load_p0
        c = (1.0 - mix) * self._load_q0
        b = mix * self._load_p0 / self._load_v0sq
        d = mix * self._load_q0 / self._load_v0sq
        ir_load = (a * x + c * y) / u + b * x + d * y
        ii_load = (a * y - c * x) / u + b * y - d * x
        np.add.at(g_r, lb, ir_load)
        np.add.at(g_i, lb, ii_load)

        h[n:: 2] = g_r
        h[n + 1:: 2] = g_i
        return h

    def _build_constant_jacobian(self):
        T = np.zeros((self.size, self.size))
        n = self.n
        idx = np.arange(self.n_gen)
        T[3 * idx, 3 * idx + 1] = self.omega_s
        T[3 * idx + 1, 3 * idx + 1] = -self._gen_d / self._gen_h2
        T[3 * idx + 1, 3 * idx + 2] = 1.0 / self._gen_h2
        T[3 * idx + 2, 3 * idx + 1] = -self._gen_k / self._gen_tg
        T[3 * idx + 2, 3 * idx + 2] = -1.0 / self._gen_tg
        self._jac_const = T
        # scatter index arrays reused on every Jacobian evaluation
        gb = self._gen_bus
        self._g_rows = {
            "sw": 3 * idx + 1,
            "gr": n + 2 * gb,
            "gi": n + 2 * gb + 1,
            "cvr": n + 2 * gb,
            "cvi": n + 2 * gb + 1,
            "cdelta": 3 * idx,
        }
        lb = self._load_bus
        self._l_rows = (n + 2 * lb, n + 2 * lb + 1)
        self._l_cols = (n + 2 * lb, n + 2 * lb + 1)

    def jac_state(self, t: float, z: np.ndarray, theta: np.ndarray, regime: _Regime) -> np.ndarray:
        n = self.n
        J = self._jac_const.copy()
        J[n:, n:] += regime.jnet

        delta = z[0:n:3]
        vr = z[n:: 2]
        vi = z[n + 1:: 2]
        gb = self._gen_bus
        es = self._gen_e * np.sin(delta)
        ec = self._gen_e * np.cos(delta)
        x_g = self._gen_x
        r = self._g_rows
        # swing row: -d pe / d(delta, vr, vi) over 2H
        dpe_ddelta = (ec * vr[gb] + es * vi[gb]) / x_g
        np.add.at(J, (r["sw"], r["cdelta"]), -dpe_ddelta / self._gen_h2)
        np.add.at(J, (r["sw"], r["cvr"]), -(es / x_g) / self._gen_h2)
        np.add.at(J, (r["sw"], r["cvi"]), (ec / x_g) / self._gen_h2)
        # algebraic rows: -d i_gen / d(delta, vr, vi)
        np.add.at(J, (r["gr"], r["cdelta"]), -ec / x_g)
        np.add.at(J, (r["gr"], r["cvi"]), 1.0 / x_g)
        np.add.at(J, (r["gi"], r["cdelta"]), -es / x_g)
        np.add.at(J, (r["gi"], r["cvr"]), -1.0 / x_g)

        lb = self._load_bus
        mix = self._load_mixture(theta)
        x, y = vr[lb], vi[lb]
        u = x * x + y * y
        a = (1.0 - mix) * self._load_p0
        c = (1.0 - mix) * self._load_q0
        b = mix * self._load_p0 / self._load_v0sq
        d = mix * self._load_q0 / self._load_v0sq
        s_r = a * x + c * y
        s_i = a * y - c * x
        rr, ri = self._l_rows
        cr, ci = self._l_cols
        np.add.at(J, (rr, cr), a / u - 2.0 * x * s_r / u ** 2 + b)
        np.add.at(J, (rr, ci), c / u - 2.0 * y * s_r / u ** 2 + d)
        np.add.at(J, (ri, cr), -c / u - 2.0 * x * s_i / u ** 2 - d)
        np.add.at(J, (ri, ci), a / u - 2.0 * y * s_i / u ** 2 + b)
        return J

    def jac_theta(self, t: float, z: np.ndarray, theta: np.ndarray, regime: _Regime) -> np.ndarray:
        Jt = np.zeros((self.size, self.n_theta))
        cal = np.flatnonzero(self._load_tidx >= 0)
        if cal.size == 0:
            return Jt
        lb = self._load_bus[cal]
        x = z[self.n:: 2][lb]
        y = z[self.n + 1:: 2][lb]
        u = x * x + y * y
        scale = u / self._load_v0sq[cal] - 1.0
        dp = self._load_p0[cal] * scale
        dq = self._load_q0[cal] * scale
        dir_ = (dp * x + dq * y) / u
        dii = (dp * y - dq * x) / u
        cols = self._load_tidx[cal]
        np.add.at(Jt, (self.n + 2 * lb, cols), dir_)
        np.add.at(Jt, (self.n + 2 * lb + 1, cols), dii)
        return Jt


class ScenarioDynamics:
    """A Dynamics bound to one (possibly absent) fault scenario.

    This is the object the integrator consumes: it resolves the admittance
    regime from time internally, so stepping code stays model-agnostic.
    """

    def __init__(self, dynamics: Dynamics, scenario: FaultScenario | None = None):
        self.dynamics = dynamics
        self.scenario = scenario
        self.n = dynamics.n
        self.m = dynamics.m
        self.size = dynamics.size
        self.n_theta = dynamics.n_theta
        if scenario is None:
            self._view = FaultView(dynamics.grid, None, dynamics._g_net, dynamics._b_net)
        else:
            self._view = apply_fault(dynamics.grid, scenario)
        self._base = _Regime(self._view.g_base, self._view.b_base)
        if scenario is None:
            self._fault = self._base
        else:
            self._fault = _Regime(self._view.g_fault, self._view.b_fault)

    def regime_at(self, t: float) -> _Regime:
        return self._fault if self._view.faulted(t) else self._base

    def is_faulted(self, t: float) -> bool:
        return self._view.faulted(t)

    def event_times(self) -> tuple[float, ...]:
        return self._view.event_times()

    def partial_fault(self, fraction: float) -> "ScenarioDynamics":
        """System with the fault shunt scaled by ``fraction`` applied at all
        times; used for continuation across the fault-onset/clearing jump."""
        if self.scenario is None:
            return self
        key = round(float(fraction), 12)
        cache = getattr(self, "_blend_cache", None)
        if cache is None:
            cache = {}
            self._blend_cache = cache
        if key not in cache:
            pos = self.dynamics.grid.bus_position(self.scenario.bus)
            g = self._view.g_base.copy()
            g[pos, pos] += key / self.scenario.fault_impedance
            cache[key] = _FixedRegimeSystem(self.dynamics, _Regime(g, self._view.b_base))
        return cache[key]

    def rhs(self, t, z, theta):
        return self.dynamics.rhs(t, z, theta, self.regime_at(t))

    def jac_state(self, t, z, theta):
        return self.dynamics.jac_state(t, z, theta, self.regime_at(t))

    def jac_theta(self, t, z, theta):
        return self.dynamics.jac_theta(t, z, theta, self.regime_at(t))

    def equilibrium(self):
        return self.dynamics.equilibrium()


class _FixedRegimeSystem:
    """Dynamics pinned to one admittance regime regardless of time."""

    def __init__(self, dynamics: Dynamics, regime: _Regime):
        self.dynamics = dynamics
        self.n = dynamics.n
        self.m = dynamics.m
        self.size = dynamics.size
        self.n_theta = dynamics.n_theta
        self._regime = regime

    def rhs(self, t, z, theta):
        return self.dynamics.rhs(t, z, theta, self._regime)

    def jac_state(self, t, z, theta):
        return self.dynamics.jac_state(t, z, theta, self._regime)

    def jac_theta(self, t, z, theta):
        return self.dynamics.jac_theta(t, z, theta, self._regime)


def initialize_steady_state(grid: GridModel, theta=None) -> tuple[np.ndarray, np.ndarray]:
    """Equilibrium (x0, y0) of the grid DAE.

    The result does not depend on theta: at the steady-state voltage every
    load draws exactly its base power regardless of the mixture.  theta is
    accepted and validated for interface uniformity.
    """
    if theta is not None:
        as_theta(theta, grid.n_theta)
    dyn = Dynamics(grid)
    z0 = dyn.equilibrium()
    return z0[: dyn.n], z0[dyn.n:]
