#!/usr/bin/env python
"""Generate the bundled grid data files (wscc9.json, case39.json).

Runs a conventional polar Newton power flow (slack / PV / PQ bus typing) over
textbook-style case data and stores the converged bus voltages at full double
precision, so the packaged DAE initializer reproduces the equilibrium to
machine accuracy.  This solver is intentionally independent of the package's
rectangular current-balance formulation: agreement between the two is checked
at the end of the script.

Usage: python tools/make_cases.py [output_dir]
"""

import json
import sys
from pathlib import Path

import numpy as np
from scipy.optimize import fsolve

SLACK, PV, PQ = 0, 1, 2


def build_ybus(n, branches):
    Y = np.zeros((n, n), dtype=complex)
    for f, t, r, x, b in branches:
        ys = 1.0 / complex(r, x)
        ysh = 1j * b
        i, j = f - 1, t - 1
        Y[i, i] += ys + ysh / 2
        Y[j, j] += ys + ysh / 2
        Y[i, j] -= ys
        Y[j, i] -= ys
    return Y


def solve_power_flow(n, Y, bus_type, v_set, p_spec, q_spec):
    """Polar NR via fsolve; returns (V, theta)."""
    bus_type = np.asarray(bus_type)
    ang_idx = np.flatnonzero(bus_type != SLACK)
    mag_idx = np.flatnonzero(bus_type == PQ)
    G, B = Y.real, Y.imag

    def unpack(u):
        th = np.zeros(n)
        th[ang_idx] = u[: ang_idx.size]
        v = v_set.copy()
        v[mag_idx] = u[ang_idx.size:]
        return v, th

    def mismatch(u):
        v, th = unpack(u)
        vc = v * np.exp(1j * th)
        s = vc * np.conj(Y @ vc)
        dp = s.real[ang_idx] - p_spec[ang_idx]
        dq = s.imag[mag_idx] - q_spec[mag_idx]
        return np.concatenate([dp, dq])

    u0 = np.concatenate([np.zeros(ang_idx.size), np.ones(mag_idx.size)])
    u, info, ier, msg = fsolve(mismatch, u0, full_output=True, xtol=1e-13)
    resid = np.abs(mismatch(u)).max()
    if ier != 1 or resid > 1e-9:
        raise RuntimeError(f"power flow failed: {msg} (residual {resid:.3e})")
    return unpack(u)


def make_case(name, base_frequency, branches, gens, loads, slack_bus, n_bus):
    """gens: {bus: (p_gen, v_set, h, d, xd_prime)}; loads: {bus: (p, q)}."""
    Y = build_ybus(n_bus, branches)
    bus_type = np.full(n_bus, PQ)
    v_set = np.ones(n_bus)
    p_spec = np.zeros(n_bus)
    q_spec = np.zeros(n_bus)
    for bus, (pg, vs, *_rest) in gens.items():
        bus_type[bus - 1] = SLACK if bus == slack_bus else PV
        v_set[bus - 1] = vs
        p_spec[bus - 1] += pg
    for bus, (p, q) in loads.items():
        p_spec[bus - 1] -= p
        q_spec[bus - 1] -= q
    v, th = solve_power_flow(n_bus, Y, bus_type, v_set, p_spec, q_spec)

    doc = {
        "schema": "gridcal-grid/1",
        "name": name,
        "base_frequency": base_frequency,
        "buses": [
            {"id": i + 1, "base_v": 1.0, "v0": float(v[i]), "angle0": float(th[i])}
            for i in range(n_bus)
        ],
        "branches": [],
        "generators": [],
        "loads": [],
    }
    for f, t, r, x, b in branches:
        ys = 1.0 / complex(r, x)
        doc["branches"].append({
            "from": f, "to": t,
            "y_series": [ys.real, ys.imag],
            "y_shunt": [0.0, b],
        })
    for bus in sorted(gens):
        _pg, _vs, h, d, xdp = gens[bus]
        doc["generators"].append({
            "bus": bus, "h": h, "d": d, "xd_prime": xdp,
            "t_gov": 0.5, "droop": 0.05,
        })
    for k, bus in enumerate(sorted(loads)):
        p, q = loads[bus]
        doc["loads"].append({"bus": bus, "p0": p, "q0": q, "theta_index": k})
    return doc, v, th


def wscc9():
    branches = [
        (1, 4, 0.0, 0.0576, 0.0),
        (2, 7, 0.0, 0.0625, 0.0),
        (3, 9, 0.0, 0.0586, 0.0),
        (4, 5, 0.010, 0.085, 0.176),
        (4, 6, 0.017, 0.092, 0.158),
        (5, 7, 0.032, 0.161, 0.306),
        (6, 9, 0.039, 0.170, 0.358),
        (7, 8, 0.0085, 0.072, 0.149),
        (8, 9, 0.0119, 0.1008, 0.209),
    ]
    gens = {
        1: (0.716, 1.040, 23.64, 1.0, 0.0608),
        2: (1.630, 1.025, 6.40, 1.0, 0.1198),
        3: (0.850, 1.025, 3.01, 1.0, 0.1813),
    }
    loads = {5: (1.25, 0.50), 6: (0.90, 0.30), 8: (1.00, 0.35)}
    return make_case("wscc9", 60.0, branches, gens, loads, slack_bus=1, n_bus=9)


def case39():
    branches = [
        (1, 2, 0.0035, 0.0411, 0.6987),
        (1, 39, 0.0010, 0.0250, 0.7500),
        (2, 3, 0.0013, 0.0151, 0.2572),
        (2, 25, 0.0070, 0.0086, 0.1460),
        (2, 30, 0.0000, 0.0181, 0.0),
        (3, 4, 0.0013, 0.0213, 0.2214),
        (3, 18, 0.0011, 0.0133, 0.2138),
        (4, 5, 0.0008, 0.0128, 0.1342),
        (4, 14, 0.0008, 0.0129, 0.1382),
        (5, 6, 0.0002, 0.0026, 0.0434),
        (5, 8, 0.0008, 0.0112, 0.1476),
        (6, 7, 0.0006, 0.0092, 0.1130),
        (6, 11, 0.0007, 0.0082, 0.1389),
        (6, 31, 0.0000, 0.0250, 0.0),
        (7, 8, 0.0004, 0.0046, 0.0780),
        (8, 9, 0.0023, 0.0363, 0.3804),
        (9, 39, 0.0010, 0.0250, 1.2000),
        (10, 11, 0.0004, 0.0043, 0.0729),
        (10, 13, 0.0004, 0.0043, 0.0729),
        (10, 32, 0.0000, 0.0200, 0.0),
        (12, 11, 0.0016, 0.0435, 0.0),
        (12, 13, 0.0016, 0.0435, 0.0),
        (13, 14, 0.0009, 0.0101, 0.1723),
        (14, 15, 0.0018, 0.0217, 0.3660),
        (15, 16, 0.0009, 0.0094, 0.1710),
        (16, 17, 0.0007, 0.0089, 0.1342),
        (16, 19, 0.0016, 0.0195, 0.3040),
        (16, 21, 0.0008, 0.0135, 0.2548),
        (16, 24, 0.0003, 0.0059, 0.0680),
        (17, 18, 0.0007, 0.0082, 0.1319),
        (17, 27, 0.0013, 0.0173, 0.3216),
        (19, 20, 0.0007, 0.0138, 0.0),
        (19, 33, 0.0007, 0.0142, 0.0),
        (20, 34, 0.0009, 0.0180, 0.0),
        (21, 22, 0.0008, 0.0140, 0.2565),
        (22, 23, 0.0006, 0.0096, 0.1846),
        (22, 35, 0.0000, 0.0143, 0.0),
        (23, 24, 0.0022, 0.0350, 0.3610),
        (23, 36, 0.0005, 0.0272, 0.0),
        (25, 26, 0.0032, 0.0323, 0.5310),
        (25, 37, 0.0006, 0.0232, 0.0),
        (26, 27, 0.0014, 0.0147, 0.2396),
        (26, 28, 0.0043, 0.0474, 0.7802),
        (26, 29, 0.0057, 0.0625, 1.0290),
        (28, 29, 0.0014, 0.0151, 0.2490),
        (29, 38, 0.0008, 0.0156, 0.0),
    ]
    gens = {
        30: (2.500, 1.0475, 42.0, 1.0, 0.0310),
        31: (5.200, 0.9820, 30.3, 1.0, 0.0697),
        32: (6.500, 0.9831, 35.8, 1.0, 0.0531),
        33: (6.320, 0.9972, 28.6, 1.0, 0.0436),
        34: (5.080, 1.0123, 26.0, 1.0, 0.1320),
        35: (6.500, 1.0493, 34.8, 1.0, 0.0500),
        36: (5.600, 1.0635, 26.4, 1.0, 0.0490),
        37: (5.400, 1.0278, 24.3, 1.0, 0.0570),
        38: (8.300, 1.0265, 34.5, 1.0, 0.0570),
        39: (10.000, 1.0300, 50.0, 1.0, 0.0060),
    }
    loads = {
        3: (3.220, 0.024), 4: (5.000, 1.840), 7: (2.338, 0.840),
        8: (5.220, 1.760), 12: (0.085, 0.880), 15: (3.200, 1.530),
        16: (3.290, 0.323), 18: (1.580, 0.300), 20: (6.800, 1.030),
        21: (2.740, 1.150), 23: (2.475, 0.846), 24: (3.086, -0.922),
        25: (2.240, 0.472), 26: (1.390, 0.170), 27: (2.810, 0.755),
        28: (2.060, 0.276), 29: (2.835, 0.269), 31: (0.092, 0.046),
        39: (11.040, 2.500),
    }
    return make_case("case39", 60.0, branches, gens, loads, slack_bus=31, n_bus=39)


def verify(path):
    """Cross-check: the packaged initializer must reproduce an equilibrium."""
    sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
    from gridcal.dynamics import Dynamics
    from gridcal.grid import load_grid

    grid = load_grid(path)
    dyn = Dynamics(grid)
    z0 = dyn.equilibrium()
    theta = np.full(grid.n_theta, 0.5)
    h = dyn.rhs(0.0, z0, theta, dyn_regime(dyn))
    print(f"  {path.name}: |h(z0)|_inf = {np.abs(h).max():.3e}, "
          f"n_bus={grid.n_bus}, n_theta={grid.n_theta}")
    assert np.abs(h).max() < 1e-8


def dyn_regime(dyn):
    from gridcal.dynamics import _Regime
    return _Regime(dyn._g_net, dyn._b_net)


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else \
        Path(__file__).resolve().parents[1] / "src" / "gridcal" / "data"
    out.mkdir(parents=True, exist_ok=True)
    for builder in (wscc9, case39):
        doc, v, th = builder()
        path = out / f"{doc['name']}.json"
        path.write_text(json.dumps(doc, indent=1) + "\n")
        print(f"wrote {path}: V in [{v.min():.4f}, {v.max():.4f}], "
              f"angles in [{np.degrees(th).min():.2f}, {np.degrees(th).max():.2f}] deg")
        verify(path)


if __name__ == "__main__":
    main()
