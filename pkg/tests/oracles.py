"""Independent brute-force oracles used only by the test suite.

Nothing here shares code paths with the package solvers: the power-flow
oracle is a Newton iteration on the full injection equations with a
finite-difference Jacobian, and the line-flow oracle literally cuts each
line and sums injections on the downstream side.
"""

from __future__ import annotations

import numpy as np

from dercoord.net import FeederModel


def newton_power_flow(feeder: FeederModel, u, pi, substation_v=1.0, tol=1e-12, max_iter=60):
    """Full Newton solve in polar coordinates with a numerical Jacobian.

    Returns (v_mag, v_ang, y_kw, q_der_kvar).  Voltage-holding units keep
    |V| fixed with reactive power free (their limits are assumed wide).
    """
    n_tot = feeder.n_buses + 1
    s_base = feeder.s_base_kva
    y_mat = np.zeros((n_tot, n_tot), dtype=complex)
    for l in feeder.lines:
        ys = 1.0 / complex(l.r, l.x)
        y_mat[l.from_bus, l.from_bus] += ys
        y_mat[l.to_bus, l.to_bus] += ys
        y_mat[l.from_bus, l.to_bus] -= ys
        y_mat[l.to_bus, l.from_bus] -= ys

    u = np.asarray(u, dtype=float)
    p_spec = -pi.p_d.copy() / s_base
    q_spec = -pi.q_d.copy() / s_base
    pv_bus = []
    v_set = {}
    for slot, bus in enumerate(feeder.der_buses):
        p_spec[bus - 1] += u[slot] / s_base
        if feeder.buses[bus].kind == "der_const_voltage":
            pv_bus.append(bus)
            v_set[bus] = feeder.buses[bus].v_set
    pv_bus = np.asarray(pv_bus, dtype=int)
    pq_bus = np.asarray([b for b in range(1, n_tot) if b not in set(pv_bus)], dtype=int)

    sub = feeder.buses[0]
    v0 = sub.v_set if sub.v_set is not None else substation_v
    theta = np.zeros(n_tot)
    vm = np.full(n_tot, float(v0))
    for b in pv_bus:
        vm[b] = v_set[b]

    n_th = n_tot - 1
    n_vm = pq_bus.size

    def residual(x):
        theta[1:] = x[:n_th]
        vm[pq_bus] = x[n_th:]
        v = vm * np.exp(1j * theta)
        s = v * np.conj(y_mat @ v)
        return np.concatenate([s.real[1:] - p_spec, s.imag[pq_bus] - q_spec[pq_bus - 1]])

    x = np.concatenate([theta[1:], vm[pq_bus]])
    for _ in range(max_iter):
        r = residual(x)
        if np.abs(r).max() < tol:
            break
        jac = np.empty((r.size, x.size))
        h = 1e-7
        for j in range(x.size):
            xp = x.copy()
            xp[j] += h
            jac[:, j] = (residual(xp) - r) / h
        x = x - np.linalg.solve(jac, r)
    else:
        raise RuntimeError("newton oracle did not converge")
    residual(x)  # refresh theta/vm
    v = vm * np.exp(1j * theta)
    s = v * np.conj(y_mat @ v)
    y_kw = -s.real[0] * s_base
    q_der = np.zeros(feeder.n_der)
    for slot, bus in enumerate(feeder.der_buses):
        if bus in v_set:
            q_der[slot] = (s.imag[bus] + pi.q_d[bus - 1] / s_base) * s_base
    return vm.copy(), theta.copy(), float(y_kw), q_der


def subtree_flows(feeder: FeederModel, p):
    """Flow on each line by cutting it and summing the far-side injections."""
    p = np.asarray(p, dtype=float)
    n_tot = feeder.n_buses + 1
    adj = [[] for _ in range(n_tot)]
    for l in feeder.lines:
        adj[l.from_bus].append((l.to_bus, l.id))
        adj[l.to_bus].append((l.from_bus, l.id))
    flows = np.empty(feeder.n_lines)
    for l in feeder.lines:
        seen = {l.to_bus}
        stack = [l.to_bus]
        while stack:
            v = stack.pop()
            for w, lid in adj[v]:
                if lid == l.id or w in seen:
                    continue
                seen.add(w)
                stack.append(w)
        if 0 in seen:
            # the file orients this line toward the root: flip sides
            side = set(range(n_tot)) - seen
        else:
            side = seen
        total = sum(p[b - 1] for b in side if b != 0)
        flow_toward_side = -total
        flows[l.id - 1] = flow_toward_side if 0 not in seen else -flow_toward_side
    return flows


def random_tree(rng, n, with_der=True):
    """Random radial feeder for property tests (unity-pf units only)."""
    from dercoord.net import Bus, Line

    der = sorted(rng.choice(np.arange(1, n + 1), size=min(3, n), replace=False).tolist()) if with_der else []
    buses = [Bus(0, "substation")]
    for b in range(1, n + 1):
        kind = "der_unity_pf" if b in der else "load"
        buses.append(Bus(b, kind, float(rng.uniform(0, 50)), float(rng.uniform(0, 20))))
    lines = []
    for b in range(1, n + 1):
        parent = int(rng.integers(0, b))
        if rng.random() < 0.3:
            lines.append(Line(b, b, parent, float(rng.uniform(1e-4, 1e-2)),
                              float(rng.uniform(1e-4, 1e-2)), np.inf))
        else:
            lines.append(Line(b, parent, b, float(rng.uniform(1e-4, 1e-2)),
                              float(rng.uniform(1e-4, 1e-2)), np.inf))
    k = len(der)
    return FeederModel(
        buses=buses, lines=lines, der_buses=der,
        der_p_min=np.zeros(k), der_p_max=np.full(k, 100.0),
    )
