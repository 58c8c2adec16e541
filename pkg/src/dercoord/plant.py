"""Nonlinear ground-truth plant: AC power flow on a radial feeder.

The substation output that the estimator and controller observe comes from a
backward/forward sweep solve of the full nonlinear power-flow equations, so
the data-driven layer genuinely never sees a model.  Unity-power-factor units
inject zero reactive power; voltage-holding units get their reactive
injection adjusted by an outer secant loop until their voltage magnitude sits
on the setpoint (clamped to the unit's reactive range).

Sign convention for the output ``y``: positive when the feeder exports active
power to the bulk system through the substation, negative when it imports.

A linear plant with a fixed sensitivity vector is provided alongside as a
test double for the convergence checks; it exposes the same calling surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import DER_CONST_VOLTAGE, FeederModel

V_TOL = 1e-10          # pu, sweep convergence on max |dV|
PV_TOL = 1e-9          # pu, setpoint tracking tolerance at voltage-holding units
MISMATCH_TOL = 1e-8    # pu, post-solve bus power mismatch gate
MAX_SWEEPS = 100
MAX_PV_OUTER = 80
FD_STEP_KW = 0.1


class PowerFlowError(RuntimeError):
    """Sweep failed to converge (collapsed voltage / infeasible case)."""


class ReactiveLimitError(PowerFlowError):
    """A voltage-holding unit ran out of reactive range before reaching its setpoint."""


@dataclass
class LoadProfile:
    """Active/reactive demand per bus (kW / kVAr, buses 1..N).

    Held constant across one estimation phase; uncontrollable generation is
    folded in as negative load.
    """

    p_d: np.ndarray
    q_d: np.ndarray

    def __post_init__(self):
        self.p_d = np.asarray(self.p_d, dtype=float)
        self.q_d = np.asarray(self.q_d, dtype=float)
        if self.p_d.shape != self.q_d.shape:
            raise ValueError("p_d and q_d must have equal length")


@dataclass
class OperatingPoint:
    """One converged solve: voltages, substation exchange, realized unit
    reactive injections and active line flows."""

    v_mag: np.ndarray   # pu, buses 0..N
    v_ang: np.ndarray   # rad
    y: float            # kW, positive = export to bulk system
    q_der: np.ndarray   # kVAr, one per unit
    line_p: np.ndarray  # kW, sending-end active flow in each line's file direction


def _check_inputs(feeder: FeederModel, u, pi: LoadProfile):
    u = np.asarray(u, dtype=float)
    if u.shape != (feeder.n_der,):
        raise ValueError(f"u must have length {feeder.n_der}, got {u.shape}")
    if np.any(u < feeder.der_p_min - 1e-6) or np.any(u > feeder.der_p_max + 1e-6):
        raise ValueError("u violates the unit power bounds")
    if pi.p_d.shape != (feeder.n_buses,):
        raise ValueError(f"loads must have length {feeder.n_buses}, got {pi.p_d.shape}")
    return u


def solve_power_flow(
    feeder: FeederModel,
    u,
    pi: LoadProfile,
    substation_v: float = 1.0,
    warm: OperatingPoint | None = None,
) -> OperatingPoint:
    """Backward/forward sweep solve of the feeder at unit injections ``u`` (kW).

    ``warm`` seeds voltages and reactive setpoints from a previous solution,
    which cuts the sweep count drastically along a simulation trajectory.
    """
    u = _check_inputs(feeder, u, pi)
    n_bus = feeder.n_buses
    s_base = feeder.s_base_kva

    sub = feeder.buses[0]
    v0 = complex(sub.v_set if sub.v_set is not None else substation_v)

    # net complex injection at buses 1..N, per unit; unit reactive handled below
    s_inj = (map_p(feeder, u) - pi.p_d) / s_base + 1j * (-pi.q_d / s_base)

    der_idx = feeder.der_index
    kinds = [feeder.buses[b].kind for b in feeder.der_buses]
    pv_slots = np.asarray([i for i, k in enumerate(kinds) if k == DER_CONST_VOLTAGE], dtype=int)
    pv_bus_pos = der_idx[pv_slots] if pv_slots.size else np.empty(0, dtype=int)
    v_set = np.asarray(
        [feeder.buses[feeder.der_buses[i]].v_set for i in pv_slots], dtype=float
    )
    q_lo = feeder.der_q_min[pv_slots] / s_base
    q_hi = feeder.der_q_max[pv_slots] / s_base

    if warm is not None:
        v = warm.v_mag * np.exp(1j * warm.v_ang)
        v = v.copy()
        v[0] = v0
        q_pv = warm.q_der[pv_slots] / s_base if pv_slots.size else np.empty(0)
        q_pv = np.clip(q_pv, q_lo, q_hi)
    else:
        v = np.full(n_bus + 1, v0, dtype=complex)
        q_pv = np.clip(np.zeros(pv_slots.size), q_lo, q_hi)

    pm = feeder.path_mat
    z = np.empty(n_bus, dtype=complex)  # impedance of the line into each bus
    for w in feeder.preorder:
        l = feeder.lines[feeder.line_of_bus[w]]
        z[w - 1] = complex(l.r, l.x)

    def sweep_to_convergence(v, s_node):
        for _ in range(MAX_SWEEPS):
            i_node = np.conj(s_node / v[1:])
            j_branch = -(pm.T @ i_node)      # current parent->child, by child bus
            v_new = v0 - pm @ (z * j_branch)
            dv = np.max(np.abs(v_new - v[1:]))
            v[1:] = v_new
            if dv < V_TOL:
                return v, j_branch
            if not np.all(np.isfinite(v_new)):
                raise PowerFlowError("sweep diverged (voltage collapse)")
        raise PowerFlowError(f"sweep did not converge in {MAX_SWEEPS} iterations")

    if pv_slots.size == 0:
        v, j_branch = sweep_to_convergence(v, s_inj)
    else:
        # outer quasi-Newton on |V(q)| - v_set at the voltage-holding units.
        # The voltage/reactive Jacobian of the linearized flow model is the
        # shared-path reactance matrix; Broyden updates absorb what losses add.
        jac = (pm[pv_bus_pos] * z.imag) @ pm[pv_bus_pos].T
        jac += np.eye(pv_slots.size) * 1e-8
        prev_q = None
        prev_err = None
        converged = False
        for _ in range(MAX_PV_OUTER):
            s_node = s_inj.copy()
            s_node[pv_bus_pos] += 1j * q_pv
            v, j_branch = sweep_to_convergence(v, s_node)
            vm = np.abs(v[1:][pv_bus_pos])
            err = vm - v_set
            at_lo = (q_pv <= q_lo + 1e-12) & (err > 0)
            at_hi = (q_pv >= q_hi - 1e-12) & (err < 0)
            pinned = at_lo | at_hi
            if np.max(np.abs(np.where(pinned, 0.0, err))) < PV_TOL:
                if np.any(pinned):
                    raise ReactiveLimitError(
                        "voltage-holding unit(s) at reactive range limit: "
                        f"slots {pv_slots[pinned].tolist()}"
                    )
                converged = True
                break
            if prev_q is not None:
                dq = q_pv - prev_q
                de = err - prev_err
                dq2 = float(dq @ dq)
                if dq2 > 1e-20:
                    jac = jac + np.outer(de - jac @ dq, dq) / dq2
            prev_q, prev_err = q_pv.copy(), err.copy()
            step = np.linalg.solve(jac, -err)
            norm = np.abs(step).max()
            if norm > 2.0:
                step *= 2.0 / norm
            q_pv = np.clip(q_pv + step, q_lo, q_hi)
        if not converged:
            raise PowerFlowError("voltage-holding adjustment did not converge")

    # post-solve bookkeeping and the independent mismatch check
    q_der = np.zeros(feeder.n_der)
    if pv_slots.size:
        q_der[pv_slots] = q_pv * s_base
    s_node = s_inj.copy()
    if pv_slots.size:
        s_node[pv_bus_pos] += 1j * q_pv
    _mismatch_check(feeder, v, s_node, pv_bus_pos)

    # substation exchange: current into the feeder is the sum over root lines
    i_into_feeder = -np.sum(np.conj(s_node / v[1:]))
    p_sub = (v0 * np.conj(i_into_feeder)).real
    y = -p_sub * s_base

    send = v[feeder.parent[feeder.child_of_line]] * np.conj(j_branch[feeder.child_of_line - 1])
    line_p = send.real * feeder.line_orient * s_base

    return OperatingPoint(
        v_mag=np.abs(v),
        v_ang=np.angle(v),
        y=float(y),
        q_der=q_der,
        line_p=line_p,
    )


def map_p(feeder: FeederModel, u) -> np.ndarray:
    """Active generation mapped onto buses 1..N (kW)."""
    p = np.zeros(feeder.n_buses)
    np.add.at(p, feeder.der_index, u)
    return p


def _mismatch_groups(feeder: FeederModel):
    """Electrical-node view for the mismatch check: zero-impedance lines are
    contracted so Kirchhoff balance is asserted on true nodes."""
    cached = getattr(feeder, "_mismatch_cache", None)
    if cached is not None:
        return cached
    n = feeder.n_buses + 1
    rep = np.arange(n)

    def find(a):
        while rep[a] != a:
            rep[a] = rep[rep[a]]
            a = rep[a]
        return a

    zero_lines = []
    for l in feeder.lines:
        if l.r == 0.0 and l.x == 0.0:
            zero_lines.append(l)
            rep[find(l.to_bus)] = find(l.from_bus)
    rep = np.array([find(a) for a in range(n)])
    y = np.zeros((n, n), dtype=complex)
    for l in feeder.lines:
        if l.r == 0.0 and l.x == 0.0:
            continue
        a, b = rep[l.from_bus], rep[l.to_bus]
        ys = 1.0 / complex(l.r, l.x)
        y[a, a] += ys
        y[b, b] += ys
        y[a, b] -= ys
        y[b, a] -= ys
    cached = (rep, y, zero_lines)
    feeder._mismatch_cache = cached
    return cached


def _mismatch_check(feeder, v, s_node, pv_bus_pos):
    rep, y, zero_lines = _mismatch_groups(feeder)
    for l in zero_lines:
        if abs(v[l.from_bus] - v[l.to_bus]) > 1e-12:
            raise PowerFlowError(f"voltage jump across zero-impedance line {l.id}")
    s_spec = np.zeros(feeder.n_buses + 1, dtype=complex)
    s_spec[1:] = s_node
    s_grp = np.zeros_like(s_spec)
    np.add.at(s_grp, rep, s_spec)
    s_calc = v * np.conj(y @ v)
    mis = s_grp - s_calc
    nodes = np.unique(rep)
    nodes = nodes[nodes != rep[0]]  # the substation node balances by construction
    if nodes.size == 0:
        return
    worst = np.abs(mis[nodes].real).max()
    q_mis = np.abs(mis.imag)
    if pv_bus_pos.size:
        q_mis[rep[pv_bus_pos + 1]] = 0.0  # reactive balance there is the solved variable
    worst = max(worst, q_mis[nodes].max())
    if worst > MISMATCH_TOL:
        raise PowerFlowError(f"power mismatch {worst:.3e} pu exceeds {MISMATCH_TOL} pu")


def measure_output(op: OperatingPoint) -> float:
    """The only plant quantity the data-driven layer may observe."""
    return op.y


def fd_sensitivity(
    feeder: FeederModel,
    u,
    pi: LoadProfile,
    h_step: float = FD_STEP_KW,
    substation_v: float = 1.0,
) -> np.ndarray:
    """Central-difference sensitivities of the substation exchange w.r.t. each
    unit injection: the ground-truth the estimator is graded against."""
    u = np.asarray(u, dtype=float)
    if h_step <= 0:
        raise ValueError("h_step must be positive")
    if np.any(u - h_step < feeder.der_p_min - 1e-9) or np.any(
        u + h_step > feeder.der_p_max + 1e-9
    ):
        raise ValueError("u +/- h_step leaves the unit power box")
    base = solve_power_flow(feeder, u, pi, substation_v)
    phi = np.empty(feeder.n_der)
    for i in range(feeder.n_der):
        up = u.copy()
        up[i] += h_step
        dn = u.copy()
        dn[i] -= h_step
        y_up = solve_power_flow(feeder, up, pi, substation_v, warm=base).y
        y_dn = solve_power_flow(feeder, dn, pi, substation_v, warm=base).y
        phi[i] = (y_up - y_dn) / (2.0 * h_step)
    return phi


def check_sensitivity_regime(
    feeder: FeederModel,
    pi: LoadProfile,
    b_lo: float,
    b_hi: float,
    rng: np.random.Generator,
    n_samples: int = 3,
    h_step: float = FD_STEP_KW,
) -> np.ndarray:
    """Sample the unit box and verify every finite-difference sensitivity lies
    inside [b_lo, b_hi]; returns the sampled values, raises on violation."""
    lo = feeder.der_p_min + h_step
    hi = feeder.der_p_max - h_step
    points = [lo.copy(), hi.copy()]
    for _ in range(n_samples):
        points.append(lo + (hi - lo) * rng.random(feeder.n_der))
    out = []
    for u in points:
        phi = fd_sensitivity(feeder, u, pi, h_step)
        if np.any(phi < b_lo) or np.any(phi > b_hi):
            raise PowerFlowError(
                f"sensitivity regime violated: phi={np.round(phi, 4)} outside "
                f"[{b_lo}, {b_hi}] at u={np.round(u, 2)}"
            )
        out.append(phi)
    return np.asarray(out)


class AcPlant:
    """Stateful wrapper: ``y = plant(u)`` with warm-started consecutive solves.

    Keeps the last operating point for flow/voltage inspection by the
    simulator; the estimator and controller only ever receive ``y``.
    """

    def __init__(self, feeder: FeederModel, loads: LoadProfile, substation_v: float = 1.0):
        self.feeder = feeder
        self.loads = loads
        self.substation_v = substation_v
        self.last_op: OperatingPoint | None = None
        self.n_solves = 0

    def __call__(self, u) -> float:
        op = solve_power_flow(
            self.feeder, u, self.loads, self.substation_v, warm=self.last_op
        )
        self.last_op = op
        self.n_solves += 1
        return op.y

    def reset(self):
        self.last_op = None

    def true_sensitivity(self, u, h_step: float = FD_STEP_KW) -> np.ndarray:
        """FD oracle at ``u``, nudged inward so the differencing stays in the box."""
        u = np.clip(u, self.feeder.der_p_min + h_step, self.feeder.der_p_max - h_step)
        return fd_sensitivity(self.feeder, u, self.loads, h_step, self.substation_v)


@dataclass
class LinearPlant:
    """Synthetic plant ``y = phi . u + offset`` with exact, constant sensitivities."""

    phi: np.ndarray
    offset: float = 0.0
    last_op: None = field(default=None, init=False)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)

    def __call__(self, u) -> float:
        return float(self.phi @ np.asarray(u, dtype=float) + self.offset)

    def true_sensitivity(self, u, h_step: float = FD_STEP_KW) -> np.ndarray:
        return self.phi.copy()
