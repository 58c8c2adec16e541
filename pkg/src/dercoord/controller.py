"""Fast-timescale randomized tracking controller and slow-timescale dispatch.

Tracking: one projected-gradient move per iteration pushes the unit
injections against the measured exchange error,

    u[k] = clip( u[k-1] - beta * e[k-1] * W[k] * phi_hat[k] ),

where ``W[k]`` is a diagonal Bernoulli(0.5) mask.  The mask keeps each unit's
move random so consecutive measurement directions stay linearly rich enough
for the estimator; with the mask forced to identity the controller is the
plain deterministic variant.

Dispatch: a convex least-cost reallocation of the unit injections subject to
holding the predicted exchange at the target, the unit power boxes and the
line-capacity polytope of the lossless flow model.  Solved by the active-set
QP in :mod:`dercoord.qp` with multiplier/KKT diagnostics surfaced in the
result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from .estimator import SensitivityEstimate, project_box
from .net import FeederModel
from .qp import QpInfeasible, QpResult, solve_qp


class OdcpInfeasibleError(ValueError):
    """The dispatch constraint system has no solution; not silently relaxed."""


@dataclass
class ControlState:
    """One fast-timescale controller iterate."""

    u: np.ndarray
    y: float = np.nan
    e: float = np.nan
    u_prev: np.ndarray | None = None
    y_prev: float = np.nan
    k: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if self.u_prev is None:
            self.u_prev = self.u.copy()


@dataclass
class ControllerConfig:
    """Tracking-loop knobs; ``randomized`` selects the Bernoulli-masked rule."""

    beta: float = 0.02
    epsilon: float = 0.01
    randomized: bool = True
    delta: float = 1.0       # kW, termination threshold on |e|
    max_iters: int = 1000

    def __post_init__(self):
        if self.beta <= 0 or self.delta <= 0:
            raise ValueError("beta and delta must be positive")


def beta_bounds(n: int, b_lo: float, b_hi: float, epsilon: float) -> tuple[float, float]:
    """Admissible control step interval for the masked tracking rule:
    ``(epsilon / b_lo^2, 1 / (n b_hi^2))``.

    Requires ``0 < epsilon < b_lo^2 / (n b_hi^2)`` so the interval is
    nonempty.
    """
    if n < 1:
        raise ValueError("need at least one unit")
    limit = b_lo**2 / (n * b_hi**2)
    if not 0 < epsilon < limit:
        raise ValueError(f"epsilon must lie in (0, {limit:.6g}), got {epsilon}")
    return (epsilon / b_lo**2, 1.0 / (n * b_hi**2))


def beta_bounds_estimation(n: int, b_lo: float, b_hi: float, epsilon: float) -> tuple[float, float]:
    """Control step interval quoted by the estimation convergence result:
    ``(epsilon / (n b_lo^2), 1 / (n b_hi^2))`` with ``0 < epsilon <
    b_lo^2/b_hi^2``.

    This is deliberately exposed alongside :func:`beta_bounds`; the two
    published intervals differ in their lower endpoint and are not reconciled
    here.
    """
    if n < 1:
        raise ValueError("need at least one unit")
    limit = b_lo**2 / b_hi**2
    if not 0 < epsilon < limit:
        raise ValueError(f"epsilon must lie in (0, {limit:.6g}), got {epsilon}")
    return (epsilon / (n * b_lo**2), 1.0 / (n * b_hi**2))


def sample_mask(rng: np.random.Generator, n: int) -> np.ndarray:
    """Diagonal 0/1 activation mask, each entry independently Bernoulli(0.5).

    Advances ``rng`` in place (numpy generators carry their own state), so a
    fixed seed reproduces the identical mask sequence.
    """
    return rng.integers(0, 2, size=n).astype(float)


def tracking_step(
    state: ControlState,
    est: SensitivityEstimate,
    mask: np.ndarray,
    beta: float,
    bounds: tuple[np.ndarray, np.ndarray],
) -> ControlState:
    """One projected tracking move from the latest measured error."""
    lo, hi = bounds
    u_new = project_box(state.u - beta * state.e * mask * est.phi_hat, lo, hi)
    return ControlState(
        u=u_new,
        y=np.nan,
        e=np.nan,
        u_prev=state.u.copy(),
        y_prev=state.y,
        k=state.k + 1,
    )


@dataclass
class DispatchCost:
    """Per-unit quadratic price curve ``sum_i quad_i p_i^2 + lin_i p_i``.

    The default dispatch objective (None cost) is the least-change form
    ``||p - p_tilde||^2``; this descriptor replaces it with explicit
    coefficients.  Quadratic coefficients must be strictly positive so the
    problem stays strictly convex.
    """

    quad: np.ndarray
    lin: np.ndarray

    def __post_init__(self):
        self.quad = np.asarray(self.quad, dtype=float)
        self.lin = np.asarray(self.lin, dtype=float)
        if np.any(self.quad <= 0):
            raise ValueError("quadratic price coefficients must be positive")


@dataclass
class DispatchProblem:
    """One dispatch instance, built from the latest measurement and estimate."""

    y_now: float
    p_tilde: np.ndarray
    phi_hat: np.ndarray
    y_star: float
    p_d: np.ndarray                      # kW loads used by the lossless flow rows
    flow_limits: np.ndarray | None = None  # kW per line; None = take feeder limits
    cost: DispatchCost | None = None       # None = least-change objective

    def __post_init__(self):
        self.p_tilde = np.asarray(self.p_tilde, dtype=float)
        self.phi_hat = np.asarray(self.phi_hat, dtype=float)
        self.p_d = np.asarray(self.p_d, dtype=float)
        if self.flow_limits is not None:
            self.flow_limits = np.asarray(self.flow_limits, dtype=float)
            if np.any(self.flow_limits <= 0):
                raise ValueError("flow limits must be positive")


@dataclass
class DispatchResult:
    p_g: np.ndarray
    objective: float
    kkt_residual: float
    max_violation: float
    active_set: list[tuple[str, int]]
    eq_multiplier: float
    iterations: int
    predicted_flows: np.ndarray


def solve_odcp(prob: DispatchProblem, feeder: FeederModel) -> DispatchResult:
    """Least-cost unit dispatch holding the predicted exchange at the target.

    Constraints: the estimated input-output equality, unit power boxes, and
    the lossless line-flow polytope (rows with infinite capacity dropped).
    Raises :class:`OdcpInfeasibleError` with a certificate when the target is
    unreachable.
    """
    n = feeder.n_der
    if prob.phi_hat.shape != (n,) or prob.p_tilde.shape != (n,):
        raise ValueError("problem dimensions do not match the feeder's units")

    limits = prob.flow_limits if prob.flow_limits is not None else feeder.line_f_max()
    if limits.shape != (feeder.n_lines,):
        raise ValueError("flow_limits must have one entry per line")

    # flows are affine in p: f(p) = F p - f0 with f0 the pure-load flow term
    f0 = net.line_flows_approx(feeder, prob.p_d)
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols.append(net.line_flows_approx(feeder, net.map_injections(feeder, e, np.zeros(feeder.n_buses))))
    F = np.column_stack(cols) if n else np.zeros((feeder.n_lines, 0))

    finite = np.isfinite(limits)
    rows = np.flatnonzero(finite)
    G = np.vstack([F[rows], -F[rows]]) if rows.size else None
    h = (
        np.concatenate([limits[rows] + f0[rows], limits[rows] - f0[rows]])
        if rows.size
        else None
    )

    if prob.cost is None:
        H = 2.0 * np.eye(n)
        g = -2.0 * prob.p_tilde
    else:
        H = 2.0 * np.diag(prob.cost.quad)
        g = prob.cost.lin.copy()

    b_eq = prob.y_star - prob.y_now + float(prob.phi_hat @ prob.p_tilde)

    try:
        res: QpResult = solve_qp(
            H, g, prob.phi_hat, b_eq, feeder.der_p_min, feeder.der_p_max, G, h
        )
    except QpInfeasible as exc:
        raise OdcpInfeasibleError(str(exc)) from exc

    labels = _row_labels(n, rows, feeder)
    active = [labels[j] for j in res.active]
    flows = F @ res.x - f0
    return DispatchResult(
        p_g=res.x,
        objective=res.objective + (float(prob.p_tilde @ prob.p_tilde) if prob.cost is None else 0.0),
        kkt_residual=res.kkt_residual,
        max_violation=res.max_violation,
        active_set=active,
        eq_multiplier=res.eq_multiplier,
        iterations=res.iterations,
        predicted_flows=flows,
    )


def _row_labels(n, flow_rows, feeder):
    labels = [("p_max", i) for i in range(n)]
    labels += [("p_min", i) for i in range(n)]
    labels += [("flow_hi", feeder.lines[j].id) for j in flow_rows]
    labels += [("flow_lo", feeder.lines[j].id) for j in flow_rows]
    return labels
