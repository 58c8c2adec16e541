"""Dense convex QP with one equality, box bounds and linear inequalities.

The dispatch problems this package solves are tiny (a handful of units, a
few binding line rows), so the solver favors auditability: the single
equality is eliminated by a null-space change of variables, the remaining
inequality-only QP runs through a primal active-set loop, and the returned
point carries explicit multipliers plus KKT residuals so tests can verify
optimality independently.

Phase 1 (finding any feasible point, or certifying infeasibility) is
delegated to ``scipy.optimize.linprog``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

MAX_AS_ITERS = 500
STEP_TOL = 1e-11
MULT_TOL = 1e-9


class QpInfeasible(ValueError):
    """No point satisfies the constraint system; message carries the certificate."""


class QpSolverError(RuntimeError):
    """Active-set loop failed to terminate (degenerate cycling or logic error)."""


@dataclass
class QpResult:
    x: np.ndarray
    objective: float
    active: list[int]            # indices of tight inequality rows
    eq_multiplier: float
    ineq_multipliers: np.ndarray  # one per inequality row, zero off the active set
    kkt_residual: float          # stationarity residual, scaled by the gradient magnitude
    max_violation: float         # worst inequality/equality violation, scaled
    iterations: int


def _phase1(a_eq, b_eq, lb, ub, G, h):
    """Feasible point via an LP, with a two-stage certificate on failure."""
    n = a_eq.size
    res = linprog(
        c=np.zeros(n),
        A_ub=G if G is not None and G.size else None,
        b_ub=h if G is not None and G.size else None,
        A_eq=a_eq.reshape(1, -1),
        b_eq=[b_eq],
        bounds=list(zip(lb, ub)),
        method="highs",
    )
    if res.status == 0:
        return res.x
    # distinguish: target unreachable inside the box vs cut off by the polytope
    box_only = linprog(
        c=np.zeros(n),
        A_eq=a_eq.reshape(1, -1),
        b_eq=[b_eq],
        bounds=list(zip(lb, ub)),
        method="highs",
    )
    if box_only.status != 0:
        raise QpInfeasible("equality target unreachable within the unit power box")
    raise QpInfeasible("equality target unreachable within the line-flow polytope")


def solve_qp(H, g, a_eq, b_eq, lb, ub, G=None, h=None) -> QpResult:
    """Minimize ``0.5 x'Hx + g'x`` s.t. ``a_eq.x = b_eq``, ``lb <= x <= ub``,
    ``Gx <= h``.  H must be symmetric positive definite."""
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    a_eq = np.asarray(a_eq, dtype=float)
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    n = g.size
    if G is None or np.size(G) == 0:
        G = np.zeros((0, n))
        h = np.zeros(0)
    G = np.asarray(G, dtype=float).reshape(-1, n)
    h = np.asarray(h, dtype=float)

    # box rows fold into one inequality stack: [I; -I; G] x <= [ub; -lb; h]
    eye = np.eye(n)
    G_all = np.vstack([eye, -eye, G])
    h_all = np.concatenate([ub, -lb, h])

    x_feas = _phase1(a_eq, b_eq, lb, ub, G, h)

    scale = max(1.0, float(np.abs(h_all[np.isfinite(h_all)]).max(initial=1.0)))

    # eliminate the equality: x = x0 + Z v
    x0 = a_eq * (b_eq / float(a_eq @ a_eq))
    Z = null_space(a_eq.reshape(1, -1))
    d = Z.shape[1]

    if d == 0:
        # fully determined by the equality; phase 1 already proved feasibility
        x = x0
        lam = np.zeros(G_all.shape[0])
        active = _near_active(G_all, h_all, x, scale)
        grad = H @ x + g
        nu = -float(a_eq @ grad) / float(a_eq @ a_eq)
        return _package(H, g, a_eq, G_all, h_all, x, nu, lam, active, 0, b_eq, scale)

    Q = Z.T @ H @ Z
    q = Z.T @ (H @ x0 + g)
    Gr = G_all @ Z
    hr = h_all - G_all @ x0
    v = Z.T @ (x_feas - x0)

    finite = np.isfinite(hr)
    rows = np.flatnonzero(finite)

    work: list[int] = []
    iters = 0
    while True:
        iters += 1
        if iters > MAX_AS_ITERS:
            raise QpSolverError("active-set loop exceeded its iteration cap")
        A = Gr[work]
        k = len(work)
        kkt = np.zeros((d + k, d + k))
        kkt[:d, :d] = Q
        if k:
            kkt[:d, d:] = A.T
            kkt[d:, :d] = A
        rhs = np.concatenate([-q, hr[work]])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            work = _independent_subset(Gr, work)
            continue
        x_new = sol[:d]
        lam_w = sol[d:]
        step = x_new - v
        if np.max(np.abs(step), initial=0.0) <= STEP_TOL * max(1.0, np.abs(v).max(initial=1.0)):
            if k == 0 or np.all(lam_w >= -MULT_TOL):
                v = x_new
                break
            drop = work[int(np.argmin(lam_w))]
            work.remove(drop)
            continue
        # longest feasible step toward the equality-constrained optimum
        t = 1.0
        block = -1
        for j in rows:
            if j in work:
                continue
            gd = float(Gr[j] @ step)
            if gd <= 1e-13 * scale:
                continue
            tj = (hr[j] - float(Gr[j] @ v)) / gd
            tj = max(tj, 0.0)
            if tj < t - 1e-15:
                t = tj
                block = j
        v = v + t * step
        if block >= 0:
            work.append(block)

    x = x0 + Z @ v
    lam = np.zeros(G_all.shape[0])
    # multipliers of the reduced rows transfer one-to-one to the originals
    if work:
        A = Gr[work]
        lam_w, *_ = np.linalg.lstsq(A.T, -(Q @ v + q), rcond=None)
        for idx, j in enumerate(work):
            lam[j] = max(lam_w[idx], 0.0)
    grad = H @ x + g + G_all.T @ lam
    nu = -float(a_eq @ grad) / float(a_eq @ a_eq)
    active = sorted(set(work) | set(_near_active(G_all, h_all, x, scale)))
    return _package(H, g, a_eq, G_all, h_all, x, nu, lam, active, iters, b_eq, scale)


def _near_active(G_all, h_all, x, scale, tol=1e-8):
    slack = h_all - G_all @ x
    return [int(j) for j in np.flatnonzero(np.isfinite(h_all) & (slack <= tol * scale))]


def _independent_subset(Gr, work):
    """Drop the most recent row that makes the working set rank-deficient."""
    kept: list[int] = []
    for j in work:
        trial = kept + [j]
        if np.linalg.matrix_rank(Gr[trial]) == len(trial):
            kept.append(j)
    if kept == work:
        # rank was fine; the KKT failure came from elsewhere
        raise QpSolverError("singular KKT system with independent working set")
    return kept


def _package(H, g, a_eq, G_all, h_all, x, nu, lam, active, iters, b_eq, scale):
    grad_scale = max(1.0, float(np.abs(H @ x + g).max(initial=1.0)))
    stationarity = H @ x + g + nu * a_eq + G_all.T @ lam
    kkt_residual = float(np.abs(stationarity).max(initial=0.0)) / grad_scale
    viol_ineq = np.maximum(G_all @ x - h_all, 0.0)
    viol_ineq = viol_ineq[np.isfinite(h_all)]
    viol_eq = abs(float(a_eq @ x) - b_eq)
    max_violation = max(
        float(viol_ineq.max(initial=0.0)), viol_eq
    ) / scale
    objective = float(0.5 * x @ H @ x + g @ x)
    return QpResult(
        x=x,
        objective=objective,
        active=list(active),
        eq_multiplier=nu,
        ineq_multipliers=lam,
        kkt_residual=kkt_residual,
        max_violation=max_violation,
        iterations=iters,
    )
