"""Fast-timescale sensitivity estimator.

One projected-gradient step per iteration on the squared one-step output
prediction error, with the estimate confined to the box ``[b_lo, b_hi]^n``.
The iteration-k update consumes the previous control move ``du = u[k-1] -
u[k-2]`` and output move ``dy = y[k-1] - y[k-2]``:

    phi[k] = clip( phi[k-1] - alpha_k * du * (du . phi[k-1] - dy) )

The adaptive step ceiling is ``2 / ||du||^2``; at exactly that value the
update reflects the estimate about the measurement hyperplane and the
prediction residual keeps its magnitude, while any relaxation strictly below
2 contracts it (relaxation 1 zeroes the residual in one step).  Simulation
runs therefore default to relaxation 1; see ``adaptive_alpha``.  When the
excitation ``||du||^2`` falls under a guard threshold the update is skipped
and the estimate carried unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALPHA_GUARD = 1e-12  # kW^2; skip the update below this excitation level


@dataclass
class SensitivityEstimate:
    """Current estimate of d(output)/d(injection), boxed to [b_lo, b_hi]."""

    phi_hat: np.ndarray
    b_lo: float
    b_hi: float

    def __post_init__(self):
        self.phi_hat = np.asarray(self.phi_hat, dtype=float)
        if not 0 < self.b_lo <= self.b_hi:
            raise ValueError(f"need 0 < b_lo <= b_hi, got [{self.b_lo}, {self.b_hi}]")
        if np.any(self.phi_hat < self.b_lo) or np.any(self.phi_hat > self.b_hi):
            raise ValueError("phi_hat must start inside the box")

    @property
    def n(self) -> int:
        return self.phi_hat.size


@dataclass
class EstimatorConfig:
    """Estimation step-size policy.

    ``alpha_mode`` is "adaptive" (step ``alpha_relaxation / ||du||^2``) or
    "constant" (fixed ``alpha_value``).  Relaxation must sit in (0, 2]; 2 is
    the non-contractive ceiling and is only useful for demonstrating the
    reflection behavior.
    """

    b_lo: float = 0.8
    b_hi: float = 1.2
    alpha_mode: str = "adaptive"
    alpha_value: float = 0.01
    alpha_relaxation: float = 1.0
    alpha_guard: float = ALPHA_GUARD

    def __post_init__(self):
        if self.alpha_mode not in ("adaptive", "constant"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.alpha_guard <= 0:
            raise ValueError("alpha_guard must be positive")
        if self.alpha_mode == "constant" and self.alpha_value <= 0:
            raise ValueError("constant alpha must be positive")
        if not 0 < self.alpha_relaxation <= 2.0:
            raise ValueError("alpha_relaxation must lie in (0, 2]")

    def step_size(self, delta_u) -> float | None:
        """Step for the next update, or None when excitation is too weak."""
        ceiling = adaptive_alpha(delta_u, self.alpha_guard)
        if ceiling is None:
            return None
        if self.alpha_mode == "constant":
            return self.alpha_value
        return 0.5 * self.alpha_relaxation * ceiling


def project_box(v, lo, hi) -> np.ndarray:
    """Euclidean projection onto the box: componentwise clamp."""
    v = np.asarray(v, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), v.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), v.shape)
    if np.any(lo > hi):
        raise ValueError("box is empty: lo > hi somewhere")
    return np.clip(v, lo, hi)


def adaptive_alpha(delta_u, guard: float = ALPHA_GUARD) -> float | None:
    """Adaptive step ceiling ``2 / ||delta_u||^2``.

    Returns None (skip: no update this iteration) when ``||delta_u||^2``
    falls below ``guard`` -- at an equilibrium there is no excitation and the
    quotient is undefined.
    """
    nrm2 = float(np.dot(delta_u, delta_u))
    if nrm2 < guard:
        return None
    return 2.0 / nrm2


def estimation_step(
    est: SensitivityEstimate,
    delta_u_prev,
    delta_y_prev: float,
    alpha: float | None,
) -> SensitivityEstimate:
    """One projected-gradient update from the latest input/output move.

    ``alpha`` is the step size, or None to skip (estimate returned unchanged).
    """
    if alpha is None:
        return est
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    delta_u_prev = np.asarray(delta_u_prev, dtype=float)
    if delta_u_prev.shape != est.phi_hat.shape:
        raise ValueError("delta_u length does not match the estimate")
    residual = float(delta_u_prev @ est.phi_hat) - float(delta_y_prev)
    raw = est.phi_hat - alpha * delta_u_prev * residual
    return SensitivityEstimate(
        phi_hat=project_box(raw, est.b_lo, est.b_hi), b_lo=est.b_lo, b_hi=est.b_hi
    )


def predict_output(est: SensitivityEstimate, y_prev: float, u, u_prev) -> float:
    """One-step output prediction ``y_prev + phi_hat . (u - u_prev)``."""
    u = np.asarray(u, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    if u.shape != est.phi_hat.shape or u_prev.shape != est.phi_hat.shape:
        raise ValueError("control vectors do not match the estimate length")
    return float(y_prev + est.phi_hat @ (u - u_prev))
