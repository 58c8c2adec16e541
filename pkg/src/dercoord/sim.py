"""Two-timescale orchestration: scenario files, the estimation/tracking loop,
dispatch instants, metrics and trace export.

A scenario is a TOML file mapping 1:1 onto :class:`ScenarioConfig`.  One run
executes the fast loop (measure, estimation step, masked control step, apply)
until the tracking error enters the deadband, the iterates stall at a power
bound, or the iteration cap is hit; in two-timescale mode each fast phase is
followed by a dispatch solve whose solution is applied as the next setpoint.

Traces are fully deterministic in (config, seed) and export to CSV with a
``#``-prefixed JSON header carrying the config and feeder hashes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import net
from .controller import (
    ControllerConfig,
    ControlState,
    DispatchProblem,
    OdcpInfeasibleError,
    beta_bounds,
    sample_mask,
    solve_odcp,
    tracking_step,
)
from .estimator import EstimatorConfig, SensitivityEstimate, estimation_step, project_box
from .net import FeederModel
from .plant import AcPlant, LoadProfile, PowerFlowError
from .rng import RNG_SCHEME, substream

PHASE_ESTIMATION = "estimation"
PHASE_DISPATCH = "dispatch"

OUTCOME_DELTA = "delta"            # |e| entered the deadband
OUTCOME_STALL = "stall"            # control increments below guard for stall_iters
OUTCOME_MAX_ITERS = "max_iters"
OUTCOME_PLANT_ERROR = "plant_error"


class ScenarioError(ValueError):
    """Invalid scenario configuration."""


@dataclass
class ScenarioConfig:
    """One run's full configuration; every field round-trips through TOML."""

    feeder: str = ""
    y_star: float = 0.0
    b_lo: float = 0.8
    b_hi: float = 1.2
    beta: float = 0.02
    epsilon: float = 0.01
    delta: float = 1.0
    max_iters: int = 1000
    phi0: float | list = 1.0
    u0: float | list = 0.0
    seed: int = 0
    slow_period: int = 200
    n_slow: int = 0
    fast_dt_ms: float = 100.0   # nominal wall-clock spacing, metadata only
    load_scale: float = 1.0
    uncontrollable: list = field(default_factory=list)  # rows [bus, p_kw, q_kvar]
    randomized: bool = True
    alpha_mode: str = "adaptive"
    alpha_value: float = 0.01
    alpha_relaxation: float = 1.0
    alpha_guard: float = 1e-12
    stall_iters: int = 50
    allow_unsafe_beta: bool = False
    substation_v: float = 1.0

    def __post_init__(self):
        if self.slow_period < 1:
            raise ScenarioError("slow_period must be >= 1")
        if self.n_slow < 0:
            raise ScenarioError("n_slow must be >= 0")
        if self.delta <= 0:
            raise ScenarioError("delta must be positive")
        if self.max_iters < 1:
            raise ScenarioError("max_iters must be >= 1")

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            b_lo=self.b_lo,
            b_hi=self.b_hi,
            alpha_mode=self.alpha_mode,
            alpha_value=self.alpha_value,
            alpha_relaxation=self.alpha_relaxation,
            alpha_guard=self.alpha_guard,
        )

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(
            beta=self.beta,
            epsilon=self.epsilon,
            randomized=self.randomized,
            delta=self.delta,
            max_iters=self.max_iters,
        )

    def vector(self, value, n: int, name: str) -> np.ndarray:
        if np.isscalar(value):
            return np.full(n, float(value))
        arr = np.asarray(value, dtype=float)
        if arr.shape != (n,):
            raise ScenarioError(f"{name} must be scalar or length {n}")
        return arr

    def canonical_json(self) -> str:
        payload = asdict(self)
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def validate_beta(self, n: int):
        """Gate beta against the admissible interval unless explicitly waived."""
        if self.allow_unsafe_beta:
            return
        lo, hi = beta_bounds(n, self.b_lo, self.b_hi, self.epsilon)
        if not lo < self.beta < hi:
            raise ScenarioError(
                f"beta={self.beta} outside the admissible interval ({lo:.6g}, {hi:.6g}) "
                "for the declared sensitivity bounds; set allow_unsafe_beta to override"
            )


def bundled_path(name: str) -> Path:
    """Filesystem path of a data file shipped with the package."""
    return Path(resources.files("dercoord.data") / name)


def load_scenario(path) -> tuple[ScenarioConfig, FeederModel, LoadProfile]:
    """Read a scenario TOML, resolve and load its feeder, build effective loads."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path.name}: {exc}") from exc
    unknown = set(raw) - set(ScenarioConfig.__dataclass_fields__)
    if unknown:
        raise ScenarioError(f"{path.name}: unknown keys {sorted(unknown)}")
    cfg = ScenarioConfig(**raw)

    feeder_path = Path(cfg.feeder)
    if not feeder_path.is_absolute():
        local = path.parent / feeder_path
        feeder_path = local if local.exists() else bundled_path(cfg.feeder)
    feeder = net.load_feeder(feeder_path)
    cfg.validate_beta(feeder.n_der)
    loads = effective_loads(cfg, feeder)
    object.__setattr__(cfg, "_feeder_hash", _file_hash(feeder_path))
    return cfg, feeder, loads


def effective_loads(cfg: ScenarioConfig, feeder: FeederModel) -> LoadProfile:
    """Scenario loads: scaled nominals minus uncontrollable injections."""
    p = feeder.p_loads() * cfg.load_scale
    q = feeder.q_loads() * cfg.load_scale
    for row in cfg.uncontrollable:
        if len(row) not in (2, 3):
            raise ScenarioError("uncontrollable rows are [bus, p_kw] or [bus, p_kw, q_kvar]")
        bus = int(row[0])
        if not 1 <= bus <= feeder.n_buses:
            raise ScenarioError(f"uncontrollable injection at unknown bus {bus}")
        p[bus - 1] -= float(row[1])
        if len(row) == 3:
            q[bus - 1] -= float(row[2])
    return LoadProfile(p, q)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


@dataclass
class DispatchRecord:
    """Bookkeeping for one slow-timescale dispatch instant."""

    k: int
    p_before: np.ndarray
    p_after: np.ndarray
    y_before: float
    y_after: float
    objective: float
    kkt_residual: float
    active_set: list
    feasible: bool
    line_flows_ac: np.ndarray | None


@dataclass
class SimTrace:
    """Per-iteration record of one run, plus dispatch-instant bookkeeping."""

    n: int
    y_star: float
    delta: float
    config_hash: str = ""
    feeder_hash: str = ""
    k: np.ndarray = None
    u: np.ndarray = None
    y: np.ndarray = None
    e: np.ndarray = None
    phi: np.ndarray = None
    w: np.ndarray = None
    alpha: np.ndarray = None
    phase: list = field(default_factory=list)
    line_p: np.ndarray | None = None
    dispatches: list = field(default_factory=list)
    outcome: str = ""
    der_bus_ids: list = field(default_factory=list)

    def __len__(self):
        return 0 if self.k is None else len(self.k)


class _TraceBuilder:
    def __init__(self, n, y_star, delta, config_hash, feeder_hash, track_flows):
        self.trace = SimTrace(
            n=n, y_star=y_star, delta=delta,
            config_hash=config_hash, feeder_hash=feeder_hash,
        )
        self.rows = []
        self.flows = [] if track_flows else None

    def add(self, k, u, y, e, phi, w, alpha, phase, line_p=None):
        self.rows.append((k, u.copy(), y, e, phi.copy(), w.copy(), alpha, phase))
        if self.flows is not None:
            self.flows.append(None if line_p is None else line_p.copy())

    def finish(self, outcome) -> SimTrace:
        t = self.trace
        t.outcome = outcome
        t.k = np.array([r[0] for r in self.rows], dtype=int)
        t.u = np.array([r[1] for r in self.rows])
        t.y = np.array([r[2] for r in self.rows])
        t.e = np.array([r[3] for r in self.rows])
        t.phi = np.array([r[4] for r in self.rows])
        t.w = np.array([r[5] for r in self.rows])
        t.alpha = np.array([r[6] for r in self.rows])
        t.phase = [r[7] for r in self.rows]
        if self.flows is not None and self.rows and all(f is not None for f in self.flows):
            t.line_p = np.array(self.flows)
        return t


def _bounds(cfg: ScenarioConfig, feeder: FeederModel | None, n: int):
    if feeder is not None:
        return feeder.der_p_min, feeder.der_p_max
    raise ScenarioError("a feeder is required to derive the unit power bounds")


def run_estimation_phase(
    cfg: ScenarioConfig,
    feeder: FeederModel | None,
    plant,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> SimTrace:
    """Execute the fast-timescale loop until deadband / stall / iteration cap.

    ``plant`` is any callable ``u -> y``; when it exposes a ``last_op`` with
    line flows the trace records them.  ``bounds`` overrides the unit power
    box for plants without a feeder (the linear test plant).
    """
    return run_two_timescale(cfg, feeder, plant, n_slow=0, bounds=bounds)


def run_two_timescale(
    cfg: ScenarioConfig,
    feeder: FeederModel | None,
    plant,
    n_slow: int | None = None,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
    loads: LoadProfile | None = None,
) -> SimTrace:
    """Alternate fast estimation/tracking phases with dispatch solves.

    ``n_slow`` dispatch instants run, one after every fast phase (a phase is
    at most ``cfg.slow_period`` iterations, shorter if the deadband is hit);
    the sensitivity estimate carries across instants.  ``n_slow=0`` reduces
    to a single uninterrupted estimation phase.
    """
    if n_slow is None:
        n_slow = cfg.n_slow
    if feeder is not None:
        n = feeder.n_der
    elif bounds is not None:
        n = np.size(bounds[0])
    else:
        n = _infer_n(cfg)
    if bounds is None:
        bounds = _bounds(cfg, feeder, n)
    lo, hi = np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float)
    u0 = cfg.vector(cfg.u0, n, "u0")
    phi0 = cfg.vector(cfg.phi0, n, "phi0")
    if np.any(u0 < lo - 1e-9) or np.any(u0 > hi + 1e-9):
        raise ScenarioError("u0 violates the unit power bounds")

    est_cfg = cfg.estimator_config()
    est = SensitivityEstimate(project_box(phi0, cfg.b_lo, cfg.b_hi), cfg.b_lo, cfg.b_hi)
    rng = substream(cfg.seed, "mask")
    ones = np.ones(n)

    track_flows = getattr(plant, "last_op", None) is not None or hasattr(plant, "feeder")
    tb = _TraceBuilder(
        n, cfg.y_star, cfg.delta, cfg.config_hash(),
        getattr(cfg, "_feeder_hash", ""), track_flows,
    )
    if feeder is not None:
        tb.trace.der_bus_ids = list(feeder.der_buses)

    def flows_now():
        op = getattr(plant, "last_op", None)
        return None if op is None else op.line_p

    # initialization: both warmup measurements share the same setpoint
    y0 = plant(u0)  # unsolvable initial point propagates as a plant error
    state = ControlState(u=u0.copy(), y=y0, e=y0 - cfg.y_star,
                         u_prev=u0.copy(), y_prev=y0, k=0)
    tb.add(0, u0, y0, state.e, est.phi_hat, ones, math.nan, PHASE_ESTIMATION, flows_now())

    stall = 0
    outcome = None

    def note_move(prev_u):
        nonlocal stall
        move2 = float(np.dot(state.u - prev_u, state.u - prev_u))
        stall = stall + 1 if move2 < cfg.alpha_guard else 0

    def fast_phase(budget):
        nonlocal state, est, stall
        done = 0
        while True:
            if abs(state.e) <= cfg.delta:
                return OUTCOME_DELTA
            if stall >= cfg.stall_iters:
                return OUTCOME_STALL
            if state.k >= cfg.max_iters:
                return OUTCOME_MAX_ITERS
            if done >= budget:
                return None  # phase budget exhausted, dispatch next
            du = state.u - state.u_prev
            dy = state.y - state.y_prev
            alpha = est_cfg.step_size(du)
            est = estimation_step(est, du, dy, alpha)
            mask = sample_mask(rng, n) if cfg.randomized else ones
            prev_u = state.u
            nxt = tracking_step(state, est, mask, cfg.beta, (lo, hi))
            try:
                nxt.y = plant(nxt.u)
            except PowerFlowError:
                return OUTCOME_PLANT_ERROR
            nxt.e = nxt.y - cfg.y_star
            state = nxt
            done += 1
            tb.add(
                state.k, state.u, state.y, state.e, est.phi_hat, mask,
                math.nan if alpha is None else alpha, PHASE_ESTIMATION, flows_now(),
            )
            note_move(prev_u)

    n_phases = max(n_slow, 0)
    if n_phases > 0 and feeder is None:
        raise ScenarioError("dispatch instants need a feeder model")
    for s in range(n_phases + 1):
        outcome = fast_phase(cfg.slow_period if s < n_phases else math.inf)
        if outcome in (OUTCOME_PLANT_ERROR, OUTCOME_MAX_ITERS):
            break
        if s >= n_phases:
            break
        # slow instant: re-dispatch from the latest measurement and estimate
        p_d = loads.p_d if loads is not None else (
            plant.loads.p_d if isinstance(plant, AcPlant) else np.zeros(feeder.n_buses)
        )
        prob = DispatchProblem(
            y_now=state.y, p_tilde=state.u.copy(), phi_hat=est.phi_hat.copy(),
            y_star=cfg.y_star, p_d=p_d,
        )
        try:
            res = solve_odcp(prob, feeder)
        except OdcpInfeasibleError:
            tb.trace.dispatches.append(DispatchRecord(
                k=state.k, p_before=state.u.copy(), p_after=state.u.copy(),
                y_before=state.y, y_after=state.y, objective=math.nan,
                kkt_residual=math.nan, active_set=[], feasible=False,
                line_flows_ac=flows_now(),
            ))
            continue  # keep previous setpoints, next phase proceeds
        u_k = project_box(res.p_g, lo, hi)
        try:
            y_k = plant(u_k)
        except PowerFlowError:
            outcome = OUTCOME_PLANT_ERROR
            break
        prev = state
        state = ControlState(u=u_k, y=y_k, e=y_k - cfg.y_star,
                             u_prev=prev.u.copy(), y_prev=prev.y, k=prev.k + 1)
        tb.add(state.k, state.u, state.y, state.e, est.phi_hat, ones, math.nan,
               PHASE_DISPATCH, flows_now())
        tb.trace.dispatches.append(DispatchRecord(
            k=state.k, p_before=prev.u.copy(), p_after=state.u.copy(),
            y_before=prev.y, y_after=state.y, objective=res.objective,
            kkt_residual=res.kkt_residual, active_set=res.active_set, feasible=True,
            line_flows_ac=flows_now(),
        ))
        note_move(prev.u)

    return tb.finish(outcome or OUTCOME_MAX_ITERS)


def _infer_n(cfg: ScenarioConfig) -> int:
    if not np.isscalar(cfg.u0):
        return len(cfg.u0)
    if not np.isscalar(cfg.phi0):
        return len(cfg.phi0)
    raise ScenarioError("cannot infer the unit count without a feeder or vector u0/phi0")


# -- equilibrium classification --------------------------------------------------

CLASS_TRACKING = "tracking"          # |e| inside the deadband
CLASS_SATURATED_LOW = "saturated_low"   # u pinned at the lower bound, e > 0
CLASS_SATURATED_HIGH = "saturated_high"  # u pinned at the upper bound, e < 0


class UnclassifiableTrace(RuntimeError):
    """Terminated trace matches none of the three admissible equilibria."""


def equilibrium_class(trace: SimTrace, bounds, tol: float = 1e-9) -> str:
    lo, hi = bounds
    if len(trace) == 0:
        raise UnclassifiableTrace("empty trace")
    e_t = trace.e[-1]
    u_t = trace.u[-1]
    if abs(e_t) <= trace.delta:
        return CLASS_TRACKING
    if np.all(u_t <= lo + tol) and e_t > 0:
        return CLASS_SATURATED_LOW
    if np.all(u_t >= hi - tol) and e_t < 0:
        return CLASS_SATURATED_HIGH
    raise UnclassifiableTrace(
        f"terminal error {e_t:.4g} with interior setpoints (outcome={trace.outcome})"
    )


# -- metrics ---------------------------------------------------------------------


@dataclass
class Metrics:
    mae: np.ndarray            # mean absolute estimation error at the oracle rows
    mae_ks: np.ndarray         # iteration indices the oracle covers
    terminal_e: float
    iterations_to_delta: int   # -1 when the deadband was never reached
    overload_duration: dict    # line id -> fast iterations with |flow| > capacity


def compute_metrics(
    trace: SimTrace,
    oracle_phi,
    oracle_ks=None,
    feeder: FeederModel | None = None,
) -> Metrics:
    """Estimation error and congestion metrics for one trace.

    ``oracle_phi`` holds ground-truth sensitivities aligned with the trace:
    either one row per trace row, or rows for the iterations listed in
    ``oracle_ks``.
    """
    oracle_phi = np.asarray(oracle_phi, dtype=float)
    if oracle_phi.ndim == 1:
        oracle_phi = oracle_phi.reshape(1, -1)
    if oracle_ks is None:
        if oracle_phi.shape[0] != len(trace):
            raise ValueError(
                f"oracle series has {oracle_phi.shape[0]} rows for {len(trace)} trace rows"
            )
        oracle_ks = trace.k.copy()
    oracle_ks = np.asarray(oracle_ks, dtype=int)
    if oracle_ks.shape[0] != oracle_phi.shape[0]:
        raise ValueError("oracle_ks and oracle_phi are misaligned")
    if oracle_phi.shape[1] != trace.n:
        raise ValueError("oracle has the wrong number of units")
    pos = {int(kk): i for i, kk in enumerate(trace.k)}
    try:
        rows = np.array([pos[int(kk)] for kk in oracle_ks], dtype=int)
    except KeyError as exc:
        raise ValueError(f"oracle references iteration {exc} absent from the trace") from exc
    mae = np.abs(trace.phi[rows] - oracle_phi).mean(axis=1)

    inside = np.abs(trace.e) <= trace.delta
    iters_to_delta = int(trace.k[np.argmax(inside)]) if inside.any() else -1

    overload = {}
    if trace.line_p is not None and feeder is not None:
        fmax = feeder.line_f_max()
        for j in np.flatnonzero(np.isfinite(fmax)):
            overload[feeder.lines[j].id] = int(
                np.sum(np.abs(trace.line_p[:, j]) > fmax[j])
            )
    return Metrics(
        mae=mae,
        mae_ks=oracle_ks,
        terminal_e=float(trace.e[-1]),
        iterations_to_delta=iters_to_delta,
        overload_duration=overload,
    )


def oracle_series(plant, trace: SimTrace, ks=None) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth sensitivities along a trace, at all rows or selected ones.

    The finite-difference probe is nudged inside the power box when a
    recorded setpoint sits on a bound.
    """
    if ks is None:
        ks = trace.k
    ks = np.asarray(ks, dtype=int)
    pos = {int(kk): i for i, kk in enumerate(trace.k)}
    phis = np.array([plant.true_sensitivity(trace.u[pos[int(kk)]]) for kk in ks])
    return phis, ks


def replay_trace(trace: SimTrace, feeder: FeederModel, loads: LoadProfile,
                 substation_v: float = 1.0) -> SimTrace:
    """Re-solve the plant along the recorded setpoints (fresh warm-start chain).

    Returns a copy of the trace with ``y``/``e``/``line_p`` regenerated; used
    to verify replay consistency and to reattach flows to an imported CSV.
    """
    plant = AcPlant(feeder, loads, substation_v)
    y = np.empty(len(trace))
    flows = []
    for i in range(len(trace)):
        y[i] = plant(trace.u[i])
        flows.append(plant.last_op.line_p.copy())
    out = SimTrace(
        n=trace.n, y_star=trace.y_star, delta=trace.delta,
        config_hash=trace.config_hash, feeder_hash=trace.feeder_hash,
        k=trace.k.copy(), u=trace.u.copy(), y=y, e=y - trace.y_star,
        phi=trace.phi.copy(), w=trace.w.copy(), alpha=trace.alpha.copy(),
        phase=list(trace.phase), line_p=np.array(flows),
        dispatches=list(trace.dispatches), outcome=trace.outcome,
    )
    return out


# -- trace CSV -------------------------------------------------------------------


def export_trace(trace: SimTrace, path) -> Path:
    """Write the run to CSV: a JSON comment header then one row per iteration.

    Floats are emitted in shortest round-trip form, so re-importing
    reproduces every recorded value bit-exactly and identical runs produce
    byte-identical files.
    """
    path = Path(path)
    n = trace.n
    header = {
        "format": 1,
        "config_sha256": trace.config_hash,
        "feeder_sha256": trace.feeder_hash,
        "rng": RNG_SCHEME,
        "n_der": n,
        "der_buses": list(trace.der_bus_ids),
        "y_star": trace.y_star,
        "delta": trace.delta,
        "outcome": trace.outcome,
    }
    cols = (
        ["k"]
        + [f"u_{i+1}" for i in range(n)]
        + ["y", "e"]
        + [f"phihat_{i+1}" for i in range(n)]
        + [f"w_{i+1}" for i in range(n)]
        + ["alpha", "phase"]
    )
    lines = ["# " + json.dumps(header, sort_keys=True), ",".join(cols)]
    for i in range(len(trace)):
        row = [str(int(trace.k[i]))]
        row += [repr(float(v)) for v in trace.u[i]]
        row += [repr(float(trace.y[i])), repr(float(trace.e[i]))]
        row += [repr(float(v)) for v in trace.phi[i]]
        row += [repr(float(v)) for v in trace.w[i]]
        row += [repr(float(trace.alpha[i])), trace.phase[i]]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def import_trace(path) -> SimTrace:
    """Read a trace CSV back; inverse of :func:`export_trace` for all recorded
    columns (line flows are not serialized and can be reattached by replay)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path.name}: missing JSON header line")
    header = json.loads(text[0][1:].strip())
    n = int(header["n_der"])
    body = [ln for ln in text[1:] if ln.strip()]
    expect = 1 + n + 2 + n + n + 2
    ks, us, ys, phis, ws, alphas, phases = [], [], [], [], [], [], []
    for ln in body[1:]:
        parts = ln.split(",")
        if len(parts) != expect:
            raise ValueError(f"{path.name}: bad row width {len(parts)} != {expect}")
        ks.append(int(parts[0]))
        us.append([float(v) for v in parts[1 : 1 + n]])
        ys.append(float(parts[1 + n]))
        phis.append([float(v) for v in parts[3 + n : 3 + 2 * n]])
        ws.append([float(v) for v in parts[3 + 2 * n : 3 + 3 * n]])
        alphas.append(float(parts[3 + 3 * n]))
        phases.append(parts[4 + 3 * n])
    t = SimTrace(
        n=n,
        y_star=float(header["y_star"]),
        delta=float(header["delta"]),
        config_hash=header.get("config_sha256", ""),
        feeder_hash=header.get("feeder_sha256", ""),
        outcome=header.get("outcome", ""),
        der_bus_ids=list(header.get("der_buses", [])),
    )
    t.k = np.asarray(ks, dtype=int)
    t.u = np.asarray(us, dtype=float).reshape(len(ks), n)
    t.y = np.asarray(ys, dtype=float)
    t.e = t.y - t.y_star
    t.phi = np.asarray(phis, dtype=float).reshape(len(ks), n)
    t.w = np.asarray(ws, dtype=float).reshape(len(ks), n)
    t.alpha = np.asarray(alphas, dtype=float)
    t.phase = phases
    return t
