"""Radial feeder data model and the linearized line-flow machinery.

A feeder is a tree rooted at the substation (bus 0).  Buses carry loads and
optionally one controllable generation unit each; lines carry per-unit series
impedance and an active-power capacity.  Flows are computed from bus
injections with the lossless tree approximation ``f = M^-1 p``, where ``M`` is
the reduced incidence matrix (substation row removed).  On a tree that solve
is a single back-substitution pass, so no matrix is ever inverted.

External quantities are kW / kVAr; impedances are per-unit on the feeder's
voltage/power base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUBSTATION = "substation"
LOAD = "load"
DER_UNITY_PF = "der_unity_pf"
DER_CONST_VOLTAGE = "der_const_voltage"

BUS_KINDS = (SUBSTATION, LOAD, DER_UNITY_PF, DER_CONST_VOLTAGE)
DER_KINDS = (DER_UNITY_PF, DER_CONST_VOLTAGE)


class FeederError(ValueError):
    """Malformed feeder file or a model that violates the radial invariants."""


@dataclass(frozen=True)
class Bus:
    """One bus: id 0 is always the substation, everything else carries load
    and possibly one generation unit."""

    id: int
    kind: str
    p_load: float = 0.0   # kW, >= 0 means consumption
    q_load: float = 0.0   # kVAr
    v_set: float | None = None  # per-unit, only for voltage-holding units


@dataclass(frozen=True)
class Line:
    """Directed line; positive flow runs from ``from_bus`` to ``to_bus``."""

    id: int
    from_bus: int
    to_bus: int
    r: float            # per-unit resistance
    x: float            # per-unit reactance
    f_max: float = math.inf  # kW active-power capacity


class FeederModel:
    """Validated radial feeder.

    Immutable after construction; all derived indexing (parent pointers,
    traversal orders, path membership) is precomputed here so the solvers can
    stay vectorized.  Raises :class:`FeederError` when the data is not a
    connected tree with exactly one substation.
    """

    def __init__(
        self,
        buses: list[Bus],
        lines: list[Line],
        der_buses: list[int],
        der_p_min,
        der_p_max,
        der_q_min=None,
        der_q_max=None,
        v_base_kv: float = 4.16,
        s_base_kva: float = 1000.0,
    ):
        self.buses = sorted(buses, key=lambda b: b.id)
        self.lines = sorted(lines, key=lambda l: l.id)
        self.der_buses = list(der_buses)
        n = len(self.der_buses)
        self.der_p_min = np.asarray(der_p_min, dtype=float).reshape(n)
        self.der_p_max = np.asarray(der_p_max, dtype=float).reshape(n)
        if der_q_min is None:
            der_q_min = np.zeros(n)
        if der_q_max is None:
            der_q_max = np.zeros(n)
        self.der_q_min = np.asarray(der_q_min, dtype=float).reshape(n)
        self.der_q_max = np.asarray(der_q_max, dtype=float).reshape(n)
        self.v_base_kv = float(v_base_kv)
        self.s_base_kva = float(s_base_kva)
        self._validate()
        self._index_tree()

    # -- basic dimensions ---------------------------------------------------

    @property
    def n_buses(self) -> int:
        """N: number of non-substation buses."""
        return len(self.buses) - 1

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_der(self) -> int:
        return len(self.der_buses)

    @property
    def der_index(self) -> np.ndarray:
        """0-based positions of the DER buses inside length-N bus vectors."""
        return np.asarray([b - 1 for b in self.der_buses], dtype=int)

    def p_loads(self) -> np.ndarray:
        """Nominal active loads (kW), buses 1..N."""
        return np.array([b.p_load for b in self.buses[1:]], dtype=float)

    def q_loads(self) -> np.ndarray:
        """Nominal reactive loads (kVAr), buses 1..N."""
        return np.array([b.q_load for b in self.buses[1:]], dtype=float)

    # -- validation ----------------------------------------------------------

    def _validate(self):
        ids = [b.id for b in self.buses]
        n_total = len(self.buses)
        if ids != list(range(n_total)):
            raise FeederError(f"bus ids must be 0..{n_total - 1} contiguous, got {ids[:8]}...")
        if n_total < 2:
            raise FeederError("feeder needs at least one bus besides the substation")
        for b in self.buses:
            if b.kind not in BUS_KINDS:
                raise FeederError(f"bus {b.id}: unknown kind {b.kind!r}")
        sub = self.buses[0]
        if sub.kind != SUBSTATION:
            raise FeederError("bus 0 must be the substation")
        if any(b.kind == SUBSTATION for b in self.buses[1:]):
            raise FeederError("exactly one substation allowed, at bus 0")
        if sub.p_load != 0.0 or sub.q_load != 0.0:
            raise FeederError("substation carries no load")
        for b in self.buses:
            if b.kind == DER_CONST_VOLTAGE:
                if b.v_set is None or not (0.5 < b.v_set < 1.5):
                    raise FeederError(
                        f"bus {b.id}: voltage-holding unit needs a setpoint in (0.5, 1.5) pu"
                    )

        line_ids = [l.id for l in self.lines]
        if line_ids != list(range(1, len(self.lines) + 1)):
            raise FeederError("line ids must be 1..L contiguous")
        for l in self.lines:
            if l.from_bus == l.to_bus:
                raise FeederError(f"line {l.id}: self-loop at bus {l.from_bus}")
            for end in (l.from_bus, l.to_bus):
                if not (0 <= end < n_total):
                    raise FeederError(f"line {l.id}: endpoint {end} is not a bus")
            if l.r < 0:
                raise FeederError(f"line {l.id}: negative resistance")
            if not l.f_max > 0:
                raise FeederError(f"line {l.id}: f_max must be positive")

        if len(self.lines) != self.n_buses:
            raise FeederError(
                f"not radial: L={len(self.lines)} lines but N={self.n_buses} buses"
            )

        seen = set()
        for b in self.der_buses:
            if b in seen:
                raise FeederError(f"duplicate generation unit at bus {b}")
            seen.add(b)
            if b == 0:
                raise FeederError("substation cannot host a generation unit")
            if not (0 < b < n_total):
                raise FeederError(f"generation unit at unknown bus {b}")
            if self.buses[b].kind not in DER_KINDS:
                raise FeederError(f"bus {b} is listed as a unit but has kind {self.buses[b].kind!r}")
        for b in self.buses:
            if b.kind in DER_KINDS and b.id not in seen:
                raise FeederError(f"bus {b.id} has kind {b.kind!r} but no unit record")
        if np.any(self.der_p_min > self.der_p_max) or np.any(self.der_q_min > self.der_q_max):
            raise FeederError("unit power bounds must satisfy min <= max")

    def _index_tree(self):
        n_total = self.n_buses + 1
        adj: list[list[tuple[int, int]]] = [[] for _ in range(n_total)]
        for j, l in enumerate(self.lines):
            adj[l.from_bus].append((l.to_bus, j))
            adj[l.to_bus].append((l.from_bus, j))

        parent = np.full(n_total, -1, dtype=int)
        line_of = np.full(n_total, -1, dtype=int)   # line index (0-based) into each bus
        depth = np.zeros(n_total, dtype=int)
        preorder = []
        stack = [0]
        visited = np.zeros(n_total, dtype=bool)
        visited[0] = True
        while stack:
            v = stack.pop()
            preorder.append(v)
            # reversed so lower-numbered neighbors pop first (deterministic order)
            for w, j in reversed(adj[v]):
                if visited[w]:
                    if w != parent[v]:
                        raise FeederError("not radial: cycle detected")
                    continue
                visited[w] = True
                parent[w] = v
                line_of[w] = j
                depth[w] = depth[v] + 1
                stack.append(w)
        if not visited.all():
            missing = int(np.flatnonzero(~visited)[0])
            raise FeederError(f"not radial: bus {missing} unreachable from the substation")

        self.parent = parent
        self.line_of_bus = line_of
        self.depth = depth
        self.preorder = np.asarray(preorder[1:], dtype=int)  # buses 1..N, root excluded
        # +1 when the file's line direction points away from the root
        orient = np.zeros(self.n_lines, dtype=float)
        child_of_line = np.zeros(self.n_lines, dtype=int)
        for v in self.preorder:
            j = line_of[v]
            child_of_line[j] = v
            orient[j] = 1.0 if self.lines[j].to_bus == v else -1.0
        self.line_orient = orient
        self.child_of_line = child_of_line

        # path membership: path_mat[i-1, j-1] = 1 when the line into bus j lies
        # on the root->i path; used both for voltage drops (rows) and subtree
        # sums (columns)
        pm = np.zeros((self.n_buses, self.n_buses))
        for v in self.preorder:
            if parent[v] != 0:
                pm[v - 1] = pm[parent[v] - 1]
            pm[v - 1, v - 1] = 1.0
        self.path_mat = pm

    def line_f_max(self) -> np.ndarray:
        return np.array([l.f_max for l in self.lines], dtype=float)

    def __repr__(self):
        return (
            f"FeederModel(N={self.n_buses}, L={self.n_lines}, units={self.n_der}, "
            f"base={self.v_base_kv}kV/{self.s_base_kva}kVA)"
        )


# -- operations ---------------------------------------------------------------


def incidence_matrix(feeder: FeederModel) -> np.ndarray:
    """Reduced bus-line incidence matrix (N x L).

    Row i-1 covers bus i; +1 where a line leaves the bus, -1 where it enters.
    The substation row is dropped, which leaves a square invertible matrix on
    any radial feeder.
    """
    m = np.zeros((feeder.n_buses, feeder.n_lines))
    for j, l in enumerate(feeder.lines):
        if l.from_bus >= 1:
            m[l.from_bus - 1, j] = 1.0
        if l.to_bus >= 1:
            m[l.to_bus - 1, j] = -1.0
    return m


def map_injections(feeder: FeederModel, p_g, p_d) -> np.ndarray:
    """Bus injection vector ``p = C p_g - p_d`` (kW, buses 1..N)."""
    p_g = np.asarray(p_g, dtype=float)
    p_d = np.asarray(p_d, dtype=float)
    if p_g.shape != (feeder.n_der,):
        raise ValueError(f"p_g must have length {feeder.n_der}, got {p_g.shape}")
    if p_d.shape != (feeder.n_buses,):
        raise ValueError(f"p_d must have length {feeder.n_buses}, got {p_d.shape}")
    p = -p_d.copy()
    np.add.at(p, feeder.der_index, p_g)
    return p


def line_flows_approx(feeder: FeederModel, p) -> np.ndarray:
    """Solve ``M f = p`` by back-substitution over the tree.

    Flow on each line equals minus the sum of injections hanging below it;
    one reverse-preorder pass accumulates the subtree sums.  Returned flows
    follow each line's file direction (kW).
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (feeder.n_buses,):
        raise ValueError(f"p must have length {feeder.n_buses}, got {p.shape}")
    acc = np.zeros(feeder.n_buses + 1)
    acc[1:] = p
    for v in feeder.preorder[::-1]:
        acc[feeder.parent[v]] += acc[v]
    # parent->child flow on line j is -subtree_sum(child_of_line[j])
    return -acc[feeder.child_of_line] * feeder.line_orient


# -- feeder file ingestion ------------------------------------------------------


def load_feeder(path, v_base_kv: float = 4.16, s_base_kva: float = 1000.0) -> FeederModel:
    """Parse a feeder description file and return a validated model.

    The format is plain UTF-8 text with ``[buses]``, ``[lines]`` and ``[ders]``
    sections. Bus rows are ``id kind p_load_kw q_load_kvar [v_set_pu]``, line
    rows ``id from to r_pu x_pu f_max_kw`` (``inf`` allowed), and unit rows
    ``bus p_min_kw p_max_kw q_min_kvar q_max_kvar``.  ``#`` starts a comment.
    """
    path = Path(path)
    buses: list[Bus] = []
    lines: list[Line] = []
    der_rows: list[tuple[int, float, float, float, float]] = []
    section = None
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if text.startswith("["):
            if text not in ("[buses]", "[lines]", "[ders]"):
                raise FeederError(f"{path.name}:{lineno}: unknown section {text}")
            section = text
            continue
        fields = text.split()
        try:
            if section == "[buses]":
                if len(fields) not in (4, 5):
                    raise ValueError("expected: id kind p_load q_load [v_set]")
                v_set = float(fields[4]) if len(fields) == 5 else None
                buses.append(
                    Bus(int(fields[0]), fields[1], float(fields[2]), float(fields[3]), v_set)
                )
            elif section == "[lines]":
                if len(fields) != 6:
                    raise ValueError("expected: id from to r x f_max")
                lines.append(
                    Line(
                        int(fields[0]), int(fields[1]), int(fields[2]),
                        float(fields[3]), float(fields[4]), float(fields[5]),
                    )
                )
            elif section == "[ders]":
                if len(fields) != 5:
                    raise ValueError("expected: bus p_min p_max q_min q_max")
                der_rows.append(
                    (int(fields[0]), float(fields[1]), float(fields[2]),
                     float(fields[3]), float(fields[4]))
                )
            else:
                raise ValueError("data before any section header")
        except ValueError as exc:
            raise FeederError(f"{path.name}:{lineno}: {exc}") from exc
    if not buses:
        raise FeederError(f"{path.name}: no [buses] section")

    return FeederModel(
        buses=buses,
        lines=lines,
        der_buses=[row[0] for row in der_rows],
        der_p_min=[row[1] for row in der_rows],
        der_p_max=[row[2] for row in der_rows],
        der_q_min=[row[3] for row in der_rows],
        der_q_max=[row[4] for row in der_rows],
        v_base_kv=v_base_kv,
        s_base_kva=s_base_kva,
    )
