"""Stopping games on finite filtered probability spaces.

A model is a finite sample set with positive weights and a refining chain of
partitions, one per stage ``0..horizon``.  Players may stop at stages
``0..horizon-1``; reaching the horizon without a stop pays 0.  Everything that
is adapted (payoffs, strategies, the events ``{t <= n}`` of a stopping time)
is constant on atoms, so all computations run on the tree of atoms and are
exact whenever the inputs are rational.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Any, Callable, Iterable, Mapping, Sequence

from .tree_game import (
    SCHEMA_VERSION,
    TOL,
    GameTree,
    NodePayoff,
    RoundStats,
    StationaryProfile,
    StationaryStrategy,
    as_fraction,
    best_response,
    is_exact,
    leq,
    on_grid,
    ratio,
)

Number = Any
AtomKey = tuple  # (stage, atom index)


def delta_at(eps, n: int):
    """Per-stage kernel tolerance eps^2 / 2^(n+2)."""
    return as_fraction(eps) ** 2 / 2 ** (n + 2)


def big_delta_at(eps, n: int):
    """Tail sum of the kernel tolerances from stage n on: eps^2 / 2^(n+1)."""
    return as_fraction(eps) ** 2 / 2 ** (n + 1)


# -- model ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FiltrationModel:
    """Sample weights plus one partition per stage, refining in the stage.

    Atoms are tuples of sorted point indices; within a stage they are ordered
    lexicographically, which fixes the atom indices used everywhere else.
    """

    prob: tuple
    partitions: tuple

    def __post_init__(self):
        parts = tuple(tuple(sorted(tuple(sorted(a)) for a in stage)) for stage in self.partitions)
        object.__setattr__(self, "partitions", parts)
        object.__setattr__(self, "prob", tuple(self.prob))

    @property
    def horizon(self) -> int:
        return len(self.partitions) - 1

    @property
    def n_points(self) -> int:
        return len(self.prob)

    @cached_property
    def labels(self) -> tuple:
        """labels[n][w]: index of the stage-n atom containing point w."""
        out = []
        for stage in self.partitions:
            lab = [None] * self.n_points
            for i, atom in enumerate(stage):
                for w in atom:
                    lab[w] = i
            out.append(tuple(lab))
        return tuple(out)

    @cached_property
    def atom_prob(self) -> tuple:
        return tuple(tuple(sum((self.prob[w] for w in atom), 0 * self.prob[0]) for atom in stage)
                     for stage in self.partitions)

    @cached_property
    def kids(self) -> tuple:
        """kids[n][a]: indices of stage n+1 atoms inside atom a of stage n."""
        out = []
        for n in range(self.horizon):
            lab = self.labels[n + 1]
            stage = []
            for atom in self.partitions[n]:
                stage.append(tuple(sorted({lab[w] for w in atom})))
            out.append(tuple(stage))
        return tuple(out)

    @cached_property
    def exact(self) -> bool:
        return is_exact(self.prob)

    def atom(self, n: int, a: int) -> tuple:
        return self.partitions[n][a]

    def rep(self, n: int, a: int) -> int:
        return self.partitions[n][a][0]

    def cond(self, n: int, a: int, c: int):
        """P(child atom c at n+1 | atom a at n)."""
        return self.atom_prob[n + 1][c] / self.atom_prob[n][a]

    def atoms(self, n: int) -> range:
        return range(len(self.partitions[n]))

    def validate(self) -> list:
        report = []
        if not self.partitions:
            report.append("no stages")
            return report
        if any(p <= 0 for p in self.prob):
            report.append("non-positive point weight")
        total = sum(self.prob)
        if (self.exact and total != 1) or abs(total - 1) > TOL:
            report.append(f"weights sum to {total}")
        everything = set(range(self.n_points))
        for n, stage in enumerate(self.partitions):
            seen = [w for atom in stage for w in atom]
            if any(not atom for atom in stage):
                report.append(f"stage {n}: empty atom")
            if sorted(seen) != sorted(everything):
                report.append(f"stage {n}: atoms do not partition the sample set")
                continue
            if n > 0:
                prev = self.labels[n - 1]
                for atom in stage:
                    if len({prev[w] for w in atom}) != 1:
                        report.append(f"stage {n}: atom {list(atom)} straddles stage {n - 1} atoms")
        return report

    def to_dict(self) -> dict:
        return {
            "points": [{"id": w, "prob": str(p)} for w, p in enumerate(self.prob)],
            "horizon": self.horizon,
            "partitions": [[list(a) for a in stage] for stage in self.partitions],
        }

    @classmethod
    def from_dict(cls, doc: Mapping, arith: str = "rational") -> "FiltrationModel":
        num = as_fraction if arith == "rational" else (lambda v: float(as_fraction(v)))
        pts = sorted(doc["points"], key=lambda p: p["id"])
        if [p["id"] for p in pts] != list(range(len(pts))):
            raise ValueError("point ids must be 0..n-1")
        parts = doc["partitions"]
        if len(parts) != int(doc["horizon"]) + 1:
            raise ValueError("need one partition per stage 0..horizon")
        return cls(tuple(num(p["prob"]) for p in pts), tuple(tuple(tuple(a) for a in st) for st in parts))


def deterministic_model(horizon: int) -> FiltrationModel:
    """One sample point, trivial partitions."""
    return FiltrationModel((Fraction(1),), tuple(((0,),) for _ in range(horizon + 1)))


@dataclass(frozen=True, eq=False)
class PayoffProcess:
    """values[n][a]: NodePayoff of stage-n atom a, for n = 0..horizon."""

    values: tuple
    k: int = 1
    bound: int = 1

    def at(self, n: int, a: int) -> NodePayoff:
        return self.values[n][a]

    def point(self, m: FiltrationModel, n: int, w: int) -> NodePayoff:
        return self.values[n][m.labels[n][w]]

    def validate(self, m: FiltrationModel) -> list:
        report = []
        if len(self.values) != m.horizon + 1:
            report.append("payoff process does not cover stages 0..horizon")
            return report
        for n, stage in enumerate(self.values):
            if len(stage) != len(m.partitions[n]):
                report.append(f"stage {n}: {len(stage)} payoff entries for {len(m.partitions[n])} atoms")
                continue
            for a, pay in enumerate(stage):
                if not all(on_grid(v, self.k, self.bound) for v in pay.values()):
                    report.append(f"stage {n} atom {a}: payoff off the 1/{self.k} grid")
        return report

    def to_dict(self) -> dict:
        doc = {"k": self.k, "payoffs": {
            str(n): {str(a): [str(v) for v in pay.values()] for a, pay in enumerate(stage)}
            for n, stage in enumerate(self.values)}}
        if self.bound != 1:
            doc["bound"] = self.bound
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping, m: FiltrationModel) -> "PayoffProcess":
        pays = doc["payoffs"]
        values = []
        for n in range(m.horizon + 1):
            stage = pays[str(n)]
            values.append(tuple(NodePayoff.from_values([as_fraction(v) for v in stage[str(a)]])
                                for a in m.atoms(n)))
        return cls(tuple(values), int(doc.get("k", 1)), int(doc.get("bound", 1)))


def payoff_from(m: FiltrationModel, fn: Callable[[int, int], Sequence], k: int = 1, bound: int = 1) -> PayoffProcess:
    """Build a process from ``fn(stage, atom index) -> six values``."""
    return PayoffProcess(tuple(tuple(NodePayoff.from_values(list(fn(n, a))) for a in m.atoms(n))
                               for n in range(m.horizon + 1)), k, bound)


def constant_payoff(m: FiltrationModel, p1_stop, p2_stop, both_stop, k: int = 1, bound: int = 1) -> PayoffProcess:
    six = (*p1_stop, *p2_stop, *both_stop)
    return payoff_from(m, lambda n, a: six, k, bound)


def model_to_dict(m: FiltrationModel, r: PayoffProcess) -> dict:
    doc = {"schema": "filtration_model", "version": SCHEMA_VERSION}
    doc.update(m.to_dict())
    doc.update(r.to_dict())
    return doc


def model_from_dict(doc: Mapping, arith: str = "rational") -> tuple:
    m = FiltrationModel.from_dict(doc, arith)
    return m, PayoffProcess.from_dict(doc, m)


def threat_example_model(horizon: int = 30) -> tuple:
    """Deterministic game: player 1 alone pays (-1, 2), player 2 alone (-2, 1), both (0, -3)."""
    m = deterministic_model(horizon)
    return m, constant_payoff(m, (-1, 2), (-2, 1), (0, -3), k=1, bound=3)


# -- strategies and stopping times ------------------------------------------------

@dataclass(frozen=True, eq=False)
class AdaptedStrategy:
    """table[n - start][a]: stop probability at stage n on atom a."""

    table: tuple
    start: int = 0

    @property
    def end(self) -> int:
        return self.start + len(self.table)

    def at(self, n: int, a: int):
        if self.start <= n < self.end:
            return self.table[n - self.start][a]
        return 0

    @classmethod
    def never(cls, m: FiltrationModel) -> "AdaptedStrategy":
        return cls(tuple(tuple(0 for _ in m.atoms(n)) for n in range(m.horizon)))

    @classmethod
    def from_function(cls, m: FiltrationModel, fn: Callable[[int, int], Number]) -> "AdaptedStrategy":
        return cls(tuple(tuple(fn(n, a) for a in m.atoms(n)) for n in range(m.horizon)))

    def check(self, m: FiltrationModel) -> None:
        for i, row in enumerate(self.table):
            n = self.start + i
            if n >= m.horizon or len(row) != len(m.partitions[n]):
                raise ValueError(f"strategy row for stage {n} does not match the model")
            if any(not 0 <= v <= 1 for v in row):
                raise ValueError(f"stage {n}: stop probability outside [0, 1]")

    def covers(self, m: FiltrationModel) -> bool:
        return self.start == 0 and len(self.table) == m.horizon

    def exact(self) -> bool:
        return is_exact(v for row in self.table for v in row)

    def to_dict(self) -> dict:
        return {"start": self.start, "table": [[str(v) for v in row] for row in self.table]}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AdaptedStrategy":
        return cls(tuple(tuple(as_fraction(v) for v in row) for row in doc["table"]), int(doc.get("start", 0)))

    def __eq__(self, other) -> bool:
        return isinstance(other, AdaptedStrategy) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(str(self.to_dict()))


def edit_strategy(m: FiltrationModel, base: AdaptedStrategy | None, updates: Mapping[AtomKey, Number]) -> AdaptedStrategy:
    """Copy of ``base`` (default never-stop) with entries ``(n, a) -> p`` overwritten."""
    rows = [list(base.at(n, a) for a in m.atoms(n)) if base is not None else [0] * len(m.partitions[n])
            for n in range(m.horizon)]
    for (n, a), p in updates.items():
        rows[n][a] = p
    return AdaptedStrategy(tuple(tuple(r) for r in rows))


@dataclass(frozen=True)
class StoppingTime:
    """values[w]: stage assigned to sample point w."""

    values: tuple

    @classmethod
    def constant(cls, m: FiltrationModel, n: int) -> "StoppingTime":
        return cls(tuple(n for _ in range(m.n_points)))

    def __call__(self, w: int) -> int:
        return self.values[w]

    def beyond(self, m: FiltrationModel, n: int, a: int) -> bool:
        """Whether t > n on atom a of stage n (constant on the atom when adapted)."""
        return self.values[m.rep(n, a)] > n

    def equals(self, m: FiltrationModel, n: int, a: int) -> bool:
        return self.values[m.rep(n, a)] == n

    def violations(self, m: FiltrationModel) -> list:
        report = []
        if len(self.values) != m.n_points:
            return ["stopping time length does not match the sample set"]
        for w, v in enumerate(self.values):
            if not 0 <= v <= m.horizon:
                report.append(f"point {w}: value {v} outside [0, {m.horizon}]")
        for n in range(m.horizon + 1):
            for a, atom in enumerate(m.partitions[n]):
                flags = {self.values[w] <= n for w in atom}
                if len(flags) > 1:
                    report.append(f"{{t <= {n}}} splits atom {a} of stage {n}")
        return report

    def check(self, m: FiltrationModel) -> None:
        report = self.violations(m)
        if report:
            raise ValueError("not a stopping time: " + "; ".join(report[:5]))

    def start_atoms(self, m: FiltrationModel) -> list:
        """Atoms of the stopped sigma-field: (n, a) with t = n on atom a of stage n."""
        out = []
        for n in range(m.horizon + 1):
            for a in m.atoms(n):
                if self.equals(m, n, a):
                    out.append((n, a))
        return out

    def to_dict(self) -> dict:
        return {"values": list(self.values)}

    def __le__(self, other: "StoppingTime") -> bool:
        return all(a <= b for a, b in zip(self.values, other.values))


# -- payoffs ---------------------------------------------------------------------

def _num(v, exact: bool):
    return as_fraction(v) if exact else float(v)


def _window(m: FiltrationModel, r: PayoffProcess, x: AdaptedStrategy, y: AdaptedStrategy,
            t2: StoppingTime, exact: bool):
    """Memoized (pi, rho1, rho2) of play from atom (n, a) until t2, conditional on the atom."""
    memo = {}
    zero = Fraction(0) if exact else 0.0

    def run(n: int, a: int):
        key = (n, a)
        if key in memo:
            return memo[key]
        # iterative post-order to avoid deep recursion on long horizons
        stack = [(n, a, False)]
        while stack:
            k, b, expanded = stack.pop()
            if (k, b) in memo:
                continue
            if k >= m.horizon or not t2.beyond(m, k, b):
                memo[(k, b)] = (zero, zero, zero)
                continue
            kids = m.kids[k][b]
            if not expanded:
                stack.append((k, b, True))
                stack.extend((k + 1, c, False) for c in kids if (k + 1, c) not in memo)
                continue
            xi, yi = _num(x.at(k, b), exact), _num(y.at(k, b), exact)
            q = r.at(k, b).values()
            if exact:
                q = tuple(as_fraction(v) for v in q)
            else:
                q = tuple(float(v) for v in q)
            s1, s2, s12 = xi * (1 - yi), (1 - xi) * yi, xi * yi
            cont = (1 - xi) * (1 - yi)
            sp = z1 = z2 = zero
            for c in kids:
                p = m.cond(k, b, c) if exact else float(m.cond(k, b, c))
                cp, c1, c2 = memo[(k + 1, c)]
                sp += p * cp
                z1 += p * c1
                z2 += p * c2
            memo[(k, b)] = (s1 + s2 + s12 + cont * sp,
                            s1 * q[0] + s2 * q[2] + s12 * q[4] + cont * z1,
                            s1 * q[1] + s2 * q[3] + s12 * q[5] + cont * z2)
        return memo[key]

    return run


def _is_exact_inputs(m: FiltrationModel, *strats: AdaptedStrategy) -> bool:
    return m.exact and all(s.exact() for s in strats)


def game_payoff(m: FiltrationModel, r: PayoffProcess, x: AdaptedStrategy, y: AdaptedStrategy) -> tuple:
    """Expected payoff pair; no stop before the horizon contributes 0."""
    for s in (x, y):
        s.check(m)
        if not s.covers(m):
            raise ValueError("strategies must cover stages [0, horizon)")
    exact = _is_exact_inputs(m, x, y)
    run = _window(m, r, x, y, StoppingTime.constant(m, m.horizon), exact)
    g1 = g2 = Fraction(0) if exact else 0.0
    for a in m.atoms(0):
        p = m.atom_prob[0][a] if exact else float(m.atom_prob[0][a])
        _, r1, r2 = run(0, a)
        g1 += p * r1
        g2 += p * r2
    return g1, g2


def stop_probability(m: FiltrationModel, x: AdaptedStrategy, y: AdaptedStrategy,
                     t1: StoppingTime | None = None, t2: StoppingTime | None = None):
    """Unconditional P(t1 <= theta < t2) under (x, y)."""
    t1 = t1 or StoppingTime.constant(m, 0)
    t2 = t2 or StoppingTime.constant(m, m.horizon)
    stats = segment_stats(m, None, x, y, t1, t2)
    exact = _is_exact_inputs(m, x, y)
    total = Fraction(0) if exact else 0.0
    for (n, a), st in stats.items():
        total += (m.atom_prob[n][a] if exact else float(m.atom_prob[n][a])) * st.pi
    return total


_ZERO_PAYOFF = NodePayoff((0, 0), (0, 0), (0, 0))


class _ZeroProcess:
    def at(self, n, a):
        return _ZERO_PAYOFF


def segment_stats(m: FiltrationModel, r: PayoffProcess | None, x: AdaptedStrategy, y: AdaptedStrategy,
                  t1: StoppingTime, t2: StoppingTime) -> dict:
    """Per atom of the t1-stopped partition: RoundStats of play on [t1, t2)."""
    t1.check(m)
    t2.check(m)
    if not t1 <= t2:
        raise ValueError("segment needs t1 <= t2 pointwise")
    for s in (x, y):
        s.check(m)
    exact = _is_exact_inputs(m, x, y)
    run = _window(m, r if r is not None else _ZeroProcess(), x, y, t2, exact)
    out = {}
    for n, a in t1.start_atoms(m):
        pi, r1, r2 = run(n, a)
        out[(n, a)] = RoundStats(pi, (r1, r2), (ratio(r1, pi), ratio(r2, pi)))
    return out


# -- best-response dynamic programming ------------------------------------------------

@dataclass(frozen=True)
class DPResult:
    values: dict        # (n, a) -> value, for every atom visited
    root_values: dict   # (n, a) -> value on atoms of the t1-stopped partition
    strategy: AdaptedStrategy
    mean: Number        # unconditional expectation of the root values


def _continuation(cont, n: int, a: int, exact: bool):
    if callable(cont):
        v = cont(n, a)
    elif isinstance(cont, Mapping):
        v = cont[(n, a)]
    else:
        v = cont
    return _num(v, exact)


def best_response_dp(m: FiltrationModel, r: PayoffProcess, opponent: AdaptedStrategy, player: int,
                     t1: StoppingTime, t2: StoppingTime, continuation=0) -> DPResult:
    """Backward recursion for the best pure reply on [t1, t2).

    ``continuation`` is the value collected on atoms where t2 has been reached
    (a constant, a mapping keyed by ``(stage, atom)`` or a callable).  Ties are
    broken towards continuing.
    """
    if player not in (1, 2):
        raise ValueError("player must be 1 or 2")
    t1.check(m)
    t2.check(m)
    if not t1 <= t2:
        raise ValueError("window needs t1 <= t2 pointwise")
    opponent.check(m)
    exact = _is_exact_inputs(m, opponent) and (callable(continuation) or isinstance(continuation, Mapping)
                                                or is_exact([continuation]))
    # payoff indices: own solo stop, opponent solo stop, joint stop
    own, other, joint = (0, 2, 4) if player == 1 else (3, 1, 5)
    values, stops = {}, {}
    starts = t1.start_atoms(m)
    for n0, a0 in starts:
        stack = [(n0, a0, False)]
        while stack:
            k, b, expanded = stack.pop()
            if (k, b) in values:
                continue
            if k >= m.horizon or not t2.beyond(m, k, b):
                values[(k, b)] = _continuation(continuation, k, b, exact)
                continue
            kids = m.kids[k][b]
            if not expanded:
                stack.append((k, b, True))
                stack.extend((k + 1, c, False) for c in kids if (k + 1, c) not in values)
                continue
            o = _num(opponent.at(k, b), exact)
            q = r.at(k, b).values()
            q = tuple(as_fraction(v) for v in q) if exact else tuple(float(v) for v in q)
            cont = Fraction(0) if exact else 0.0
            for c in kids:
                p = m.cond(k, b, c) if exact else float(m.cond(k, b, c))
                cont += p * values[(k + 1, c)]
            go = o * q[other] + (1 - o) * cont
            stop = o * q[joint] + (1 - o) * q[own]
            if (exact and stop > go) or (not exact and stop > go + 1e-12):
                values[(k, b)] = stop
                stops[(k, b)] = 1
            else:
                values[(k, b)] = go
    roots = {key: values[key] for key in starts}
    mean = Fraction(0) if exact else 0.0
    for (n, a), v in roots.items():
        mean += (m.atom_prob[n][a] if exact else float(m.atom_prob[n][a])) * v
    return DPResult(values, roots, edit_strategy(m, None, stops), mean)


# -- delta approximation ------------------------------------------------------------

def _cell(vec: Sequence, delta) -> tuple:
    """Grid cell of a probability vector: side delta / (2 * len(vec)) per coordinate."""
    h = as_fraction(delta) / (2 * len(vec))
    return tuple(math.floor(as_fraction(p) / h) for p in vec)


def _cell_point(cell: Sequence, delta) -> tuple:
    """Cell center renormalized to the simplex; positive on every coordinate."""
    h = as_fraction(delta) / (2 * len(cell))
    center = [(i + Fraction(1, 2)) * h for i in cell]
    total = sum(center)
    return tuple(c / total for c in center)


@dataclass(frozen=True, eq=False)
class ApproximationPair:
    """Coarsened partitions of {n <= k <= t} and quantized kernels between them.

    ``atoms[k]`` lists the stage-k atoms (tuples of points, ordered
    lexicographically); ``kernels[(k, i)]`` maps child indices at k+1 to
    probabilities.  Atoms where t = k have empty kernels.
    """

    model: FiltrationModel
    start: int
    t: StoppingTime
    eps: Number
    atoms: dict
    kernels: dict
    within: tuple | None = None     # restriction to a set of points (None: all)

    def live(self, k: int) -> list:
        pts = range(self.model.n_points) if self.within is None else self.within
        return sorted(w for w in pts if self.start <= k <= self.t(w))

    def delta(self, k: int):
        return delta_at(self.eps, k)

    def atom_index(self, k: int) -> dict:
        return {w: i for i, atom in enumerate(self.atoms[k]) for w in atom}

    def to_dict(self) -> dict:
        return {
            "schema": "approximation_pair",
            "version": SCHEMA_VERSION,
            "start": self.start,
            "eps": str(self.eps),
            "t": list(self.t.values),
            "atoms": {str(k): [list(a) for a in v] for k, v in sorted(self.atoms.items())},
            "kernels": {f"{k}:{i}": {str(c): str(p) for c, p in sorted(q.items())}
                        for (k, i), q in sorted(self.kernels.items())},
        }


def _conditional_vector(m: FiltrationModel, k: int, w: int, index_next: Mapping) -> dict:
    """P(G' | F_k)(w) for the coarse atoms G' of stage k+1 (support only)."""
    a = m.labels[k][w]
    base = m.atom_prob[k][a]
    out = {}
    for v in m.partitions[k][a]:
        g = index_next.get(v)
        if g is not None:
            out[g] = out.get(g, 0) + m.prob[v]
    return {g: p / base for g, p in out.items()}


def delta_approximation(m: FiltrationModel, r: PayoffProcess, n: int, t: StoppingTime, eps,
                        within: Iterable[int] | None = None) -> ApproximationPair:
    """Quantized approximation of the game between stage n and stopping time t.

    Backward pass: points are grouped at stage k by (t == k, payoff at k) or
    by (t > k, payoff at k, support and grid cell of the conditional law over
    the stage k+1 groups).  Forward pass: the stage-m partition is the join of
    the groupings at stages n..m, restricted to {t >= m}; kernels are lifted
    from the group kernels.

    ``within`` restricts everything to a union of stage-n atoms; only the
    values of t on those points are read.  Groupings depend only on a point's
    own data, so the trees of the atoms inside are the same as without the
    restriction.
    """
    if not m.exact:
        raise ValueError("delta_approximation needs exact point weights")
    if within is None:
        t.check(m)
        pts = tuple(range(m.n_points))
    else:
        pts = tuple(sorted(within))
    if any(t(w) < n for w in pts):
        raise ValueError("stopping time must satisfy t >= n")
    top = max(t(w) for w in pts)
    coarse: dict = {}        # k -> list of atoms (tuples), lexicographic
    coarse_q: dict = {}      # (k, i) -> {child index: prob}
    for k in range(top, n - 1, -1):
        live = [w for w in pts if t(w) >= k]
        index_next = {}
        if k < top:
            for i, atom in enumerate(coarse[k + 1]):
                for w in atom:
                    index_next[w] = i
        groups: dict = {}
        kernel_of: dict = {}
        pay = lambda w: tuple(str(v) for v in r.point(m, k, w).values())  # noqa: E731
        for w in live:
            if t(w) == k:
                key = ("end", pay(w))
            else:
                vec = _conditional_vector(m, k, w, index_next)
                support = tuple(sorted(vec))
                cell = _cell([vec[g] for g in support], delta_at(eps, k))
                key = ("go", pay(w), support, cell)
                kernel_of[key] = dict(zip(support, _cell_point(cell, delta_at(eps, k))))
            groups.setdefault(key, []).append(w)
        atoms = sorted(tuple(sorted(g)) for g in groups.values())
        coarse[k] = atoms
        key_of_atom = {tuple(sorted(g)): key for key, g in groups.items()}
        for i, atom in enumerate(atoms):
            key = key_of_atom[atom]
            coarse_q[(k, i)] = kernel_of.get(key, {})
    atoms_out: dict = {}
    kernels_out: dict = {}
    current = [tuple(a) for a in coarse[n]]
    for k in range(n, top + 1):
        current = sorted(current)
        atoms_out[k] = current
        if k == top:
            for i in range(len(current)):
                kernels_out[(k, i)] = {}
            break
        coarse_idx = {w: i for i, a in enumerate(coarse[k]) for w in a}
        next_idx = {w: i for i, a in enumerate(coarse[k + 1]) for w in a}
        children = []
        parent_of = []
        for i, atom in enumerate(current):
            if t(atom[0]) == k:
                continue
            pieces: dict = {}
            for w in atom:
                pieces.setdefault(next_idx[w], []).append(w)
            for g, pts in pieces.items():
                children.append(tuple(sorted(pts)))
                parent_of.append((i, g))
        nxt = sorted(children)
        pos = {c: j for j, c in enumerate(nxt)}
        for i, atom in enumerate(current):
            kernels_out[(k, i)] = {}
        for child, (i, g) in zip(children, parent_of):
            gq = coarse_q[(k, coarse_idx[current[i][0]])]
            kernels_out[(k, i)][pos[child]] = gq[g]
        current = nxt
    return ApproximationPair(m, n, t, eps, atoms_out, kernels_out, None if within is None else pts)


def check_approximation(ap: ApproximationPair, r: PayoffProcess) -> list:
    """Every violated approximation condition; empty iff all hold."""
    m, t, n = ap.model, ap.t, ap.start
    report = []
    for k, atoms in sorted(ap.atoms.items()):
        live = ap.live(k)
        if sorted(w for a in atoms for w in a) != live:
            report.append(f"stage {k}: atoms do not partition {{{n} <= k <= t}}")
        lab = m.labels[k]
        for i, atom in enumerate(atoms):
            fine = {lab[w] for w in atom}
            if sum(len(m.partitions[k][f]) for f in fine) != len(atom):
                report.append(f"stage {k} atom {i}: not a union of model atoms")
            if len({r.point(m, k, w).values() for w in atom}) > 1:
                report.append(f"stage {k} atom {i}: payoff not constant")
            if len({t(w) == k for w in atom}) > 1:
                report.append(f"stage {k} atom {i}: splits {{t = {k}}}")
            q = ap.kernels[(k, i)]
            if t(atom[0]) == k:
                continue
            kids = ap.atoms.get(k + 1, [])
            inside = {j for j, c in enumerate(kids) if set(c) <= set(atom)}
            cover = sorted(w for j in inside for w in kids[j])
            if cover != sorted(atom):
                report.append(f"stage {k} atom {i}: not a union of stage {k + 1} atoms")
            if set(q) - inside or sum(q.values()) != 1 or any(p < 0 for p in q.values()):
                report.append(f"stage {k} atom {i}: kernel is not a distribution over its children")
            bound = ap.delta(k)
            for f in fine:
                base = m.atom_prob[k][f]
                total = 0
                for j in inside:
                    pj = sum((m.prob[w] for w in kids[j] if lab[w] == f), Fraction(0)) / base
                    total += abs(pj - q.get(j, 0))
                if not total < bound:
                    report.append(f"stage {k} atom {i}: kernel error {total} >= {bound}")
    return report


def kernel_errors(ap: ApproximationPair) -> list:
    """(stage, atom, model atom, l1 error, bound) for every kernel row."""
    m = ap.model
    out = []
    for k, atoms in sorted(ap.atoms.items()):
        if k + 1 not in ap.atoms:
            continue
        lab = m.labels[k]
        kids = ap.atoms[k + 1]
        for i, atom in enumerate(atoms):
            q = ap.kernels[(k, i)]
            if not q:
                continue
            for f in sorted({lab[w] for w in atom}):
                base = m.atom_prob[k][f]
                total = Fraction(0)
                for j in q:
                    pj = sum((m.prob[w] for w in kids[j] if lab[w] == f), Fraction(0)) / base
                    total += abs(pj - q[j])
                out.append((k, i, f, total, ap.delta(k)))
    return out


# -- trees from an approximation ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExtractedTree:
    """A game on a tree together with the approximation atom behind each node."""

    tree: GameTree
    node_atoms: dict    # node id -> (stage, atom index in the approximation)
    root_atom: tuple

    def lift(self, ap: ApproximationPair, prof: StationaryProfile, updates: tuple | None = None) -> tuple:
        """Write a tree profile into per-(stage, model atom) stop tables."""
        u1, u2 = updates if updates is not None else ({}, {})
        m = ap.model
        for node, (k, i) in self.node_atoms.items():
            if node not in self.tree.children or not self.tree.children[node]:
                continue
            fine = {m.labels[k][w] for w in ap.atoms[k][i]}
            for f in fine:
                u1[(k, f)] = prof.p1(node)
                u2[(k, f)] = prof.p2(node)
        return u1, u2


def extract_trees(ap: ApproximationPair, r: PayoffProcess) -> dict:
    """One game on a tree per stage-n atom of the approximation.

    Node ids are assigned in a canonical order (children sorted by subtree
    signature), so equal data give equal trees and equal digests.
    """
    n = ap.start
    out = {}
    sig_memo: dict = {}

    def leaf(k, i):
        return not ap.kernels.get((k, i))

    def signature(k, i):
        key = (k, i)
        if key in sig_memo:
            return sig_memo[key]
        if leaf(k, i):
            s = "L"
        else:
            w = ap.atoms[k][i][0]
            pay = ",".join(str(v) for v in r.point(ap.model, k, w).values())
            kids = sorted(f"{signature(k + 1, j)}@{p}" for j, p in ap.kernels[(k, i)].items())
            s = f"N[{pay}|{';'.join(kids)}]"
        sig_memo[key] = s
        return s

    for i0 in range(len(ap.atoms[n])):
        children, transition, payoff, node_atoms = {}, {}, {}, {}
        counter = itertools.count()
        root = next(counter)
        node_atoms[root] = (n, i0)
        stack = [(root, n, i0)]
        while stack:
            node, k, i = stack.pop()
            if leaf(k, i):
                continue
            w = ap.atoms[k][i][0]
            payoff[node] = r.point(ap.model, k, w)
            kids = sorted(ap.kernels[(k, i)].items(), key=lambda e: (signature(k + 1, e[0]), str(e[1])))
            ids = []
            for j, p in kids:
                c = next(counter)
                node_atoms[c] = (k + 1, j)
                ids.append(c)
            children[node] = tuple(ids)
            transition[node] = tuple(p for _, p in kids)
            for c, (j, _) in reversed(list(zip(ids, kids))):
                stack.append((c, k + 1, j))
        tree = GameTree(root, children, transition, payoff, r.k, r.bound)
        out[i0] = ExtractedTree(tree, node_atoms, (n, i0))
    return _renumber(out)


def _renumber(trees: dict) -> dict:
    """Relabel nodes in preorder so ids do not depend on construction order."""
    out = {}
    for key, et in trees.items():
        t = et.tree
        new = {s: i for i, s in enumerate(t.order)}
        tree = GameTree(0, {new[s]: tuple(new[c] for c in kids) for s, kids in t.children.items()},
                        {new[s]: v for s, v in t.transition.items()},
                        {new[s]: v for s, v in t.payoff.items()}, t.k, t.bound)
        out[key] = ExtractedTree(tree, {new[s]: v for s, v in et.node_atoms.items()}, et.root_atom)
    return out


def trees_for_start(m: FiltrationModel, r: PayoffProcess, n: int, t: StoppingTime, eps,
                    within: Iterable[int] | None = None) -> tuple:
    """(approximation, trees keyed by approximation root index, model atom -> root index)."""
    ap = delta_approximation(m, r, n, t, eps, within)
    trees = extract_trees(ap, r)
    where = {}
    for i, atom in enumerate(ap.atoms[n]):
        for w in atom:
            where[m.labels[n][w]] = i
    return ap, trees, where


# -- full-game audit -----------------------------------------------------------------

@dataclass(frozen=True)
class GameCertificate:
    """Deviation gains of both players over the whole game, from exact best replies."""

    eps: Number
    factor: Number
    payoff: tuple
    br_values: tuple
    gains: tuple
    verdict: bool

    @property
    def achieved_factor(self) -> float:
        """Largest gain measured in units of eps."""
        return max(0.0, max(float(g) for g in self.gains)) / float(self.eps)

    def to_dict(self) -> dict:
        return {
            "eps": str(self.eps),
            "factor": str(self.factor),
            "payoff": [str(v) for v in self.payoff],
            "br_values": [str(v) for v in self.br_values],
            "gains": [str(v) for v in self.gains],
            "achieved_factor": round(self.achieved_factor, 6),
            "verdict": self.verdict,
        }


def audit_profile(m: FiltrationModel, r: PayoffProcess, x: AdaptedStrategy, y: AdaptedStrategy,
                  eps, factor=1) -> GameCertificate:
    """Certify (x, y) as a (factor * eps)-equilibrium of the whole finite game."""
    g = game_payoff(m, r, x, y)
    t0, tH = StoppingTime.constant(m, 0), StoppingTime.constant(m, m.horizon)
    v1 = best_response_dp(m, r, y, 1, t0, tH).mean
    v2 = best_response_dp(m, r, x, 2, t0, tH).mean
    gains = (v1 - g[0], v2 - g[1])
    bound = as_fraction(factor) * as_fraction(eps)
    verdict = all(leq(gn, bound, TOL) for gn in gains)
    return GameCertificate(eps, factor, g, (v1, v2), gains, verdict)


# -- segment schedules and their concatenation ---------------------------------------------

@dataclass(frozen=True)
class SegmentSchedule:
    """Increasing stopping times and one profile per segment [times[k], times[k+1])."""

    times: tuple
    profiles: tuple     # ((x_k, y_k), ...) with len(times) - 1 entries

    def validate(self, m: FiltrationModel) -> None:
        if len(self.profiles) != len(self.times) - 1:
            raise ValueError("need one profile per segment")
        for t in self.times:
            t.check(m)
        for s, t in zip(self.times, self.times[1:]):
            if not all(a < b for a, b in zip(s.values, t.values)):
                raise ValueError("schedule times must be strictly increasing")
        for x, y in self.profiles:
            x.check(m)
            y.check(m)

    @property
    def segments(self) -> int:
        return len(self.profiles)

    def segment_of(self, m: FiltrationModel, n: int, a: int) -> int:
        """-1 before times[0], k on segment k, ``segments`` from the last time on."""
        w = m.rep(n, a)
        k = -1
        for t in self.times:
            if t(w) <= n:
                k += 1
            else:
                break
        return k

    def concatenated(self, m: FiltrationModel, upto: int | None = None) -> tuple:
        """(x, y) playing profile k on segment k and never stopping elsewhere.

        ``upto`` (a segment count) cuts the concatenation at times[upto].
        """
        last = self.segments if upto is None else upto
        u1, u2 = {}, {}
        for n in range(m.horizon):
            for a in m.atoms(n):
                k = self.segment_of(m, n, a)
                if 0 <= k < last:
                    x, y = self.profiles[k]
                    u1[(n, a)] = x.at(n, a)
                    u2[(n, a)] = y.at(n, a)
        return edit_strategy(m, None, u1), edit_strategy(m, None, u2)


def shifted_payoff(r: PayoffProcess, c1, c2, m: FiltrationModel | None = None) -> PayoffProcess:
    """Every payoff of player i lowered by c_i.

    With a model, c1 and c2 may be per-point sequences that are read at each
    atom's first point.
    """
    def at(c, n, a):
        if m is None or not isinstance(c, (list, tuple)):
            return c
        return c[m.rep(n, a)]

    vals = []
    for n, stage in enumerate(r.values):
        row = []
        for a, p in enumerate(stage):
            d1, d2 = at(c1, n, a), at(c2, n, a)
            row.append(NodePayoff((p.p1_stop[0] - d1, p.p1_stop[1] - d2), (p.p2_stop[0] - d1, p.p2_stop[1] - d2),
                                  (p.both_stop[0] - d1, p.both_stop[1] - d2)))
        vals.append(tuple(row))
    return PayoffProcess(tuple(vals), r.k, r.bound + 2)


@dataclass(frozen=True)
class ConditionResult:
    ok: bool
    worst_margin: Number            # smallest slack over all checks (negative on failure)
    failures: tuple = ()            # (segment, stage, atom, margin) or free-text entries
    vacuous: bool = False

    def to_dict(self) -> dict:
        return {"ok": self.ok, "worst_margin": str(self.worst_margin), "vacuous": self.vacuous,
                "failures": [list(map(str, f)) if isinstance(f, tuple) else str(f) for f in self.failures]}


@dataclass(frozen=True)
class SegmentReport:
    conditions: dict    # name -> ConditionResult
    L: int
    eps: Number
    a: tuple            # target payoff pair per point

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.conditions.values())

    def to_dict(self) -> dict:
        targets = sorted({(str(a1), str(a2)) for a1, a2 in self.a})
        return {"ok": self.ok, "L": self.L, "eps": str(self.eps), "a": [list(t) for t in targets],
                "conditions": {k: v.to_dict() for k, v in self.conditions.items()}}


CONDITION_NAMES = ("payoff_floor", "p1_deviation_ceiling", "p2_deviation_ceiling",
                   "termination_by_L", "p1_punished_by_L", "p2_punished_by_L")


class SegmentConditionError(ValueError):
    def __init__(self, report: SegmentReport):
        failed = [k for k, v in report.conditions.items() if not v.ok]
        super().__init__(f"segment conditions failed: {', '.join(failed)}")
        self.report = report


def _tally(margins: list) -> ConditionResult:
    if not margins:
        return ConditionResult(True, 0)
    worst = min(m for *_, m in margins)
    fails = tuple(f for f in margins if f[-1] < -TOL)
    return ConditionResult(not fails, worst, fails)


def per_point_target(m: FiltrationModel, a) -> tuple:
    """A payoff pair, or one pair per point, as a tuple of exact pairs per point."""
    if len(a) == 2 and not isinstance(a[0], (list, tuple)):
        pair = (as_fraction(a[0]), as_fraction(a[1]))
        return tuple(pair for _ in range(m.n_points))
    if len(a) != m.n_points:
        raise ValueError("need a payoff pair or one pair per point")
    return tuple((as_fraction(p[0]), as_fraction(p[1])) for p in a)


def _conditional_stop(m: FiltrationModel, x, y, t1: StoppingTime, t2: StoppingTime, points: set):
    """P(t1 <= theta < t2 | points) for a union of atoms of the t1-stopped partition."""
    if not points:
        return 1
    stats = segment_stats(m, None, x, y, t1, t2)
    num = den = 0
    for (n, b), st in stats.items():
        if m.rep(n, b) in points:
            p = m.atom_prob[n][b]
            num += p * st.pi
            den += p
    return num / den


def check_segment_conditions(m: FiltrationModel, r: PayoffProcess, sched: SegmentSchedule, a, eps,
                             rbar: Sequence, L: int | None = None) -> SegmentReport:
    """Check the per-segment conditions under which concatenation yields an equilibrium.

    ``a`` is a target payoff pair, or one pair per point that is constant on
    the atoms where the schedule starts.  Per segment k and atom where it
    starts, with Delta = eps^2 / 2^(n+1):
      payoff_floor             rho^i >= (a_i - eps) pi - Delta                (exact)
      p1/p2_deviation_ceiling  sup over deviations of rho - (a_i + eps) pi <= Delta   (by DP)
    and, for the cut at times[L]:
      termination_by_L         P(stop before times[L]) >= 1 - eps
      p1_punished_by_L         P(stop before times[L] | player 1 never stops) >= 1 - eps
                               on the points where a_1 < rbar_1 - eps
      p2_punished_by_L         mirror image.
    ``L=None`` picks the smallest L meeting the last three.
    """
    sched.validate(m)
    targets = per_point_target(m, a)
    e = as_fraction(eps)
    t0 = sched.times[0]
    for n, b in t0.start_atoms(m):
        if len({targets[w] for w in m.partitions[n][b]}) > 1:
            raise ValueError("targets must be constant on the atoms where the schedule starts")
    c1 = [t[0] + e for t in targets]
    c2 = [t[1] + e for t in targets]
    r1, r2 = shifted_payoff(r, c1, 0, m), shifted_payoff(r, 0, c2, m)
    floor, dev1, dev2 = [], [], []
    for k, (x, y) in enumerate(sched.profiles):
        t1, t2 = sched.times[k], sched.times[k + 1]
        stats = segment_stats(m, r, x, y, t1, t2)
        br1 = best_response_dp(m, r1, y, 1, t1, t2)
        br2 = best_response_dp(m, r2, x, 2, t1, t2)
        for (n, b), st in stats.items():
            delta = big_delta_at(e, n)
            tw = targets[m.rep(n, b)]
            for i in (0, 1):
                floor.append((k, n, b, st.rho[i] - (tw[i] - e) * st.pi + delta))
            dev1.append((k, n, b, delta - br1.root_values[(n, b)]))
            dev2.append((k, n, b, delta - br2.root_values[(n, b)]))
    x_all, y_all = sched.concatenated(m)
    never = AdaptedStrategy.never(m)
    rb = (as_fraction(rbar[0]), as_fraction(rbar[1]))
    need1 = {w for w, t in enumerate(targets) if t[0] < rb[0] - e}
    need2 = {w for w, t in enumerate(targets) if t[1] < rb[1] - e}
    everyone = set(range(m.n_points))

    def cut_probs(j):
        t_end = sched.times[j]
        return [_conditional_stop(m, x_all, y_all, t0, t_end, everyone),
                _conditional_stop(m, never, y_all, t0, t_end, need1),
                _conditional_stop(m, x_all, never, t0, t_end, need2)]

    target = 1 - e
    if L is None:
        L = sched.segments
        for j in range(1, sched.segments + 1):
            if all(p >= target - TOL for p in cut_probs(j)):
                L = j
                break
    probs = cut_probs(L)
    conds = {
        "payoff_floor": _tally(floor),
        "p1_deviation_ceiling": _tally(dev1),
        "p2_deviation_ceiling": _tally(dev2),
        "termination_by_L": _tally([("L", L, "-", probs[0] - target)]),
        "p1_punished_by_L": (_tally([("L", L, "-", probs[1] - target)]) if need1
                             else ConditionResult(True, 0, (), True)),
        "p2_punished_by_L": (_tally([("L", L, "-", probs[2] - target)]) if need2
                             else ConditionResult(True, 0, (), True)),
    }
    return SegmentReport(conds, L, e, targets)


def concat_equilibrium(m: FiltrationModel, r: PayoffProcess, sched: SegmentSchedule, a, eps,
                       rbar: Sequence, L: int | None = None) -> tuple:
    """Concatenate the segment profiles and add the late punishment threats.

    Up to times[L] both players follow the schedule.  Where a_1 >= rbar_1 - eps,
    player 2 then stops with probability eps at every stage where its own
    solo-stop payoff equals rbar_2 (and symmetrically for player 1);
    elsewhere the schedule simply continues.  Returns
    (x*, y*, certificate with factor 8, segment report).
    """
    report = check_segment_conditions(m, r, sched, a, eps, rbar, L)
    if not report.ok:
        raise SegmentConditionError(report)
    L = report.L
    e = as_fraction(eps)
    rb1, rb2 = (as_fraction(v) for v in rbar)
    x_all, y_all = sched.concatenated(m)
    end = sched.times[L]
    ux, uy = {}, {}
    for n in range(m.horizon):
        for b in m.atoms(n):
            w = m.rep(n, b)
            if end(w) > n:
                continue
            a1, a2 = report.a[w]
            pay = r.at(n, b)
            if a2 >= rb2 - e:
                ux[(n, b)] = e if as_fraction(pay.p1_stop[0]) == rb1 else 0
            if a1 >= rb1 - e:
                uy[(n, b)] = e if as_fraction(pay.p2_stop[1]) == rb2 else 0
    x_star = edit_strategy(m, x_all, ux) if ux else x_all
    y_star = edit_strategy(m, y_all, uy) if uy else y_all
    cert = audit_profile(m, r, x_star, y_star, e, 8)
    return x_star, y_star, cert, report


# -- classification -------------------------------------------------------------------

CASES = ("never-stop", "solo-generous", "threat", "bad-rectangle", "good-rectangle")


@dataclass(frozen=True)
class PointLabel:
    kind: str           # "minus", "one", "two" or "three"
    r: tuple            # tail maxima (rbar_1, rbar_2)
    generous: tuple     # (player 1's solo stops can give player 2 rbar_2, mirror)

    @property
    def case(self) -> tuple:
        """(case name, side) for the closed-form cases; ("generic", None) otherwise."""
        r1, r2 = self.r
        if self.kind == "minus":
            return "never-stop", None
        g1, g2 = self.generous
        if g1 and r1 >= 0:
            return "solo-generous", 1
        if g2 and r2 >= 0:
            return "solo-generous", 2
        if g1:
            return "threat", 1
        if g2:
            return "threat", 2
        return "generic", None


@dataclass(frozen=True)
class Classification:
    labels: tuple       # per point
    fragile: tuple      # per point: some tail maximum attained fewer than min_occurrences times
    window: tuple
    tau0: StoppingTime  # first stage from the window start at which the label is known
    min_occurrences: int
    modified_measure: Number = 0

    def to_dict(self) -> dict:
        return {
            "window": list(self.window),
            "min_occurrences": self.min_occurrences,
            "modified_measure": str(self.modified_measure),
            "tau0": list(self.tau0.values),
            "points": [{"kind": lb.kind, "r": [str(v) for v in lb.r], "case": lb.case[0], "side": lb.case[1],
                        "fragile": fr} for lb, fr in zip(self.labels, self.fragile)],
        }


def classify(m: FiltrationModel, r: PayoffProcess, tail_window: Sequence | None = None,
             min_occurrences: int = 3) -> Classification:
    """Label every point by its tail maxima of the solo-stop payoffs.

    rbar_i is the maximum of player i's solo-stop payoff over the window;
    player 1's stops are generous when, at stages attaining rbar_1, player 2
    gets at least rbar_2 (and symmetrically).  Labels are made measurable by
    waiting: tau0 is the first stage, not before the window start, at which
    the label is constant on the current atom, so no payoff is modified.
    """
    lo, hi = tail_window if tail_window is not None else (0, m.horizon)
    if not 0 <= lo < hi <= m.horizon:
        raise ValueError("tail window must be a nonempty range inside [0, horizon)")
    labels, fragile = [], []
    for w in range(m.n_points):
        pays = [r.point(m, n, w) for n in range(lo, hi)]
        s1 = [as_fraction(p.p1_stop[0]) for p in pays]
        s2 = [as_fraction(p.p2_stop[1]) for p in pays]
        r1, r2 = max(s1), max(s2)
        occ1 = [i for i, v in enumerate(s1) if v == r1]
        occ2 = [i for i, v in enumerate(s2) if v == r2]
        fragile.append(min(len(occ1), len(occ2)) < min_occurrences)
        if r1 <= 0 and r2 <= 0:
            labels.append(PointLabel("minus", (r1, r2), (False, False)))
            continue
        g1 = max(as_fraction(pays[i].p1_stop[1]) for i in occ1) >= r2
        g2 = max(as_fraction(pays[i].p2_stop[0]) for i in occ2) >= r1
        kind = "one" if g1 else "two" if g2 else "three"
        labels.append(PointLabel(kind, (r1, r2), (g1, g2)))
    tau0 = []
    for w in range(m.n_points):
        n = lo
        while n < m.horizon and len({labels[v] for v in m.partitions[n][m.labels[n][w]]}) > 1:
            n += 1
        tau0.append(n)
    return Classification(tuple(labels), tuple(fragile), (lo, hi), StoppingTime(tuple(tau0)), min_occurrences)


# -- the finite-stage game before the handoff ---------------------------------------------

def stage_game_equilibrium(cont: Sequence, pay: NodePayoff) -> tuple:
    """Equilibrium (x, y, value) of the one-stage game continue/stop with continuation ``cont``.

    Pure profiles are tried in the order (C, C), (S, C), (C, S), (S, S), ties
    favoring continuing; otherwise the mixed equilibrium is returned.
    """
    v1, v2 = cont
    q = pay.values()
    r11, r21, r12, r22, b1, b2 = q   # solo 1 (p1, p2), solo 2 (p1, p2), both (p1, p2)
    if v1 >= r11 and v2 >= r22:
        return 0, 0, (v1, v2)
    if r11 >= v1 and r21 >= b2:
        return 1, 0, (r11, r21)
    if r22 >= v2 and r12 >= b1:
        return 0, 1, (r12, r22)
    if b1 >= r12 and b2 >= r21:
        return 1, 1, (b1, b2)
    x = (v2 - r22) / ((v2 - r22) + (b2 - r21))
    y = (v1 - r11) / ((v1 - r11) + (b1 - r12))
    val = tuple((1 - x) * (1 - y) * cv + x * (1 - y) * s1 + (1 - x) * y * s2 + x * y * sb
                for cv, s1, s2, sb in ((v1, r11, r12, b1), (v2, r21, r22, b2)))
    return x, y, val


def solve_prefix(m: FiltrationModel, r: PayoffProcess, handoff: StoppingTime, terminal) -> tuple:
    """Backward induction on the atoms strictly before ``handoff``.

    ``terminal(n, a)`` is the continuation payoff pair where the handoff is
    reached.  Returns (updates for x, updates for y, values by atom); the
    result is an exact equilibrium of the game that ends at the handoff.
    """
    exact = m.exact
    values: dict = {}
    ux, uy = {}, {}
    for n in range(m.horizon, -1, -1):
        for a in m.atoms(n):
            w = m.rep(n, a)
            if handoff(w) <= n:
                values[(n, a)] = tuple(_num(v, exact) for v in terminal(n, a))
                continue
            cont = [0, 0]
            for c in m.kids[n][a]:
                p = m.cond(n, a, c) if exact else float(m.cond(n, a, c))
                cv = values[(n + 1, c)]
                cont[0] += p * cv[0]
                cont[1] += p * cv[1]
            pay = r.at(n, a)
            if exact:
                pay = NodePayoff.from_values([as_fraction(v) for v in pay.values()])
            x, y, val = stage_game_equilibrium(cont, pay)
            ux[(n, a)], uy[(n, a)] = x, y
            values[(n, a)] = val
    return ux, uy, values


# -- restriction to an atom ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Restriction:
    """A game restricted to atom (n0, b) and re-indexed to start at stage 0."""

    model: FiltrationModel
    payoff: PayoffProcess
    n0: int
    points: tuple       # sub point i -> original point

    def to_original(self, m: FiltrationModel, j: int, c: int) -> AtomKey:
        w = self.points[self.model.rep(j, c)]
        return self.n0 + j, m.labels[self.n0 + j][w]


def restrict(m: FiltrationModel, r: PayoffProcess, n0: int, b: int) -> Restriction:
    pts = m.partitions[n0][b]
    idx = {w: i for i, w in enumerate(pts)}
    mass = m.atom_prob[n0][b]
    prob = tuple(m.prob[w] / mass for w in pts)
    parts = []
    for n in range(n0, m.horizon + 1):
        parts.append(tuple(tuple(idx[w] for w in atom) for atom in m.partitions[n] if atom[0] in idx))
    sm = FiltrationModel(prob, tuple(parts))
    vals = tuple(tuple(r.point(m, n0 + j, pts[sm.rep(j, c)]) for c in sm.atoms(j)) for j in range(sm.horizon + 1))
    return Restriction(sm, PayoffProcess(vals, r.k, r.bound), n0, tuple(pts))


# -- synthesis ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthesisResult:
    x: AdaptedStrategy
    y: AdaptedStrategy
    certificate: GameCertificate
    trace: tuple            # one dict per atom where the tail phase starts
    failures: tuple         # search failures (the fallback was used)
    warnings: tuple
    classification: Classification

    @property
    def cases(self) -> list:
        return sorted({t["case"] for t in self.trace})

    def to_dict(self) -> dict:
        return {
            "schema": "synthesis_result",
            "version": SCHEMA_VERSION,
            "x": self.x.to_dict(),
            "y": self.y.to_dict(),
            "certificate": self.certificate.to_dict(),
            "trace": [_jsonable(t) for t in self.trace],
            "failures": list(self.failures),
            "warnings": list(self.warnings),
            "classification": self.classification.to_dict(),
        }


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, int, str)) or v is None:
        return v
    return str(v)


def _forward_stop_mass(m: FiltrationModel, n0: int, b: int, x: Mapping, upto: int) -> list:
    """P(a lone stopper with stop probabilities x has stopped before stage k | atom), k = n0..upto."""
    mass = {b: Fraction(1) if m.exact else 1.0}
    out = [0]
    stopped = 0
    for k in range(n0, upto):
        nxt: dict = {}
        for a, p in mass.items():
            s = x.get((k, a), 0)
            stopped += p * s
            for c in m.kids[k][a]:
                q = m.cond(k, a, c) if m.exact else float(m.cond(k, a, c))
                nxt[c] = nxt.get(c, 0) + p * (1 - s) * q
        mass = nxt
        out.append(stopped)
    return out


def _inside(m: FiltrationModel, n0: int, b: int):
    pts = set(m.partitions[n0][b])
    for k in range(n0, m.horizon):
        for c in m.atoms(k):
            if m.partitions[k][c][0] in pts:
                yield k, c


def _closed_form(m, r, n0, b, label: PointLabel, e, ux, uy) -> dict:
    """Write the closed-form tail profile on atom (n0, b); return trace details."""
    case, side = label.case
    if case == "never-stop":
        return {}
    r1, r2 = label.r
    # the generous player i stops with probability eps where its solo stop gives
    # itself rbar_i and the opponent at least rbar_j
    own_all, gets, mine, yours = ((ux, uy, 0, 1) if side == 1 else (uy, ux, 1, 0))
    own: dict = {}
    rbar = (r1, r2)
    for k, c in _inside(m, n0, b):
        pay = r.at(k, c)
        solo = pay.p1_stop if side == 1 else pay.p2_stop
        if as_fraction(solo[mine]) == rbar[mine] and as_fraction(solo[yours]) >= rbar[yours]:
            own[(k, c)] = e
    own_all.update(own)
    if case == "solo-generous":
        return {"qualifying_atoms": len(own)}
    curve = _forward_stop_mass(m, n0, b, own, m.horizon)
    N = next((n0 + i for i, p in enumerate(curve) if p >= 1 - e), None)
    details = {"N": N, "stopped_before_N": curve[N - n0] if N is not None else curve[-1]}
    if N is None:
        details["horizon_limited"] = True
        return details
    # the other player punishes after N wherever the generous player's
    # payoff from being stopped on is below its tail maximum
    for k, c in _inside(m, n0, b):
        if k <= N:
            continue
        pay = r.at(k, c)
        other = pay.p2_stop if side == 1 else pay.p1_stop
        if as_fraction(other[mine]) < rbar[mine]:
            gets[(k, c)] = e
    punish = _forward_stop_mass(m, n0, b, gets, m.horizon)[-1]
    details["punishment_prob"] = punish
    return details


def _generic_case(m, r, n0, b, label: PointLabel, e, seg_len: int, bad_threshold, search: dict) -> tuple:
    """Coloring, chain and concatenation on atom (n0, b).

    Returns (updates x, updates y, handoff offset, trace details); raises
    SynthesisSearchError when a search step fails.
    """
    from .stochastic_ramsey import TreeColoring, ramsey_chain
    from .tree_equilibrium import build_covering

    rs = restrict(m, r, n0, b)
    sm, sr = rs.model, rs.payoff
    if sr.bound != 1:
        raise SynthesisSearchError("coloring needs payoffs in [-1, 1]")
    cov = build_covering(label.r, e)
    col = TreeColoring(sm, sr, cov, e, max_gap=seg_len, **search)
    links = sm.horizon // seg_len
    if links < 1:
        raise SynthesisSearchError("horizon too short for one segment")
    chain = ramsey_chain(sm, col, e, links=links, colors=col.observed_colors(sm), all_pairs=False)
    times = chain.times
    details = {"segments": links, "chain_mono_prob": chain.mono_prob, "colors": len(col.colors)}
    segs = []
    for k in range(links):
        segs.append({key: col.analyse(sm, key[0], key[1], times[k + 1])
                     for key in times[k].start_atoms(sm) if key[0] < sm.horizon})
    # per point: leak mass of every bad rectangle summed over the schedule,
    # and the color of every segment
    J = len(cov.bad)
    sums = [[0.0] * J for _ in range(sm.n_points)]
    leak = [[0.0] * links for _ in range(sm.n_points)]
    seq = [[None] * links for _ in range(sm.n_points)]
    for k, per_atom in enumerate(segs):
        for (n, a), (_, _, res) in per_atom.items():
            for w in sm.partitions[n][a]:
                for j, lam in enumerate(res.lambdas):
                    sums[w][j] += float(lam)
                leak[w][k] = sum(float(lam) for lam in res.lambdas)
                seq[w][k] = res.color if res.status == "colored" else res.status
    bad_of = []
    for w in range(sm.n_points):
        j = max(range(J), key=lambda i: sums[w][i]) if J else None
        bad_of.append(j if j is not None and sums[w][j] >= bad_threshold else None)

    def labels_from(k0):
        out = []
        for w in range(sm.n_points):
            if bad_of[w] is not None:
                out.append(("bad", bad_of[w]))
                continue
            tail = seq[w][k0:]
            if len(set(tail)) != 1 or not isinstance(tail[0], int) or sum(leak[w][k0:]) > float(e):
                return None
            out.append(("good", tail[0]))
        for n, a in times[k0].start_atoms(sm):
            if len({out[w] for w in sm.partitions[n][a]}) > 1:
                return None
        return out

    k0 = 0
    while k0 < links and labels_from(k0) is None:
        k0 += 1
    if k0 >= links:
        seen = sorted({str(c) for row in seq for c in row})
        raise SynthesisSearchError(f"no schedule suffix is monochromatic in good rectangles: {seen}")
    lab = labels_from(k0)
    rect_of = [cov.bad[j] if kind == "bad" else cov.good[j] for kind, j in lab]
    kinds = sorted({"bad-rectangle" if kind == "bad" else "good-rectangle" for kind, _ in lab})
    case = kinds[0] if len(kinds) == 1 else "+".join(kinds)
    details.update(rectangles=sorted({(g.a1, g.a2) for g in rect_of}), dropped_prefix=k0,
                   lambda_sum=max((max(row) for row in sums), default=0.0))
    profiles = []
    for per_atom in segs[k0:]:
        u1, u2 = {}, {}
        for (n, a), (ap, et, res) in per_atom.items():
            kind, j = lab[sm.rep(n, a)]
            prof = res.per_j_profiles[j] if kind == "bad" else res.final_profile
            if prof is not None:
                et.lift(ap, prof, (u1, u2))
        profiles.append((edit_strategy(sm, None, u1), edit_strategy(sm, None, u2)))
    sched = SegmentSchedule(tuple(times[k0:]), tuple(profiles))
    try:
        xs, ys, cert, report = concat_equilibrium(sm, sr, sched, [(g.a1, g.a2) for g in rect_of], 2 * e, label.r)
    except SegmentConditionError as exc:
        raise SynthesisSearchError(str(exc), exc.report.to_dict()) from exc
    details.update(case=case, concat_gains=list(cert.gains), L=report.L)
    ux, uy = {}, {}
    for j in range(sm.horizon):
        for c in sm.atoms(j):
            key = rs.to_original(m, j, c)
            ux[key], uy[key] = xs.at(j, c), ys.at(j, c)
    offset = times[k0]
    handoff = {rs.points[i]: n0 + offset(i) for i in range(sm.n_points)}
    return ux, uy, handoff, details


class SynthesisSearchError(RuntimeError):
    def __init__(self, msg: str, report: dict | None = None):
        super().__init__(msg)
        self.report = report


def synthesize(m: FiltrationModel, r: PayoffProcess, eps, *, tail_window: Sequence | None = None,
               min_occurrences: int = 3, segment_length: int = 1, bad_threshold=1,
               search: dict | None = None) -> SynthesisResult:
    """Build an approximate equilibrium of the finite game and audit it.

    The tail phase starts at tau0 from ``classify``; on each of its atoms a
    closed-form profile (never stop, generous solo stops, solo stops with a
    punishment threat) or the coloring/chain/concatenation pipeline is used.
    Before the handoff the game is solved by backward induction with the tail
    payoffs as terminal values.  A failed pipeline search falls back to
    backward induction on that atom and is listed in ``failures``.
    """
    e = as_fraction(eps)
    search = dict(search or {})
    cls = classify(m, r, tail_window, min_occurrences)
    warnings = []
    if not e < Fraction(1, 36 * r.k ** 2):
        warnings.append(f"eps = {e} is not below 1/(36 K^2) = {Fraction(1, 36 * r.k ** 2)}")
    if any(cls.fragile):
        warnings.append("some tail maximum is attained fewer than min_occurrences times")
    ux, uy = {}, {}
    handoff = list(cls.tau0.values)
    trace, failures = [], []
    for n0, b in cls.tau0.start_atoms(m):
        w0 = m.rep(n0, b)
        label = cls.labels[w0]
        case, side = label.case
        entry = {"atom": [n0, b], "kind": label.kind, "r": list(label.r), "side": side,
                 "fragile": cls.fragile[w0]}
        if n0 >= m.horizon:
            entry["case"] = case if case != "generic" else "generic"
            entry["note"] = "label only known at the horizon"
            trace.append(entry)
            continue
        if case != "generic":
            entry["case"] = case
            entry.update(_closed_form(m, r, n0, b, label, e, ux, uy))
            if entry.get("horizon_limited"):
                failures.append(f"atom {n0}:{b}: threat horizon-limited")
            trace.append(entry)
            continue
        try:
            gx, gy, hand, details = _generic_case(m, r, n0, b, label, e, segment_length, bad_threshold, search)
            ux.update(gx)
            uy.update(gy)
            for w, v in hand.items():
                handoff[w] = v
            entry.update(details)
        except SynthesisSearchError as exc:
            entry["case"] = "generic"
            entry["fallback"] = "backward induction"
            entry["failure"] = str(exc)
            failures.append(f"atom {n0}:{b}: {exc}")
            for w in m.partitions[n0][b]:
                handoff[w] = m.horizon
        trace.append(entry)
    hand = StoppingTime(tuple(handoff))
    hand.check(m)
    x_tail, y_tail = edit_strategy(m, None, ux), edit_strategy(m, None, uy)
    run = _window(m, r, x_tail, y_tail, StoppingTime.constant(m, m.horizon), _is_exact_inputs(m, x_tail, y_tail))
    px, py, _ = solve_prefix(m, r, hand, lambda n, a: run(n, a)[1:])
    x = edit_strategy(m, x_tail, px)
    y = edit_strategy(m, y_tail, py)
    cert = audit_profile(m, r, x, y, e, 24)
    return SynthesisResult(x, y, cert, tuple(trace), tuple(failures), tuple(warnings), cls)
