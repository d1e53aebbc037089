"""Stopping games on finite trees.

A game on a tree is played in rounds.  Each round starts at the root; at every
internal node both players simultaneously decide whether to stop.  If somebody
stops the game ends with the payoff attached to the node and the set of
stoppers, otherwise a child is drawn from the node's transition law.  Reaching
a leaf restarts play at the root.

Everything here is a pure function of immutable inputs.  Numbers may be
``Fraction`` (exact mode) or ``float``; the exact path is taken whenever all
inputs are rational.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Any, Hashable, Iterable, Mapping, Sequence

Node = Hashable
Number = Any  # Fraction | float | int

TOL = 1e-9
EXACT_CAP = 20
SCHEMA_VERSION = 1


def as_fraction(v) -> Fraction:
    """Convert ints, decimal strings and floats (via their repr) to Fraction."""
    if isinstance(v, Fraction):
        return v
    if isinstance(v, int):
        return Fraction(v)
    if isinstance(v, float):
        return Fraction(repr(v))
    return Fraction(str(v))


def is_exact(values: Iterable) -> bool:
    return all(isinstance(v, (Fraction, int)) for v in values)


def ratio(num, den):
    """num / den with the convention 0/0 = 0."""
    if den == 0:
        return den * 0
    return num / den


def leq(a, b, tol: float = 1e-12) -> bool:
    if isinstance(a, (Fraction, int)) and isinstance(b, (Fraction, int)):
        return a <= b
    return a <= b + tol


@dataclass(frozen=True)
class NodePayoff:
    """Payoff pairs (r1, r2) for the three nonempty stopping sets."""

    p1_stop: tuple
    p2_stop: tuple
    both_stop: tuple

    def values(self) -> tuple:
        return (*self.p1_stop, *self.p2_stop, *self.both_stop)

    @classmethod
    def from_values(cls, vals: Sequence) -> "NodePayoff":
        v = [as_fraction(a) for a in vals]
        return cls((v[0], v[1]), (v[2], v[3]), (v[4], v[5]))

    def solo(self, player: int) -> tuple:
        return self.p1_stop if player == 1 else self.p2_stop


@dataclass(frozen=True, eq=False)
class GameTree:
    root: Node
    children: Mapping[Node, tuple]
    transition: Mapping[Node, tuple]
    payoff: Mapping[Node, NodePayoff]
    k: int = 1
    bound: int = 1

    # -- structure -------------------------------------------------------

    @cached_property
    def order(self) -> tuple:
        """Reachable nodes in preorder (cycle safe)."""
        seen, out, stack = set(), [], [self.root]
        while stack:
            s = stack.pop()
            if s in seen:
                continue
            seen.add(s)
            out.append(s)
            stack.extend(reversed(self.children.get(s, ())))
        return tuple(out)

    @cached_property
    def internal(self) -> tuple:
        return tuple(s for s in self.order if self.children.get(s))

    @cached_property
    def leaves(self) -> tuple:
        return tuple(s for s in self.order if not self.children.get(s))

    @cached_property
    def nodes(self) -> frozenset:
        return frozenset(self.order)

    @cached_property
    def parent(self) -> dict:
        par = {}
        for s in self.internal:
            for c in self.children[s]:
                par.setdefault(c, s)
        return par

    @cached_property
    def depth(self) -> dict:
        d = {self.root: 0}
        for s in self.order:
            for c in self.children.get(s, ()):
                d.setdefault(c, d[s] + 1)
        return d

    @property
    def is_trivial(self) -> bool:
        return not self.children.get(self.root)

    def descendants(self, s: Node) -> list:
        out, stack = [], list(self.children.get(s, ()))
        while stack:
            c = stack.pop()
            out.append(c)
            stack.extend(self.children.get(c, ()))
        return out

    def ancestors(self, s: Node) -> list:
        out = []
        while s in self.parent:
            s = self.parent[s]
            out.append(s)
        return out

    @cached_property
    def exact(self) -> bool:
        return is_exact(p for s in self.internal for p in self.transition[s])

    @cached_property
    def _index(self) -> dict:
        return {s: i for i, s in enumerate(self.internal)}

    def _kids(self, numeric) -> list:
        idx = self._index
        out = []
        for s in self.internal:
            out.append([(idx[c], numeric(p)) for c, p in zip(self.children[s], self.transition[s]) if c in idx])
        return out

    @cached_property
    def kids_exact(self) -> list:
        return self._kids(as_fraction)

    @cached_property
    def kids_float(self) -> list:
        return self._kids(float)

    @cached_property
    def pay_float(self) -> list:
        return [tuple(float(v) for v in self.payoff[s].values()) for s in self.internal]

    @cached_property
    def pay_exact(self) -> list:
        return [tuple(as_fraction(v) for v in self.payoff[s].values()) for s in self.internal]

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []
        for s in self.order:
            entry = {"id": s, "children": [{"id": c, "prob": str(p)} for c, p in
                                            zip(self.children.get(s, ()), self.transition.get(s, ()))]}
            if s in self.payoff and self.children.get(s):
                pay = self.payoff[s]
                entry["payoff"] = {
                    "p1_stop": [str(v) for v in pay.p1_stop],
                    "p2_stop": [str(v) for v in pay.p2_stop],
                    "both_stop": [str(v) for v in pay.both_stop],
                }
            nodes.append(entry)
        doc = {"schema": "game_tree", "version": SCHEMA_VERSION, "k": self.k, "root": self.root, "nodes": nodes}
        if self.bound != 1:
            doc["bound"] = self.bound
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping, arith: str = "rational") -> "GameTree":
        num = as_fraction if arith == "rational" else (lambda v: float(as_fraction(v)))
        children, transition, payoff = {}, {}, {}
        for entry in doc["nodes"]:
            s = entry["id"]
            kids = entry.get("children") or []
            if kids:
                children[s] = tuple(c["id"] for c in kids)
                transition[s] = tuple(num(c["prob"]) for c in kids)
            if "payoff" in entry:
                p = entry["payoff"]
                payoff[s] = NodePayoff.from_values([*p["p1_stop"], *p["p2_stop"], *p["both_stop"]])
        return cls(doc["root"], children, transition, payoff, int(doc["k"]), int(doc.get("bound", 1)))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, GameTree) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.digest())


def make_tree(spec: Mapping, payoffs: Mapping, root: Node = 0, k: int = 1, bound: int = 1) -> GameTree:
    """Build a tree from ``{node: [(child, prob), ...]}`` and ``{node: six values}``."""
    children = {s: tuple(c for c, _ in kids) for s, kids in spec.items() if kids}
    transition = {s: tuple(p for _, p in kids) for s, kids in spec.items() if kids}
    payoff = {s: v if isinstance(v, NodePayoff) else NodePayoff.from_values(v) for s, v in payoffs.items()}
    return GameTree(root, children, transition, payoff, k, bound)


def single_node_tree(p1_stop, p2_stop, both_stop, k: int = 1, bound: int = 1) -> GameTree:
    return make_tree({0: [(1, Fraction(1))]}, {0: (*p1_stop, *p2_stop, *both_stop)}, root=0, k=k, bound=bound)


def threat_example_tree() -> GameTree:
    """One-node game: player 1 alone pays (-1, 2), player 2 alone (-2, 1), both (0, -3).

    Payoffs are not normalized to [-1, 1]; the tree carries ``bound=3``.
    """
    return single_node_tree((-1, 2), (-2, 1), (0, -3), k=1, bound=3)


# -- validation -------------------------------------------------------------

def on_grid(v, k: int, bound: int = 1) -> bool:
    f = as_fraction(v)
    return abs(f) <= bound and (f * k).denominator == 1


def validate_tree(t: GameTree) -> list:
    """Every violated invariant as a human readable line; empty iff valid."""
    report = []
    if not t.children.get(t.root):
        report.append(f"root {t.root!r} is not internal (trivial tree)")
    seen_parent = {}
    for s, kids in t.children.items():
        if not kids:
            report.append(f"node {s!r}: empty children list")
        for c in kids:
            if c == t.root:
                report.append(f"node {s!r}: root listed as a child")
            if c in seen_parent and seen_parent[c] != s:
                report.append(f"node {c!r}: more than one parent ({seen_parent[c]!r}, {s!r})")
            seen_parent[c] = s
    declared = set(t.children) | {c for kids in t.children.values() for c in kids} | set(t.payoff)
    for s in sorted(declared - t.nodes, key=repr):
        report.append(f"node {s!r}: unreachable from root")
    if not isinstance(t.k, int) or t.k < 1:
        report.append(f"granularity k={t.k!r} is not a positive integer")
    for s in t.internal:
        probs = t.transition.get(s)
        if probs is None or len(probs) != len(t.children[s]):
            report.append(f"node {s!r}: transition vector does not match children")
            continue
        if any(p < 0 for p in probs):
            report.append(f"node {s!r}: negative transition probability")
        total = sum(probs)
        if (is_exact(probs) and total != 1) or abs(total - 1) > TOL:
            report.append(f"node {s!r}: transition sums to {total}")
        pay = t.payoff.get(s)
        if pay is None:
            report.append(f"node {s!r}: missing payoff")
            continue
        if isinstance(t.k, int) and t.k >= 1:
            for name, pair in (("p1_stop", pay.p1_stop), ("p2_stop", pay.p2_stop), ("both_stop", pay.both_stop)):
                for i, v in enumerate(pair, 1):
                    if not on_grid(v, t.k, t.bound):
                        report.append(f"node {s!r}: {name}[{i}] = {v} not on the 1/{t.k} grid "
                                      f"in [-{t.bound}, {t.bound}]")
    return report


def require_valid(t: GameTree, allow_trivial: bool = False) -> None:
    report = validate_tree(t)
    if allow_trivial and t.is_trivial:
        report = [r for r in report if "trivial" not in r]
    if report:
        raise ValueError("invalid game tree: " + "; ".join(report))


def condition_report(t: GameTree, rbar: Sequence) -> list:
    """Check the payoff caps against ``rbar``.

    Solo stops never beat the cap for the stopper; a solo stop attaining the
    stopper's cap leaves the other player strictly below their cap.
    """
    r1, r2 = (as_fraction(v) for v in rbar)
    report = [line for line in validate_tree(t) if "grid" in line]
    for s in t.internal:
        pay = t.payoff[s]
        a1, b1 = (as_fraction(v) for v in pay.p1_stop)
        b2, a2 = (as_fraction(v) for v in pay.p2_stop)
        if a1 > r1:
            report.append(f"node {s!r}: player 1 solo payoff {a1} exceeds cap {r1}")
        if a2 > r2:
            report.append(f"node {s!r}: player 2 solo payoff {a2} exceeds cap {r2}")
        if a1 == r1 and not b1 < r2:
            report.append(f"node {s!r}: player 1 solo stop attains cap but player 2 gets {b1} >= {r2}")
        if a2 == r2 and not b2 < r1:
            report.append(f"node {s!r}: player 2 solo stop attains cap but player 1 gets {b2} >= {r1}")
    return report


# -- strategies ------------------------------------------------------------

@dataclass(frozen=True)
class StationaryStrategy:
    """Stop probability per internal node; nodes not listed never stop."""

    stop_prob: Mapping = field(default_factory=dict)

    def __call__(self, s: Node):
        return self.stop_prob.get(s, 0)

    @classmethod
    def never(cls) -> "StationaryStrategy":
        return cls({})

    @classmethod
    def pure(cls, stops: Iterable) -> "StationaryStrategy":
        return cls({s: 1 for s in stops})

    def stop_set(self) -> frozenset:
        return frozenset(s for s, v in self.stop_prob.items() if v > 0)

    def is_pure(self) -> bool:
        return all(v in (0, 1) for v in self.stop_prob.values())

    def on(self, t: GameTree) -> list:
        return [self(s) for s in t.internal]

    def restricted(self, nodes: Iterable) -> "StationaryStrategy":
        keep = set(nodes)
        return StationaryStrategy({s: v for s, v in self.stop_prob.items() if s in keep and v != 0})

    def to_dict(self) -> dict:
        return {str(s): str(v) for s, v in self.stop_prob.items()}

    @classmethod
    def from_dict(cls, doc: Mapping, t: GameTree | None = None, arith: str = "rational") -> "StationaryStrategy":
        """Inverse of ``to_dict``; node ids are matched against ``t`` by their string form."""
        num = as_fraction if arith == "rational" else (lambda v: float(as_fraction(v)))
        ids = {str(s): s for s in t.internal} if t is not None else {}
        out = {}
        for key, v in doc.items():
            if t is not None and key not in ids:
                raise ValueError(f"strategy names unknown internal node {key!r}")
            out[ids.get(key, key)] = num(v)
        return cls(out)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StationaryStrategy):
            return NotImplemented
        keys = set(self.stop_prob) | set(other.stop_prob)
        return all(self(s) == other(s) for s in keys)

    def __hash__(self) -> int:
        return hash(frozenset((s, v) for s, v in self.stop_prob.items() if v != 0))


@dataclass(frozen=True)
class StationaryProfile:
    p1: StationaryStrategy
    p2: StationaryStrategy

    @classmethod
    def never(cls) -> "StationaryProfile":
        return cls(StationaryStrategy.never(), StationaryStrategy.never())

    @classmethod
    def of(cls, x: Mapping, y: Mapping) -> "StationaryProfile":
        return cls(StationaryStrategy(dict(x)), StationaryStrategy(dict(y)))

    def player(self, i: int) -> StationaryStrategy:
        return self.p1 if i == 1 else self.p2

    def is_zero_at(self, s: Node) -> bool:
        return self.p1(s) == 0 and self.p2(s) == 0

    def to_dict(self) -> dict:
        return {"p1": self.p1.to_dict(), "p2": self.p2.to_dict()}

    @classmethod
    def from_dict(cls, doc: Mapping, t: GameTree | None = None, arith: str = "rational") -> "StationaryProfile":
        return cls(StationaryStrategy.from_dict(doc.get("p1", {}), t, arith),
                   StationaryStrategy.from_dict(doc.get("p2", {}), t, arith))


def check_strategy(t: GameTree, x: StationaryStrategy) -> None:
    internal = set(t.internal)
    for s, v in x.stop_prob.items():
        if s not in internal and v != 0:
            raise ValueError(f"strategy stops at {s!r}, which is not an internal node")
        if not 0 <= v <= 1:
            raise ValueError(f"stop probability {v} at {s!r} outside [0, 1]")


def union(strategies: Sequence[StationaryStrategy]) -> StationaryStrategy:
    """Pointwise union: continue only if every component continues."""
    if not strategies:
        raise ValueError("union of an empty list")
    keys = set().union(*(x.stop_prob for x in strategies))
    out = {}
    for s in keys:
        cont = 1
        for x in strategies:
            cont = cont * (1 - x(s))
        out[s] = 1 - cont
    return StationaryStrategy(out)


def union_profiles(seq: Sequence[StationaryProfile]) -> StationaryProfile:
    return StationaryProfile(union([a.p1 for a in seq]), union([a.p2 for a in seq]))


# -- round statistics ----------------------------------------------------------

@dataclass(frozen=True)
class RoundStats:
    pi: Number
    rho: tuple
    gamma: tuple


def _arrays(t: GameTree, prof: StationaryProfile):
    x, y = prof.p1.on(t), prof.p2.on(t)
    if t.exact and is_exact(x) and is_exact(y):
        return t.kids_exact, t.pay_exact, [as_fraction(v) for v in x], [as_fraction(v) for v in y]
    return t.kids_float, t.pay_float, [float(v) for v in x], [float(v) for v in y]


def _stats_arrays(kids, pay, x, y):
    n = len(kids)
    pi, r1, r2 = [0] * n, [0] * n, [0] * n
    for i in range(n - 1, -1, -1):
        xi, yi = x[i], y[i]
        a, b, ab = xi * (1 - yi), (1 - xi) * yi, xi * yi
        cont = (1 - xi) * (1 - yi)
        sp = s1 = s2 = 0
        for j, p in kids[i]:
            sp += p * pi[j]
            s1 += p * r1[j]
            s2 += p * r2[j]
        q = pay[i]
        pi[i] = a + b + ab + cont * sp
        r1[i] = a * q[0] + b * q[2] + ab * q[4] + cont * s1
        r2[i] = a * q[1] + b * q[3] + ab * q[5] + cont * s2
    return pi, r1, r2


def round_stats(t: GameTree, prof: StationaryProfile) -> RoundStats:
    """Termination probability, expected payoff and normalized payoff of one round."""
    require_valid(t, allow_trivial=True)
    check_strategy(t, prof.p1)
    check_strategy(t, prof.p2)
    if t.is_trivial:
        return RoundStats(0, (0, 0), (0, 0))
    kids, pay, x, y = _arrays(t, prof)
    pi, r1, r2 = _stats_arrays(kids, pay, x, y)
    p, a, b = pi[0], r1[0], r2[0]
    return RoundStats(p, (a, b), (ratio(a, p), ratio(b, p)))


def branch_prob(t: GameTree, d: Iterable) -> Number:
    """Probability that the root-to-leaf branch (no stopping) meets ``d``."""
    d = set(d)
    unknown = d - t.nodes
    if unknown:
        raise ValueError(f"unknown nodes {sorted(unknown, key=repr)}")
    memo = {}
    for s in reversed(t.order):
        if s in d:
            memo[s] = 1
        else:
            memo[s] = sum((p * memo[c] for c, p in zip(t.children.get(s, ()), t.transition.get(s, ()))), 0)
    return memo[t.root]


def trim(t: GameTree, d: Iterable) -> GameTree:
    """Remove all strict descendants of ``d``; nodes of ``d`` become leaves.

    Trimming at the root yields the trivial tree (``is_trivial``).
    """
    d = set(d)
    bad = d - set(t.internal)
    if bad:
        raise ValueError(f"can only trim at internal nodes, got {sorted(bad, key=repr)}")
    if not d:
        return t
    children, transition, payoff, stack = {}, {}, {}, [t.root]
    while stack:
        s = stack.pop()
        if s in d or not t.children.get(s):
            continue
        children[s] = t.children[s]
        transition[s] = t.transition[s]
        payoff[s] = t.payoff[s]
        stack.extend(t.children[s])
    return GameTree(t.root, children, transition, payoff, t.k, t.bound)


def is_subgame(sub: GameTree, big: GameTree) -> bool:
    if sub.root != big.root or not sub.nodes <= big.nodes:
        return False
    for s in sub.internal:
        if (tuple(sub.children[s]) != tuple(big.children.get(s, ()))
                or tuple(sub.transition[s]) != tuple(big.transition.get(s, ()))
                or sub.payoff.get(s) != big.payoff.get(s)):
            return False
    return True


def leaf_passage_prob(t: GameTree, inner: GameTree, outer: GameTree) -> Number:
    """Probability that the branch of ``t`` hits a leaf of ``inner`` that is not a leaf of ``outer``."""
    if not (is_subgame(inner, outer) and is_subgame(outer, t)):
        raise ValueError("expected inner to be a subgame of outer and outer a subgame of t")
    return branch_prob(t, set(inner.leaves) - set(outer.leaves))


def mu(t: GameTree, rbar: Sequence, player: int = 1) -> Number:
    """Branch probability of the nodes where the player's solo payoff equals ``rbar``."""
    cap = as_fraction(rbar[player - 1])
    hit = {s for s in t.internal if as_fraction(t.payoff[s].solo(player)[player - 1]) == cap}
    return branch_prob(t, hit)


def mu1(t: GameTree, rbar: Sequence) -> Number:
    return mu(t, rbar, 1)


def mu2(t: GameTree, rbar: Sequence) -> Number:
    return mu(t, rbar, 2)


# -- best responses ----------------------------------------------------------

@dataclass(frozen=True)
class BestResponseResult:
    value: Number
    strategy: StationaryStrategy
    method: str = "exact"


def _player_arrays(t: GameTree, opponent: StationaryStrategy, player: int, exact: bool):
    pay = t.pay_exact if exact else t.pay_float
    kids = t.kids_exact if exact else t.kids_float
    conv = as_fraction if exact else float
    o = [conv(opponent(s)) for s in t.internal]
    if player == 1:
        solo, opp, both = [q[0] for q in pay], [q[2] for q in pay], [q[4] for q in pay]
    else:
        solo, opp, both = [q[3] for q in pay], [q[1] for q in pay], [q[5] for q in pay]
    return kids, o, solo, opp, both


def _enumerate(kids, o, solo, opp, both):
    """All pure antichain policies as (pi, rho, stops) triples at the root."""
    n = len(kids)
    opts = [None] * n
    for i in range(n - 1, -1, -1):
        oi = o[i]
        stop = (1, (1 - oi) * solo[i] + oi * both[i], (i,))
        out = [stop]
        lists = [[(p, q) for q in opts[j]] for j, p in kids[i]]
        for combo in itertools.product(*lists):
            sp = sr = 0
            stops = ()
            for p, (cp, cr, cs) in combo:
                sp += p * cp
                sr += p * cr
                stops += cs
            out.append((oi + (1 - oi) * sp, oi * opp[i] + (1 - oi) * sr, stops))
        opts[i] = out
    return opts[0]


def _policy_pass(kids, o, solo, opp, both, v, tol):
    """One round of backward induction with leaf continuation value ``v``.

    Returns the root (pi, rho) of the greedy policy and its stop indices.
    Stops only when stopping is strictly better (continue on ties).
    """
    n = len(kids)
    pi, rho, stop = [0] * n, [0] * n, [False] * n
    for i in range(n - 1, -1, -1):
        oi = o[i]
        sp = sr = 0
        for j, p in kids[i]:
            sp += p * pi[j]
            sr += p * rho[j]
        cp = oi + (1 - oi) * sp
        cr = oi * opp[i] + (1 - oi) * sr
        w_cont = cr + (1 - cp) * v
        w_stop = (1 - oi) * solo[i] + oi * both[i]
        if w_stop > w_cont + tol:
            pi[i], rho[i], stop[i] = 1, w_stop, True
        else:
            pi[i], rho[i] = cp, cr
    return pi, rho, stop


def _reachable_stops(kids, stop) -> list:
    out, stack = [], [0]
    while stack:
        i = stack.pop()
        if stop[i]:
            out.append(i)
            continue
        stack.extend(j for j, _ in kids[i])
    return out


def _fixed_point(kids, o, solo, opp, both, exact: bool):
    """Scalar search on the continuation value.

    g(v) = max_policy [rho - v * pi] is convex and nonincreasing; the best
    response value is the smallest v with g(v) <= 0 (0 when the never-stop
    policy never terminates).  The bracket [lo, hi] is narrowed by bisection;
    every probe also lifts ``lo`` to the ratio achieved by its greedy policy.
    """
    tol = 0 if exact else 1e-13
    pi, rho, stop = _policy_pass(kids, o, solo, opp, both, 0, float("inf"))
    lo, best_stop = ratio(rho[0], pi[0]), stop
    top = max([abs(v) for v in (*solo, *opp, *both)] + [1])
    hi = Fraction(top) if exact else float(top)
    for _ in range(200):
        pi, rho, stop = _policy_pass(kids, o, solo, opp, both, lo, tol)
        if rho[0] - lo * pi[0] <= tol:
            break
        lo, best_stop = ratio(rho[0], pi[0]), stop
        mid = (lo + hi) / 2
        pi, rho, stop = _policy_pass(kids, o, solo, opp, both, mid, tol)
        r = ratio(rho[0], pi[0])
        if r > lo:
            lo, best_stop = r, stop
        if rho[0] - mid * pi[0] <= tol:
            hi = mid
        if not exact and hi - lo <= 1e-10:
            break
    return lo, best_stop


def best_response(t: GameTree, opponent: StationaryStrategy, player: int, *,
                  method: str = "auto", exact_cap: int = EXACT_CAP) -> BestResponseResult:
    """Best stationary reply of ``player`` against a fixed opponent strategy.

    ``method`` is "exact" (enumerate pure antichain policies), "fixed_point"
    (scalar continuation-value search) or "auto" (exact up to ``exact_cap``
    internal nodes).
    """
    if player not in (1, 2):
        raise ValueError("player must be 1 or 2")
    require_valid(t, allow_trivial=True)
    check_strategy(t, opponent)
    if t.is_trivial:
        return BestResponseResult(0, StationaryStrategy.never(), "trivial")
    if method == "auto":
        method = "exact" if len(t.internal) <= exact_cap else "fixed_point"
    exact = t.exact and is_exact(opponent.on(t))
    arrays = _player_arrays(t, opponent, player, exact)
    if method == "exact":
        best = None
        for p, r, stops in _enumerate(*arrays):
            val = ratio(r, p)
            key = (len(stops), sorted(stops))
            if best is None or val > best[0] + (0 if exact else 1e-12) or (
                    abs(val - best[0]) <= (0 if exact else 1e-12) and key < (len(best[1]), sorted(best[1]))):
                best = (val, stops)
        value, stops = best
    elif method == "fixed_point":
        value, stop = _fixed_point(*arrays, exact)
        stops = _reachable_stops(arrays[0], stop)
    else:
        raise ValueError(f"unknown method {method!r}")
    strat = StationaryStrategy({t.internal[i]: 1 for i in stops})
    return BestResponseResult(value, strat, method)


# -- equilibrium certificates ---------------------------------------------------

@dataclass(frozen=True)
class EquilibriumCertificate:
    eps: Number
    stats: RoundStats
    br_values: tuple
    gains: tuple
    br_strategies: tuple
    verdict: bool

    @property
    def gamma(self) -> tuple:
        return self.stats.gamma

    def to_dict(self) -> dict:
        return {
            "eps": str(self.eps),
            "pi": str(self.stats.pi),
            "rho": [str(v) for v in self.stats.rho],
            "gamma": [str(v) for v in self.stats.gamma],
            "br_values": [str(v) for v in self.br_values],
            "gains": [str(v) for v in self.gains],
            "verdict": self.verdict,
        }


def check_equilibrium(t: GameTree, prof: StationaryProfile, eps, *, method: str = "auto",
                      exact_cap: int = EXACT_CAP) -> EquilibriumCertificate:
    stats = round_stats(t, prof)
    b1 = best_response(t, prof.p2, 1, method=method, exact_cap=exact_cap)
    b2 = best_response(t, prof.p1, 2, method=method, exact_cap=exact_cap)
    gains = (b1.value - stats.gamma[0], b2.value - stats.gamma[1])
    verdict = all(g <= eps + TOL for g in gains)
    return EquilibriumCertificate(eps, stats, (b1.value, b2.value), gains, (b1.strategy, b2.strategy), verdict)


# -- equilibrium search ----------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Closed payoff rectangle [lo1, hi1] x [lo2, hi2]."""

    lo1: float
    hi1: float
    lo2: float
    hi2: float

    def contains(self, g, tol: float = TOL) -> bool:
        return (self.lo1 - tol <= g[0] <= self.hi1 + tol) and (self.lo2 - tol <= g[1] <= self.hi2 + tol)

    def distance(self, g) -> float:
        d1 = max(self.lo1 - g[0], g[0] - self.hi1, 0.0)
        d2 = max(self.lo2 - g[1], g[1] - self.hi2, 0.0)
        return max(d1, d2)


def as_box(target) -> Box | None:
    if target is None or isinstance(target, Box):
        return target
    if hasattr(target, "box"):
        return target.box()
    (lo1, hi1), (lo2, hi2) = target
    return Box(float(lo1), float(hi1), float(lo2), float(hi2))


@dataclass(frozen=True)
class SearchResult:
    """Outcome of an equilibrium search; ``found`` False means the search gave up."""

    found: bool
    profile: StationaryProfile | None
    stats: RoundStats | None
    certificate: EquilibriumCertificate | None
    evaluations: int
    phase: str


class _Evaluator:
    """Float engine: exploitability of a profile given as two index lists."""

    def __init__(self, t: GameTree, eps: float, box: Box | None):
        self.t = t
        self.kids = t.kids_float
        self.pay = t.pay_float
        self.eps = eps
        self.box = box
        self.calls = 0
        self.cache = {}
        pay = self.pay
        self.sides = (
            ([q[0] for q in pay], [q[2] for q in pay], [q[4] for q in pay]),
            ([q[3] for q in pay], [q[1] for q in pay], [q[5] for q in pay]),
        )

    def br(self, player: int, opp: Sequence[float]):
        solo, opp_pay, both = self.sides[player - 1]
        return _fixed_point(self.kids, opp, solo, opp_pay, both, False)

    def evaluate(self, x: tuple, y: tuple):
        key = (x, y)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        self.calls += 1
        pi, r1, r2 = _stats_arrays(self.kids, self.pay, x, y)
        g = (ratio(r1[0], pi[0]), ratio(r2[0], pi[0]))
        v1, s1 = self.br(1, y)
        v2, s2 = self.br(2, x)
        gains = (v1 - g[0], v2 - g[1])
        obj = max(gains[0] - self.eps, gains[1] - self.eps, 0.0)
        if self.box is not None:
            obj += self.box.distance(g)
        out = (obj, g, gains, s1, s2)
        self.cache[key] = out
        return out


def _value_ladder(eps: float, step: float) -> list:
    vals = {0.0, 1.0}
    m = 1
    while m * step < 1:
        vals.add(round(m * step, 12))
        m += 1
    threat = eps / 5
    for _ in range(6):
        vals.add(threat)
        vals.add(1 - threat)
        threat /= 2
    return sorted(vals)


def _moves(v: float, eps: float, step: float) -> list:
    out = {0.0, 1.0}
    threat = eps / 5
    for _ in range(6):
        out.update((threat, 1 - threat))
        threat /= 2
    d = step
    while d < 1:
        out.update((min(1.0, round(v + d, 12)), max(0.0, round(v - d, 12))))
        d *= 2
    out.discard(v)
    return sorted(out)


def _antichains(t: GameTree, cap: int) -> list:
    """Pure stop sets (antichains), smallest first, at most ``cap`` of them."""
    kids = t.kids_float
    n = len(kids)
    opts = [None] * n
    for i in range(n - 1, -1, -1):
        out = [(i,)]
        lists = [opts[j] for j, _ in kids[i]]
        for combo in itertools.product(*lists):
            out.append(tuple(s for part in combo for s in part))
            if len(out) > 4 * cap:
                break
        opts[i] = out
    res = sorted(set(opts[0]), key=lambda a: (len(a), a))
    return res[:cap]


def find_stationary_equilibrium(t: GameTree, eps, target=None, *, grid_step=None, seed: int = 0,
                                max_evals: int = 4000, pure_cap: int = 24, starts: int = 6,
                                scan_cap: int = 3000, exhaustive_nodes: int = 3) -> SearchResult:
    """Search for a stationary eps-equilibrium, optionally with payoff in ``target``.

    Phases: never-stop profile, pure antichain pairs, a grid scan on small
    trees, then multistart local search driven by best responses and a ladder
    of stop probabilities (grid of step eps/4 plus small threat levels).
    Returning ``found=False`` is a search failure, not a nonexistence proof.
    """
    import random

    require_valid(t, allow_trivial=True)
    box = as_box(target)
    eps_f = float(eps)
    if t.is_trivial:
        stats = RoundStats(0, (0, 0), (0, 0))
        ok = box is None or box.contains((0.0, 0.0))
        prof = StationaryProfile.never() if ok else None
        cert = check_equilibrium(t, prof, eps) if ok else None
        return SearchResult(ok, prof, stats if ok else None, cert, 0, "trivial")
    step = float(grid_step) if grid_step else eps_f / 4
    ev = _Evaluator(t, eps_f, box)
    n = len(t.internal)
    rng = random.Random(seed)

    def as_strategy(vec):
        return StationaryStrategy({t.internal[i]: v for i, v in enumerate(vec) if v})

    def done(x, y, phase):
        prof = StationaryProfile(as_strategy(x), as_strategy(y))
        cert = check_equilibrium(t, prof, eps, method="fixed_point")
        if cert.verdict and (box is None or box.contains(cert.gamma)):
            return SearchResult(True, prof, cert.stats, cert, ev.calls, phase)
        return None

    def pure_vec(stops):
        v = [0.0] * n
        for i in stops:
            v[i] = 1.0
        return tuple(v)

    zero = tuple([0.0] * n)
    if ev.evaluate(zero, zero)[0] <= 0:
        res = done(zero, zero, "never-stop")
        if res:
            return res

    pures = [pure_vec(a) for a in _antichains(t, pure_cap)]
    scored = []
    for x in pures:
        for y in pures:
            obj = ev.evaluate(x, y)[0]
            if obj <= 0:
                res = done(x, y, "pure")
                if res:
                    return res
            scored.append((obj, x, y))
    scored.sort(key=lambda e: e[0])

    if n <= exhaustive_nodes:
        ladder = _value_ladder(eps_f, step)
        per_coord = max(2, int(scan_cap ** (1.0 / (2 * n))))
        if len(ladder) > per_coord:
            small = [v for v in ladder if v < step or v > 1 - step]
            rest = [v for v in ladder if step <= v <= 1 - step]
            room = max(0, per_coord - len(small))
            stride = max(1, len(rest) // room) if room else len(rest) + 1
            ladder = sorted(set(small) | set(rest[::stride][:room]))
        for combo in itertools.product(ladder, repeat=2 * n):
            if ev.calls >= max_evals:
                break
            x, y = combo[:n], combo[n:]
            if ev.evaluate(x, y)[0] <= 0:
                res = done(x, y, "scan")
                if res:
                    return res

    seeds = [(x, y) for _, x, y in scored[:starts]]
    while len(seeds) < 2 * starts:
        seeds.append((tuple(rng.choice((0.0, 1.0, rng.random())) for _ in range(n)),
                      tuple(rng.choice((0.0, 1.0, rng.random())) for _ in range(n))))
    for x, y in seeds:
        res = _local_search(ev, x, y, eps_f, step, max_evals)
        if res is not None:
            out = done(*res, "local")
            if out:
                return out
        if ev.calls >= max_evals:
            break
    return SearchResult(False, None, None, None, ev.calls, "exhausted")


def _local_search(ev: _Evaluator, x: tuple, y: tuple, eps: float, step: float, max_evals: int):
    n = len(x)
    cur = (x, y)
    f = ev.evaluate(*cur)[0]
    while ev.calls < max_evals:
        if f <= 0:
            return cur
        _, _, gains, s1, s2 = ev.evaluate(*cur)
        cands = []
        br1 = tuple(1.0 if s else 0.0 for s in s1)
        br2 = tuple(1.0 if s else 0.0 for s in s2)
        if gains[0] >= gains[1]:
            cands.append((br1, cur[1]))
        else:
            cands.append((cur[0], br2))
        for who in (0, 1):
            vec = cur[who]
            for i in range(n):
                for v in _moves(vec[i], eps, step):
                    new = vec[:i] + (v,) + vec[i + 1:]
                    cands.append((new, cur[1]) if who == 0 else (cur[0], new))
        improved = False
        for cand in cands:
            g = ev.evaluate(*cand)[0]
            if g < f - 1e-12:
                cur, f, improved = cand, g, True
                break
            if ev.calls >= max_evals:
                break
        if not improved:
            return cur if f <= 0 else None
    return cur if f <= 0 else None
