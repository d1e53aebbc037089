"""Heavy nodes, orthogonal strategy sequences, equilibrium accretion and tree coloring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .tree_game import (
    TOL,
    Box,
    GameTree,
    StationaryProfile,
    StationaryStrategy,
    _arrays,
    _stats_arrays,
    as_fraction,
    best_response,
    branch_prob,
    check_equilibrium,
    condition_report,
    find_stationary_equilibrium,
    leaf_passage_prob,
    leq,
    ratio,
    round_stats,
    trim,
    union_profiles,
)


@dataclass(frozen=True)
class HeavySet:
    delta: object
    nodes: frozenset
    conditional: dict = field(default_factory=dict, compare=False)


def termination_given_node(t: GameTree, prof: StationaryProfile) -> dict:
    """P(termination in the round | branch passes s) for every internal node.

    The branch is drawn independently of the stop lotteries, so the event
    covers stops at the ancestors of s as well as inside its subtree.
    """
    if t.is_trivial:
        return {}
    kids, _, x, y = _arrays(t, prof)
    n = len(kids)
    survive = [0] * n
    for i in range(n - 1, -1, -1):
        leaf_mass = 1 - sum(p for _, p in kids[i])
        inner = leaf_mass + sum(p * survive[j] for j, p in kids[i])
        survive[i] = (1 - x[i]) * (1 - y[i]) * inner
    above = [1] * n
    for i in range(n):
        for j, _ in kids[i]:
            above[j] = above[i] * (1 - x[i]) * (1 - y[i])
    return {s: 1 - above[i] * survive[i] for i, s in enumerate(t.internal)}


def heavy_set(t: GameTree, prof: StationaryProfile, delta) -> HeavySet:
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    cond = termination_given_node(t, prof)
    tol = 0 if _exact(cond.values(), delta) else 1e-12
    nodes = frozenset(s for s, v in cond.items() if v >= delta - tol)
    return HeavySet(delta, nodes, cond)


def _exact(values, *extra) -> bool:
    return all(isinstance(v, (Fraction, int)) for v in (*values, *extra))


@dataclass(frozen=True)
class OrthogonalityVerdict:
    ok: bool
    witness: tuple | None = None  # (k, node, heavy ancestor) with 1-based k


def is_orthogonal(t: GameTree, seq: Sequence[StationaryProfile], delta, strong: bool = False) -> OrthogonalityVerdict:
    """Each later pair continues on heavy nodes (and below them when ``strong``) of the running union."""
    if not seq:
        raise ValueError("empty sequence")
    for k in range(1, len(seq)):
        heavy = heavy_set(t, union_profiles(seq[:k]), delta).nodes
        nxt = seq[k]
        for h in t.internal:
            if h not in heavy:
                continue
            scope = [h] + ([d for d in t.descendants(h) if d in t.payoff] if strong else [])
            for s in scope:
                if not nxt.is_zero_at(s):
                    return OrthogonalityVerdict(False, (k, s, h))
    return OrthogonalityVerdict(True)


def decompose_pure(t: GameTree, xbar: StationaryStrategy, ys: Sequence[StationaryStrategy], eps) -> list:
    """Split a pure single-stop-per-branch strategy along an orthogonal sequence of player-2 strategies.

    A stop of ``xbar`` at s goes to the greatest index k such that s is not
    eps-heavy for the union of the first k-1 player-2 strategies.
    """
    if not xbar.is_pure():
        raise ValueError("xbar must be pure")
    stops = [s for s in t.internal if xbar(s) == 1]
    for s in stops:
        for d in t.descendants(s):
            if xbar(d) == 1:
                raise ValueError(f"xbar stops twice on a branch: {s!r} and {d!r}")
    never = StationaryStrategy.never()
    pairs = [StationaryProfile(never, y) for y in ys]
    verdict = is_orthogonal(t, pairs, eps * eps, strong=True)
    if not verdict.ok:
        raise ValueError(f"player-2 sequence is not strongly orthogonal: witness {verdict.witness}")
    n = len(ys)
    heavy_prefix = [frozenset()]
    for k in range(1, n):
        heavy_prefix.append(heavy_set(t, union_profiles(pairs[:k]), eps).nodes)
    parts = [dict() for _ in range(n)]
    for s in stops:
        k = max(k for k in range(n) if s not in heavy_prefix[k])
        parts[k][s] = 1
    return [StationaryStrategy(p) for p in parts]


# -- simultaneous copies ---------------------------------------------------------

@dataclass(frozen=True)
class Inequality:
    name: str
    lhs: object
    rhs: object
    holds: bool


@dataclass(frozen=True)
class UnionBoundsReport:
    pis: tuple
    rhos: tuple
    pi: object
    rho: tuple
    gamma: tuple
    excess_count: object        # E[N 1{N >= 2}]
    excess_weight: object       # E[(N + 1) 1{N >= 2}]
    overlaps: tuple             # P(copy k stops and some earlier copy stops)
    inequalities: tuple

    @property
    def ok(self) -> bool:
        return all(q.holds for q in self.inequalities)

    def failures(self) -> list:
        return [q for q in self.inequalities if not q.holds]


def _branches(t: GameTree):
    """Root-to-leaf paths with their probabilities."""
    out, stack = [], [((t.root,), 1)]
    while stack:
        path, p = stack.pop()
        s = path[-1]
        kids = t.children.get(s)
        if not kids:
            out.append((path[:-1], p))
            continue
        for c, q in zip(kids, t.transition[s]):
            stack.append((path + (c,), p * q))
    return out


def copies_statistics(t: GameTree, seq: Sequence[StationaryProfile]):
    """Exact joint law of the copies: per-branch independent stop lotteries."""
    exact = t.exact and all(_exact(a.p1.on(t) + a.p2.on(t)) for a in seq)
    conv = as_fraction if exact else float
    n = len(seq)
    zero = conv(0)
    e_n2, e_n2w = zero, zero
    overlaps = [zero] * n
    pi_any = zero
    for path, pb in _branches(t):
        pb = conv(pb)
        stop = []
        for a in seq:
            survive = conv(1)
            for s in path:
                survive *= (1 - conv(a.p1(s))) * (1 - conv(a.p2(s)))
            stop.append(1 - survive)
        # Poisson-binomial law of the number of stopping copies
        law = [conv(1)] + [zero] * n
        for k, q in enumerate(stop):
            none_before = conv(1)
            for l in range(k):
                none_before *= 1 - stop[l]
            overlaps[k] += pb * q * (1 - none_before)
            law = [law[m] * (1 - q) + (law[m - 1] * q if m else zero) for m in range(n + 1)]
        e_n2 += pb * sum(m * law[m] for m in range(2, n + 1))
        e_n2w += pb * sum((m + 1) * law[m] for m in range(2, n + 1))
        pi_any += pb * (1 - law[0])
    return e_n2, e_n2w, tuple(overlaps), pi_any


def union_bounds_report(t: GameTree, seq: Sequence[StationaryProfile], delta) -> UnionBoundsReport:
    verdict = is_orthogonal(t, seq, delta)
    if not verdict.ok:
        raise ValueError(f"sequence is not {delta}-orthogonal: witness {verdict.witness}")
    stats = [round_stats(t, a) for a in seq]
    total = round_stats(t, union_profiles(seq))
    e_n2, e_n2w, overlaps, pi_any = copies_statistics(t, seq)
    sp = sum(s.pi for s in stats)
    q = []

    def add(name, lhs, rhs):
        q.append(Inequality(name, lhs, rhs, leq(lhs, rhs)))

    add("union_pi_equals_copies_any_stop_upper", total.pi, pi_any)
    add("union_pi_equals_copies_any_stop_lower", pi_any, total.pi)
    add("union_pi_lower_by_excess_count", sp - e_n2, total.pi)
    add("union_pi_at_most_sum", total.pi, sp)
    for i in range(2):
        sr = sum(s.rho[i] for s in stats)
        add(f"union_rho{i + 1}_lower_by_excess_weight", sr - e_n2w, total.rho[i])
        add(f"union_rho{i + 1}_upper_by_excess_weight", total.rho[i], sr + e_n2w)
        add(f"union_rho{i + 1}_lower_3delta", sr - 3 * delta * sp, total.rho[i])
        add(f"union_rho{i + 1}_upper_3delta", total.rho[i], sr + 3 * delta * sp)
        add(f"union_gamma{i + 1}_lower_6delta", sr - 6 * delta * sp, total.gamma[i] * sp)
        add(f"union_gamma{i + 1}_upper_6delta", total.gamma[i] * sp, sr + 6 * delta * sp)
        lo = min(s.gamma[i] for s in stats)
        hi = max(s.gamma[i] for s in stats)
        add(f"union_gamma{i + 1}_above_min_component", lo - 6 * delta, total.gamma[i])
        add(f"union_gamma{i + 1}_below_max_component", total.gamma[i], hi + 6 * delta)
    for k, ov in enumerate(overlaps):
        add(f"overlap_copy{k + 1}_at_most_delta_pi", ov, delta * stats[k].pi)
    add("excess_weight_at_most_3delta_sum", e_n2w, 3 * delta * sp)
    add("union_pi_lower_3delta", (1 - 3 * delta) * sp, total.pi)
    return UnionBoundsReport(tuple(s.pi for s in stats), tuple(s.rho for s in stats), total.pi, total.rho,
                             total.gamma, e_n2, e_n2w, overlaps, tuple(q))


# -- rectangles and covering -----------------------------------------------------

@dataclass(frozen=True)
class Rectangle:
    a1: object
    a2: object
    eps: object

    def box(self) -> Box:
        return Box(float(self.a1), float(self.a1 + self.eps), float(self.a2), float(self.a2 + self.eps))

    def contains(self, g, tol: float = TOL) -> bool:
        return self.box().contains(g, tol)

    def is_bad(self, rbar) -> bool:
        return self.a1 >= rbar[0] - self.eps and self.a2 >= rbar[1] - self.eps

    def is_good(self, rbar) -> bool:
        return self.a1 + self.eps <= rbar[0] - self.eps or self.a2 + self.eps <= rbar[1] - self.eps

    def to_dict(self) -> dict:
        return {"a1": str(self.a1), "a2": str(self.a2), "eps": str(self.eps)}


@dataclass(frozen=True)
class Covering:
    bad: tuple
    good: tuple
    rbar: tuple
    eps: object

    def rectangles(self) -> list:
        return list(self.bad) + list(self.good)

    def covers(self, point) -> bool:
        return any(r.contains(point, 0) for r in self.rectangles())


def _anchors(start, stop, eps) -> list:
    """Left corners from ``start`` with step eps until ``stop`` is covered."""
    out, a = [], start
    while True:
        out.append(a)
        if a + eps >= stop:
            return out
        a += eps


def build_covering(rbar, eps) -> Covering:
    """Cover [-1, 1]^2 with eps-squares that are each either good or bad.

    Bad squares tile [R1 - eps, 1] x [R2 - eps, 1].  A point outside that
    region has some coordinate below R^i - eps; it is covered by a good square
    anchored at or below R^i - 2 eps in that coordinate.
    """
    r1, r2 = (as_fraction(v) for v in rbar)
    e = as_fraction(eps)
    if e <= 0:
        raise ValueError("eps must be positive")
    if max(r1, r2) <= 0 or not (-1 <= r1 <= 1 and -1 <= r2 <= 1):
        raise ValueError("rbar must lie in [-1, 1]^2 with a positive component")
    bad = [Rectangle(a1, a2, e) for a2 in _anchors(r2 - e, 1, e) for a1 in _anchors(r1 - e, 1, e)]
    good = []
    # Strip where the first coordinate is below R1 - eps: full height, anchors capped at R1 - 2 eps.
    if r1 - e > -1:
        cols = [min(a, r1 - 2 * e) for a in _anchors(-1, r1 - e, e)]
        rows = _anchors(-1, 1, e)
        good += [Rectangle(a1, a2, e) for a2 in rows for a1 in dict.fromkeys(cols)]
    # Remaining strip: first coordinate >= R1 - eps, second below R2 - eps.
    if r2 - e > -1:
        rows = [min(a, r2 - 2 * e) for a in _anchors(-1, r2 - e, e)]
        cols = _anchors(r1 - e, 1, e)
        good += [Rectangle(a1, a2, e) for a2 in dict.fromkeys(rows) for a1 in cols]
    cov = Covering(tuple(bad), tuple(good), (r1, r2), e)
    for r in cov.bad:
        assert r.is_bad(cov.rbar)
    for r in cov.good:
        assert r.is_good(cov.rbar)
    return cov


def covering_gaps(cov: Covering, samples: int = 41) -> list:
    """Sample points of [-1, 1]^2 (grid plus rectangle corners) not covered."""
    pts = [(Fraction(-1) + Fraction(2 * i, samples - 1), Fraction(-1) + Fraction(2 * j, samples - 1))
           for i in range(samples) for j in range(samples)]
    for r in cov.rectangles():
        for dx in (0, r.eps):
            for dy in (0, r.eps):
                p = (r.a1 + dx, r.a2 + dy)
                if -1 <= p[0] <= 1 and -1 <= p[1] <= 1:
                    pts.append(p)
    return [p for p in pts if not cov.covers(p)]


# -- equilibrium accretion ----------------------------------------------------------

def accretion_eps_limit(k: int) -> Fraction:
    return Fraction(1, 36 * k * k)


def subgames(t: GameTree, budget: int) -> list:
    """Subgames of ``t`` (trims at antichains), largest first, at most ``budget``."""
    out = [t]
    seen = {frozenset()}
    frontier = [frozenset()]
    while frontier and len(out) < budget:
        nxt = []
        for cut in frontier:
            for s in t.internal:
                if s in cut or any(a in cut for a in t.ancestors(s)):
                    continue
                new = frozenset([c for c in cut if s not in t.ancestors(c)] + [s])
                if new in seen:
                    continue
                seen.add(new)
                nxt.append(new)
        trees = sorted(((trim(t, cut), cut) for cut in nxt), key=lambda e: (-len(e[0].order), sorted(map(repr, e[1]))))
        for sub, cut in trees:
            if len(out) >= budget:
                break
            out.append(sub)
        frontier = [cut for _, cut in trees]
    out.sort(key=lambda s: -len(s.order))
    return out


@dataclass(frozen=True)
class AccretionResult:
    d: frozenset
    profile: StationaryProfile
    steps: tuple                 # the accreted pairs in order
    certificate: dict
    searched_subgames: int

    @property
    def ok(self) -> bool:
        return self.certificate["ok"]


def _certify_accretion(t: GameTree, d, prof, rect: Rectangle, eps, steps) -> dict:
    cert = {"d_empty": not d, "checks": []}
    if d:
        stats = round_stats(t, prof)
        br1 = best_response(t, prof.p2, 1).value
        br2 = best_response(t, prof.p1, 2).value
        pd = branch_prob(t, d)
        checks = [
            ("gamma1_floor", rect.a1 - eps, stats.gamma[0]),
            ("gamma2_floor", rect.a2 - eps, stats.gamma[1]),
            ("termination_vs_heavy_mass", eps * eps * pd, stats.pi),
            ("deviation1_cap", br1, rect.a1 + 8 * eps),
            ("deviation2_cap", br2, rect.a2 + 8 * eps),
        ]
        cert["checks"] = [{"name": n, "lhs": str(a), "rhs": str(b), "holds": leq(a, b, 1e-9)} for n, a, b in checks]
        cert["gamma"] = [str(v) for v in stats.gamma]
        cert["pi"] = str(stats.pi)
        cert["heavy_mass"] = str(pd)
        cert["gains"] = [str(br1 - stats.gamma[0]), str(br2 - stats.gamma[1])]
        cert["steps"] = len(steps)
    cert["ok"] = all(c["holds"] for c in cert["checks"])
    return cert


def accrete_equilibria(t: GameTree, rect: Rectangle, eps, *, rbar=None, subgame_budget: int = 16,
                       max_steps: int = 50, check_range: bool = True, **search) -> AccretionResult:
    """Keep adding strongly orthogonal eps-equilibria with payoff in ``rect``.

    Each round searches the subgames of the current trimmed tree (largest
    first) for a stationary eps-equilibrium whose payoff lies in ``rect``,
    unions it in and trims at the eps^2-heavy nodes of the running union.
    Returns the final heavy set D, the union profile and a certificate.
    """
    if check_range and not 0 < eps < accretion_eps_limit(t.k):
        raise ValueError(f"eps={eps} outside (0, 1/(36 K^2)) for K={t.k}")
    if rbar is not None and not rect.is_bad(rbar):
        raise ValueError("rectangle is not bad for rbar")
    eps2 = eps * eps
    current = t
    steps = []
    union = StationaryProfile.never()
    heavy = frozenset()
    scanned = 0
    while len(steps) < max_steps and not current.is_trivial:
        found = None
        for sub in subgames(current, subgame_budget):
            if sub.is_trivial:
                continue
            scanned += 1
            res = find_stationary_equilibrium(sub, eps, rect, **search)
            if res.found:
                found = res.profile
                break
        if found is None:
            break
        steps.append(found)
        union = union_profiles([union, found])
        new_heavy = heavy_set(t, union, eps2).nodes
        heavy = new_heavy
        current = trim(t, [s for s in heavy if s in t.payoff])
    cert = _certify_accretion(t, heavy, union, rect, eps, steps)
    cert["subgames_scanned"] = scanned
    cert["exhausted"] = len(steps) < max_steps
    return AccretionResult(heavy, union, tuple(steps), cert, scanned)


# -- coloring -------------------------------------------------------------------------

@dataclass(frozen=True)
class ColorResult:
    status: str                  # "colored", "empty" or "incomplete"
    color: int | None            # index into the covering's good rectangles
    lambdas: tuple
    per_j_profiles: tuple
    final_profile: StationaryProfile | None
    trimmed_games: tuple
    certificates: tuple

    def to_dict(self, cov: Covering | None = None) -> dict:
        doc = {
            "status": self.status,
            "color": self.color,
            "lambdas": [str(v) for v in self.lambdas],
            "final_profile": self.final_profile.to_dict() if self.final_profile else None,
            "trimmed_sizes": [len(g.order) for g in self.trimmed_games],
        }
        if cov is not None and self.color is not None:
            doc["color_rectangle"] = cov.good[self.color].to_dict()
        return doc


def _hull(points: list) -> list:
    """Convex hull (monotone chain), counter-clockwise; degenerate inputs give 1 or 2 points."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _clip(poly: list, inside, cut) -> list:
    out = []
    for i, cur in enumerate(poly):
        prev = poly[i - 1]
        if inside(cur):
            if not inside(prev):
                out.append(cut(prev, cur))
            out.append(cur)
        elif inside(prev):
            out.append(cut(prev, cur))
    return out


def _box_reachable(t: GameTree, box: Box) -> bool:
    """Necessary condition: the box meets the convex hull of the terminal payoffs.

    Every round payoff gamma is a convex combination of the stop outcomes, so
    a rectangle missing the hull cannot hold an equilibrium payoff.
    """
    pts = []
    for s in t.internal:
        v = [float(u) for u in t.payoff[s].values()]
        pts += [(v[0], v[1]), (v[2], v[3]), (v[4], v[5])]
    poly = _hull(pts)
    if len(poly) == 1:
        poly = poly * 2
    for axis, bound, lower in ((0, box.lo1 - TOL, True), (0, box.hi1 + TOL, False),
                               (1, box.lo2 - TOL, True), (1, box.hi2 + TOL, False)):
        def inside(p, axis=axis, bound=bound, lower=lower):
            return p[axis] >= bound if lower else p[axis] <= bound

        def cut(p, q, axis=axis, bound=bound):
            lam = (bound - p[axis]) / (q[axis] - p[axis])
            return tuple(p[j] + lam * (q[j] - p[j]) for j in range(2))

        poly = _clip(poly, inside, cut)
        if not poly:
            return False
    return True


def color_tree(t: GameTree, cov: Covering, eps, *, subgame_budget: int = 8, **search) -> ColorResult:
    """Attach a good rectangle (or the empty color) to a tree.

    Runs the accretion procedure for every bad rectangle in order, chaining
    the trims, then looks for an eps/2-equilibrium of the final trimmed game.
    """
    games = [t]
    lambdas, profiles, certs = [], [], []
    for rect in cov.bad:
        prev = games[-1]
        if prev.is_trivial or not _box_reachable(prev, rect.box()):
            games.append(prev)
            lambdas.append(0)
            profiles.append(None)
            certs.append({"skipped": True})
            continue
        res = accrete_equilibria(prev, rect, eps, subgame_budget=subgame_budget, check_range=False, **search)
        nxt = trim(prev, [s for s in res.d if s in prev.payoff]) if res.d else prev
        games.append(nxt)
        lambdas.append(leaf_passage_prob(t, nxt, prev) if res.d else 0)
        profiles.append(res.profile if res.d else None)
        certs.append(res.certificate)
    final = games[-1]
    if final.is_trivial:
        return ColorResult("empty", None, tuple(lambdas), tuple(profiles), None, tuple(games), tuple(certs))
    res = find_stationary_equilibrium(final, eps / 2, **search)
    if not res.found:
        return ColorResult("incomplete", None, tuple(lambdas), tuple(profiles), None, tuple(games), tuple(certs))
    g = res.stats.gamma
    color = next((i for i, r in enumerate(cov.good) if r.contains(g)), None)
    if color is None:
        return ColorResult("incomplete", None, tuple(lambdas), tuple(profiles), res.profile, tuple(games),
                           tuple(certs))
    return ColorResult("colored", color, tuple(lambdas), tuple(profiles), res.profile, tuple(games), tuple(certs))


def punishment_mass_holds(t: GameTree, prof: StationaryProfile, rbar, eps) -> tuple:
    """For an eps/2-equilibrium with gamma^1 <= R^1 - eps: pi(0, y) >= eps/6 * mu1."""
    from .tree_game import mu1

    lhs = round_stats(t, StationaryProfile(StationaryStrategy.never(), prof.p2)).pi
    rhs = eps / 6 * mu1(t, rbar)
    return leq(rhs, lhs), lhs, rhs
