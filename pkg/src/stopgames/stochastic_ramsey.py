"""Colorings of (stage, stopping time) pairs and monochromatic chains of stopping times.

A coloring assigns a color to every stage-n atom and every stopping time
that is larger than n on that atom.  It is consistent when the color only
depends on the stopping time's values inside the atom.  ``ramsey_chain``
builds increasing stopping times whose consecutive colors agree with high
probability: colors are peeled off one at a time, splitting the space at a
stage N into a part that chains the first color and a part that never sees
it, and recursing on the second part along a time-changed filtration.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence

from .filtration_game import FiltrationModel, StoppingTime
from .tree_game import SCHEMA_VERSION

Color = Hashable
VOID = None  # color of a link that cannot be formed (horizon reached)


# -- colorings ------------------------------------------------------------------

def subtree_stopping_times(m: FiltrationModel, n: int, a: int, limit: int = 2000):
    """Stopping times on atom (n, a) that are > n there, as {point: stage}; shallow first."""

    def options(k: int, b: int, budget: int) -> list:
        out = []
        if k > n:
            out.append({w: k for w in m.partitions[k][b]})
        if k < m.horizon and len(out) < budget:
            kid_opts = [options(k + 1, c, budget) for c in m.kids[k][b]]
            for combo in itertools.islice(itertools.product(*kid_opts), budget - len(out)):
                merged = {}
                for part in combo:
                    merged.update(part)
                out.append(merged)
        return out

    return options(n, a, limit)


def _fill(m: FiltrationModel, partial: Mapping[int, int], default: int | None = None) -> StoppingTime:
    default = m.horizon if default is None else default
    return StoppingTime(tuple(partial.get(w, default) for w in range(m.n_points)))


def first_hit(m: FiltrationModel, n: int, a: int, targets: set) -> dict:
    """{point: first stage k > n with (k, atom) in targets} on atom (n, a).

    Points that never hit stop at the first stage where their atom can no
    longer reach a target, which keeps the result adapted.
    """
    out = {}
    for w in m.partitions[n][a]:
        for k in range(n + 1, m.horizon + 1):
            b = m.labels[k][w]
            if (k, b) in targets or not _reachable(m, k, b, targets):
                out[w] = k
                break
        else:
            out[w] = m.horizon
    return out


def _reachable(m: FiltrationModel, k: int, b: int, targets: set) -> bool:
    """Whether some target (j, c) with j >= k lies inside atom (k, b)."""
    if (k, b) in targets:
        return True
    atom = set(m.partitions[k][b])
    return any(j > k and m.partitions[j][c][0] in atom for j, c in targets)


class NTColoring:
    """Base class.  Subclasses implement ``color``; ``witness`` may be overridden."""

    colors: tuple = ()
    tau_independent: bool = False
    witness_budget: int = 2000
    candidate_gaps: int = 0     # > 0: only try the deterministic times n+1 .. n+gaps

    def color(self, m: FiltrationModel, n: int, a: int, tau: StoppingTime) -> Color:
        raise NotImplementedError

    def witness(self, m: FiltrationModel, n: int, a: int, color: Color, prefer: set | None = None):
        """A stopping time sigma > n on atom (n, a) with that color there, or None.

        ``prefer`` lists (stage, atom) pairs where landing is useful for a
        later link; among witnesses the one landing there most often wins.
        """
        if self.tau_independent:
            probe = _fill(m, {w: n + 1 for w in m.partitions[n][a]})
            if self.color(m, n, a, probe) != color:
                return None
            if prefer:
                return _fill(m, first_hit(m, n, a, prefer))
            return probe
        if self.candidate_gaps:
            for d in range(1, self.candidate_gaps + 1):
                if n + d > m.horizon:
                    break
                sig = _fill(m, {w: n + d for w in m.partitions[n][a]})
                if self.color(m, n, a, sig) == color:
                    return sig
            return None
        best, best_score = None, -1
        for partial in subtree_stopping_times(m, n, a, self.witness_budget):
            tau = _fill(m, partial)
            if self.color(m, n, a, tau) != color:
                continue
            if not prefer:
                return tau
            score = sum(m.prob[w] for w, k in partial.items() if (k, m.labels[k][w]) in prefer)
            if score > best_score:
                best, best_score = tau, score
        return best

    def to_dict(self) -> dict:
        return {"kind": type(self).__name__, "colors": [str(c) for c in self.colors]}


@dataclass
class LookupColoring(NTColoring):
    """Color depends only on the stage and the atom: table[(n, a)]."""

    table: Mapping
    colors: tuple = ()
    tau_independent = True

    def __post_init__(self):
        if not self.colors:
            self.colors = tuple(sorted(set(self.table.values()), key=str))

    def color(self, m, n, a, tau):
        return self.table[(n, a)]

    def to_dict(self) -> dict:
        doc = super().to_dict()
        doc["table"] = {f"{n}:{a}": str(c) for (n, a), c in sorted(self.table.items())}
        return doc


@dataclass
class ConstantColoring(NTColoring):
    value: Color = "red"
    tau_independent = True

    def __post_init__(self):
        self.colors = (self.value,)

    def color(self, m, n, a, tau):
        return self.value


@dataclass
class MarkedColoring(NTColoring):
    """Color of the highest-priority mark hit by tau inside the atom.

    ``marks`` maps (stage, atom) to a color; ``colors`` is ordered by priority,
    highest first, and the last color is the one used when no mark is hit.
    """

    marks: Mapping
    colors: tuple = ("red", "blue")

    def _rank(self, c) -> int:
        return len(self.colors) - 1 - self.colors.index(c)

    def color(self, m, n, a, tau):
        best = 0
        for w in m.partitions[n][a]:
            k = tau(w)
            mark = self.marks.get((k, m.labels[k][w]))
            if mark is not None and k > n:
                best = max(best, self._rank(mark))
        return self.colors[len(self.colors) - 1 - best]

    def witness(self, m, n, a, color, prefer=None):
        """Exact backward search: avoid higher marks and hit the requested one.

        Among all witnesses, returns one maximizing the mass that stops in
        ``prefer``.
        """
        ci = self._rank(color)
        H = m.horizon
        prefer = prefer or set()
        NONE = None
        avoid, hit = {}, {}   # (k, b) -> (score, choice) or NONE
        inside = set(m.partitions[n][a])
        for k in range(H, n, -1):
            for b in m.atoms(k):
                if m.partitions[k][b][0] not in inside:
                    continue
                here = self._rank(self.marks[(k, b)]) if (k, b) in self.marks else 0
                gain = m.atom_prob[k][b] if (k, b) in prefer else 0
                kids = m.kids[k][b] if k < H else ()
                go = None
                if kids and all(avoid[(k + 1, c)] is not NONE for c in kids):
                    go = sum(avoid[(k + 1, c)][0] for c in kids)
                opts = []
                if here <= ci:
                    opts.append((gain, "stop"))
                if go is not None:
                    opts.append((go, "go"))
                avoid[(k, b)] = max(opts, key=lambda o: o[0]) if opts else NONE
                opts = []
                if here == ci:
                    opts.append((gain, "stop"))
                if go is not None:
                    extra = [(hit[(k + 1, c)][0] - avoid[(k + 1, c)][0], c) for c in kids
                             if hit[(k + 1, c)] is not NONE]
                    if extra:
                        d, c = max(extra, key=lambda e: e[0])
                        opts.append((go + d, ("go", c)))
                hit[(k, b)] = max(opts, key=lambda o: o[0]) if opts else NONE
        kids = m.kids[n][a] if n < H else ()
        if not kids or any(avoid[(n + 1, c)] is NONE for c in kids):
            return None
        target = None
        if ci > 0:
            extra = [(hit[(n + 1, c)][0] - avoid[(n + 1, c)][0], c) for c in kids if hit[(n + 1, c)] is not NONE]
            if not extra:
                return None
            target = max(extra, key=lambda e: e[0])[1]
        partial = {}

        def build(k, b, need_hit):
            choice = (hit if need_hit else avoid)[(k, b)][1]
            if choice == "stop":
                for w in m.partitions[k][b]:
                    partial[w] = k
                return
            want = choice[1] if need_hit else None
            for c in m.kids[k][b]:
                build(k + 1, c, c == want)

        for c in kids:
            build(n + 1, c, c == target)
        return _fill(m, partial)

    def to_dict(self) -> dict:
        doc = super().to_dict()
        doc["marks"] = {f"{k}:{b}": str(c) for (k, b), c in sorted(self.marks.items())}
        return doc


@dataclass
class FunctionColoring(NTColoring):
    """Wraps ``fn(m, n, a, tau) -> color``; consistency is not guaranteed."""

    fn: Callable
    colors: tuple = ()

    def color(self, m, n, a, tau):
        return self.fn(m, n, a, tau)


# -- consistency -------------------------------------------------------------------

@dataclass(frozen=True)
class ConsistencyVerdict:
    consistent: bool
    checked: int
    witness: tuple | None = None   # (n, a, tau1, tau2, color1, color2)


def _random_extension(m: FiltrationModel, n: int, rng: random.Random) -> dict:
    """Random stopping time >= n: each stage-n atom stops at n or somewhere later."""
    out = {}

    def go(k, b):
        if k == m.horizon or (k > n and rng.random() < 0.4):
            for w in m.partitions[k][b]:
                out[w] = k
            return
        for c in m.kids[k][b]:
            go(k + 1, c)

    for b in m.atoms(n):
        if n < m.horizon and rng.random() < 0.3:
            for w in m.partitions[n][b]:
                out[w] = n
        else:
            go(n, b)
    return out


def check_consistency(m: FiltrationModel, col: NTColoring, sample_budget: int = 200,
                      seed: int = 0) -> ConsistencyVerdict:
    """Search for two stopping times that agree on an atom but get different colors there.

    Atoms with few stopping times are searched exhaustively against random
    outside values; larger ones use random pairs, up to ``sample_budget``.
    """
    rng = random.Random(seed)
    checked = 0
    for n in range(m.horizon):
        for a in m.atoms(n):
            inside = subtree_stopping_times(m, n, a, limit=16)
            for partial in inside:
                for _ in range(max(1, sample_budget // (len(inside) * max(1, m.horizon)))):
                    out1 = _random_extension(m, n, rng)
                    out2 = _random_extension(m, n, rng)
                    out1.update(partial)
                    out2.update(partial)
                    t1, t2 = _fill(m, out1), _fill(m, out2)
                    c1, c2 = col.color(m, n, a, t1), col.color(m, n, a, t2)
                    checked += 1
                    if c1 != c2:
                        return ConsistencyVerdict(False, checked, (n, a, t1, t2, c1, c2))
    return ConsistencyVerdict(True, checked)


# -- chains ----------------------------------------------------------------------

def link_colors(m: FiltrationModel, col: NTColoring, start: StoppingTime, end: StoppingTime) -> list:
    """Per point: color of the link from ``start`` to ``end`` (VOID where end <= start)."""
    out = [VOID] * m.n_points
    for n, a in start.start_atoms(m):
        pts = m.partitions[n][a]
        if n >= m.horizon or any(end(w) <= n for w in pts):
            continue
        c = col.color(m, n, a, end)
        for w in pts:
            out[w] = c
    return out


def chain_probability(m: FiltrationModel, col: NTColoring, times: Sequence[StoppingTime],
                      all_pairs: bool = True) -> tuple:
    """(P(consecutive links share one color), P(every pair of times has the first link's color)).

    With ``all_pairs=False`` the second entry is None (it colors every pair of
    times, which can be costly).
    """
    if len(times) < 2:
        raise ValueError("a chain needs at least two stopping times")
    for t in times:
        t.check(m)
    for s, t in zip(times, times[1:]):
        if not all(a < b for a, b in zip(s.values, t.values)):
            raise ValueError("chain times must be strictly increasing")
    links = [link_colors(m, col, s, t) for s, t in zip(times, times[1:])]
    cons = sum((m.prob[w] for w in range(m.n_points)
                if links[0][w] is not VOID and all(lk[w] == links[0][w] for lk in links)), 0 * m.prob[0])
    if not all_pairs:
        return cons, None
    pairs = [link_colors(m, col, times[i], times[j])
             for i in range(len(times)) for j in range(i + 1, len(times))]
    allp = sum((m.prob[w] for w in range(m.n_points)
                if links[0][w] is not VOID and all(p[w] == links[0][w] for p in pairs)), 0 * m.prob[0])
    return cons, allp


def _consecutive_ok(m, col, times) -> list:
    links = [link_colors(m, col, s, t) for s, t in zip(times, times[1:])]
    return [links[0][w] is not VOID and all(lk[w] == links[0][w] for lk in links) for w in range(m.n_points)]


def repair_chain(m: FiltrationModel, times: Sequence[StoppingTime]) -> list:
    """Cap and push times so that they are strictly increasing and within the horizon.

    Both operations (min with a constant, max with the previous time plus one)
    keep the stopping-time property.
    """
    L = len(times) - 1
    H = m.horizon
    out = []
    prev = None
    for i, t in enumerate(times):
        vals = [min(v, H - L + i) for v in t.values]
        if prev is not None:
            vals = [max(v, p + 1) for v, p in zip(vals, prev)]
        prev = vals
        out.append(StoppingTime(tuple(vals)))
    return out


# -- the two-color split ------------------------------------------------------------

@dataclass(frozen=True)
class RedSets:
    red: frozenset          # (n, a) atoms admitting a red continuation
    witnesses: dict         # (n, a) -> StoppingTime


def maximal_red_set(m: FiltrationModel, col: NTColoring, n: int, red: Color,
                    prefer: set | None = None) -> tuple:
    """(red stage-n atom indices, witness stopping time defined on them).

    The witness equals the per-atom witness on red atoms and the horizon
    elsewhere.  Atoms outside the red set admit no red continuation (exact
    for colorings with an exact ``witness``).
    """
    if n >= m.horizon:
        raise ValueError("need n < horizon")
    atoms, partial = [], {}
    for a in m.atoms(n):
        sig = col.witness(m, n, a, red, prefer)
        if sig is None:
            continue
        atoms.append(a)
        for w in m.partitions[n][a]:
            partial[w] = sig(w)
    return frozenset(atoms), _fill(m, partial)


def _red_structure(m: FiltrationModel, col: NTColoring, red: Color) -> RedSets:
    reds = set()
    for n in range(m.horizon):
        for a in m.atoms(n):
            probe = col.witness(m, n, a, red)
            if probe is not None:
                reds.add((n, a))
    wit = {}
    for n, a in sorted(reds):
        wit[(n, a)] = col.witness(m, n, a, red, prefer={x for x in reds if x[0] > n})
    return RedSets(frozenset(reds), wit)


def _red_chain(m: FiltrationModel, rs: RedSets, N: int, links: int) -> list:
    """tau_0 = first red atom at or after N; tau_{k+1} = witness of tau_k (or tau_k + 1)."""
    H = m.horizon
    t0 = []
    for w in range(m.n_points):
        v = next((k for k in range(N, H) if (k, m.labels[k][w]) in rs.red), H)
        t0.append(v)
    times = [StoppingTime(tuple(t0))]
    for _ in range(links):
        prev = times[-1]
        nxt = []
        for w in range(m.n_points):
            k = prev(w)
            if k >= H:
                nxt.append(H)
                continue
            key = (k, m.labels[k][w])
            nxt.append(rs.witnesses[key](w) if key in rs.red else k + 1)
        times.append(StoppingTime(tuple(nxt)))
    return times


def _blue_hits(m: FiltrationModel, rs: RedSets, N: int, count: int) -> list:
    """Successive visits to non-red atoms from stage N on; the horizon when they run out."""
    H = m.horizon
    times, cur = [], None
    for j in range(count + 1):
        vals = []
        for w in range(m.n_points):
            lo = N if cur is None else cur[w] + 1
            if cur is not None and cur[w] >= H:
                vals.append(H)
                continue
            v = next((k for k in range(lo, H) if (k, m.labels[k][w]) not in rs.red), H)
            vals.append(v)
        cur = vals
        times.append(StoppingTime(tuple(vals)))
    return times


@dataclass(frozen=True)
class SplitResult:
    N: int
    red_atoms: frozenset        # stage-N atom indices chained in the first color
    blue_atoms: frozenset       # their complement
    taus: tuple                 # chain on both parts (links + 1 stopping times)
    achieved: tuple             # (P(red chain | red part), P(all pairs avoid red | blue part))
    horizon_limited: bool

    def to_dict(self) -> dict:
        return {"N": self.N, "red_atoms": sorted(self.red_atoms), "blue_atoms": sorted(self.blue_atoms),
                "taus": [list(t.values) for t in self.taus], "achieved": [str(p) for p in self.achieved],
                "horizon_limited": self.horizon_limited}


def _two_color(col: NTColoring, red: Color) -> NTColoring:
    return _Abstracted(col, red)


class _Abstracted(NTColoring):
    """Red versus everything else (one fictitious color)."""

    def __init__(self, base: NTColoring, red: Color):
        self.base, self.red = base, red
        self.colors = ("other", red)
        self.tau_independent = base.tau_independent
        self.witness_budget = base.witness_budget
        self.candidate_gaps = base.candidate_gaps

    def color(self, m, n, a, tau):
        c = self.base.color(m, n, a, tau)
        return c if c == self.red or c is VOID else "other"

    def witness(self, m, n, a, color, prefer=None):
        if color == self.red:
            return self.base.witness(m, n, a, color, prefer)
        return NTColoring.witness(self, m, n, a, color, prefer)


def _conditional(m: FiltrationModel, ok: Sequence[bool], atoms_at_N: Iterable[int], N: int):
    pts = [w for a in atoms_at_N for w in m.partitions[N][a]]
    mass = sum((m.prob[w] for w in pts), 0 * m.prob[0])
    if not pts:
        return Fraction(1)
    return sum((m.prob[w] for w in pts if ok[w]), 0 * m.prob[0]) / mass


def red_blue_split(m: FiltrationModel, col: NTColoring, red: Color, eps, links: int = 2,
                   N: int | None = None) -> SplitResult:
    """Split at stage N into a red-chained part and a part where no link is red.

    Every stage-N atom goes to the side with the larger success probability.
    With ``N=None`` every feasible N is tried and the best total is kept.
    """
    if links < 1 or links > m.horizon:
        raise ValueError("need 1 <= links <= horizon")
    rs = _red_structure(m, col, red)
    best = None
    for n0 in ([N] if N is not None else range(0, m.horizon - links + 1)):
        red_t = repair_chain(m, _red_chain(m, rs, n0, links))
        blue_t = repair_chain(m, _blue_hits(m, rs, n0, links))
        red_ok = _all_links(m, col, red_t, lambda c: c == red)
        blue_ok = _all_pairs(m, col, blue_t, lambda c: c is not VOID and c != red)
        ra, ba = set(), set()
        for a in m.atoms(n0):
            pts = m.partitions[n0][a]
            r = sum(m.prob[w] for w in pts if red_ok[w])
            b = sum(m.prob[w] for w in pts if blue_ok[w])
            (ra if r > b else ba).add(a)
        total = sum(m.prob[w] for a in ra for w in m.partitions[n0][a] if red_ok[w]) + \
            sum(m.prob[w] for a in ba for w in m.partitions[n0][a] if blue_ok[w])
        if best is None or total > best[0]:
            best = (total, n0, ra, ba, red_t, blue_t, red_ok, blue_ok)
    _, n0, ra, ba, red_t, blue_t, red_ok, blue_ok = best
    on_red = {w for a in ra for w in m.partitions[n0][a]}
    taus = tuple(StoppingTime(tuple(r(w) if w in on_red else b(w) for w in range(m.n_points)))
                 for r, b in zip(red_t, blue_t))
    achieved = (_conditional(m, red_ok, ra, n0), _conditional(m, blue_ok, ba, n0))
    limited = any(p <= 1 - eps for p in achieved)
    return SplitResult(n0, frozenset(ra), frozenset(ba), taus, achieved, limited)


def _all_links(m, col, times, pred) -> list:
    links = [link_colors(m, col, s, t) for s, t in zip(times, times[1:])]
    return [all(pred(lk[w]) for lk in links) for w in range(m.n_points)]


def _all_pairs(m, col, times, pred) -> list:
    ok = [True] * m.n_points
    for i in range(len(times)):
        for j in range(i + 1, len(times)):
            cs = link_colors(m, col, times[i], times[j])
            ok = [o and pred(c) for o, c in zip(ok, cs)]
    return ok


# -- time change ------------------------------------------------------------------------

def time_changed_model(m: FiltrationModel, points: Sequence[int], taus: Sequence[StoppingTime]) -> tuple:
    """Model on ``points`` whose stage-j information is the atom of the j-th stopping time.

    Returns (model, point map new -> old).
    """
    pts = sorted(points)
    mass = sum(m.prob[w] for w in pts)
    prob = tuple(m.prob[w] / mass for w in pts)
    parts = []
    for t in taus:
        groups = {}
        for i, w in enumerate(pts):
            k = t(w)
            groups.setdefault((k, m.labels[k][w]), []).append(i)
        parts.append(tuple(tuple(g) for g in groups.values()))
    # joins keep refinement even where a time is stuck at the horizon
    refined = []
    prev = None
    for stage in parts:
        if prev is not None:
            lab = {i: j for j, atom in enumerate(prev) for i in atom}
            split = {}
            for atom in stage:
                for i in atom:
                    split.setdefault((lab[i], atom), []).append(i)
            stage = tuple(tuple(g) for g in split.values())
        refined.append(stage)
        prev = stage
    return FiltrationModel(prob, tuple(refined)), pts


class _TimeChanged(NTColoring):
    """Coloring of the time-changed model with one color swapped for another."""

    def __init__(self, base: NTColoring, m: FiltrationModel, pmap: Sequence[int], taus: Sequence[StoppingTime],
                 swap_from: Color, swap_to: Color, colors: tuple):
        self.base, self.m, self.pmap, self.taus = base, m, list(pmap), list(taus)
        self.swap_from, self.swap_to = swap_from, swap_to
        self.colors = colors
        self.tau_independent = base.tau_independent
        self.witness_budget = min(base.witness_budget, 256)
        self.candidate_gaps = base.candidate_gaps

    def color(self, g, j, a, beta):
        pts = g.partitions[j][a]
        w0 = self.pmap[pts[0]]
        k = self.taus[j](w0)
        if k >= self.m.horizon:
            return VOID
        vals = [self.m.horizon] * self.m.n_points
        for i in pts:
            bj = min(beta(i), len(self.taus) - 1)
            vals[self.pmap[i]] = self.taus[bj](self.pmap[i])
        if any(vals[self.pmap[i]] <= k for i in pts):
            return VOID
        c = self.base.color(self.m, k, self.m.labels[k][w0], StoppingTime(tuple(vals)))
        return self.swap_to if c == self.swap_from else c


# -- chains ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainResult:
    times: tuple
    mono_prob: Any
    all_pairs_prob: Any
    color_map: dict                 # point -> color of its first link
    horizon_limited: bool
    level_reports: tuple = ()       # per recursion level: (red color, N, achieved pair)

    def to_dict(self) -> dict:
        return {
            "schema": "chain_result",
            "version": SCHEMA_VERSION,
            "times": [list(t.values) for t in self.times],
            "mono_prob": str(self.mono_prob),
            "all_pairs_prob": None if self.all_pairs_prob is None else str(self.all_pairs_prob),
            "color_map": {str(w): str(c) for w, c in sorted(self.color_map.items())},
            "horizon_limited": self.horizon_limited,
            "levels": [{"red": str(r), "N": n, "achieved": [str(p) for p in ach]}
                       for r, n, ach in self.level_reports],
        }


def _chain_core(m: FiltrationModel, col: NTColoring, colors: tuple, links: int, eps, reports: list,
                depth: int = 0) -> list:
    H = m.horizon
    if len(colors) <= 1:
        return [StoppingTime.constant(m, i) for i in range(links + 1)]
    red, rest = colors[0], colors[1:]
    rs = _red_structure(m, col, red)
    best = None
    for n0 in range(0, H - links + 1):
        red_t = repair_chain(m, _red_chain(m, rs, n0, links))
        red_ok = _all_links(m, col, red_t, lambda c: c == red)
        hits = _blue_hits(m, rs, n0, H - n0)
        hits = [StoppingTime(tuple(min(v, H) for v in t.values)) for t in hits]
        g, pmap = time_changed_model(m, range(m.n_points), hits)
        swap_to = rest[0]
        sub_col = _TimeChanged(col, m, pmap, hits, red, swap_to, rest)
        sub_links = min(links, g.horizon)
        sub = _chain_core(g, sub_col, rest, sub_links, eps, [], depth + 1) if sub_links >= 1 else None
        if sub is None:
            blue_t = repair_chain(m, hits[:links + 1]) if len(hits) > links else red_t
        else:
            blue_t = []
            for beta in sub:
                blue_t.append(StoppingTime(tuple(hits[min(beta(i), len(hits) - 1)](w) for i, w in enumerate(pmap))))
            while len(blue_t) < links + 1:
                blue_t.append(StoppingTime(tuple(min(v + 1, H) for v in blue_t[-1].values)))
            blue_t = repair_chain(m, blue_t)
        blue_ok = _consecutive_ok(m, col, blue_t)
        ra, ba = set(), set()
        for a in m.atoms(n0):
            pts = m.partitions[n0][a]
            r = sum(m.prob[w] for w in pts if red_ok[w])
            b = sum(m.prob[w] for w in pts if blue_ok[w])
            (ra if r > b else ba).add(a)
        on_red = {w for a in ra for w in m.partitions[n0][a]}
        total = sum(m.prob[w] for w in range(m.n_points) if (red_ok[w] if w in on_red else blue_ok[w]))
        if best is None or total > best[0]:
            times = [StoppingTime(tuple(r(w) if w in on_red else b(w) for w in range(m.n_points)))
                     for r, b in zip(red_t, blue_t)]
            best = (total, n0, times, (_conditional(m, red_ok, ra, n0), _conditional(m, blue_ok, ba, n0)))
        if best[0] == 1:
            break
    reports.append((red, best[1], best[3]))
    return best[2]


def start_colored_chain(m: FiltrationModel, col: NTColoring, links: int = 2) -> list:
    """Best chain when a link's color depends only on its start node.

    For such colorings the chain is monochromatic iff its first ``links``
    start nodes share a color, so backward induction over (node, color,
    starts placed) gives the exact optimum.  Points that never complete a
    chain get the latest times that still fit.
    """
    H = m.horizon
    one, zero = 1 + 0 * m.prob[0], 0 * m.prob[0]
    memo: dict = {}

    def value(n, a, state):
        # state: None before the first start, else (color, starts placed)
        key = (n, a, state)
        if key in memo:
            return memo[key][0]
        if n >= H:
            memo[key] = (zero, False)
            return zero
        kids = m.kids[n][a]

        def cont(nxt):
            return sum((m.cond(n, a, k) * value(n + 1, k, nxt) for k in kids), zero)

        wait = cont(state)
        c = col.color(m, n, a, None)
        here = zero
        if state is None or state[0] == c:
            j = 1 if state is None else state[1] + 1
            here = one if j == links else cont((c, j))
        place = here > 0 and here >= wait
        memo[key] = (max(here, wait), place)
        return memo[key][0]

    for a in m.atoms(0):
        value(0, a, None)
    cols: list = [[] for _ in range(links + 1)]
    for w in range(m.n_points):
        got: list = []
        state = None
        for n in range(H):
            a = m.labels[n][w]
            value(n, a, state)
            if memo[(n, a, state)][1]:
                got.append(n)
                c = col.color(m, n, a, None)
                state = (c, 1 if state is None else state[1] + 1)
                if state[1] == links:
                    got.append(n + 1)
                    break
        for i in range(links + 1):
            cols[i].append(got[i] if i < len(got) else H - links + i)
    return repair_chain(m, [StoppingTime(tuple(v)) for v in cols])


def ramsey_chain(m: FiltrationModel, col: NTColoring, eps, links: int = 2, colors: tuple | None = None,
                 rotate: bool = True, all_pairs: bool = True) -> ChainResult:
    """Increasing stopping times theta_0 < ... < theta_links with matching consecutive colors.

    Colors are peeled off in the order of ``colors`` (default ``col.colors``).
    If that chain is horizon-limited and ``rotate`` is set, the other cyclic
    rotations of the order are tried and the best chain is kept.  Colorings
    that ignore tau then fall back to the exact start-colored search.  The result
    is flagged ``horizon_limited`` when the exact monochromatic probability
    does not exceed 1 - eps.
    """
    if links < 1 or links > m.horizon:
        raise ValueError("need 1 <= links <= horizon")
    colors = tuple(colors if colors is not None else col.colors)
    orders = [colors[i:] + colors[:i] for i in range(len(colors))] if rotate else [colors]
    best = None
    for order in orders or [colors]:
        reports: list = []
        times = repair_chain(m, _chain_core(m, col, order, links, eps, reports))
        for t in times:
            t.check(m)
        mono, allp = chain_probability(m, col, times, all_pairs)
        if best is None or mono > best[1]:
            best = (times, mono, allp, reports)
        if mono > 1 - eps:
            break
    if not best[1] > 1 - eps and col.tau_independent:
        times = start_colored_chain(m, col, links)
        for t in times:
            t.check(m)
        mono, allp = chain_probability(m, col, times, all_pairs)
        if mono > best[1]:
            best = (times, mono, allp, list(best[3]) + [("start-colored", 0, (mono, allp))])
    times, mono, allp, reports = best
    first = link_colors(m, col, times[0], times[1])
    return ChainResult(tuple(times), mono, allp, {w: c for w, c in enumerate(first)},
                       not mono > 1 - eps, tuple(reports))


# -- small models and colorings for tests and the command line ------------------------------------

def binary_model(depth: int, weights: Sequence | None = None, extra: int = 0) -> FiltrationModel:
    """2**depth points split in halves at every stage; ``extra`` trailing stages add no information."""
    npts = 2 ** depth
    prob = tuple(weights) if weights is not None else tuple(Fraction(1, npts) for _ in range(npts))
    parts = []
    for n in range(depth + 1):
        size = npts >> n
        parts.append(tuple(tuple(range(i, i + size)) for i in range(0, npts, size)))
    for _ in range(extra):
        parts.append(parts[-1])
    return FiltrationModel(prob, tuple(parts))


def random_lookup_coloring(m: FiltrationModel, colors: Sequence, rng: random.Random,
                           weights: Sequence | None = None) -> LookupColoring:
    table = {(n, a): rng.choices(list(colors), weights=weights)[0]
             for n in range(m.horizon + 1) for a in m.atoms(n)}
    return LookupColoring(table, tuple(colors))


def random_marked_coloring(m: FiltrationModel, rng: random.Random, density: float = 0.3,
                           colors: tuple = ("red", "blue")) -> MarkedColoring:
    marks = {}
    for n in range(1, m.horizon + 1):
        for a in m.atoms(n):
            if rng.random() < density:
                marks[(n, a)] = rng.choice(colors[:-1])
    return MarkedColoring(marks, tuple(colors))


def brute_force_best_chain(m: FiltrationModel, col: NTColoring, limit: int = 200000) -> tuple:
    """Exhaustive search over chains theta_0 < theta_1 < theta_2.

    Returns (best consecutive probability, number of chains examined).
    """
    all_times = _all_stopping_times(m, limit)
    best, seen = Fraction(0), 0
    color_cache: dict = {}

    def link(s, t):
        key = (s.values, t.values)
        if key not in color_cache:
            color_cache[key] = link_colors(m, col, s, t)
        return color_cache[key]

    for t0 in all_times:
        for t1 in all_times:
            if not all(a < b for a, b in zip(t0.values, t1.values)):
                continue
            l01 = link(t0, t1)
            for t2 in all_times:
                if not all(a < b for a, b in zip(t1.values, t2.values)):
                    continue
                seen += 1
                l12 = link(t1, t2)
                p = sum((m.prob[w] for w in range(m.n_points) if l01[w] is not VOID and l01[w] == l12[w]),
                        Fraction(0))
                if p > best:
                    best = p
    return best, seen


def _all_stopping_times(m: FiltrationModel, limit: int) -> list:
    out = []
    for parts in itertools.product(*[_root_options(m, a, limit) for a in m.atoms(0)]):
        merged = {}
        for p in parts:
            merged.update(p)
        out.append(_fill(m, merged))
        if len(out) >= limit:
            break
    return out


def _root_options(m: FiltrationModel, a: int, limit: int) -> list:
    """All stopping times (values >= 0) restricted to stage-0 atom a."""
    def options(k, b):
        out = [{w: k for w in m.partitions[k][b]}]
        if k < m.horizon:
            kid_opts = [options(k + 1, c) for c in m.kids[k][b]]
            for combo in itertools.islice(itertools.product(*kid_opts), limit):
                merged = {}
                for part in combo:
                    merged.update(part)
                out.append(merged)
        return out

    return options(0, a)


# -- coloring by games on trees ------------------------------------------------------------

class TreeColoring(NTColoring):
    """Color of (n, tau) on an atom: the color of the game on a tree between n and tau.

    The tree comes from the quantized approximation restricted to the atom,
    so the color only reads tau inside the atom.  Colors are "g<i>" for the
    i-th good rectangle, or "empty" / "incomplete".  Witnesses are searched
    among the deterministic times n + 1, ..., n + max_gap only.
    """

    def __init__(self, m: FiltrationModel, r, cov, eps, max_gap: int = 1, subgame_budget: int = 8, **search):
        self.m, self.r, self.cov, self.eps = m, r, cov, eps
        self.max_gap = max_gap
        self.candidate_gaps = max_gap
        self.subgame_budget = subgame_budget
        self.search = search
        self.colors = ()
        self._by_key: dict = {}
        self._by_tree: dict = {}

    def analyse(self, m: FiltrationModel, n: int, a: int, tau: StoppingTime) -> tuple:
        """(approximation, extracted tree, ColorResult) for atom (n, a) up to tau."""
        from .filtration_game import trees_for_start
        from .tree_equilibrium import color_tree

        pts = m.partitions[n][a]
        key = (n, a, tuple(tau(w) for w in pts))
        if key not in self._by_key:
            ap, trees, where = trees_for_start(m, self.r, n, tau, self.eps, within=pts)
            et = trees[where[a]]
            digest = et.tree.digest()
            if digest not in self._by_tree:
                self._by_tree[digest] = color_tree(et.tree, self.cov, self.eps,
                                                   subgame_budget=self.subgame_budget, **self.search)
            self._by_key[key] = (ap, et, self._by_tree[digest])
        return self._by_key[key]

    @staticmethod
    def label(res) -> str:
        return f"g{res.color}" if res.status == "colored" else res.status

    def color(self, m, n, a, tau):
        return self.label(self.analyse(m, n, a, tau)[2])

    def observed_colors(self, m: FiltrationModel) -> tuple:
        """Colors met on the deterministic candidate times, most frequent first."""
        count: dict = {}
        for n in range(m.horizon):
            for a in m.atoms(n):
                for d in range(1, self.max_gap + 1):
                    if n + d > m.horizon:
                        break
                    c = self.color(m, n, a, _fill(m, {w: n + d for w in m.partitions[n][a]}))
                    count[c] = count.get(c, 0) + float(m.atom_prob[n][a])
        self.colors = tuple(sorted(count, key=lambda c: (-count[c], str(c))))
        return self.colors
