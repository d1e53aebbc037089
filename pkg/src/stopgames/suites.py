"""Seeded property batteries: each one draws instances, runs a solver and checks it against an oracle.

A battery returns a ``BatteryResult`` with a pass flag, counts and the first
few failures.  ``scale`` shrinks instance counts for quick runs; the
acceptance thresholds are meant for ``scale=1``.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from .filtration_game import (
    CASES,
    StoppingTime,
    big_delta_at,
    best_response_dp,
    check_approximation,
    delta_approximation,
    edit_strategy,
    extract_trees,
    segment_stats,
    synthesize,
    threat_example_model,
)
from .instances import InstanceSpec, case_model, random_coloring, random_filtration, random_payoff, random_profile, \
    random_tree, threat_horizon
from .stochastic_ramsey import VOID, brute_force_best_chain, check_consistency, ramsey_chain
from .tree_equilibrium import (
    accretion_eps_limit,
    accrete_equilibria,
    build_covering,
    heavy_set,
    punishment_mass_holds,
    union_bounds_report,
)
from .tree_game import (
    Box,
    StationaryProfile,
    StationaryStrategy,
    best_response,
    check_equilibrium,
    find_stationary_equilibrium,
    round_stats,
    threat_example_tree,
    union_profiles,
)


@dataclass
class BatteryResult:
    name: str
    label: str
    passed: bool
    instances: int
    failures: int
    seconds: float
    budget: float | None
    details: dict = field(default_factory=dict)
    examples: list = field(default_factory=list)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        extra = ", ".join(f"{k}={v}" for k, v in sorted(self.details.items()))
        return (f"{verdict} {self.label}: {self.instances} instances, {self.failures} failures, "
                f"{self.seconds:.1f}s" + (f" (budget {self.budget:.0f}s)" if self.budget else "")
                + (f"; {extra}" if extra else ""))

    def to_dict(self) -> dict:
        return {"name": self.name, "label": self.label, "passed": self.passed, "instances": self.instances,
                "failures": self.failures, "seconds": round(self.seconds, 3), "budget": self.budget,
                "details": {k: str(v) for k, v in sorted(self.details.items())},
                "examples": [str(e) for e in self.examples[:5]]}


def _count(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def _finish(name, label, t0, budget, instances, fails, examples, details=None, extra_ok=True) -> BatteryResult:
    secs = time.perf_counter() - t0
    ok = fails == 0 and extra_ok and (budget is None or secs < budget)
    return BatteryResult(name, label, ok, instances, fails, secs, budget, details or {}, examples)


# -- trees ------------------------------------------------------------------------------------

def round_identities(seed: int = 0, scale: float = 1.0) -> BatteryResult:
    """pi * gamma^i = rho^i exactly, and pi(x, 0) + pi(0, y) >= pi(x, y)."""
    rng = random.Random(seed)
    t0 = time.perf_counter()
    n = _count(1000, scale)
    fails, examples = 0, []
    never = StationaryStrategy.never()
    for i in range(n):
        spec = InstanceSpec(depth=4, branching=3, internal=rng.randint(1, 15), k=rng.randint(1, 4))
        t, _ = random_tree(rng, spec)
        prof = random_profile(rng, t)
        st = round_stats(t, prof)
        ok = all(st.pi * g == r for g, r in zip(st.gamma, st.rho))
        p1 = round_stats(t, StationaryProfile(prof.p1, never)).pi
        p2 = round_stats(t, StationaryProfile(never, prof.p2)).pi
        ok = ok and p1 + p2 >= st.pi
        if not ok:
            fails += 1
            examples.append((i, t.digest()[:12]))
    return _finish("round_identities", "round identities: pi*gamma = rho and subadditive termination",
                   t0, 10 * max(scale, 0.1), n, fails, examples)


def best_response_oracle(seed: int = 0, scale: float = 1.0) -> BatteryResult:
    """Continuation-value search against exhaustive antichain enumeration."""
    rng = random.Random(seed)
    t0 = time.perf_counter()
    n = _count(500, scale)
    fails, worst, examples = 0, 0.0, []
    for i in range(n):
        spec = InstanceSpec(depth=4, branching=3, internal=rng.randint(1, 12), k=rng.randint(1, 4))
        t, _ = random_tree(rng, spec)
        prof = random_profile(rng, t)
        for player, opp in ((1, prof.p2), (2, prof.p1)):
            a = best_response(t, opp, player, method="fixed_point").value
            b = best_response(t, opp, player, method="exact").value
            err = abs(float(a) - float(b))
            worst = max(worst, err)
            if err > 1e-6:
                fails += 1
                examples.append((i, player, float(a), float(b)))
    return _finish("best_response_oracle", "best-response search agrees with antichain enumeration",
                   t0, 60 * max(scale, 0.1), n, fails, examples, {"worst_gap": f"{worst:.2e}"})


def threat_tree_search(eps=Fraction(1, 10)) -> tuple:
    """Stationary search on the one-node threat game; returns (ok, details)."""
    t = threat_example_tree()
    res = find_stationary_equilibrium(t, eps)
    if not res.found:
        return False, {"found": False}
    g1, g2 = (float(v) for v in res.stats.gamma)
    # distance to the family (-1 + y, 2 - 5 y), y in [0, 0.1]
    ys = [j / 10000 for j in range(1001)]
    dist = min(max(abs(g1 - (-1 + y)), abs(g2 - (2 - 5 * y))) for y in ys)
    cert = check_equilibrium(t, res.profile, eps)
    gains = [float(v) for v in cert.gains]
    ok = dist <= float(eps) and cert.verdict and max(gains) <= float(eps) + 1e-9
    return ok, {"gamma": (round(g1, 4), round(g2, 4)), "family_distance": round(dist, 4),
                "gains": [round(v, 4) for v in gains]}


def threat_filtration_synthesis(eps=Fraction(1, 10), horizon: int = 30) -> tuple:
    m, r = threat_example_model(horizon)
    res = synthesize(m, r, eps)
    tr = res.trace[0]
    gains = [float(v) for v in res.certificate.gains]
    ok = (tr.get("case") == "threat" and tr.get("N") is not None
          and float(tr["stopped_before_N"]) >= 1 - float(eps)
          and float(tr["punishment_prob"]) >= 0.5 and max(gains) <= 8 * float(eps) + 1e-9)
    return ok, {"N": tr.get("N"), "stopped_before_N": round(float(tr.get("stopped_before_N", 0)), 4),
                "punishment_prob": round(float(tr.get("punishment_prob", 0)), 4),
                "gains": [round(v, 4) for v in gains]}


def threat_example(seed: int = 0, scale: float = 1.0) -> BatteryResult:
    t0 = time.perf_counter()
    ok_a, da = threat_tree_search()
    ok_b, db = threat_filtration_synthesis()
    fails = (not ok_a) + (not ok_b)
    details = {f"tree_{k}": v for k, v in da.items()}
    details.update({f"filtration_{k}": v for k, v in db.items()})
    return _finish("threat_example", "threat game: tree search near (-1, 2) and punished filtration profile",
                   t0, 60, 2, fails, [], details)


def _orthogonal_sequence(rng: random.Random, t, delta, length: int) -> list:
    """Random profiles, each zeroed on the delta-heavy nodes of the union of the previous ones."""
    seq = [random_profile(rng, t, zero=0.5)]
    for _ in range(length - 1):
        heavy = heavy_set(t, union_profiles(seq), delta).nodes
        p = random_profile(rng, t, zero=0.5)
        seq.append(StationaryProfile(p.p1.restricted(set(t.internal) - heavy),
                                     p.p2.restricted(set(t.internal) - heavy)))
    return seq


def union_inequalities(seed: int = 0, scale: float = 1.0) -> BatteryResult:
    """Bounds on unions of delta-orthogonal sequences, checked by exact joint enumeration."""
    rng = random.Random(seed)
    t0 = time.perf_counter()
    n = _count(500, scale)
    fails, examples, checked = 0, [], 0
    for i in range(n):
        delta = rng.choice([Fraction(1, 20), Fraction(1, 10), Fraction(1, 5)])
        t, _ = random_tree(rng, InstanceSpec(depth=3, branching=3, internal=rng.randint(1, 8), k=2))
        seq = _orthogonal_sequence(rng, t, delta, rng.randint(2, 4))
        rep = union_bounds_report(t, seq, delta)
        checked += len(rep.inequalities)
        if not rep.ok:
            fails += 1
            examples.append((i, [q.name for q in rep.failures()]))
    return _finish("union_inequalities", "union bounds for delta-orthogonal sequences (exact enumeration)",
                   t0, 120 * max(scale, 0.1), n, fails, examples, {"inequalities_checked": checked})


def _capped_tree(rng: random.Random, k: int):
    spec = InstanceSpec(depth=3, branching=2, internal=rng.randint(1, 5), k=k, capped_solo=True,
                        strict_at_cap=True, density=0.4)
    return random_tree(rng, spec)


def heavy_nonempty(seed: int = 0, scale: float = 1.0) -> BatteryResult:
    """Equilibria paying both players about their caps terminate w.p. >= eps somewhere."""
    rng = random.Random(seed)
    t0 = time.perf_counter()
    n = _count(200, scale)
    fails, found, examples = 0, 0, []
    for i in range(n):
        k = rng.randint(1, 5)
        eps = accretion_eps_limit(k) * Fraction(9, 10)
        t, rbar = _capped_tree(rng, k)
        box = Box(float(rbar[0] - eps), 1.0, float(rbar[1] - eps), 1.0)
        res = find_stationary_equilibrium(t, eps, box, seed=i, max_evals=1500)
        if not res.found:
            continue
        found += 1
        if not heavy_set(t, res.profile, eps).nodes:
            fails += 1
            examples.append((i, t.digest()[:12]))
    return _finish("heavy_nonempty", "equilibria near the caps have a nonempty eps-heavy set",
                   t0, 120 * max(scale, 0.1), n, fails, examples, {"equilibria_found": found})


def punishment_mass(seed: int = 0, scale: float = 1.0) -> BatteryResult:
    """pi(0, y) >= eps/6 * mu1 for eps/2-equilibria paying player 1 at most rbar_1 - eps."""
    rng = random.Random(seed)
    t0 = time.perf_counter()
    n = _count(200, scale)
    fails, found, examples = 0, 0, []
    for i in range(n):
        k = rng.randint(1, 3)
        eps = Fraction(1, 8 * k)
        t, rbar = _capped_tree(rng, k)
        box = Box(-1.0, float(rbar[0] - eps), -1.0, 1.0)
        res = find_stationary_equilibrium(t, eps / 2, box, seed=i, max_evals=1500)
        if not res.found:
            continue
        found += 1
        ok, lhs, rhs = punishment_mass_holds(t, res.profile, rbar, eps)
        if not ok:
            fails += 1
            examples.append((i, float(lhs), float(rhs)))
    return _finish("punishment_mass", "punishment mass: pi(0,y) >= eps/6 * mu1 on low-payoff equilibria",
                   t0, None, n, fails, examples, {"equilibria_found": found})


def accretion_certificates(seed: int = 0, scale: float = 1.0) -> BatteryResult:
    """Accretion on bad rectangles: empty heavy set or a certified profile."""
    rng = random.Random(seed)
    t0 = time.perf_counter()
    n = _count(100, scale)
    fails, nonempty, examples = 0, 0, []
    for i in range(n):
        k = 1
        eps = Fraction(1, 40)
        t, rbar = _capped_tree(rng, k)
        cov = build_covering(rbar, eps)
        reach = [r for r in cov.bad if _reachable_box(t, r)]
        rect = rng.choice(reach or list(cov.bad))
        res = accrete_equilibria(t, rect, eps, rbar=rbar, subgame_budget=6, seed=i, max_evals=800)
        if res.d:
            nonempty += 1
            if not res.ok:
                fails += 1
                examples.append((i, [c["name"] for c in res.certificate["checks"] if not c["holds"]]))
    return _finish("accretion_certificates", "accretion on bad rectangles: empty or certified (gains <= 8 eps)",
                   t0, 300 * max(scale, 0.1), n, fails, examples, {"nonempty": nonempty})


def _reachable_box(t, rect) -> bool:
    vals = [t.payoff[s].values() for s in t.internal]
    return (max(max(v[0], v[2], v[4]) for v in vals) >= rect.a1
            and max(max(v[1], v[3], v[5]) for v in vals) >= rect.a2)


# -- filtrations -----------------------------------------------------------------------------------

def _random_stopping(rng: random.Random, m, n: int, p: float = 0.35) -> StoppingTime:
    vals = [None] * m.n_points

    def go(k, a):
        stack = [(k, a)]
        while stack:
            k, a = stack.pop()
            if k == m.horizon or (k > n and rng.random() < p):
                for w in m.partitions[k][a]:
                    vals[w] = k
                continue
            stack.extend((k + 1, c) for c in m.kids[k][a])

    for a in m.atoms(n):
        go(n, a)
    return StoppingTime(tuple(vals))


def _approximation_models(seed: int, n: int):
    rng = random.Random(seed)
    for _ in range(n):
        m = random_filtration(rng, rng.randint(2, 24), rng.randint(1, 6))
        r = random_payoff(rng, m, 2)
        start = rng.randint(0, m.horizon)
        t = _random_stopping(rng, m, start)
        eps = Fraction(rng.choice([1, 2, 3]), 4)
        yield rng, m, r, start, t, eps


def approximation_error(seed: int = 0, scale: float = 1.0) -> BatteryResult:
    """Per-atom termination and payoff of tree-measurable profiles match the trees within Delta."""
    t0 = time.perf_counter()
    n = _count(200, scale)
    fails, atoms, worst, examples = 0, 0, 0.0, []
    for i, (rng, m, r, start, t, eps) in enumerate(_approximation_models(seed, n)):
        ap = delta_approximation(m, r, start, t, eps)
        bad = check_approximation(ap, r)
        trees = extract_trees(ap, r)
        u1, u2, profs = {}, {}, {}
        for j, et in trees.items():
            prof = StationaryProfile.of({s: Fraction(rng.randint(0, 4), 4) for s in et.tree.internal},
                                        {s: Fraction(rng.randint(0, 4), 4) for s in et.tree.internal})
            profs[j] = prof
            et.lift(ap, prof, (u1, u2))
        x, y = edit_strategy(m, None, u1), edit_strategy(m, None, u2)
        st = segment_stats(m, r, x, y, StoppingTime.constant(m, start), t)
        idx = ap.atom_index(start)
        D = big_delta_at(eps, start)
        ok = not bad
        for (k, a), s in st.items():
            j = idx[m.rep(k, a)]
            ts = round_stats(trees[j].tree, profs[j])
            err = max(abs(s.pi - ts.pi), abs(s.rho[0] - ts.rho[0]), abs(s.rho[1] - ts.rho[1]))
            worst = max(worst, float(err / D))
            atoms += 1
            ok = ok and err < D
        if not ok:
            fails += 1
            examples.append(i)
    return _finish("approximation_error", "tree approximation: per-atom pi and rho within Delta",
                   t0, 120 * max(scale, 0.1), n, fails, examples, {"atoms": atoms, "worst_ratio": f"{worst:.3f}"})


def deviation_bound(seed: int = 0, scale: float = 1.0) -> BatteryResult:
    """The best adapted deviation against a lifted profile never beats gamma * pi + Delta."""
    t0 = time.perf_counter()
    n = _count(200, scale)
    fails, atoms, worst, examples = 0, 0, -1.0, []
    for i, (rng, m, r, start, t, eps) in enumerate(_approximation_models(seed, n)):
        ap = delta_approximation(m, r, start, t, eps)
        trees = extract_trees(ap, r)
        u1, gam = {}, {}
        for j, et in trees.items():
            prof = StationaryProfile.of({s: Fraction(rng.randint(0, 4), 4) for s in et.tree.internal}, {})
            et.lift(ap, prof, (u1, {}))
            gam[j] = best_response(et.tree, prof.p1, 2).value
        x = edit_strategy(m, None, u1)
        idx = ap.atom_index(start)
        t1 = StoppingTime.constant(m, start)

        def cont(k, a):
            return gam[idx[m.rep(k, a)]]

        dp = best_response_dp(m, r, x, 2, t1, t, continuation=cont)
        st = segment_stats(m, r, x, dp.strategy, t1, t)
        D = big_delta_at(eps, start)
        ok = True
        for (k, a), v in dp.root_values.items():
            g = gam[idx[m.rep(k, a)]]
            s = st[(k, a)]
            atoms += 1
            worst = max(worst, float((s.rho[1] - g * s.pi) / D))
            ok = ok and v <= g + D and s.rho[1] <= g * s.pi + D
        if not ok:
            fails += 1
            examples.append(i)
    return _finish("deviation_bound", "adapted deviations stay below gamma*pi + Delta",
                   t0, None, n, fails, examples, {"atoms": atoms, "worst_ratio": f"{worst:.3f}"})


# -- chains -----------------------------------------------------------------------------------------

def verify_chain(m, col, times, eps) -> tuple:
    """Independent recount: adaptedness, strict increase and per-point color agreement.

    Returns (ok, monochromatic probability).
    """
    for t in times:
        if t.violations(m):
            return False, 0
    mono = Fraction(0)
    for w in range(m.n_points):
        colors = []
        for s, e in zip(times, times[1:]):
            n = s(w)
            if n >= m.horizon or e(w) <= n:
                colors.append(VOID)
                continue
            colors.append(col.color(m, n, m.labels[n][w], e))
        if VOID not in colors and len(set(colors)) == 1:
            mono += m.prob[w]
    return mono >= 1 - eps, mono


def ramsey_suite(seed: int = 0, scale: float = 1.0, eps=Fraction(1, 4)) -> BatteryResult:
    """Chains on binary models of depth 4..8, plus an exhaustive oracle pass on depth 2..3.

    On depth <= 5 two-color instances the returned chain is recounted point by
    point; on the small models the best chain over all stopping times must not
    be feasible when ours is not.
    """
    rng = random.Random(seed)
    t0 = time.perf_counter()
    n = _count(100, scale)
    fails, flagged, recounts, examples = 0, 0, 0, []
    for i in range(n):
        depth = rng.randint(4, 8)
        ncol = rng.choice((2, 3))
        m, col = random_coloring(rng, depth, ncol)
        if depth <= 4 and not check_consistency(m, col, sample_budget=40, seed=i).consistent:
            fails += 1
            examples.append((i, "inconsistent coloring"))
            continue
        ch = ramsey_chain(m, col, eps)
        if ch.horizon_limited:
            flagged += 1
        elif ch.mono_prob < 1 - eps:
            fails += 1
            examples.append((i, "mono_prob", float(ch.mono_prob)))
        if ncol == 2 and depth <= 5:
            recounts += 1
            ok, mono = verify_chain(m, col, ch.times, eps)
            if mono != ch.mono_prob or (not ch.horizon_limited and not ok):
                fails += 1
                examples.append((i, "recount", float(mono), float(ch.mono_prob)))
    small = _count(20, scale)
    infeasible = 0
    for i in range(small):
        m, col = random_coloring(rng, rng.randint(2, 3), 2)
        ch = ramsey_chain(m, col, eps)
        best, _ = brute_force_best_chain(m, col)
        if best < 1 - eps:
            infeasible += 1
        if ch.mono_prob > best or (best >= 1 - eps and ch.mono_prob < 1 - eps):
            fails += 1
            examples.append(("small", i, float(ch.mono_prob), float(best)))
    rate = flagged / n
    return _finish("ramsey_suite", "monochromatic chains: mono_prob >= 1 - eps, horizon-limited rate < 10%",
                   t0, 300 * max(scale, 0.1), n + small, fails, examples,
                   {"flag_rate": f"{rate:.2f}", "recounts": recounts, "exhaustive_checks": small,
                    "exhaustively_infeasible": infeasible}, extra_ok=rate < 0.1)


# -- synthesis -------------------------------------------------------------------------------------

def synthesis_instances(seed: int, n: int, eps) -> list:
    """(case, model, payoff) triples, cycling through the tail cases."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        case = CASES[i % len(CASES)]
        density = rng.choice((0.5, 0.75))
        horizon = threat_horizon(eps, density) if case in ("solo-generous", "threat") else rng.randint(8, 12)
        spec = InstanceSpec(kind="case", case=case, horizon=horizon, points=rng.randint(1, 4), density=density)
        m, r, expected = case_model(random.Random(rng.getrandbits(64)), spec)
        out.append((expected, m, r))
    return out


def case_matches(expected: str, cases: list) -> bool:
    if expected in ("bad-rectangle", "good-rectangle"):
        return all(c == expected for c in cases)
    return cases == [expected]


def synthesis_suite(seed: int = 0, scale: float = 1.0, eps=Fraction(1, 40),
                    progress: Callable | None = None) -> BatteryResult:
    t0 = time.perf_counter()
    n = _count(50, scale)
    cert_fails, search_fails, label_fails, worst, examples = 0, 0, 0, 0.0, []
    per_case: dict = {}
    for i, (expected, m, r) in enumerate(synthesis_instances(seed, n, eps)):
        res = synthesize(m, r, eps)
        gain = max(float(g) for g in res.certificate.gains)
        worst = max(worst, gain / float(eps))
        per_case[expected] = per_case.get(expected, 0) + 1
        if res.failures:
            search_fails += 1
        elif not case_matches(expected, res.cases):
            label_fails += 1
            examples.append((i, expected, res.cases))
        if not gain <= 24 * float(eps) + 1e-9:
            cert_fails += 1
            examples.append((i, expected, "gain", gain))
        if progress:
            progress(i, expected, res)
    details = {"certificate_failures": cert_fails, "search_failure_rate": f"{search_fails / n:.2f}",
               "label_mismatches": label_fails, "worst_gain_over_eps": f"{worst:.2f}",
               "cases": ",".join(f"{k}:{v}" for k, v in sorted(per_case.items()))}
    return _finish("synthesis_suite", "end-to-end synthesis: audited gains <= 24 eps with matching case traces",
                   t0, 900 * max(scale, 0.1), n, cert_fails + label_fails, examples, details)


BATTERIES = (
    ("round_identities", round_identities),
    ("best_response_oracle", best_response_oracle),
    ("threat_example", threat_example),
    ("union_inequalities", union_inequalities),
    ("heavy_nonempty", heavy_nonempty),
    ("punishment_mass", punishment_mass),
    ("accretion_certificates", accretion_certificates),
    ("approximation_error", approximation_error),
    ("deviation_bound", deviation_bound),
    ("ramsey_suite", ramsey_suite),
    ("synthesis_suite", synthesis_suite),
)


def run_all(seed: int = 0, scale: float = 1.0, only: set | None = None) -> list:
    return [fn(seed, scale) for name, fn in BATTERIES if only is None or name in only]
