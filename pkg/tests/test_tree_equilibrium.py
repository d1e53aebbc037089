from __future__ import annotations

import random
from fractions import Fraction as F

import pytest
from hypothesis import given, strategies as st

from conftest import tree_and_profile
from stopgames.instances import InstanceSpec, random_profile, random_tree
from stopgames.tree_equilibrium import (
    Rectangle, _box_reachable, _hull, accretion_eps_limit, accrete_equilibria, build_covering, color_tree,
    covering_gaps, decompose_pure, heavy_set, is_orthogonal, punishment_mass_holds, termination_given_node,
    union_bounds_report,
)
from stopgames.tree_game import (
    Box, StationaryProfile, StationaryStrategy, branch_prob, check_equilibrium, make_tree, round_stats,
    single_node_tree, union, union_profiles,
)

SEEDS = st.integers(0, 10**6)


def two_child_tree():
    return make_tree({0: [("a", F(1, 2)), ("b", F(1, 2))], "a": [("a1", F(1))], "b": [("b1", F(1))]},
                     {0: (0,) * 6, "a": (0,) * 6, "b": (0,) * 6})


def branches(t):
    out, stack = [], [((t.root,), F(1))]
    while stack:
        path, p = stack.pop()
        kids = t.children.get(path[-1])
        if not kids:
            out.append((path[:-1], p))
            continue
        for c, q in zip(kids, t.transition[path[-1]]):
            stack.append((path + (c,), p * q))
    return out


def conditional_oracle(t, prof):
    """P(stop somewhere on the branch | branch passes s), by branch enumeration."""
    out = {}
    for s in t.internal:
        mass = stop = F(0)
        for path, p in branches(t):
            if s not in path:
                continue
            survive = F(1)
            for u in path:
                survive *= (1 - prof.p1(u)) * (1 - prof.p2(u))
            mass += p
            stop += p * (1 - survive)
        out[s] = stop / mass
    return out


# -- heavy sets -----------------------------------------------------------------------

def test_heavy_set_example():
    t = two_child_tree()
    prof = StationaryProfile.of({}, {"a": F(2, 5)})
    assert heavy_set(t, prof, F(3, 10)).nodes == {"a"}
    assert heavy_set(t, prof, F(1, 10)).nodes == {0, "a"}
    assert heavy_set(t, prof, F(3, 10)).conditional[0] == F(1, 5)


def test_heavy_set_extremes():
    t = two_child_tree()
    assert heavy_set(t, StationaryProfile.never(), F(1, 100)).nodes == frozenset()
    everywhere = StationaryProfile.of({s: 1 for s in t.internal}, {})
    assert heavy_set(t, everywhere, 1).nodes == set(t.internal)


@given(SEEDS)
def test_conditional_termination_matches_branch_enumeration(seed):
    t, prof = tree_and_profile(seed)
    assert termination_given_node(t, prof) == conditional_oracle(t, prof)


@given(SEEDS)
def test_heavy_sets_shrink_as_delta_grows(seed):
    t, prof = tree_and_profile(seed)
    small = heavy_set(t, prof, F(1, 10)).nodes
    big = heavy_set(t, prof, F(1, 2)).nodes
    assert big <= small


@given(SEEDS)
def test_termination_bounds_heavy_mass(seed):
    t, prof = tree_and_profile(seed)
    delta = F(1, 4)
    h = heavy_set(t, prof, delta).nodes
    assert round_stats(t, prof).pi >= delta * branch_prob(t, h)


# -- orthogonality and decomposition -----------------------------------------------------

def test_singleton_sequence_is_orthogonal():
    t, prof = tree_and_profile(5)
    assert is_orthogonal(t, [prof], F(1, 10)).ok


def test_stop_on_heavy_node_breaks_orthogonality():
    t = two_child_tree()
    first = StationaryProfile.of({"a": 1}, {})
    second = StationaryProfile.of({"a": F(1, 2)}, {})
    v = is_orthogonal(t, [first, second], 1)
    assert not v.ok and v.witness[1] == "a"


@given(SEEDS)
def test_strong_orthogonality_implies_orthogonality(seed):
    rng = random.Random(seed)
    t, _ = random_tree(rng, InstanceSpec(depth=3, k=2))
    seq = [random_profile(rng, t, zero=0.6) for _ in range(3)]
    if is_orthogonal(t, seq, F(1, 5), strong=True).ok:
        assert is_orthogonal(t, seq, F(1, 5)).ok


def test_decompose_single_index_returns_xbar():
    t = two_child_tree()
    xbar = StationaryStrategy.pure(["a", "b"])
    assert decompose_pure(t, xbar, [StationaryStrategy.never()], F(1, 10)) == [xbar]


def test_decompose_with_passive_players_uses_last_index():
    t = two_child_tree()
    xbar = StationaryStrategy.pure(["a", "b"])
    parts = decompose_pure(t, xbar, [StationaryStrategy.never()] * 3, F(1, 10))
    assert parts[-1] == xbar and all(p == StationaryStrategy.never() for p in parts[:-1])


def test_decompose_splits_at_heavy_nodes():
    t = two_child_tree()
    xbar = StationaryStrategy.pure(["a", "b"])
    ys = [StationaryStrategy({"a": F(1, 2)}), StationaryStrategy.never()]
    parts = decompose_pure(t, xbar, ys, F(1, 10))
    assert parts[0] == StationaryStrategy.pure(["a"]) and parts[1] == StationaryStrategy.pure(["b"])
    assert union(parts) == xbar


# -- unions of copies -----------------------------------------------------------------

def test_disjoint_branches_have_no_excess():
    t = two_child_tree()
    seq = [StationaryProfile.of({"a": F(1, 2)}, {}), StationaryProfile.of({}, {"b": F(1, 3)})]
    rep = union_bounds_report(t, seq, F(1, 10))
    assert rep.excess_count == 0 and rep.pi == sum(rep.pis) and rep.ok


def test_singleton_union_is_tight():
    t, prof = tree_and_profile(11)
    rep = union_bounds_report(t, [prof], F(1, 10))
    assert rep.ok and rep.pi == rep.pis[0] and rep.excess_count == 0


@given(SEEDS, st.sampled_from([F(1, 20), F(1, 10)]))
def test_union_bounds_hold_on_orthogonal_sequences(seed, delta):
    rng = random.Random(seed)
    t, _ = random_tree(rng, InstanceSpec(depth=3, k=2))
    seq = [random_profile(rng, t, zero=0.5)]
    for _ in range(2):
        heavy = heavy_set(t, union_profiles(seq), delta).nodes
        p = random_profile(rng, t, zero=0.5)
        keep = set(t.internal) - heavy
        seq.append(StationaryProfile(p.p1.restricted(keep), p.p2.restricted(keep)))
    rep = union_bounds_report(t, seq, delta)
    assert rep.ok, [q.name for q in rep.failures()]


# -- covering ---------------------------------------------------------------------------

def test_covering_with_top_caps():
    cov = build_covering((1, 1), F(1, 2))
    assert [(r.a1, r.a2) for r in cov.bad] == [(F(1, 2), F(1, 2))]
    assert covering_gaps(cov) == []
    assert all(r.is_good(cov.rbar) for r in cov.good)


@given(st.integers(-3, 4), st.integers(-3, 4), st.sampled_from([F(1, 4), F(1, 7)]))
def test_covering_covers_the_square(n1, n2, eps):
    rbar = (F(n1, 4), F(n2, 4))
    if max(rbar) <= 0:
        return
    cov = build_covering(rbar, eps)
    assert covering_gaps(cov, samples=21) == []
    for r in cov.rectangles():
        assert r.is_bad(rbar) != r.is_good(rbar)


# -- accretion and coloring -----------------------------------------------------------------

def all_ones_tree():
    return make_tree({0: [(1, F(1, 2)), (2, F(1, 2))], 1: [(3, F(1))]}, {0: (1,) * 6, 1: (1,) * 6})


def test_eps_limit():
    assert accretion_eps_limit(1) == F(1, 36) and accretion_eps_limit(2) == F(1, 144)


def test_accretion_on_all_ones_tree():
    t = all_ones_tree()
    eps = F(1, 40)
    res = accrete_equilibria(t, Rectangle(1 - eps, 1 - eps, eps), eps, rbar=(1, 1))
    assert res.d and res.ok
    assert round_stats(t, res.profile).pi >= eps * eps * branch_prob(t, res.d)


def test_accretion_without_equilibria_in_rectangle_is_empty():
    t = single_node_tree((0, -1), (-1, 0), (-1, -1))
    eps = F(1, 40)
    res = accrete_equilibria(t, Rectangle(1 - eps, 1 - eps, eps), eps, rbar=(1, 1))
    assert not res.d and res.profile == StationaryProfile.never() and res.ok


def test_accretion_rejects_large_eps():
    with pytest.raises(ValueError):
        accrete_equilibria(all_ones_tree(), Rectangle(F(1, 2), F(1, 2), F(1, 2)), F(1, 2))


def test_color_of_all_ones_tree_is_empty():
    eps = F(1, 40)
    res = color_tree(all_ones_tree(), build_covering((1, 1), eps), eps)
    assert res.status == "empty" and res.final_profile is None
    assert sum(res.lambdas) == 1


def test_color_of_tree_without_high_payoffs_is_good():
    t = single_node_tree((F(1, 2), -1), (-1, F(1, 2)), (-1, -1), k=2)
    eps = F(1, 40)
    cov = build_covering((1, 1), eps)
    res = color_tree(t, cov, eps)
    assert res.status == "colored" and all(v == 0 for v in res.lambdas)
    g = round_stats(t, res.final_profile).gamma
    assert cov.good[res.color].contains(g)
    assert check_equilibrium(t, res.final_profile, eps / 2).verdict


def test_color_tree_termination_dominates_lambdas():
    rng = random.Random(3)
    eps = F(1, 40)
    for _ in range(4):
        t, rbar = random_tree(rng, InstanceSpec(depth=2, k=1, capped_solo=True, strict_at_cap=True,
                                                 density=0.5, rbar=(1, 1)))
        res = color_tree(t, build_covering(rbar, eps), eps)
        for lam, prof in zip(res.lambdas, res.per_j_profiles):
            if prof is not None:
                assert round_stats(t, prof).pi >= eps * eps * lam


def test_punishment_mass_example():
    t = single_node_tree((1, 0), (0, 1), (0, 0))
    eps = F(1, 10)
    ok, lhs, rhs = punishment_mass_holds(t, StationaryProfile.of({}, {0: F(1, 50)}), (1, 1), eps)
    assert ok and lhs == F(1, 50) and rhs == eps / 6


# -- payoff hull pruning --------------------------------------------------------------------

def test_hull_of_collinear_points():
    assert _hull([(0, 0), (1, 1), (2, 2)]) == [(0, 0), (2, 2)]


@pytest.mark.parametrize("box,expected", [
    (Box(0.4, 0.6, 0.4, 0.6), True),
    (Box(0.0, 0.1, 0.8, 1.0), False),
    (Box(0.9, 1.0, 0.9, 1.0), True),
    (Box(0.6, 0.8, 0.0, 0.1), False),
])
def test_box_meets_payoff_hull(box, expected):
    t = single_node_tree((F(1, 2), 0), (0, F(1, 2)), (1, 1), k=2)
    assert _box_reachable(t, box) is expected


@given(SEEDS)
def test_reachable_boxes_contain_every_round_payoff(seed):
    t, prof = tree_and_profile(seed)
    g = [float(v) for v in round_stats(t, prof).gamma]
    if round_stats(t, prof).pi > 0:
        assert _box_reachable(t, Box(g[0] - 1e-3, g[0] + 1e-3, g[1] - 1e-3, g[1] + 1e-3))
