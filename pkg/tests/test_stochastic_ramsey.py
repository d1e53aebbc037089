from __future__ import annotations

import random
from fractions import Fraction as F
from functools import lru_cache

import pytest
from hypothesis import given, strategies as st

from stopgames.filtration_game import FiltrationModel, StoppingTime
from stopgames.instances import random_coloring
from stopgames.stochastic_ramsey import (
    VOID, ConstantColoring, FunctionColoring, LookupColoring, MarkedColoring, binary_model,
    brute_force_best_chain, chain_probability, check_consistency, maximal_red_set, ramsey_chain,
    random_lookup_coloring, random_marked_coloring, red_blue_split, start_colored_chain,
    time_changed_model,
)
from stopgames.suites import verify_chain

SEEDS = st.integers(0, 10**6)


def increasing(times) -> bool:
    return all(a < b for s, t in zip(times, times[1:]) for a, b in zip(s.values, t.values))


# -- consistency ------------------------------------------------------------------------

def test_stage_atom_coloring_is_consistent():
    m = binary_model(3)
    col = random_lookup_coloring(m, ("red", "blue"), random.Random(0))
    assert check_consistency(m, col).consistent


def test_constant_coloring_is_consistent():
    assert check_consistency(binary_model(3), ConstantColoring("red")).consistent


def test_coloring_reading_outside_the_atom_is_caught():
    m = FiltrationModel((F(1, 2), F(1, 2)), (((0, 1),), ((0,), (1,)), ((0,), (1,)), ((0,), (1,))))

    def peek(m_, n, a, tau):
        other = 1 - m_.partitions[n][a][0]
        return "red" if tau(other) > n + 1 else "blue"

    v = check_consistency(m, FunctionColoring(peek, ("red", "blue")))
    assert not v.consistent
    n, a, t1, t2, c1, c2 = v.witness
    pts = m.partitions[n][a]
    assert all(t1(w) == t2(w) for w in pts) and c1 != c2


@given(SEEDS)
def test_generated_colorings_are_consistent(seed):
    m, col = random_coloring(random.Random(seed), 3, 2)
    assert check_consistency(m, col, sample_budget=60, seed=seed).consistent


# -- red sets ---------------------------------------------------------------------------------

def test_constant_red_everything_is_red():
    m = binary_model(3)
    atoms, sigma = maximal_red_set(m, ConstantColoring("red"), 1, "red")
    assert atoms == frozenset(m.atoms(1))
    assert all(sigma(w) == 2 for w in range(m.n_points))


def test_constant_blue_nothing_is_red():
    m = binary_model(3)
    atoms, _ = maximal_red_set(m, ConstantColoring("blue"), 1, "red")
    assert atoms == frozenset()


@given(SEEDS, st.integers(0, 3))
def test_red_atoms_are_those_with_a_marked_descendant(seed, n):
    m = binary_model(4)
    col = random_marked_coloring(m, random.Random(seed), density=0.15)
    atoms, sigma = maximal_red_set(m, col, n, "red")
    expected = set()
    for a in m.atoms(n):
        pts = set(m.partitions[n][a])
        if any(k > n and set(m.partitions[k][b]) <= pts for k, b in col.marks):
            expected.add(a)
    assert atoms == expected
    for a in atoms:
        assert col.color(m, n, a, sigma) == "red"


# -- the two-color split ------------------------------------------------------------------------

def test_split_of_constant_red():
    m = binary_model(4)
    res = red_blue_split(m, ConstantColoring("red"), "red", F(1, 5))
    assert res.blue_atoms == frozenset() and res.achieved[0] == 1 and not res.horizon_limited


def test_split_of_constant_blue():
    m = binary_model(4)
    res = red_blue_split(m, ConstantColoring("blue"), "red", F(1, 5))
    assert res.red_atoms == frozenset() and res.achieved[1] == 1


@given(SEEDS)
def test_split_parts_are_complementary(seed):
    m = binary_model(4)
    col = random_marked_coloring(m, random.Random(seed))
    res = red_blue_split(m, col, "red", F(1, 5))
    assert res.red_atoms | res.blue_atoms == frozenset(m.atoms(res.N))
    assert not res.red_atoms & res.blue_atoms
    assert increasing(res.taus)


# -- chains -----------------------------------------------------------------------------------

def test_single_color_chain_is_trivial():
    m = binary_model(3)
    res = ramsey_chain(m, ConstantColoring("red"), F(1, 10))
    assert res.mono_prob == 1 and not res.horizon_limited
    assert [t.values[0] for t in res.times] == [0, 1, 2]


def test_chain_probability_rejects_non_increasing_times():
    m = binary_model(2)
    t = StoppingTime.constant(m, 1)
    with pytest.raises(ValueError):
        chain_probability(m, ConstantColoring("red"), [t, t])


def test_one_link_probabilities_coincide():
    m = binary_model(2)
    col = random_lookup_coloring(m, ("red", "blue"), random.Random(1))
    times = [StoppingTime.constant(m, 0), StoppingTime.constant(m, 1)]
    cons, allp = chain_probability(m, col, times)
    assert cons == allp == 1


def test_constant_coloring_chain_probabilities():
    m = binary_model(3)
    times = [StoppingTime.constant(m, n) for n in range(4)]
    assert chain_probability(m, ConstantColoring("blue"), times) == (1, 1)


def test_three_colors_on_depth_eight():
    m = binary_model(8)
    col = random_marked_coloring(m, random.Random(8), density=0.3, colors=("red", "green", "blue"))
    res = ramsey_chain(m, col, F(1, 4))
    assert res.mono_prob >= F(3, 4)
    assert chain_probability(m, col, res.times)[0] == res.mono_prob


@given(SEEDS, st.sampled_from([2, 3]))
def test_chain_output_is_sound(seed, colors):
    m, col = random_coloring(random.Random(seed), 5, colors)
    res = ramsey_chain(m, col, F(1, 4))
    for t in res.times:
        assert t.violations(m) == []
    assert increasing(res.times)
    cons, allp = chain_probability(m, col, res.times)
    assert cons == res.mono_prob and allp <= cons
    assert verify_chain(m, col, res.times, F(1, 4))[1] == cons
    assert res.horizon_limited == (not cons > F(3, 4))


@given(SEEDS)
def test_chain_is_feasible_when_brute_force_is(seed):
    m, col = random_coloring(random.Random(seed), 2, 2)
    eps = F(1, 4)
    best, _ = brute_force_best_chain(m, col)
    res = ramsey_chain(m, col, eps)
    assert res.mono_prob <= best
    if best > 1 - eps:
        assert res.mono_prob > 1 - eps


def best_lookup_chain(m, col: LookupColoring, links: int):
    """Exact best monochromatic probability for a stage/atom coloring.

    A link's color is the color of the atom where it starts, so a chain is
    monochromatic iff its first ``links`` start atoms share a color.  Backward
    induction over the tree chooses, atom by atom, whether to place the next
    start here.
    """
    H = m.horizon

    @lru_cache(None)
    def placed(n, a, c, j):
        if j == links:
            return F(1)
        if n >= H:
            return F(0)
        kids = m.kids[n][a]
        wait = sum(m.cond(n, a, k) * placed(n + 1, k, c, j) for k in kids)
        here = F(0)
        if col.table[(n, a)] == c:
            here = F(1) if j + 1 == links else sum(m.cond(n, a, k) * placed(n + 1, k, c, j + 1) for k in kids)
        return max(wait, here)

    @lru_cache(None)
    def first(n, a):
        if n >= H:
            return F(0)
        kids = m.kids[n][a]
        wait = sum(m.cond(n, a, k) * first(n + 1, k) for k in kids)
        here = F(1) if links == 1 else sum(m.cond(n, a, k) * placed(n + 1, k, col.table[(n, a)], 1) for k in kids)
        return max(wait, here)

    return sum(m.atom_prob[0][a] * first(0, a) for a in m.atoms(0))


@given(SEEDS, st.integers(3, 6), st.sampled_from([2, 3]))
def test_lookup_chains_against_exact_optimum(seed, depth, colors):
    m = binary_model(depth)
    col = random_lookup_coloring(m, ("red", "green", "blue")[:colors], random.Random(seed))
    eps = F(1, 4)
    best = best_lookup_chain(m, col, 2)
    res = ramsey_chain(m, col, eps)
    assert res.mono_prob <= best
    assert res.horizon_limited == (not res.mono_prob > 1 - eps)
    if best > 1 - eps:
        assert not res.horizon_limited


@given(SEEDS, st.integers(2, 6), st.sampled_from([2, 3]))
def test_start_colored_chain_is_optimal(seed, depth, colors):
    m = binary_model(depth)
    col = random_lookup_coloring(m, ("red", "green", "blue")[:colors], random.Random(seed))
    times = start_colored_chain(m, col, 2)
    for t in times:
        t.check(m)
    assert chain_probability(m, col, times, False)[0] == best_lookup_chain(m, col, 2)


def test_lookup_oracle_agrees_with_brute_force():
    for seed in range(6):
        m = binary_model(2)
        col = random_lookup_coloring(m, ("red", "blue"), random.Random(seed))
        assert best_lookup_chain(m, col, 2) == brute_force_best_chain(m, col)[0]


def test_planted_chain_is_found():
    m = binary_model(6)
    table = {(n, a): "red" for n in range(7) for a in m.atoms(n)}
    rng = random.Random(2)
    for key in rng.sample(sorted(table), 10):
        table[key] = "blue"
    for n in range(0, 7, 2):
        for a in m.atoms(n):
            table[(n, a)] = "red"
    col = LookupColoring(table, ("red", "blue"))
    res = ramsey_chain(m, col, F(1, 100))
    assert res.mono_prob == 1


def test_marked_chain_colors():
    m = binary_model(5)
    col = MarkedColoring({(k, a): "red" for k in range(1, 6) for a in m.atoms(k) if a % 2 == 0}, ("red", "blue"))
    res = ramsey_chain(m, col, F(1, 4))
    assert res.mono_prob > F(3, 4)
    ok, mono = verify_chain(m, col, res.times, F(1, 4))
    assert ok and mono == res.mono_prob
    assert all(res.color_map[w] in ("red", "blue") for w in range(m.n_points) if res.color_map[w] is not VOID)


# -- time change -------------------------------------------------------------------------------

@given(SEEDS)
def test_time_changed_model_is_a_filtration(seed):
    rng = random.Random(seed)
    m = binary_model(4)
    vals = [0] * m.n_points
    times = [StoppingTime(tuple(vals))]
    for _ in range(3):
        vals = [min(v + rng.randint(1, 2), m.horizon) for v in vals]
        # adapted: constant on the atom where the previous time lands
        fixed = {}
        for w in range(m.n_points):
            k = times[-1](w)
            key = (k, m.labels[k][w])
            fixed.setdefault(key, min(k + rng.randint(1, 2), m.horizon) if k < m.horizon else k)
            vals[w] = fixed[key]
        times.append(StoppingTime(tuple(vals)))
    g, pmap = time_changed_model(m, range(m.n_points), times)
    assert g.validate() == []
    assert sum(g.prob) == 1 and pmap == list(range(m.n_points))
