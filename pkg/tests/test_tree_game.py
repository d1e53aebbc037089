from __future__ import annotations

import itertools
import json
from fractions import Fraction as F

import pytest
from hypothesis import given, strategies as st

from conftest import tree_and_profile
from stopgames.tree_game import (
    GameTree, StationaryProfile, StationaryStrategy, best_response, branch_prob, check_equilibrium,
    condition_report, find_stationary_equilibrium, leaf_passage_prob, make_tree, mu1, round_stats,
    single_node_tree, threat_example_tree, trim, union, validate_tree,
)

SEEDS = st.integers(0, 10**6)


def two_child_tree(pa=(0, 0, 0, 0, 0, 0)):
    spec = {0: [("a", F(1, 2)), ("b", F(1, 2))], "a": [("a1", F(1))]}
    return make_tree(spec, {0: (0, 0, 0, 0, 0, 0), "a": pa})


def one_node():
    return single_node_tree((1, 0), (0, 1), (-1, -1))


# -- validation --------------------------------------------------------------------

def test_minimal_tree_is_valid():
    assert validate_tree(single_node_tree((0, 0), (0, 0), (0, 0))) == []


def test_transition_not_summing_to_one_is_reported():
    t = make_tree({0: [(1, F(9, 20)), (2, F(9, 20))]}, {0: (0,) * 6})
    report = validate_tree(t)
    assert any("node 0" in line and "sums to" in line for line in report)


def test_off_grid_payoff_is_reported():
    t = single_node_tree((F(3, 10), 0), (0, 0), (0, 0), k=2)
    assert any("not on the 1/2 grid" in line for line in validate_tree(t))


def test_condition_report_flags_cap_violations():
    t = single_node_tree((1, 1), (0, 0), (0, 0))
    report = condition_report(t, (1, 1))
    assert any("attains cap" in line for line in report)
    assert condition_report(single_node_tree((1, 0), (0, 1), (0, 0)), (1, 1)) == []


# -- round statistics --------------------------------------------------------------

def test_one_node_mixed_profile():
    s = round_stats(one_node(), StationaryProfile.of({0: F(1, 2)}, {0: F(1, 2)}))
    assert s.pi == F(3, 4) and s.rho == (0, 0) and s.gamma == (0, 0)


def test_one_node_player_one_stops():
    s = round_stats(one_node(), StationaryProfile.of({0: 1}, {}))
    assert s.pi == 1 and s.gamma == (1, 0)


@given(SEEDS)
def test_never_stop_has_zero_stats(seed):
    t, _ = tree_and_profile(seed)
    s = round_stats(t, StationaryProfile.never())
    assert s.pi == 0 and s.gamma == (0, 0)


@given(SEEDS)
def test_pi_gamma_equals_rho(seed):
    t, prof = tree_and_profile(seed)
    s = round_stats(t, prof)
    assert 0 <= s.pi <= 1
    for i in range(2):
        assert s.pi * s.gamma[i] == s.rho[i]


@given(SEEDS)
def test_union_termination_is_subadditive(seed):
    t, a = tree_and_profile(seed)
    _, b = tree_and_profile(seed + 1)
    b = StationaryProfile(b.p1.restricted(t.internal), b.p2.restricted(t.internal))
    pa, pb = round_stats(t, a).pi, round_stats(t, b).pi
    pu = round_stats(t, StationaryProfile(union([a.p1, b.p1]), union([a.p2, b.p2]))).pi
    assert max(pa, pb) <= pu <= pa + pb


# -- branch probabilities and trimming ---------------------------------------------

def test_branch_prob_examples():
    t = two_child_tree()
    assert branch_prob(t, {0}) == 1
    assert branch_prob(t, {"a"}) == F(1, 2)
    assert branch_prob(t, {"a", "b"}) == 1


def test_trim_examples():
    t = two_child_tree()
    assert trim(t, set()) is t
    cut = trim(t, {"a"})
    assert "a" in cut.leaves and "a1" not in cut.nodes
    root_only = trim(t, {0})
    assert root_only.is_trivial


def test_leaf_passage_examples():
    t = two_child_tree()
    inner = trim(t, {"a"})
    assert leaf_passage_prob(t, t, t) == 0
    assert leaf_passage_prob(t, inner, t) == F(1, 2)
    assert leaf_passage_prob(t, trim(t, {0}), t) == 1


def test_cap_mass_examples():
    t = two_child_tree(pa=(1, 0, 0, 0, 0, 0))
    assert mu1(t, (1, 1)) == F(1, 2)
    assert mu1(t, (F(1, 2), 1)) == 0
    root_cap = make_tree({0: [(1, F(1))]}, {0: (1, 0, 0, 0, 0, 0)})
    assert mu1(root_cap, (1, 1)) == 1


def test_union_examples():
    x = StationaryStrategy({0: F(1, 2)})
    assert union([x]) == x
    assert union([x, StationaryStrategy({0: F(1, 5)})])(0) == F(3, 5)
    assert union([x, StationaryStrategy({0: 1})])(0) == 1


# -- best responses and certificates ---------------------------------------------------

def test_threat_best_response_against_passive_opponent():
    res = best_response(threat_example_tree(), StationaryStrategy.never(), 1)
    assert res.value == 0 and res.strategy.stop_set() == frozenset()


def test_threat_best_response_against_half():
    res = best_response(threat_example_tree(), StationaryStrategy({0: F(1, 2)}), 1)
    assert res.value == F(-1, 2) and res.strategy(0) == 1


def test_negative_payoffs_best_response_is_never():
    t = single_node_tree((-1, 0), (0, 0), (-1, 0))
    res = best_response(t, StationaryStrategy.never(), 1)
    assert res.value == 0 and not res.strategy.stop_set()


def test_threat_certificate_small_punishment():
    cert = check_equilibrium(threat_example_tree(), StationaryProfile.of({0: 1}, {0: F(1, 50)}), F(1, 10))
    assert cert.gamma == (F(-49, 50), F(19, 10))
    assert cert.gains == (0, F(1, 10))
    assert cert.verdict


def test_threat_certificate_without_punishment_fails():
    cert = check_equilibrium(threat_example_tree(), StationaryProfile.of({0: 1}, {}), F(1, 10))
    assert not cert.verdict and cert.gains[0] == 1


def test_all_ones_tree_any_stopping_profile_is_exact_equilibrium():
    t = make_tree({0: [(1, F(1, 2)), (2, F(1, 2))], 1: [(3, F(1))]}, {0: (1,) * 6, 1: (1,) * 6})
    for x, y in [({0: F(1, 3)}, {}), ({}, {1: 1}), ({0: 1, 1: F(1, 2)}, {1: F(1, 4)})]:
        assert check_equilibrium(t, StationaryProfile.of(x, y), 0).verdict


def _pure_oracle(t: GameTree, opp: StationaryStrategy, player: int):
    best = None
    for r in range(len(t.internal) + 1):
        for stops in itertools.combinations(t.internal, r):
            mine = StationaryStrategy.pure(stops)
            prof = StationaryProfile(mine, opp) if player == 1 else StationaryProfile(opp, mine)
            g = round_stats(t, prof).gamma[player - 1]
            best = g if best is None else max(best, g)
    return best


@given(SEEDS, st.sampled_from([1, 2]))
def test_best_response_matches_pure_enumeration(seed, player):
    t, prof = tree_and_profile(seed)
    opp = prof.player(3 - player)
    assert best_response(t, opp, player, method="exact").value == _pure_oracle(t, opp, player)


@given(SEEDS, st.sampled_from([1, 2]))
def test_fixed_point_agrees_with_enumeration(seed, player):
    t, prof = tree_and_profile(seed)
    opp = prof.player(3 - player)
    exact = best_response(t, opp, player, method="exact").value
    approx = best_response(t, opp, player, method="fixed_point").value
    assert abs(float(exact) - float(approx)) < 1e-8


@given(SEEDS, st.sampled_from([F(0), F(1, 20), F(1, 4)]))
def test_certificate_verdict_iff_gains_within_eps(seed, eps):
    t, prof = tree_and_profile(seed)
    cert = check_equilibrium(t, prof, eps)
    assert cert.verdict == all(g <= eps for g in cert.gains)
    assert all(g >= 0 for g in cert.gains)


# -- equilibrium search -------------------------------------------------------------

def test_threat_search_lands_near_the_threat_payoffs():
    res = find_stationary_equilibrium(threat_example_tree(), F(1, 10))
    assert res.found and res.certificate.verdict
    g1, g2 = (float(v) for v in res.stats.gamma)
    assert abs(g1 + 1) <= 0.1 and abs(g2 - 2) <= 0.1


def test_nonpositive_payoffs_give_never_stop():
    t = make_tree({0: [(1, F(1, 2)), (2, F(1, 2))]}, {0: (-1, 0, 0, -1, -1, -1)})
    res = find_stationary_equilibrium(t, F(1, 10))
    assert res.found and res.stats.gamma == (0, 0) and res.certificate.gains == (0, 0)


def test_unreachable_target_is_not_found():
    res = find_stationary_equilibrium(one_node(), F(1, 10), target=((F(1, 2), 1), (F(1, 2), 1)))
    assert not res.found


@given(SEEDS)
def test_search_results_carry_valid_certificates(seed):
    t, _ = tree_and_profile(seed, depth=2)
    res = find_stationary_equilibrium(t, F(1, 10), max_evals=400)
    if res.found:
        assert check_equilibrium(t, res.profile, F(1, 10)).verdict


# -- serialization -------------------------------------------------------------------

@given(SEEDS)
def test_tree_round_trip(seed):
    t, prof = tree_and_profile(seed)
    back = GameTree.from_dict(json.loads(json.dumps(t.to_dict())))
    assert back.digest() == t.digest()
    again = StationaryProfile.from_dict(json.loads(json.dumps(prof.to_dict())), back)
    assert round_stats(back, again) == round_stats(t, prof)


def test_strategy_with_unknown_node_is_rejected():
    with pytest.raises(ValueError):
        StationaryStrategy.from_dict({"zz": "1"}, one_node())
