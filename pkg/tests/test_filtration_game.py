from __future__ import annotations

import itertools
import json
import random
from fractions import Fraction as F

import pytest
from hypothesis import given, strategies as st

from stopgames.filtration_game import (
    AdaptedStrategy, FiltrationModel, SegmentConditionError, SegmentSchedule, StoppingTime, audit_profile,
    best_response_dp, big_delta_at, check_approximation, check_segment_conditions, classify, concat_equilibrium,
    constant_payoff, delta_approximation, deterministic_model, edit_strategy, extract_trees, game_payoff,
    kernel_errors, model_from_dict, model_to_dict, payoff_from, segment_stats, synthesize, threat_example_model,
)
from stopgames.instances import InstanceSpec, case_model, random_filtration, random_payoff
from stopgames.tree_game import validate_tree

SEEDS = st.integers(0, 10**6)


def tiny(seed: int, npts: int = 4, horizon: int = 3):
    rng = random.Random(seed)
    m = random_filtration(rng, rng.randint(1, npts), rng.randint(1, horizon))
    r = random_payoff(rng, m, 2)
    return rng, m, r


def random_strategy(rng, m):
    return AdaptedStrategy.from_function(m, lambda n, a: F(rng.choice([0, 0, 1, 2, 4]), 4))


def two_point_model(horizon: int = 2):
    """Points 0 and 1 (probability 1/2 each) are told apart at stage 1."""
    parts = [((0, 1),)] + [((0,), (1,))] * horizon
    return FiltrationModel((F(1, 2), F(1, 2)), tuple(parts))


# -- payoffs ------------------------------------------------------------------------

def test_passive_profile_pays_nothing():
    _, m, r = tiny(1)
    never = AdaptedStrategy.never(m)
    assert game_payoff(m, r, never, never) == (0, 0)


def test_first_stage_stop_collects_stage_zero_payoff():
    m = deterministic_model(3)
    r = payoff_from(m, lambda n, a: [1 if n == 0 else -1, F(1, 2), 0, 0, 0, 0], k=2)
    x = edit_strategy(m, None, {(0, 0): 1})
    assert game_payoff(m, r, x, AdaptedStrategy.never(m)) == (1, F(1, 2))


def test_payoff_averages_over_points():
    m = two_point_model()
    r = payoff_from(m, lambda n, a: [1 if a == 0 else 0, 0, 0, 0, 0, 0])
    x = edit_strategy(m, None, {(1, 0): 1, (1, 1): 1})
    assert game_payoff(m, r, x, AdaptedStrategy.never(m)) == (F(1, 2), 0)


def test_short_strategy_is_rejected():
    m = deterministic_model(3)
    r = constant_payoff(m, (0, 0), (0, 0), (0, 0))
    short = AdaptedStrategy(((0,),))
    with pytest.raises(ValueError):
        game_payoff(m, r, short, AdaptedStrategy.never(m))


# -- segment statistics ------------------------------------------------------------------

def test_empty_window_has_zero_stats():
    rng, m, r = tiny(2)
    t = StoppingTime.constant(m, 1 if m.horizon >= 1 else 0)
    for st_ in segment_stats(m, r, random_strategy(rng, m), random_strategy(rng, m), t, t).values():
        assert st_.pi == 0 and st_.gamma == (0, 0)


@given(SEEDS)
def test_whole_window_on_one_point_is_the_game_payoff(seed):
    rng = random.Random(seed)
    m = deterministic_model(rng.randint(1, 5))
    r = random_payoff(rng, m, 2)
    x, y = random_strategy(rng, m), random_strategy(rng, m)
    stats = segment_stats(m, r, x, y, StoppingTime.constant(m, 0), StoppingTime.constant(m, m.horizon))
    assert stats[(0, 0)].rho == game_payoff(m, r, x, y)


@given(SEEDS)
def test_segment_identity(seed):
    rng, m, r = tiny(seed)
    x, y = random_strategy(rng, m), random_strategy(rng, m)
    t1 = StoppingTime.constant(m, 0)
    for st_ in segment_stats(m, r, x, y, t1, StoppingTime.constant(m, m.horizon)).values():
        assert st_.pi * st_.gamma[0] == st_.rho[0] and st_.pi * st_.gamma[1] == st_.rho[1]


# -- best reply dynamic programming ----------------------------------------------------------

def pure_strategies(m):
    keys = [(n, a) for n in range(m.horizon) for a in m.atoms(n)]
    for bits in itertools.product((0, 1), repeat=len(keys)):
        yield edit_strategy(m, None, dict(zip(keys, bits)))


@given(SEEDS, st.sampled_from([1, 2]))
def test_dp_matches_enumeration_of_pure_replies(seed, player):
    rng, m, r = tiny(seed, npts=5, horizon=3)
    opp = random_strategy(rng, m)
    dp = best_response_dp(m, r, opp, player, StoppingTime.constant(m, 0), StoppingTime.constant(m, m.horizon))
    if player == 1:
        best = max(game_payoff(m, r, s, opp)[0] for s in pure_strategies(m))
        mine = game_payoff(m, r, dp.strategy, opp)[0]
    else:
        best = max(game_payoff(m, r, opp, s)[1] for s in pure_strategies(m))
        mine = game_payoff(m, r, opp, dp.strategy)[1]
    assert dp.mean == best == mine


def test_dp_past_the_window_returns_continuation():
    _, m, r = tiny(3)
    t = StoppingTime.constant(m, m.horizon)
    dp = best_response_dp(m, r, AdaptedStrategy.never(m), 1, t, t, continuation=F(1, 3))
    assert set(dp.root_values.values()) == {F(1, 3)}


def test_dp_with_negative_stops_never_stops():
    m = deterministic_model(4)
    r = constant_payoff(m, (-1, 0), (0, 0), (-1, 0))
    dp = best_response_dp(m, r, AdaptedStrategy.never(m), 1, StoppingTime.constant(m, 0),
                          StoppingTime.constant(m, 4))
    assert dp.mean == 0 and dp.strategy == AdaptedStrategy.never(m)


def test_threat_model_dp_stops_with_the_opponent():
    m, r = threat_example_model(5)
    y = edit_strategy(m, None, {(n, 0): 1 for n in range(3, 5)})
    dp = best_response_dp(m, r, y, 1, StoppingTime.constant(m, 0), StoppingTime.constant(m, 5))
    assert dp.mean == 0
    assert [dp.strategy.at(n, 0) for n in range(4)] == [0, 0, 0, 1]


# -- approximation and trees -------------------------------------------------------------------

def test_identical_points_share_atoms():
    m = two_point_model(3)
    r = constant_payoff(m, (1, 0), (0, 1), (0, 0))
    ap = delta_approximation(m, r, 0, StoppingTime.constant(m, 3), F(1, 2))
    assert all(ap.atoms[k] == [(0, 1)] for k in range(4))
    assert check_approximation(ap, r) == []


def test_grid_kernel_model_approximates_itself():
    m = deterministic_model(3)
    r = constant_payoff(m, (1, 0), (0, 1), (0, 0))
    ap = delta_approximation(m, r, 0, StoppingTime.constant(m, 3), F(1, 2))
    assert check_approximation(ap, r) == []
    assert all(err == 0 for *_, err, _ in kernel_errors(ap))


@given(SEEDS)
def test_kernel_errors_are_below_delta(seed):
    rng = random.Random(seed)
    m = random_filtration(rng, rng.randint(2, 12), rng.randint(1, 5))
    r = random_payoff(rng, m, 2)
    ap = delta_approximation(m, r, 0, StoppingTime.constant(m, m.horizon), F(rng.randint(1, 3), 4))
    assert check_approximation(ap, r) == []
    assert all(err < bound for *_, err, bound in kernel_errors(ap))


def test_single_atom_one_step_tree():
    m = deterministic_model(2)
    r = constant_payoff(m, (1, 0), (0, 1), (0, 0))
    trees = extract_trees(delta_approximation(m, r, 0, StoppingTime.constant(m, 1), F(1, 2)), r)
    (et,) = trees.values()
    assert len(et.tree.internal) == 1 and validate_tree(et.tree) == []


def test_zero_length_window_gives_trivial_trees():
    m = two_point_model(2)
    r = constant_payoff(m, (1, 0), (0, 1), (0, 0))
    trees = extract_trees(delta_approximation(m, r, 1, StoppingTime.constant(m, 1), F(1, 2)), r)
    assert trees and all(et.tree.is_trivial for et in trees.values())


def test_equal_data_give_equal_trees():
    m = FiltrationModel((F(1, 4),) * 4, (((0, 1, 2, 3),), ((0, 1), (2, 3)), ((0,), (1,), (2,), (3,))))
    r = payoff_from(m, lambda n, a: [1 if n == 2 and a % 2 == 0 else 0, 0, 0, 0, 0, 0])
    trees = extract_trees(delta_approximation(m, r, 1, StoppingTime.constant(m, 2), F(1, 2)), r)
    digests = {et.tree.digest() for et in trees.values()}
    assert len(digests) == 1


def test_delta_values():
    assert big_delta_at(F(1, 2), 0) == F(1, 8)


# -- segment conditions and concatenation ------------------------------------------------------

def stepwise_schedule(m, x, y):
    times = tuple(StoppingTime.constant(m, n) for n in range(m.horizon + 1))
    return SegmentSchedule(times, tuple((x, y) for _ in range(m.horizon)))


def test_exact_segments_pass_everything():
    m = deterministic_model(3)
    r = constant_payoff(m, (1, 1), (1, 1), (1, 1))
    x = AdaptedStrategy.from_function(m, lambda n, a: 1)
    sched = stepwise_schedule(m, x, AdaptedStrategy.never(m))
    rep = check_segment_conditions(m, r, sched, (1, 1), F(1, 10), (1, 1))
    assert rep.ok and rep.L == 1
    assert rep.conditions["p1_punished_by_L"].vacuous and rep.conditions["p2_punished_by_L"].vacuous


def test_passive_single_segment_fails_termination():
    m = deterministic_model(1)
    r = constant_payoff(m, (0, 0), (0, 0), (0, 0))
    never = AdaptedStrategy.never(m)
    sched = SegmentSchedule((StoppingTime.constant(m, 0), StoppingTime.constant(m, 1)), ((never, never),))
    rep = check_segment_conditions(m, r, sched, (0, 0), F(1, 10), (1, 1), L=1)
    assert not rep.conditions["termination_by_L"].ok
    assert rep.conditions["termination_by_L"].worst_margin == F(-9, 10)
    with pytest.raises(SegmentConditionError):
        concat_equilibrium(m, r, sched, (0, 0), F(1, 10), (1, 1), L=1)


def test_concatenation_certificate_within_eight_eps():
    m = deterministic_model(6)
    r = constant_payoff(m, (1, 1), (1, 1), (1, 1))
    x = AdaptedStrategy.from_function(m, lambda n, a: 1)
    sched = stepwise_schedule(m, x, AdaptedStrategy.never(m))
    xs, ys, cert, rep = concat_equilibrium(m, r, sched, (1, 1), F(1, 10), (1, 1))
    assert cert.verdict and max(cert.gains) <= 8 * F(1, 10)


# -- classification and synthesis ---------------------------------------------------------------

def test_nonpositive_stops_are_never_stop():
    m = deterministic_model(4)
    r = constant_payoff(m, (-1, 1), (1, -1), (1, 1))
    cls = classify(m, r)
    assert cls.labels[0].kind == "minus" and cls.labels[0].case == ("never-stop", None)
    res = synthesize(m, r, F(1, 40))
    assert res.cases == ["never-stop"] and res.certificate.gains == (0, 0)


def test_generous_player_one_is_labeled_generous():
    m = deterministic_model(6)
    r = constant_payoff(m, (F(1, 2), 1), (0, F(1, 2)), (0, 0), k=2)
    lab = classify(m, r).labels[0]
    assert lab.kind == "one" and lab.case == ("solo-generous", 1)


def test_threat_model_is_labeled_as_a_threat():
    m, r = threat_example_model(30)
    lab = classify(m, r).labels[0]
    assert lab.r == (-1, 1) and lab.case == ("threat", 1)


def test_threat_synthesis_trace():
    m, r = threat_example_model(30)
    eps = F(1, 10)
    res = synthesize(m, r, eps)
    (tr,) = res.trace
    assert tr["case"] == "threat" and tr["N"] == 22
    assert tr["stopped_before_N"] == 1 - F(9, 10) ** 22
    assert tr["punishment_prob"] == 1 - F(9, 10) ** 7
    assert res.certificate.verdict and max(res.certificate.gains) <= 8 * eps
    g1, g2 = res.certificate.payoff
    assert abs(g1 + 1) <= 2 * eps and abs(g2 - 2) <= 2 * eps


def test_generous_solo_stops_leave_player_two_little_to_gain():
    m = deterministic_model(400)
    r = constant_payoff(m, (F(1, 2), 1), (0, F(1, 2)), (0, 0), k=2)
    eps = F(1, 40)
    res = synthesize(m, r, eps)
    assert res.cases == ["solo-generous"]
    assert res.y == AdaptedStrategy.never(m)
    assert res.certificate.gains[1] <= 2 * eps and res.certificate.verdict


@pytest.mark.parametrize("case,seed", [("threat", 4), ("good-rectangle", 5), ("bad-rectangle", 10)])
def test_generated_cases_are_recovered(case, seed):
    from stopgames.instances import threat_horizon

    eps = F(1, 40)
    horizon = threat_horizon(eps, 0.5) if case == "threat" else 8
    m, r, expected = case_model(random.Random(seed),
                                InstanceSpec(kind="case", case=case, horizon=horizon, points=2, density=0.5))
    res = synthesize(m, r, eps)
    assert not res.failures
    assert set(res.cases) == {expected}
    assert res.certificate.verdict


def test_small_eps_warning():
    m = deterministic_model(2)
    r = constant_payoff(m, (-1, 0), (0, -1), (0, 0))
    assert any("1/(36 K^2)" in w for w in synthesize(m, r, F(1, 2)).warnings)


def test_audit_detects_profitable_deviation():
    m, r = threat_example_model(3)
    x = AdaptedStrategy.from_function(m, lambda n, a: 1)
    cert = audit_profile(m, r, x, AdaptedStrategy.never(m), F(1, 10))
    assert not cert.verdict and cert.gains[0] == 1


# -- serialization -------------------------------------------------------------------------------

@given(SEEDS)
def test_model_round_trip(seed):
    rng, m, r = tiny(seed)
    m2, r2 = model_from_dict(json.loads(json.dumps(model_to_dict(m, r))))
    x, y = random_strategy(rng, m), random_strategy(rng, m)
    assert game_payoff(m2, r2, x, y) == game_payoff(m, r, x, y)
    assert AdaptedStrategy.from_dict(json.loads(json.dumps(x.to_dict()))) == x
