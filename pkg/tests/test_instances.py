from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, strategies as st

from stopgames.filtration_game import classify
from stopgames.instances import (
    InstanceSpec, SpecConflict, case_model, dumps, generate, load_instance, threat_horizon,
)
from stopgames.tree_game import condition_report, validate_tree

SEEDS = st.integers(0, 2**63 - 1)


def test_depth_one_tree_has_one_internal_node():
    t, _ = load_instance(generate(InstanceSpec(kind="tree", depth=1, k=1), 3))
    assert len(t.internal) == 1
    assert all(v in (-1, 0, 1) for v in t.payoff[t.root].values())


@given(SEEDS, st.integers(1, 5))
def test_capped_trees_satisfy_the_cap_conditions(seed, k):
    doc = generate(InstanceSpec(kind="tree", depth=3, k=k, capped_solo=True, strict_at_cap=True), seed)
    t, rbar = load_instance(doc)
    assert validate_tree(t) == [] and condition_report(t, rbar) == []


@given(SEEDS, st.sampled_from(["tree", "filtration", "coloring", "case"]))
def test_same_seed_same_bytes(seed, kind):
    spec = InstanceSpec(kind=kind, case="threat" if kind == "case" else "", horizon=6)
    assert dumps(generate(spec, seed)) == dumps(generate(spec, seed))


def test_provenance_block():
    spec = InstanceSpec(kind="filtration", points=4, horizon=3, k=2)
    doc = generate(spec, 11)
    assert doc["provenance"]["seed"] == 11
    assert InstanceSpec.from_dict(doc["provenance"]["spec"]) == spec


@pytest.mark.parametrize("kwargs,flags", [
    (dict(kind="filtration", capped_solo=True, strict_at_cap=True, generous=True), ("strict_at_cap", "generous")),
    (dict(strict_at_cap=True), ("strict_at_cap", "capped_solo=False")),
    (dict(grid_payoffs=False, capped_solo=True), ("grid_payoffs=False", "capped_solo")),
    (dict(kind="tree", generous=True), ("kind=tree", "generous")),
    (dict(kind="case", case="never-stop", generous=True), ("case=never-stop", "generous")),
    (dict(kind="tree", case="threat"), ("kind=tree", "case=threat")),
])
def test_conflicting_flags_are_named(kwargs, flags):
    with pytest.raises(SpecConflict) as err:
        InstanceSpec(**kwargs).check()
    assert err.value.flags == flags
    for f in flags:
        assert f in str(err.value)


def test_unknown_spec_field_is_rejected():
    with pytest.raises(ValueError):
        InstanceSpec.from_dict({"kind": "tree", "colour": 2})


@pytest.mark.parametrize("case", ["never-stop", "solo-generous", "threat", "bad-rectangle", "good-rectangle"])
def test_case_models_carry_their_label(case):
    horizon = threat_horizon(1 / 40, 0.5) if case in ("solo-generous", "threat") else 10
    m, r, expected = case_model(random.Random(1), InstanceSpec(kind="case", case=case, horizon=horizon,
                                                              points=3, density=0.5))
    assert expected == case and m.validate() == [] and r.validate(m) == []
    cases = {lab.case[0] for lab in classify(m, r).labels}
    if case in ("bad-rectangle", "good-rectangle"):
        assert cases == {"generic"}
    else:
        assert cases == {case}


def test_threat_horizon_value():
    assert threat_horizon(1 / 40, 0.5) == 383


@given(SEEDS)
def test_filtration_round_trip(seed):
    doc = generate(InstanceSpec(kind="filtration", points=5, horizon=4, k=2), seed)
    m, r = load_instance(json.loads(dumps(doc)))
    again = json.loads(dumps(doc))
    again.pop("provenance")
    from stopgames.filtration_game import model_to_dict
    assert model_to_dict(m, r) == again


def test_unknown_schema_is_rejected():
    with pytest.raises(ValueError):
        load_instance({"schema": "nope", "version": 1})
