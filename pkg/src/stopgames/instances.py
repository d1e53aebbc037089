"""Seeded instance generators and JSON (de)serialization for the command line and the suites.

Every generator draws from its own ``random.Random(seed)``; a generated
document embeds the spec and the seed, and ``dumps`` is canonical, so the same
(spec, seed) always produces byte-identical files.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Mapping

from .filtration_game import (
    CASES,
    FiltrationModel,
    PayoffProcess,
    model_from_dict,
    model_to_dict,
    payoff_from,
)
from .stochastic_ramsey import LookupColoring, MarkedColoring, NTColoring, binary_model
from .tree_game import (
    SCHEMA_VERSION,
    GameTree,
    StationaryProfile,
    StationaryStrategy,
    condition_report,
    make_tree,
    validate_tree,
)

KINDS = ("tree", "filtration", "coloring", "case")
COLOR_NAMES = ("red", "blue", "green")


class SpecConflict(ValueError):
    """The requested constraint flags cannot hold together."""

    def __init__(self, flags: tuple, why: str):
        super().__init__(f"conflicting flags {' + '.join(flags)}: {why}")
        self.flags = flags


@dataclass(frozen=True)
class InstanceSpec:
    kind: str = "tree"
    # sizes
    depth: int = 2                 # tree: levels of internal nodes; coloring: binary depth
    branching: int = 2
    internal: int = 0              # tree: internal node count, 0 = random up to the depth limit
    horizon: int = 4
    points: int = 8
    # payoff law
    k: int = 1
    density: float = 0.3           # share of nodes / stages where a solo stop attains its cap
    colors: int = 2
    case: str = ""                 # kind "case": one of the tail cases
    # constraint flags
    grid_payoffs: bool = True      # payoffs on the 1/k grid in [-1, 1]
    capped_solo: bool = False      # solo stops never beat the stopper's cap rbar
    strict_at_cap: bool = False    # a solo stop at the stopper's cap leaves the other below its cap
    generous: bool = False         # filtration: some cap-attaining solo stop gives the other its cap
    rbar: tuple | None = None

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["rbar"] = None if self.rbar is None else [str(v) for v in self.rbar]
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "InstanceSpec":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown instance spec fields: {sorted(extra)}")
        d = dict(doc)
        if d.get("rbar") is not None:
            d["rbar"] = tuple(Fraction(v) for v in d["rbar"])
        return cls(**d)

    def check(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.k < 1:
            raise ValueError("k must be a positive integer")
        if not 0 <= self.density <= 1:
            raise ValueError("density must lie in [0, 1]")
        if self.strict_at_cap and self.generous:
            raise SpecConflict(("strict_at_cap", "generous"),
                               "a cap-attaining solo stop cannot both leave the other below and at its cap")
        if self.strict_at_cap and not self.capped_solo:
            raise SpecConflict(("strict_at_cap", "capped_solo=False"), "strictness is relative to the caps")
        if not self.grid_payoffs and (self.capped_solo or self.kind == "case"):
            raise SpecConflict(("grid_payoffs=False", "capped_solo" if self.capped_solo else "kind=case"),
                               "caps and tail labels are computed on the payoff grid")
        if self.kind == "tree" and self.generous:
            raise SpecConflict(("kind=tree", "generous"), "generosity is a property of filtration tails")
        if self.kind == "case":
            if self.case not in CASES:
                raise ValueError(f"case must be one of {CASES}")
            if self.case == "never-stop" and self.generous:
                raise SpecConflict(("case=never-stop", "generous"), "never-stop tails have no positive cap")
        elif self.case:
            raise SpecConflict((f"kind={self.kind}", f"case={self.case}"), "a tail case needs kind=case")
        if self.kind == "coloring" and self.colors not in (2, 3):
            raise ValueError("colorings use 2 or 3 colors")
        if self.rbar is not None:
            if len(self.rbar) != 2 or not all(-1 <= v <= 1 for v in self.rbar):
                raise ValueError("rbar must be a pair in [-1, 1]")
            if self.kind == "tree" and self.strict_at_cap and min(self.rbar) <= -1:
                raise SpecConflict(("strict_at_cap", "rbar=-1"), "nothing on the grid lies strictly below -1")


# -- canonical JSON -------------------------------------------------------------------------

def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1, default=str) + "\n"


def provenance(spec: InstanceSpec, seed: int) -> dict:
    return {"generator": "stopgames.instances", "seed": seed, "spec": spec.to_dict()}


# -- trees ------------------------------------------------------------------------------------

def _grid(k: int, lo=Fraction(-1), hi=Fraction(1)) -> list:
    return [Fraction(i, k) for i in range(-k, k + 1) if lo <= Fraction(i, k) <= hi]


def _probs(rng: random.Random, n: int) -> list:
    raw = [rng.randint(1, 4) for _ in range(n)]
    return [Fraction(v, sum(raw)) for v in raw]


def random_tree_shape(rng: random.Random, internal: int, depth: int, branching: int) -> dict:
    """{node: [(child, prob), ...]} with ``internal`` internal nodes at depth < ``depth``."""
    level = {0: 0}
    kids: dict = {0: []}
    nxt = 1
    for _ in range(internal - 1):
        open_ = [s for s in kids if level[s] + 1 < depth and len(kids[s]) < branching]
        if not open_:
            break
        p = rng.choice(open_)
        kids[p].append(nxt)
        kids[nxt] = []
        level[nxt] = level[p] + 1
        nxt += 1
    spec = {}
    for s in list(kids):
        children = list(kids[s])
        extra = rng.randint(0 if children else 1, max(0, branching - len(children)))
        for _ in range(max(extra, 0 if children else 1)):
            children.append(nxt)
            nxt += 1
        spec[s] = list(zip(children, _probs(rng, len(children))))
    return spec


def max_internal(depth: int, branching: int) -> int:
    return sum(branching ** i for i in range(depth))


def _tree_payoffs(rng: random.Random, nodes: list, spec: InstanceSpec, rbar) -> dict:
    k = spec.k
    full = _grid(k)
    pay = {}
    for s in nodes:
        v = [rng.choice(full) for _ in range(6)]
        if spec.capped_solo:
            r1, r2 = rbar
            v[0] = r1 if rng.random() < spec.density else rng.choice(_grid(k, hi=r1))
            v[3] = r2 if rng.random() < spec.density else rng.choice(_grid(k, hi=r2))
            if spec.strict_at_cap:
                if v[0] == r1:
                    v[1] = rng.choice(_grid(k, hi=r2 - Fraction(1, k)))
                if v[3] == r2:
                    v[2] = rng.choice(_grid(k, hi=r1 - Fraction(1, k)))
        pay[s] = tuple(v)
    return pay


def random_rbar(rng: random.Random, k: int) -> tuple:
    """A cap pair on the grid, strictly above -1, with at least one positive component."""
    pos = [v for v in _grid(k) if v > 0]
    rest = [v for v in _grid(k) if v > -1]
    pair = [rng.choice(pos), rng.choice(rest)]
    rng.shuffle(pair)
    return tuple(pair)


def random_tree(rng: random.Random, spec: InstanceSpec) -> tuple:
    """(tree, rbar); rbar is None unless the caps were requested."""
    cap = max_internal(spec.depth, spec.branching)
    n = spec.internal or rng.randint(1, cap)
    shape = random_tree_shape(rng, min(n, cap), spec.depth, spec.branching)
    rbar = None
    if spec.capped_solo:
        rbar = tuple(spec.rbar) if spec.rbar is not None else random_rbar(rng, spec.k)
    internal = [s for s, kids in shape.items() if kids]
    t = make_tree(shape, _tree_payoffs(rng, internal, spec, rbar), k=spec.k)
    bad = validate_tree(t) + (condition_report(t, rbar) if spec.strict_at_cap else [])
    if bad:
        raise AssertionError("generator produced an invalid tree: " + "; ".join(bad))
    return t, rbar


def random_profile(rng: random.Random, t: GameTree, levels: int = 4, zero: float = 0.3) -> StationaryProfile:
    """Stop probabilities in {0, 1/levels, ..., 1}, zero with extra weight."""
    def one():
        return StationaryStrategy({s: Fraction(rng.randint(1, levels), levels) for s in t.internal
                                   if rng.random() >= zero})
    return StationaryProfile(one(), one())


# -- filtration models ---------------------------------------------------------------------

def random_partitions(rng: random.Random, npts: int, horizon: int, split: float = 0.6,
                      split_until: int | None = None) -> tuple:
    """Refining partitions of range(npts): each atom splits with probability ``split``."""
    parts = [[tuple(range(npts))]]
    stop = horizon if split_until is None else min(split_until, horizon)
    for n in range(horizon):
        new = []
        for atom in parts[-1]:
            if n < stop and len(atom) > 1 and rng.random() < split:
                cut = sorted(rng.sample(range(1, len(atom)), rng.randint(1, min(2, len(atom) - 1))))
                new.extend(atom[i:j] for i, j in zip([0] + cut, cut + [len(atom)]))
            else:
                new.append(atom)
        parts.append(new)
    return tuple(tuple(stage) for stage in parts)


def random_filtration(rng: random.Random, npts: int, horizon: int, split: float = 0.6,
                      split_until: int | None = None) -> FiltrationModel:
    raw = [rng.randint(1, 5) for _ in range(npts)]
    prob = tuple(Fraction(v, sum(raw)) for v in raw)
    return FiltrationModel(prob, random_partitions(rng, npts, horizon, split, split_until))


def random_payoff(rng: random.Random, m: FiltrationModel, k: int) -> PayoffProcess:
    grid = _grid(k)
    return payoff_from(m, lambda n, a: [rng.choice(grid) for _ in range(6)], k=k)


# -- colorings ---------------------------------------------------------------------------------

def random_coloring(rng: random.Random, depth: int, colors: int, extra: int = 0) -> tuple:
    """(binary model, coloring): a stage/atom lookup table or a hit-a-mark coloring, both consistent."""
    m = binary_model(depth, extra=extra)
    names = COLOR_NAMES[:colors]
    if rng.random() < 0.5:
        table = {(n, a): rng.choice(names) for n in range(m.horizon + 1) for a in m.atoms(n)}
        return m, LookupColoring(table, names)
    marks = {}
    density = rng.choice([0.15, 0.3, 0.5])
    for n in range(1, m.horizon + 1):
        for a in m.atoms(n):
            if rng.random() < density:
                marks[(n, a)] = rng.choice(names[:-1])
    return m, MarkedColoring(marks, names)


def coloring_from_dict(doc: Mapping) -> NTColoring:
    def key(s):
        n, a = s.split(":")
        return int(n), int(a)
    colors = tuple(doc["colors"])
    if doc["kind"] == "LookupColoring":
        return LookupColoring({key(s): c for s, c in doc["table"].items()}, colors)
    if doc["kind"] == "MarkedColoring":
        return MarkedColoring({key(s): c for s, c in doc["marks"].items()}, colors)
    raise ValueError(f"cannot rebuild coloring of kind {doc['kind']!r}")


# -- tail-case models ------------------------------------------------------------------------

def threat_horizon(eps, density: float, margin: float = 1.3) -> int:
    """Stages needed before a lone stopper using eps at a ``density`` share of stages has stopped w.p. 1 - eps."""
    e = float(eps)
    need = math.log(e) / math.log(1 - e)
    return int(math.ceil(margin * need / max(density, 1e-9))) + 4


# Tails of the rectangle cases, as (p1 solo, p2 solo, both) on the 1/2 grid.  None of
# them is generous: a solo stop at the stopper's cap leaves the other below its cap.
BAD_TAILS = (
    ((1, Fraction(1, 2)), (Fraction(1, 2), 1), (1, 1)),
    ((1, 0), (0, 1), (1, 1)),
    ((Fraction(1, 2), 0), (0, Fraction(1, 2)), (1, 1)),
)
GOOD_TAILS = (
    ((1, -1), (-1, 1), (0, 0)),
    ((Fraction(1, 2), 0), (0, Fraction(1, 2)), (-1, -1)),
    ((1, 0), (0, 1), (Fraction(1, 2), Fraction(1, 2))),
)


def case_model(rng: random.Random, spec: InstanceSpec) -> tuple:
    """(model, payoff, expected case) for one of the tail cases.

    Every point gets the requested label; what varies with the seed is the
    information structure, the stages where caps are attained and the
    payoff components that do not affect the label.
    """
    k = 2
    half = Fraction(1, 2)
    case = spec.case
    npts = max(1, min(spec.points, 6))
    H = spec.horizon
    m = random_filtration(rng, npts, H, split=0.6, split_until=3)
    side = rng.choice((1, 2))
    d = spec.density if spec.density > 0 else 0.5
    # make sure caps are attained at least three times on every path
    forced = {n for n in range(1, H, max(1, H // 4))}

    def hit(n):
        return n in forced or rng.random() < d

    def mirror(v):
        p1, p2, both = (v[0], v[1]), (v[2], v[3]), (v[4], v[5])
        return (p2[1], p2[0], p1[1], p1[0], both[1], both[0])

    grid = _grid(k)
    if case == "never-stop":
        def fn(n, a):
            v = [rng.choice(grid) for _ in range(6)]
            v[0] = rng.choice(_grid(k, hi=Fraction(0)))
            v[3] = rng.choice(_grid(k, hi=Fraction(0)))
            return v
    elif case == "solo-generous":
        def fn(n, a):
            # the side player's cap is 1/2 and gives the other 1 >= its cap 1/2
            if hit(n):
                v = [half, 1, -1, rng.choice(_grid(k, hi=half)), *rng.sample(grid, 2)]
            else:
                v = [rng.choice(_grid(k, hi=Fraction(0))), rng.choice(grid), -1,
                     rng.choice(_grid(k, hi=half)), *rng.sample(grid, 2)]
            if n in forced:
                v[3] = half
            return v if side == 1 else mirror(v)
    elif case == "threat":
        def fn(n, a):
            # the side player's cap is -1/2 (its stops give the other 1); the other's
            # cap 1/2 gives the side player -1 < -1/2, so only the side is generous
            h = hit(n)
            v = [-half if h else -1, 1 if h else rng.choice(grid), -1,
                 half if n in forced else rng.choice(_grid(k, hi=half)), rng.choice(grid), rng.choice(grid)]
            return v if side == 1 else mirror(v)
    else:
        # a rectangle tail per stage-3 atom; before that dull stages that never
        # attain a cap and pay nobody more than 0
        pool = BAD_TAILS if case == "bad-rectangle" else GOOD_TAILS
        split = min(3, H)
        tails = {a: rng.choice(pool) for a in m.atoms(split)}
        nonpos = _grid(k, hi=Fraction(0))

        def fn(n, a):
            if n < split:
                return (-1, -1, -1, -1, rng.choice(nonpos), rng.choice(nonpos))
            t = tails[m.labels[split][m.rep(n, a)]]
            return (*t[0], *t[1], *t[2])
    return m, payoff_from(m, fn, k=k), case


# -- generate -------------------------------------------------------------------------------

def generate(spec: InstanceSpec, seed: int) -> dict:
    """Serialized instance for ``spec``; deterministic in ``seed``; carries a provenance block."""
    spec.check()
    rng = random.Random(seed)
    if spec.kind == "tree":
        t, rbar = random_tree(rng, spec)
        doc = t.to_dict()
        if rbar is not None:
            doc["rbar"] = [str(v) for v in rbar]
    elif spec.kind == "filtration":
        m = random_filtration(rng, spec.points, spec.horizon)
        doc = model_to_dict(m, random_payoff(rng, m, spec.k))
    elif spec.kind == "coloring":
        m, col = random_coloring(rng, spec.depth, spec.colors)
        doc = {"schema": "coloring_instance", "version": SCHEMA_VERSION, "model": m.to_dict(),
               "coloring": col.to_dict()}
    else:
        m, r, case = case_model(rng, spec)
        doc = model_to_dict(m, r)
        doc["expected_case"] = case
    doc["provenance"] = provenance(spec, seed)
    return doc


def load_instance(doc: Mapping, arith: str = "rational"):
    """Rebuild the objects of a serialized instance, by its schema tag."""
    schema = doc.get("schema")
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {doc.get('version')!r}")
    if schema == "game_tree":
        t = GameTree.from_dict(doc, arith)
        rbar = tuple(Fraction(v) for v in doc["rbar"]) if doc.get("rbar") else None
        return t, rbar
    if schema == "filtration_model":
        return model_from_dict(doc, arith)
    if schema == "coloring_instance":
        return FiltrationModel.from_dict(doc["model"], arith), coloring_from_dict(doc["coloring"])
    raise ValueError(f"unknown instance schema {schema!r}")
