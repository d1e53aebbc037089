"""Command-line driver: load or generate instances, run a solver or a battery, write JSON artifacts.

Exit status: 0 when every requested certificate passes, CERT_FAILED when a
certificate (or a property battery) fails, SEARCH_EXHAUSTED when a finite
search gave up (equilibrium not found, chain horizon-limited, coloring
incomplete, synthesis fell back), BAD_INPUT for parse and validation errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from . import suites
from .filtration_game import (
    StoppingTime,
    check_approximation,
    constant_payoff,
    deterministic_model,
    delta_approximation,
    synthesize,
    threat_example_model,
)
from .instances import InstanceSpec, SpecConflict, dumps, generate, load_instance
from .stochastic_ramsey import ramsey_chain
from .tree_equilibrium import Rectangle, accrete_equilibria, build_covering, color_tree
from .tree_game import (
    EXACT_CAP,
    SCHEMA_VERSION,
    StationaryProfile,
    as_fraction,
    check_equilibrium,
    find_stationary_equilibrium,
    threat_example_tree,
)

OK, CERT_FAILED, SEARCH_EXHAUSTED, BAD_INPUT = 0, 1, 2, 3
COMMANDS = ("generate", "solve-tree", "check-eq", "color-tree", "accrete", "approx", "ramsey", "synthesize", "suite")
BUILTINS = ("threat-tree", "threat-model", "never-stop-model")


class InputError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    eps: Fraction = Fraction(1, 10)
    seed: int = 0
    arith: str = "rational"
    horizon: int | None = None
    tail_window: tuple | None = None
    grid_step: Fraction | None = None
    exact_cap: int = EXACT_CAP
    input: str | None = None
    out: str | None = None
    options: dict = field(default_factory=dict)

    def check(self) -> None:
        if self.command not in COMMANDS:
            raise InputError(f"unknown command {self.command!r}")
        if not 0 < self.eps < 1:
            raise InputError("eps must lie in (0, 1)")
        if not 0 <= self.seed < 2 ** 64:
            raise InputError("seed must be a 64-bit unsigned integer")
        if self.arith not in ("rational", "float"):
            raise InputError("arith must be rational or float")


@dataclass
class RunOutcome:
    status: int
    artifact: dict
    summary: list          # (key, value) rows


# -- input -----------------------------------------------------------------------------------

def _load(cfg: RunConfig):
    if cfg.input is None:
        raise InputError("this command needs an instance (a JSON file or one of " + ", ".join(BUILTINS) + ")")
    if cfg.input == "threat-tree":
        return threat_example_tree(), None
    if cfg.input == "threat-model":
        return threat_example_model(cfg.horizon or 30)
    if cfg.input == "never-stop-model":
        m = deterministic_model(cfg.horizon or 6)
        return m, constant_payoff(m, (-1, 0), (0, -1), (-1, -1))
    path = Path(cfg.input)
    if not path.exists():
        raise InputError(f"no such instance file: {cfg.input}")
    try:
        doc = json.loads(path.read_text())
        return load_instance(doc, cfg.arith)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read instance {cfg.input}: {exc}") from exc


def _profile(text: str | None, t):
    if not text:
        raise InputError("check-eq needs --profile (JSON text or a file)")
    p = Path(text)
    try:
        doc = json.loads(p.read_text() if p.exists() else text)
        return StationaryProfile.from_dict(doc, t)
    except (ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"bad profile: {exc}") from exc


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return "(" + ", ".join(_fmt(x) for x in v) + ")"
    if isinstance(v, Fraction):
        if v.denominator == 1:
            return str(v)
        return f"{float(v):.6g} [{v}]" if v.denominator < 10 ** 6 else f"{float(v):.6g}"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# -- commands --------------------------------------------------------------------------------------

def _cmd_generate(cfg: RunConfig) -> RunOutcome:
    opts = dict(cfg.options.get("spec") or {})
    if cfg.horizon is not None:
        opts["horizon"] = cfg.horizon
    try:
        spec = InstanceSpec.from_dict(opts)
        doc = generate(spec, cfg.seed)
    except SpecConflict as exc:
        raise InputError(str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad instance spec: {exc}") from exc
    return RunOutcome(OK, doc, [("kind", spec.kind), ("seed", cfg.seed), ("schema", doc["schema"])])


def _cert_rows(cert) -> list:
    st = cert.stats
    return [("pi", st.pi), ("rho", st.rho), ("gamma", st.gamma), ("best replies", cert.br_values),
            ("gains", cert.gains), ("margins", tuple(cert.eps - g for g in cert.gains)),
            ("verdict", "eps-equilibrium" if cert.verdict else "not an eps-equilibrium")]


def _cmd_solve_tree(cfg: RunConfig) -> RunOutcome:
    t, _ = _load(cfg)
    kw = {"seed": cfg.seed}
    if cfg.grid_step is not None:
        kw["grid_step"] = cfg.grid_step
    res = find_stationary_equilibrium(t, cfg.eps, cfg.options.get("target"), **kw)
    doc = {"schema": "search_result", "version": SCHEMA_VERSION, "found": res.found, "phase": res.phase,
           "evaluations": res.evaluations}
    if not res.found:
        return RunOutcome(SEARCH_EXHAUSTED, doc, [("found", False), ("phase", res.phase)])
    cert = check_equilibrium(t, res.profile, cfg.eps, exact_cap=cfg.exact_cap)
    doc["profile"] = res.profile.to_dict()
    doc["certificate"] = cert.to_dict()
    return RunOutcome(OK if cert.verdict else CERT_FAILED, doc, [("phase", res.phase)] + _cert_rows(cert))


def _cmd_check_eq(cfg: RunConfig) -> RunOutcome:
    t, _ = _load(cfg)
    prof = _profile(cfg.options.get("profile"), t)
    cert = check_equilibrium(t, prof, cfg.eps, exact_cap=cfg.exact_cap)
    doc = {"schema": "equilibrium_certificate", "version": SCHEMA_VERSION, "profile": prof.to_dict(),
           "certificate": cert.to_dict()}
    return RunOutcome(OK if cert.verdict else CERT_FAILED, doc, _cert_rows(cert))


def _rbar(cfg: RunConfig, rbar):
    given = cfg.options.get("rbar")
    if given is not None:
        return tuple(as_fraction(v) for v in given)
    if rbar is None:
        raise InputError("instance carries no rbar; pass --rbar R1 R2")
    return rbar


def _cmd_color_tree(cfg: RunConfig) -> RunOutcome:
    t, rbar = _load(cfg)
    cov = build_covering(_rbar(cfg, rbar), cfg.eps)
    res = color_tree(t, cov, cfg.eps, seed=cfg.seed)
    doc = {"schema": "color_result", "version": SCHEMA_VERSION}
    doc.update(res.to_dict(cov))
    rows = [("status", res.status), ("color", res.color), ("lambdas", tuple(res.lambdas))]
    return RunOutcome(SEARCH_EXHAUSTED if res.status == "incomplete" else OK, doc, rows)


def _cmd_accrete(cfg: RunConfig) -> RunOutcome:
    t, rbar = _load(cfg)
    corner = cfg.options.get("rect")
    if corner is None:
        raise InputError("accrete needs --rect A1 A2 (lower-left corner of the rectangle)")
    rect = Rectangle(as_fraction(corner[0]), as_fraction(corner[1]), cfg.eps)
    try:
        res = accrete_equilibria(t, rect, cfg.eps, rbar=_rbar(cfg, rbar) if (rbar or cfg.options.get("rbar")) else None,
                                 check_range=not cfg.options.get("ignore_eps_range"), seed=cfg.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    doc = {"schema": "accretion_result", "version": SCHEMA_VERSION, "heavy_nodes": sorted(map(str, res.d)),
           "profile": res.profile.to_dict(), "steps": len(res.steps), "certificate": res.certificate}
    rows = [("heavy set", sorted(map(str, res.d)) or "empty"), ("steps", len(res.steps))]
    rows += [(c["name"], f"{c['lhs']} <= {c['rhs']}: {c['holds']}") for c in res.certificate["checks"]]
    return RunOutcome(OK if res.ok else CERT_FAILED, doc, rows)


def _cmd_approx(cfg: RunConfig) -> RunOutcome:
    m, r = _load(cfg)
    start = int(cfg.options.get("start") or 0)
    until = int(cfg.options.get("until") if cfg.options.get("until") is not None else m.horizon)
    if not 0 <= start <= until <= m.horizon:
        raise InputError("need 0 <= start <= until <= horizon")
    ap = delta_approximation(m, r, start, StoppingTime.constant(m, until), cfg.eps)
    errors = check_approximation(ap, r)
    doc = {"schema": "approximation", "version": SCHEMA_VERSION, "pair": ap.to_dict(), "errors": errors}
    rows = [("start", start), ("until", until), ("errors", len(errors))]
    return RunOutcome(CERT_FAILED if errors else OK, doc, rows)


def _cmd_ramsey(cfg: RunConfig) -> RunOutcome:
    m, col = _load(cfg)
    links = int(cfg.options.get("links") or 2)
    try:
        ch = ramsey_chain(m, col, cfg.eps, links=links)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    rows = [("links", links), ("mono_prob", ch.mono_prob), ("all_pairs_prob", ch.all_pairs_prob),
            ("horizon_limited", ch.horizon_limited)]
    return RunOutcome(SEARCH_EXHAUSTED if ch.horizon_limited else OK, ch.to_dict(), rows)


def _cmd_synthesize(cfg: RunConfig) -> RunOutcome:
    m, r = _load(cfg)
    try:
        res = synthesize(m, r, cfg.eps, tail_window=cfg.tail_window)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    cert = res.certificate
    rows = [("cases", ", ".join(res.cases)), ("payoff", cert.payoff), ("gains", cert.gains),
            ("allowed gain", cert.factor * cert.eps), ("verdict", cert.verdict)]
    rows += [("failure", f) for f in res.failures] + [("warning", w) for w in res.warnings]
    status = CERT_FAILED if not cert.verdict else SEARCH_EXHAUSTED if res.failures else OK
    return RunOutcome(status, res.to_dict(), rows)


def _cmd_suite(cfg: RunConfig) -> RunOutcome:
    scale = float(cfg.options.get("scale") or 1.0)
    only = set(cfg.options.get("only") or []) or None
    names = [n for n, _ in suites.BATTERIES]
    if only and not only <= set(names):
        raise InputError(f"unknown batteries {sorted(only - set(names))}; choose from {names}")
    results = suites.run_all(cfg.seed, scale, only)
    results.sort(key=lambda b: b.name)
    doc = {"schema": "suite_result", "version": SCHEMA_VERSION, "seed": cfg.seed, "scale": scale,
           "batteries": [{k: v for k, v in b.to_dict().items() if k != "seconds"} for b in results]}
    rows = [(b.name, b.line()) for b in results]
    rows.append(("passed", f"{sum(b.passed for b in results)}/{len(results)}"))
    return RunOutcome(OK if all(b.passed for b in results) else CERT_FAILED, doc, rows)


HANDLERS = {
    "generate": _cmd_generate,
    "solve-tree": _cmd_solve_tree,
    "check-eq": _cmd_check_eq,
    "color-tree": _cmd_color_tree,
    "accrete": _cmd_accrete,
    "approx": _cmd_approx,
    "ramsey": _cmd_ramsey,
    "synthesize": _cmd_synthesize,
    "suite": _cmd_suite,
}


def run(cfg: RunConfig) -> RunOutcome:
    """Execute one command; parse and validation problems become a BAD_INPUT outcome."""
    try:
        cfg.check()
        out = HANDLERS[cfg.command](cfg)
    except InputError as exc:
        return RunOutcome(BAD_INPUT, {"schema": "error", "version": SCHEMA_VERSION, "error": str(exc)},
                          [("error", str(exc))])
    if cfg.command != "generate":
        out.artifact.setdefault("config", _config_block(cfg))
    return out


def _config_block(cfg: RunConfig) -> dict:
    return {"command": cfg.command, "eps": str(cfg.eps), "seed": cfg.seed, "arith": cfg.arith,
            "input": cfg.input, "horizon": cfg.horizon,
            "tail_window": list(cfg.tail_window) if cfg.tail_window else None}


def write_artifacts(cfg: RunConfig, out: RunOutcome) -> list:
    if not cfg.out:
        return []
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    main_file = d / f"{cfg.command}.json"
    main_file.write_text(dumps(out.artifact))
    table = d / f"{cfg.command}.summary.txt"
    table.write_text(render(out))
    return [main_file, table]


def render(out: RunOutcome) -> str:
    width = max([len(k) for k, _ in out.summary] + [6])
    lines = [f"{k.ljust(width)}  {_fmt(v)}" for k, v in out.summary]
    lines.append(f"{'status'.ljust(width)}  {out.status}")
    return "\n".join(lines) + "\n"


# -- argument parsing --------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(BAD_INPUT, f"{self.prog}: error: {message}\n")


def _frac(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stopgames", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--eps", type=_frac, default=Fraction(1, 10))
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--arith", choices=("rational", "float"), default="rational")
    common.add_argument("--horizon", type=int)
    common.add_argument("--tail-window", type=int, nargs=2, metavar=("LO", "HI"))
    common.add_argument("--grid-step", type=_frac)
    common.add_argument("--exact-cap", type=int, default=EXACT_CAP)
    common.add_argument("--out", metavar="DIR")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a seeded instance")
    g.add_argument("--kind", choices=("tree", "filtration", "coloring", "case"), default="tree")
    g.add_argument("--case", default="")
    for name in ("depth", "branching", "internal", "points", "k", "colors"):
        g.add_argument(f"--{name}", type=int)
    g.add_argument("--density", type=float)
    g.add_argument("--rbar", type=_frac, nargs=2)
    for flag in ("capped-solo", "strict-at-cap", "generous"):
        g.add_argument(f"--{flag}", action="store_true")
    g.add_argument("--off-grid", action="store_true", help="drop the payoff grid constraint")

    for name, helptext in (("solve-tree", "search a stationary eps-equilibrium"),
                           ("check-eq", "certify a stationary profile"),
                           ("color-tree", "color a tree by a covering of payoff space"),
                           ("accrete", "accrete equilibria on a bad rectangle"),
                           ("approx", "tree approximation of a filtration model"),
                           ("ramsey", "monochromatic chain for a coloring"),
                           ("synthesize", "approximate equilibrium of a filtration game")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("instance", help="instance JSON file or one of " + ", ".join(BUILTINS))
        if name == "check-eq":
            c.add_argument("--profile", required=True, help='e.g. {"p1": {"0": "1"}, "p2": {"0": "1/50"}}')
        if name == "solve-tree":
            c.add_argument("--target", type=_frac, nargs=4, metavar=("LO1", "HI1", "LO2", "HI2"))
        if name in ("color-tree", "accrete"):
            c.add_argument("--rbar", type=_frac, nargs=2)
        if name == "accrete":
            c.add_argument("--rect", type=_frac, nargs=2, metavar=("A1", "A2"), required=True)
            c.add_argument("--ignore-eps-range", action="store_true")
        if name == "approx":
            c.add_argument("--start", type=int, default=0)
            c.add_argument("--until", type=int)
        if name == "ramsey":
            c.add_argument("--links", type=int, default=2)

    s = sub.add_parser("suite", parents=[common], help="run the property batteries")
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--only", nargs="*", default=[])
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    opts: dict = {}
    for key in ("profile", "rbar", "rect", "ignore_eps_range", "start", "until", "links", "scale", "only"):
        if getattr(ns, key, None) is not None:
            opts[key] = getattr(ns, key)
    if getattr(ns, "target", None):
        opts["target"] = tuple(ns.target)
    if ns.command == "generate":
        spec = {"kind": ns.kind, "case": ns.case, "capped_solo": ns.capped_solo, "strict_at_cap": ns.strict_at_cap,
                "generous": ns.generous, "grid_payoffs": not ns.off_grid}
        for name in ("depth", "branching", "internal", "points", "k", "colors", "density"):
            if getattr(ns, name) is not None:
                spec[name] = getattr(ns, name)
        if ns.rbar is not None:
            spec["rbar"] = [str(v) for v in ns.rbar]
        opts["spec"] = spec
        opts.pop("rbar", None)
    return RunConfig(command=ns.command, eps=ns.eps, seed=ns.seed, arith=ns.arith, horizon=ns.horizon,
                     tail_window=tuple(ns.tail_window) if ns.tail_window else None, grid_step=ns.grid_step,
                     exact_cap=ns.exact_cap, input=getattr(ns, "instance", None), out=ns.out, options=opts)


def main(argv: Sequence[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    cfg = config_from_args(ns)
    out = run(cfg)
    if cfg.command == "generate" and not cfg.out and out.status == OK:
        sys.stdout.write(dumps(out.artifact))
        return out.status
    sys.stdout.write(render(out))
    for path in write_artifacts(cfg, out):
        print(f"wrote {path}")
    return out.status


if __name__ == "__main__":
    sys.exit(main())
