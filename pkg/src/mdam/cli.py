"""Command-line entry point: ``mdam impute | analyze | simulate | ppc``.

Exit status is 0 on success, 1 for invalid input (bad files, specs, margins
or weights) and 2 when a chain or fit fails at run time.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, load_json, load_margins, load_spec, schema_to_dict
from .dataset import SchemaError, augment_unit_nonrespondents, load_csv, missingness_summary
from .estimate import (
    EstimationError,
    ht_total,
    pool,
    result_row,
    survey_logit,
    weighted_proportion,
    write_results,
)
from .glm import DrawError, FitError, TermSpec, expand_design
from .margins import MarginError
from .ppc import Quantity, ppc_intervals
from .sampler import ChainError, ModelSpec, MultipleImputations, SpecError, run, run_icin, validate_spec
from .simulate import SCENARIOS, run_scenario, scenario_from_dict
from .weights import WeightError, weights_from_adjusted, weights_from_design

log = logging.getLogger("mdam")

USER_ERRORS = (ConfigError, SchemaError, SpecError, MarginError, WeightError, EstimationError,
               FileNotFoundError, FileExistsError, ValueError)
RUNTIME_ERRORS = (ChainError, FitError, DrawError, np.linalg.LinAlgError, RuntimeError)


class UsageError(ValueError):
    pass


def _out_dir(path: Path, force: bool) -> Path:
    occupied = path.is_file() or (path.is_dir() and any(path.iterdir()))
    if occupied and not force:
        raise FileExistsError(f"{path} exists; pass --force to replace it")
    path.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))


def _publish(tmp: Path, path: Path) -> None:
    if path.exists():
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    os.replace(tmp, path)


def _effective_spec(spec: ModelSpec, args) -> ModelSpec:
    if getattr(args, "measurement_error", False):
        if spec.measurement_error is None:
            raise SpecError("--measurement-error given but the spec has no measurement_error block")
        return spec
    return replace(spec, measurement_error=None)


# -- impute ---------------------------------------------------------------------

def cmd_impute(args) -> int:
    schema, spec = load_spec(args.spec)
    ds = load_csv(args.data, schema, args.population_size)
    if args.augment:
        ds = augment_unit_nonrespondents(ds, args.augment)
    report = (weights_from_design(ds) if args.weights == "design"
              else weights_from_adjusted(ds, rescale_to=args.population_size if args.rescale else None))
    ds = report.apply(ds)
    ctrl = {k: v for k, v in (("iterations", args.iterations), ("burnin", args.burnin),
                              ("thin", args.thin), ("offset_rule", args.offset_rule))
            if v is not None}
    spec = _effective_spec(spec.with_controls(**ctrl), args)
    margins = None
    if not args.icin:
        if args.margins is None:
            raise UsageError("--margins is required unless --icin is given")
        margins = load_margins(args.margins, args.population_size)
    validate_spec(spec, ds, margins, icin=args.icin)
    summary = missingness_summary(ds)
    log.info("%d units, %d unit nonrespondents; item-missing rates %s", ds.n, ds.n_unit_nr,
             {k: round(v, 4) for k, v in summary.item_rates.items()})
    out = Path(args.out)
    tmp = _out_dir(out, args.force)
    try:
        rng = np.random.default_rng(args.seed)
        mi = (run_icin(ds, spec, rng, seed=args.seed) if args.icin
              else run(ds, spec, margins, rng, seed=args.seed))
        mi.save(tmp)
        (tmp / "spec.json").write_text(json.dumps(
            {"schema": schema_to_dict(schema), "model": spec.to_dict()}, indent=2) + "\n")
        _publish(tmp, out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    print(f"wrote {mi.L} completed datasets to {out} (mode {mi.mode}, spec {mi.spec_hash[:12]})")
    for key, count in sorted(mi.counters.items()):
        print(f"  {key}: {count}")
    return 0


# -- analyze --------------------------------------------------------------------------

def _check_hash(spec_path, directory: Path, manifest_hash: str) -> None:
    if spec_path is None:
        return
    _, spec = load_spec(spec_path)
    stored = directory / "spec.json"
    had_me = True
    if stored.exists():
        had_me = json.loads(stored.read_text())["model"].get("measurement_error") is not None
    if not had_me:
        spec = replace(spec, measurement_error=None)
    if spec.model_hash() != manifest_hash:
        raise SpecError(f"spec {spec_path} does not match the model that produced {directory} "
                        f"({spec.model_hash()[:12]} vs {manifest_hash[:12]})")


def _level(var, value):
    return value if isinstance(value, int) else var.index_of(value)


def _default_estimands(variables) -> list:
    return [{"name": f"total {v.name}={lab}", "type": "total", "variable": v.name, "level": lab}
            for v in variables for lab in v.levels[1:]]


def analyze_estimand(mi: MultipleImputations, e: dict, level: float) -> list:
    kind = e.get("type", "proportion")
    dsets = mi.datasets
    variables = dsets[0].variables
    by_name = {v.name: v for v in variables}
    name = e.get("name") or json.dumps(e, sort_keys=True)
    try:
        if kind == "total":
            lev = _level(by_name[e["variable"]], e.get("level", 1))
            return [result_row(name, pool(dsets, lambda d: ht_total(d, e["variable"], lev), level))]
        if kind == "proportion":
            return [result_row(name, pool(dsets, lambda d: weighted_proportion(
                d, e["target"], e.get("given")), level))]
        if kind == "logit":
            (yname, ylev), = e["outcome"].items()
            ylev = _level(by_name[yname], ylev)
            terms = TermSpec.parse(e.get("terms", "I"))
            cols = terms.column_names(variables)
            fits = []
            for d in dsets:
                X = expand_design(d.cells, variables, terms)
                fits.append(survey_logit(X, (d.column(yname) == ylev).astype(float), d.weights))
            return [result_row(f"{name}: {c}", pool(
                range(len(fits)), lambda i, j=j: (fits[i][0][j], fits[i][1][j, j]), level))
                for j, c in enumerate(cols)]
    except KeyError as err:
        raise ConfigError(f"estimand {name!r}: unknown or missing {err}") from None
    except EstimationError as err:
        # e.g. an empty subgroup in some completed dataset
        return [result_row(name, None, f"undefined: {err}")]
    raise ConfigError(f"estimand {name!r}: unknown type {kind!r}")


def cmd_analyze(args) -> int:
    directory = Path(args.imputations)
    mi = MultipleImputations.load(directory)
    _check_hash(args.spec, directory, mi.spec_hash)
    if args.estimands:
        ests = load_json(args.estimands)
        ests = ests.get("estimands", []) if isinstance(ests, dict) else ests
    else:
        ests = _default_estimands(mi.datasets[0].variables)
    rows = [r for e in ests for r in analyze_estimand(mi, e, args.level)]
    write_results(rows, args.out)
    print(f"wrote {len(rows)} estimates from {mi.L} completed datasets to {args.out}")
    return 0


# -- simulate ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    names = list(SCENARIOS) if args.scenarios == "all" else args.scenarios.split(",")
    unknown = [n for n in names if n not in SCENARIOS]
    if unknown:
        raise UsageError(f"unknown scenarios {unknown}; choose from {sorted(SCENARIOS)} or 'all'")
    overrides = load_json(args.config) if args.config else {}
    cli = {k: v for k, v in (("replicates", args.replicates), ("iterations", args.iterations),
                             ("burnin", args.burnin), ("thin", args.thin), ("regime", args.weights))
           if v is not None}
    configs = [scenario_from_dict({**overrides, **cli}, SCENARIOS[n]) for n in names]
    out = Path(args.out)
    tmp = _out_dir(out, args.force)
    try:
        summary = {}
        for i, sc in enumerate(configs):
            log.info("scenario %s: %d replicates", sc.name, sc.replicates)
            res = run_scenario(sc, args.seed + i, workers=args.threads)
            res.write_csv(tmp / f"{sc.name}.csv")
            summary[sc.name] = {"failures": res.failures, "replicates": res.n_ok,
                                "valid": res.valid, "population": res.population_moments,
                                "seed": args.seed + i}
            print(f"{sc.name}: {res.n_ok} replicates, {res.failures} failed"
                  + ("" if res.valid else " (INVALID: failure rate at or above 2%)"))
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        _publish(tmp, out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    return 0 if all(v["valid"] for v in summary.values()) else 2


# -- ppc --------------------------------------------------------------------------------

def cmd_ppc(args) -> int:
    directory = Path(args.imputations)
    mi = MultipleImputations.load(directory)
    spec_path = args.spec or directory / "spec.json"
    _check_hash(args.spec, directory, mi.spec_hash)
    schema, spec = load_spec(spec_path)
    stored = directory / "spec.json"
    if stored.exists() and json.loads(stored.read_text())["model"].get("measurement_error") is None:
        spec = replace(spec, measurement_error=None)
    ds = load_csv(args.data, schema, mi.datasets[0].N)
    spec = validate_spec(spec, ds, icin=True)
    draws = mi.parameter_draws()
    if args.draws and len(draws) > args.draws:
        draws = [draws[i] for i in np.linspace(0, len(draws) - 1, args.draws).round().astype(int)]
    quantities = None
    if args.quantities:
        q = load_json(args.quantities)
        q = q.get("quantities", []) if isinstance(q, dict) else q
        by_name = {v.name: v for v in ds.variables}
        quantities = [Quantity(e["name"],
                               {k: _level(by_name[k], v) for k, v in e["target"].items()},
                               {k: _level(by_name[k], v) for k, v in (e.get("given") or {}).items()}
                               or None) for e in q]
    res = ppc_intervals(draws, ds, spec, np.random.default_rng(args.seed), quantities,
                        level=args.level)
    res.write_csv(args.out)
    print(f"{int(res.contained.sum())} of {int((~res.undefined).sum())} quantities inside their "
          f"{args.level:.0%} predictive intervals ({int(res.undefined.sum())} undefined); "
          f"wrote {args.out}")
    return 0


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def chain_flags(sp):
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--burnin", type=int)
        sp.add_argument("--thin", type=int)

    imp = sub.add_parser("impute", help="run the sampler and write completed datasets")
    imp.add_argument("--data", required=True)
    imp.add_argument("--spec", required=True, help="JSON with 'schema' and 'model' sections")
    imp.add_argument("--margins", help="JSON with auxiliary margins")
    imp.add_argument("--weights", choices=("design", "adjusted"), default="design")
    imp.add_argument("--rescale", action="store_true",
                     help="with --weights adjusted, rescale constructed weights to the population size")
    imp.add_argument("--population-size", type=int, required=True)
    chain_flags(imp)
    imp.add_argument("--offset-rule", choices=("probability", "linear"))
    imp.add_argument("--seed", type=int, required=True)
    imp.add_argument("--icin", action="store_true", help="no margins and no U offsets")
    imp.add_argument("--measurement-error", action="store_true")
    imp.add_argument("--augment", type=int, default=0,
                     help="append this many unit nonrespondents with no recorded values")
    imp.add_argument("--out", required=True)
    imp.add_argument("--force", action="store_true")
    imp.set_defaults(func=cmd_impute)

    an = sub.add_parser("analyze", help="pool estimates over completed datasets")
    an.add_argument("--imputations", required=True)
    an.add_argument("--estimands", help="JSON list of estimands (default: every total)")
    an.add_argument("--spec", help="check that imputations came from this spec")
    an.add_argument("--level", type=float, default=0.95)
    an.add_argument("--out", required=True)
    an.set_defaults(func=cmd_analyze)

    sim = sub.add_parser("simulate", help="repeated-sampling comparison of MD-AM and ICIN")
    sim.add_argument("--scenarios", default="all", help="'all' or comma-separated names")
    sim.add_argument("--config", help="JSON of scenario field overrides")
    sim.add_argument("--replicates", type=int)
    chain_flags(sim)
    sim.add_argument("--weights", choices=("design", "adjusted"))
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--threads", type=int, default=1, help="worker processes for replicates")
    sim.add_argument("--out", required=True)
    sim.add_argument("--force", action="store_true")
    sim.set_defaults(func=cmd_simulate)

    pc = sub.add_parser("ppc", help="posterior predictive checks")
    pc.add_argument("--imputations", required=True)
    pc.add_argument("--data", required=True)
    pc.add_argument("--spec", help="defaults to the spec stored with the imputations")
    pc.add_argument("--quantities", help="JSON list of quantities (default: margins and "
                                         "outcome conditionals)")
    pc.add_argument("--draws", type=int, help="use this many evenly spaced parameter draws")
    pc.add_argument("--level", type=float, default=0.95)
    pc.add_argument("--seed", type=int, required=True)
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_ppc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RUNTIME_ERRORS as err:
        print(f"mdam: run failed: {err}", file=sys.stderr)
        return 2
    except USER_ERRORS as err:
        print(f"mdam: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
