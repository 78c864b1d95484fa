# cli.py
"""Command-line front end.

    python cli.py validate --model models/gene_full.json --scaling models/gene_full_scaling.json
    python cli.py reduce   --model models/gene_qsa.json --scaling models/gene_qsa_scaling.json --out gene_pdmp.json
    python cli.py simulate --model gene_pdmp.json --method pdmp --T 50 --paths 10000 --out pdmp.csv
    python cli.py sens     --model gene_pdmp.json --method pdmp-decomposition --theta theta1 --T 50 --out sens.csv
    python cli.py compare  a.csv b.csv
    python cli.py oracle-cme --model models/birth_death.json --bounds 200 --T 1

Exit codes: 0 success, 1 usage, 2 validation, 3 numeric or simulation failure,
4 comparison failure.
"""
import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

import data_handler
import display
from errors import (
    ComparisonError, HybridSensError, NumericError, SimulationError, TruncatedPathError, ValidationError,
)
from model import load_model
from oracle import DEFAULT_STATE_CAP, TruncatedStateSpace, cme_sensitivity_fd, cme_solve, observable_expectation
from scaling import (
    PDMP_KIND, derive_reduced_model, identity_scaling, load_reduced_model, reduced_model_document,
    scaling_report_document, timescale_report,
)
from sensitivity import CFD_PDMP, METHODS, PDMP_DECOMPOSITION, SensitivityRequest, estimate
from simulate import (
    DEFAULT_MAX_EVENTS, StepConfig, ctmc_ensemble, observation_gamma, pdmp_ensemble, scaled_initial,
    scaled_parameters,
)
from utils import DEFAULT_SEED, integer_histogram, parse_seed, run_batches

logger = logging.getLogger("hybridsens")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_FAILURE = 3
EXIT_MISMATCH = 4

SIMULATION_METHODS = ("pdmp", "ssa", "nrm")
Z_THRESHOLD = 3.0


# --- Experiment configuration ---

@dataclass
class ExperimentConfig:
    """One command's inputs: model files plus its options, after --config and flags are merged."""

    command: str
    model: Optional[str] = None
    scaling: Optional[str] = None
    seed: int = DEFAULT_SEED
    options: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, args):
        options = {k: v for k, v in vars(args).items() if k not in ("command", "model", "scaling", "seed", "handler")}
        seed = getattr(args, "seed", None)
        return cls(
            command=args.command,
            model=getattr(args, "model", None),
            scaling=getattr(args, "scaling", None),
            seed=DEFAULT_SEED if seed is None else seed,
            options=options,
        )

    def validate(self):
        for role in ("model", "scaling"):
            path = getattr(self, role)
            if path is not None and not os.path.isfile(path):
                raise ValidationError(f"{role} file {path} does not exist")
        return self

    def inputs(self):
        return {"model": self.model, "scaling": self.scaling}


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- Parsing helpers ---

def parse_grid(text):
    """"0,10,50" lists the points; "a:b:n" gives n evenly spaced points from a to b."""
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError(f"grid {text!r} must look like start:stop:count")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise ValidationError("grid count must be at least 1")
        return tuple(np.linspace(start, stop, count).tolist())
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ValidationError(f"grid {text!r} is not a list of numbers") from e


def parse_assignments(items, what):
    """["a=1", "b=2"] -> {"a": "1", "b": "2"}; a mapping from --config passes through."""
    if not items:
        return {}
    if isinstance(items, dict):
        return dict(items)
    out = {}
    for item in items:
        name, sep, value = str(item).partition("=")
        if not sep or not name.strip():
            raise ValidationError(f"{what} {item!r} must look like NAME=VALUE")
        out[name.strip()] = value.strip()
    return out


def parse_overrides(items):
    overrides = {}
    for name, value in parse_assignments(items, "--set").items():
        try:
            overrides[name] = float(value)
        except ValueError as e:
            raise ValidationError(f"--set {name}: {value!r} is not a number") from e
    return overrides


def parse_bounds(text, network):
    """"200" (every species), "200,1" (per species, in order) or "X=200,Y=1"."""
    items = [p.strip() for p in str(text).split(",") if p.strip()]
    if items and all("=" in p for p in items):
        named = parse_assignments(items, "--bounds")
        missing = [s for s in network.species_names if s not in named]
        if missing:
            raise ValidationError(f"--bounds is missing {', '.join(missing)}")
        for name in named:
            network.species_index(name)
        values = [named[s] for s in network.species_names]
    elif len(items) == 1:
        values = items * network.n_species
    else:
        values = items
    if len(values) != network.n_species:
        raise ValidationError(f"--bounds gives {len(values)} values for {network.n_species} species")
    try:
        return tuple(int(v) for v in values)
    except ValueError as e:
        raise ValidationError(f"--bounds {text!r} must be integers") from e


def step_config(args):
    return StepConfig(
        dt=args.dt,
        record_grid=parse_grid(getattr(args, "grid", None)),
        max_events=getattr(args, "max_events", DEFAULT_MAX_EVENTS),
    )


def _scaling_for(config, network):
    if config.scaling is None:
        return None
    return data_handler.load_scaling_file(config.scaling, network)


def _reduced_model(config, document, network, formulas=None):
    """The PDMP behind a model file: stored reduction, derived from --scaling, or all-discrete."""
    if document.get("kind") == PDMP_KIND:
        return load_reduced_model(document)
    scaling = _scaling_for(config, network)
    return derive_reduced_model(network, scaling or identity_scaling(network), formulas)


def _finish(config, out, started, wall_times, extra=None):
    wall_times["total"] = time.perf_counter() - started
    manifest = data_handler.build_manifest(
        config.command, config.inputs(), config.seed, config.options, wall_times, extra,
    )
    path = data_handler.write_manifest(out, manifest)
    if path:
        logger.info("manifest: %s", path)
    return manifest


# --- Commands ---

def cmd_validate(args):
    config = ExperimentConfig.from_args(args).validate()
    document = data_handler.read_document(config.model)
    network = load_model(document)
    scaling = _scaling_for(config, network)
    timescales = timescale_report(network, scaling) if scaling is not None else None
    if document.get("kind") == PDMP_KIND:
        load_reduced_model(document)
    print(display.validation_report(network, document.get("name"), scaling, timescales))
    return EXIT_OK


def cmd_reduce(args):
    started = time.perf_counter()
    config = ExperimentConfig.from_args(args).validate()
    document = data_handler.read_document(config.model)
    network = load_model(document)
    scaling = _scaling_for(config, network) or identity_scaling(network)
    formulas = parse_assignments(args.formula, "--formula")
    reduced = derive_reduced_model(network, scaling, formulas)

    reduced_doc = reduced_model_document(reduced)
    if document.get("name"):
        reduced_doc = {"name": f"{document['name']} (reduced)", **reduced_doc}
    data_handler.write_document(args.out, reduced_doc)
    report_path = args.report_out or os.path.splitext(args.out)[0] + ".report.json"
    data_handler.write_document(report_path, scaling_report_document(reduced.report, network))
    print(display.reduction_report(reduced, network))
    _finish(config, args.out, started, {})
    return EXIT_OK


def _simulate_ctmc(config, args, network, T, cfg):
    """Records (paths, G, S) in the units the grid is reported in."""
    grid = cfg.grid(T)
    theta = network.param_vector(parse_overrides(args.set))
    x0 = network.initial_state()
    time_factor, units = 1.0, np.ones(network.n_species)
    scaling = _scaling_for(config, network)
    if scaling is not None:
        N = scaling.N0 if args.N is None else float(args.N)
        time_factor = N ** observation_gamma(network, scaling, None)
        theta = scaled_parameters(network, N, theta)
        x0 = scaled_initial(network, scaling, N)
        units = N ** -np.array([float(a) for a in scaling.alpha])

    def batch(start, stop):
        records, _ = ctmc_ensemble(network, theta, x0, T * time_factor, grid * time_factor, config.seed, start, stop,
                                   method=args.method, max_events=cfg.max_events)
        return records * units

    return grid, np.concatenate(run_batches(args.paths, batch, progress=args.progress, desc=args.method))


def _simulate_pdmp(config, args, document, network, T, cfg):
    reduced = _reduced_model(config, document, network)
    theta = reduced.network.param_vector(parse_overrides(args.set))

    def batch(start, stop):
        return pdmp_ensemble(reduced, theta, T, cfg, config.seed, start, stop).records[:, :, 0]

    return cfg.grid(T), np.concatenate(run_batches(args.paths, batch, progress=args.progress, desc="pdmp"))


def _reference_timing(args, cfg, seed):
    """Wall clock of an SSA campaign of the full model at the same path count."""
    reference = ExperimentConfig(command="simulate", model=args.reference_model,
                                 scaling=args.reference_scaling, seed=seed).validate()
    document = data_handler.read_document(reference.model)
    network = load_model(document)
    ref_args = argparse.Namespace(**{**vars(args), "method": "ssa", "set": None})
    started = time.perf_counter()
    _simulate_ctmc(reference, ref_args, network, args.T, cfg)
    return time.perf_counter() - started


def cmd_simulate(args):
    started = time.perf_counter()
    config = ExperimentConfig.from_args(args).validate()
    if args.paths < 1:
        raise ValidationError("--paths must be at least 1")
    cfg = step_config(args)
    cfg.resolve(args.T)
    document = data_handler.read_document(config.model)
    network = load_model(document)

    campaign = time.perf_counter()
    if args.method == "pdmp":
        grid, records = _simulate_pdmp(config, args, document, network, args.T, cfg)
    else:
        grid, records = _simulate_ctmc(config, args, network, args.T, cfg)
    wall_times = {"campaign": time.perf_counter() - campaign}
    species = network.species_names

    summary = data_handler.summary_frame(grid, records, species)
    data_handler.write_csv(args.out, summary, config.seed)
    if args.raw_out:
        if args.raw_layout == "blocks":
            text = data_handler.seed_line(config.seed) + data_handler.trajectory_blocks(grid, records, species)
            data_handler.write_text(args.raw_out, text)
        else:
            data_handler.write_csv(args.raw_out, data_handler.trajectory_frame(grid, records, species), config.seed)

    extra = {}
    if args.hist_species:
        i = network.species_index(args.hist_species)
        support, counts = integer_histogram(records[:, -1, i])
        hist_out = args.hist_out or (os.path.splitext(args.out)[0] + ".hist.csv" if args.out not in (None, "-") else None)
        if hist_out:
            data_handler.write_csv(hist_out, data_handler.histogram_frame(support, counts), config.seed)
        extra["histogram"] = {"species": args.hist_species, "path": hist_out}
        if args.out not in (None, "-"):
            print(display.histogram_report(support, counts, args.hist_species))
    if args.reference_model:
        wall_times["reference_ssa"] = _reference_timing(args, cfg, config.seed)
        extra["cost_ratio"] = wall_times["campaign"] / wall_times["reference_ssa"]
        logger.info("cost ratio %s / ssa: %.3f", args.method, extra["cost_ratio"])

    if args.out not in (None, "-"):
        print(display.summary_report(summary, species))
    _finish(config, args.out, started, wall_times, extra)
    return EXIT_OK


def cmd_sens(args):
    started = time.perf_counter()
    config = ExperimentConfig.from_args(args).validate()
    if not args.theta:
        raise ValidationError("sens needs at least one --theta")
    document = data_handler.read_document(config.model)
    network = load_model(document)
    observable = args.observable or next(iter(network.observables), None)
    if observable is None:
        raise ValidationError("the model defines no observables; pass --observable")
    cfg = step_config(args)

    reduced = scaling = None
    if args.method in (PDMP_DECOMPOSITION, CFD_PDMP):
        reduced = _reduced_model(config, document, network)
    else:
        scaling = _scaling_for(config, network)

    estimates = []
    for theta_name in args.theta:
        request = SensitivityRequest(
            observable=observable,
            theta_name=theta_name,
            T=args.T,
            method=args.method,
            paths=args.paths,
            h=args.h,
            aux_times=args.aux_times,
            aux_pairs=args.aux_pairs,
            cfg=cfg,
            seed=config.seed,
            central=args.central,
            overrides=parse_overrides(args.set),
            progress=args.progress,
        )
        result = estimate(request, network=network, reduced=reduced, scaling=scaling, N=args.N)
        logger.info("%s %s: %.6g (stderr %.3g)", args.method, theta_name, result.value, result.stderr)
        estimates.append(result)

    data_handler.write_csv(args.out, data_handler.sensitivity_frame(estimates, args.timings), config.seed)
    if args.out not in (None, "-"):
        print(display.sensitivity_report(estimates))
    wall_times = {e.parameter: e.wall_time for e in estimates}
    _finish(config, args.out, started, wall_times, {"diagnostics": {e.parameter: e.diagnostics for e in estimates}})
    return EXIT_OK


def agreement_table(a: pd.DataFrame, b: pd.DataFrame) -> pd.DataFrame:
    """Row-by-row z-scores |a - b| / sqrt(se_a^2 + se_b^2)."""
    key = ["parameter"]
    if a["parameter"].duplicated().any() or b["parameter"].duplicated().any():
        if "method" not in a.columns or "method" not in b.columns:
            raise ComparisonError("duplicate parameters and no method column to tell rows apart")
        key = ["parameter", "method"]
    keys_a = set(map(tuple, a[key].astype(str).values))
    keys_b = set(map(tuple, b[key].astype(str).values))
    if keys_a != keys_b:
        only = sorted(keys_a ^ keys_b)
        raise ComparisonError(f"row keys differ: {', '.join('/'.join(k) for k in only)}")
    left = a[key + ["estimate", "stderr"]].astype({k: str for k in key})
    right = b[key + ["estimate", "stderr"]].astype({k: str for k in key})
    merged = left.merge(right, on=key, suffixes=("_a", "_b"))
    for col in ("stderr_a", "stderr_b"):
        merged[col] = merged[col].fillna(0.0)
    diff = (merged["estimate_a"] - merged["estimate_b"]).abs()
    combined = np.sqrt(merged["stderr_a"] ** 2 + merged["stderr_b"] ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(combined > 0, diff / combined, np.where(diff == 0, 0.0, np.inf))
    merged["z"] = z
    return merged


def cmd_compare(args):
    a = data_handler.read_sensitivity_csv(args.a)
    b = data_handler.read_sensitivity_csv(args.b)
    table = agreement_table(a, b)
    print(display.comparison_report(table, args.threshold))
    if args.out:
        data_handler.write_csv(args.out, table)
    return EXIT_OK if (table["z"] <= args.threshold).all() else EXIT_MISMATCH


def cmd_oracle_cme(args):
    started = time.perf_counter()
    config = ExperimentConfig.from_args(args).validate()
    network = data_handler.load_model_file(config.model)
    theta = network.param_vector(parse_overrides(args.set))
    space = TruncatedStateSpace(parse_bounds(args.bounds, network), cap=args.cap)
    result = cme_solve(network, theta, space, args.T, args.dt)

    observable = args.observable or next(iter(network.observables), None)
    expectation = observable_expectation(network, result, observable, theta) if observable else None
    print(display.cme_report(result, network.species_names, expectation, observable))
    extra = {"boundary_mass": result.boundary_mass, "leakage": result.leakage, "expectation": expectation}
    if args.theta:
        sensitivities = {}
        for name in args.theta:
            sensitivities[name] = cme_sensitivity_fd(network, theta, name, space, args.T, args.dt, args.h, observable)
            print(f"  d E[{observable}] / d {name} = {display.format_value(sensitivities[name], 10)}")
        extra["sensitivities"] = sensitivities
    if args.out:
        data_handler.write_csv(args.out, data_handler.distribution_frame(result, network.species_names), config.seed)
    _finish(config, args.out, started, {}, extra)
    return EXIT_OK


# --- Parser ---

def _common(parser, model=True):
    if model:
        parser.add_argument("--model", required=True, help="Model document (JSON, or YAML by suffix).")
        parser.add_argument("--scaling", help="Scaling document for the model.")
    parser.add_argument("--config", help="Experiment YAML/JSON whose keys supply defaults for the flags.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only.")


def _campaign(parser, h_default=None):
    parser.add_argument("--out", help="Output CSV (default: stdout).")
    parser.add_argument("--seed", type=parse_seed, default=DEFAULT_SEED, help="Root seed, decimal or 0x hex.")
    parser.add_argument("--paths", type=int, default=1000)
    parser.add_argument("--T", type=float, required=True, help="Time horizon.")
    parser.add_argument("--dt", type=float, help="Euler step (default T/50000).")
    parser.add_argument("--grid", help="Record grid: 'a,b,c' or 'start:stop:count' (default: T only).")
    parser.add_argument("--set", action="append", metavar="NAME=VALUE", help="Override a parameter value.")
    parser.add_argument("--N", type=float, help="Scale of the CTMC (default: N0 of the scaling).")
    parser.add_argument("--max-events", type=int, default=DEFAULT_MAX_EVENTS)
    parser.add_argument("--progress", action="store_true", help="Show progress bars.")
    if h_default is not None:
        parser.add_argument("--h", type=float, default=h_default, help="Finite-difference perturbation.")


def build_parser():
    parser = UsageParser(prog="hybridsens", description="Multiscale stochastic reaction networks: simulation and sensitivities.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {data_handler.VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    p = sub.add_parser("validate", help="Check model (and scaling) documents.")
    _common(p)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("reduce", help="Derive the hybrid (PDMP) reduction.")
    _common(p)
    p.add_argument("--out", required=True, help="Reduced-model document to write.")
    p.add_argument("--report-out", help="Timescale report JSON (default: <out>.report.json).")
    p.add_argument("--formula", action="append", metavar="REACTION=EXPR", help="Limit rate supplied by hand.")
    p.set_defaults(handler=cmd_reduce)

    p = sub.add_parser("simulate", help="Simulate paths and summarise them on a grid.")
    _common(p)
    _campaign(p)
    p.add_argument("--method", choices=SIMULATION_METHODS, default="pdmp")
    p.add_argument("--raw-out", help="Write every path too.")
    p.add_argument("--raw-layout", choices=("long", "blocks"), default="long")
    p.add_argument("--hist-species", help="Species for the terminal marginal histogram.")
    p.add_argument("--hist-out", help="Histogram CSV (default: <out>.hist.csv).")
    p.add_argument("--reference-model", help="Full model to time an SSA campaign against.")
    p.add_argument("--reference-scaling", help="Scaling of the reference model.")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("sens", help="Estimate parameter sensitivities.")
    _common(p)
    _campaign(p, 1e-2)
    p.add_argument("--method", choices=METHODS, default=PDMP_DECOMPOSITION)
    p.add_argument("--observable", help="Observable name (default: the first one).")
    p.add_argument("--theta", action="append", metavar="NAME", help="Parameter to differentiate by (repeatable).")
    p.add_argument("--aux-times", type=int, default=10)
    p.add_argument("--aux-pairs", type=int, default=1)
    p.add_argument("--central", action="store_true", help="Central rather than forward differences.")
    p.add_argument("--timings", action="store_true", help="Fill the wall_time_s column.")
    p.set_defaults(handler=cmd_sens)

    p = sub.add_parser("compare", help="Compare two sensitivity CSVs row by row.")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--threshold", type=float, default=Z_THRESHOLD, help="Largest acceptable z-score.")
    p.add_argument("--out", help="Write the z-score table as CSV.")
    _common(p, model=False)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("oracle-cme", help="Integrate the truncated master equation.")
    _common(p)
    p.add_argument("--bounds", required=True, help="Upper bound per species: '200', '200,1' or 'X=200,Y=1'.")
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--dt", type=float, help="RK4 step (default T/10000).")
    p.add_argument("--cap", type=int, default=DEFAULT_STATE_CAP, help="Largest allowed state count.")
    p.add_argument("--observable")
    p.add_argument("--theta", action="append", metavar="NAME", help="Also report d E f / d NAME.")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--set", action="append", metavar="NAME=VALUE")
    p.add_argument("--seed", type=parse_seed, default=DEFAULT_SEED)
    p.add_argument("--out", help="Distribution CSV.")
    p.set_defaults(handler=cmd_oracle_cme)
    return parser, sub


def _config_argument(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config


def _apply_config(sub, argv, path):
    """Values from the experiment file become defaults, so explicit flags still win."""
    values = data_handler.load_experiment_config(path)
    command = next((a for a in argv if a in sub.choices), None)
    if command is None:
        return
    target = sub.choices[command]
    known = {a.dest for a in target._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValidationError(f"{path}: unknown option(s) {', '.join(unknown)}")
    for action in target._actions:
        if action.dest in values:
            action.required = False
    target.set_defaults(**values)


def configure_logging(verbose=False, quiet=False):
    level = os.environ.get("HYBRIDSENS_LOG_LEVEL", "INFO").upper()
    if verbose:
        level = "DEBUG"
    elif quiet:
        level = "WARNING"
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level, logging.INFO))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, sub = build_parser()
    try:
        config_path = _config_argument(argv)
        if config_path:
            _apply_config(sub, argv, config_path)
    except ValidationError as e:
        print(display.violations_report(e), file=sys.stderr)
        return EXIT_VALIDATION
    args = parser.parse_args(argv)
    if isinstance(getattr(args, "seed", None), str):
        args.seed = parse_seed(args.seed)
    configure_logging(args.verbose, args.quiet)

    try:
        return args.handler(args)
    except ComparisonError as e:
        logger.error("%s", e)
        return EXIT_MISMATCH
    except ValidationError as e:
        print(display.violations_report(e), file=sys.stderr)
        return EXIT_VALIDATION
    except TruncatedPathError as e:
        logger.error("%s; no output was written for this campaign", e)
        return EXIT_FAILURE
    except (NumericError, SimulationError) as e:
        logger.error("%s", e)
        return EXIT_FAILURE
    except HybridSensError as e:
        logger.error("%s", e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
