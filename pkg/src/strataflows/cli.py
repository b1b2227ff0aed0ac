"""Command-line front end: ``strataflows {simulate,estimate-sampling,fit,summarize}``.

Exit codes: 0 success, 2 input or configuration error, 3 runtime failure.
Every command writes ``manifest.json`` (and ``warnings.json``) into its
output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import cascade, io, schemas
from ._rng import stream
from .inference import (
    GammaFlowModel,
    SamplerError,
    build_flow_gp,
    diagnostics,
    gibbs_fit,
    hmc_fit,
    summarize,
)
from .inference.draws import PosteriorDraws
from .inference.gibbs import GibbsError
from .inference.priors import PriorError
from .sampling import BetaXi, EmpiricalXi, FixedXi, SamplingSpec
from .sim import (
    SimulationError,
    SitModel,
    gp_strata_space,
    simulate_gp_flows,
    simulate_multinomial,
    simulate_sit_gillespie,
    simulate_sit_ode,
    reference_sit_model,
    thin_events,
)
from .hsgp import DomainError
from .strata import FlowCounts, FlowProportions, StrataError, StrataSpace, Stratum, counts_from_scores

log = logging.getLogger("strataflows")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
THREADS_ENV = "STRATAFLOWS_THREADS"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path, schema):
    if path is None:
        cfg = {}
    else:
        try:
            cfg = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{path}: at {where}: {e.message}") from e
    return cfg


class Run:
    """Collects inputs, outputs and warnings of one command invocation."""

    def __init__(self, args, config):
        self.args = args
        self.command = args.command
        self.config = config
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = {}
        self.outputs = []
        self.warnings = []
        self.t0 = time.perf_counter()
        self.seed = args.seed if args.seed is not None else int(config.get("seed", 0))

    def input(self, path):
        path = Path(path)
        if not path.is_file():
            raise io.InputError(f"input file {path} does not exist")
        self.inputs[str(path)] = _digest(path)
        return path

    def path(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(p.relative_to(self.out)))
        return p

    def warn(self, kind, message, **extra):
        self.warnings.append({"kind": kind, "message": message, **extra})

    def finish(self):
        (self.out / "warnings.json").write_text(json.dumps(self.warnings, indent=2, default=str) + "\n")
        manifest = {
            "command": self.command,
            "config_hash": hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest(),
            "seed": self.seed,
            "inputs": self.inputs,
            "artifact_version": _version(),
            "wall_clock_seconds": round(time.perf_counter() - self.t0, 3),
            "outputs": sorted(set(self.outputs)) + ["warnings.json"],
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        if self.warnings:
            bar = "=" * 72
            lines = [bar, f"WARNINGS ({len(self.warnings)})"] + [f"- {w['message']}" for w in self.warnings] + [bar]
            print("\n".join(lines), file=sys.stderr)


def _threads(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1


def _strata_from_json(items, gender_semantics=None):
    strata = [Stratum(s["id"], s.get("gender", "U"), s.get("age"), s.get("location")) for s in items]
    if gender_semantics is None:
        gender_semantics = all(s.gender in ("M", "F") for s in strata)
    return StrataSpace(strata, gender_semantics=gender_semantics)


def _xi_values(space, value, name):
    if value is None:
        return None
    if isinstance(value, list) and len(value) != space.A:
        raise ConfigError(f"{name}: expected {space.A} values, got {len(value)}")
    try:
        return space.xi_vector(value, name)
    except StrataError as e:
        raise ConfigError(str(e)) from e


def _write_truth(run, prefix, out):
    io.write_strata(out.space, run.path(f"{prefix}strata.csv"))
    if out.z is not None:
        io.write_flow(out.z, run.path(f"{prefix}truth_z.csv"), "value")
    if out.pi is not None:
        io.write_flow(out.pi, run.path(f"{prefix}truth_pi.csv"), "value")
    if out.n is not None:
        io.write_flow(out.n, run.path(f"{prefix}counts.csv"), "count")
    if out.trajectory is not None and out.times is not None:
        prev = out.prevalence()
        io.write_rows(
            run.path(f"{prefix}prevalence.csv"),
            ["time", "prevalence"],
            [[repr(float(t)), repr(float(p))] for t, p in zip(out.times, prev)],
        )
        rows = []
        for i, t in enumerate(out.times):
            for a, sid in enumerate(out.space.ids):
                rows.append(
                    [repr(float(t)), sid]
                    + [repr(float(out.trajectory[k][i, a])) for k in ("S", "I", "T")]
                )
        io.write_rows(run.path(f"{prefix}compartments.csv"), ["time", "stratum", "S", "I", "T"], rows)


# ---------------------------------------------------------------------------
# simulate


def _sit_model(cfg):
    m = cfg["model"]
    if m == "reference":
        return reference_sit_model(
            N=cfg.get("N", 30000),
            initial_prevalence=cfg.get("initial_prevalence", 0.1),
            normalization=cfg.get("normalization", "source"),
        )
    strata = [Stratum(s["id"], s.get("gender", "U"), s.get("age"), s.get("location")) for s in m["strata"]]
    A = len(strata)
    try:
        return SitModel(
            strata,
            np.array(m["beta"], dtype=float),
            m["gamma"],
            m["mu"],
            m["S0"],
            m["I0"],
            m.get("T0", [0.0] * A),
            cfg.get("normalization", "source"),
        )
    except ValueError as e:
        raise ConfigError(f"model: {e}") from e


def cmd_simulate(args, cfg, run):
    kind = args.kind
    reps = int(cfg.get("replicates", 1))
    for r in range(reps):
        prefix = "" if reps == 1 else f"replicate_{r:03d}/"
        rng = stream(run.seed, r)
        if kind in ("ode", "gillespie"):
            model = _sit_model(cfg)
            t_span = cfg["t_span"]
            n_times = cfg.get("n_times", 201)
            times = np.linspace(t_span[0], t_span[1], n_times)
            window = cfg.get("window")
            if kind == "ode":
                out = simulate_sit_ode(
                    model, t_span, rtol=cfg.get("rtol", 1e-8), atol=cfg.get("atol", 1e-10), window=window, t_eval=times
                )
                space = out.space
                xs = _xi_values(space, cfg.get("xi"), "xi")
                if xs is not None:
                    xr = _xi_values(space, cfg.get("xi_recipient"), "xi_recipient")
                    w = space.pair_weights(xs, xr)
                    out.n = FlowCounts(space, rng.poisson(out.z.values * w))
            else:
                out = simulate_sit_gillespie(
                    model,
                    t_span,
                    seed=run.seed,
                    replicate=r,
                    window=window,
                    sample_times=times,
                    max_events=cfg.get("max_events", 1_000_000),
                    track_individuals="xi" in cfg,
                )
                space = out.space
                xs = _xi_values(space, cfg.get("xi"), "xi")
                if xs is not None:
                    xr = _xi_values(space, cfg.get("xi_recipient"), "xi_recipient")
                    th = thin_events(
                        out.events, space, xs, xr, rng, infected=out.meta["window_infected"]
                    )
                    out.n = th.counts
                    stage = cascade.StageCounts(
                        list(space.ids),
                        [th.sampled[s][1] for s in space.ids],
                        [th.sampled[s][0] for s in space.ids],
                        "participation",
                    )
                    io.write_stage_counts([stage], run.path(f"{prefix}stages.csv"))
                else:
                    out.n = out.z
        elif kind == "multinomial":
            space = _strata_from_json(cfg["strata"], cfg.get("gender_semantics"))
            vals = np.zeros(space.L)
            for c in cfg["pi0"]:
                try:
                    vals[space.pair_position(c["source"], c["recipient"])] += c["value"]
                except StrataError as e:
                    raise ConfigError(f"pi0: {e}") from e
            if not vals.sum() > 0:
                raise ConfigError("pi0: all values are zero")
            pi0 = FlowProportions(space, vals / vals.sum())
            xs = _xi_values(space, cfg["xi"], "xi")
            xr = _xi_values(space, cfg.get("xi_recipient"), "xi_recipient")
            try:
                out = simulate_multinomial(pi0, xs, cfg["n_target"], rng, xr, cfg.get("mode", "pair"))
            except ValueError as e:
                raise ConfigError(str(e)) from e
        elif kind == "gp":
            lo, hi = cfg["ages"]
            if hi < lo:
                raise ConfigError("ages: upper bound below lower bound")
            space = gp_strata_space(range(lo, hi + 1), tuple(cfg.get("locations", ("h", "l"))))
            xs = _xi_values(space, cfg.get("xi", 1.0), "xi")
            xr = _xi_values(space, cfg.get("xi_recipient"), "xi_recipient")
            try:
                out = simulate_gp_flows(cfg.get("params"), space, xs, xr, rng)
            except KeyError as e:
                raise ConfigError(f"params: missing entry {e}") from e
            if out.lam is not None:
                io.write_flow(out.lam, run.path(f"{prefix}truth_lambda.csv"), "value")
        else:  # pragma: no cover - argparse restricts choices
            raise ConfigError(f"unknown simulation kind {kind!r}")
        _write_truth(run, prefix, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate-sampling


def _stage_draws(stage, cfg, run, space, k):
    method = cfg.get("method", "beta")
    n = int(cfg.get("draws", 1000))
    if method == "beta":
        post = cascade.beta_posterior(stage, cfg.get("alpha", 0.5), cfg.get("beta", 0.5))
        return post.draws(stream(run.seed, 500_000 + k), n), None
    if space is None:
        raise ConfigError("the betabinomial method needs --strata for the design matrix")
    try:
        strata = [space.stratum(i) for i in stage.ids]
    except StrataError as e:
        raise io.InputError(f"stage {stage.stage!r}: {e}") from e
    design = cfg.get("design", "contrasts")
    if design == "intercept":
        X, cols, blocks = np.zeros((len(strata), 0)), [], []
    else:
        X, cols, blocks = cascade.design_matrix(strata, design)
    model = cascade.BetaBinomialModel(X, cols, cfg.get("gamma", "free"), blocks if cfg.get("icar", True) else [])
    fit_kw = {
        "chains": cfg.get("chains", 4),
        "warmup": cfg.get("warmup", 500),
        "iterations": cfg.get("iterations", 500),
        "n_steps": cfg.get("n_steps", 16),
    }
    d = cascade.fit_betabinomial(model, stage, seed=run.seed + k, **fit_kw)
    if d.stats["separation"]:
        run.warn("separation", f"stage {stage.stage}: separation in {d.stats['separation']}")
    ndiv = int(d.stats["divergent"].sum())
    if ndiv:
        run.warn("divergences", f"stage {stage.stage}: {ndiv} divergent transitions")
    xi = d.get("xi", flatten=True)
    pick = stream(run.seed, 600_000 + k).choice(len(xi), size=n, replace=len(xi) < n)
    cv = None
    folds = int(cfg.get("cv_folds", 0))
    if folds:
        cv = cascade.crossvalidate(model, stage, folds=folds, seed=run.seed, **fit_kw)
    return xi[pick], cv


def cmd_estimate_sampling(args, cfg, run):
    stages = io.read_stage_counts(run.input(args.stages))
    space = io.read_strata(run.input(args.strata)) if args.strata else None
    roles = {"source": [], "recipient": []}
    cv_rows = []
    ids = None
    for k, ((name, role), st) in enumerate(sorted(stages.items(), key=lambda kv: (kv[0][0], kv[0][1] or ""))):
        order = np.argsort(st.ids, kind="stable")
        st = st.subset(order)
        if ids is None:
            ids = list(st.ids)
        elif list(st.ids) != ids:
            raise io.InputError(f"stage {name!r} ({role}) covers different strata than the other stages")
        draws, cv = _stage_draws(st, cfg, run, space, k)
        if name == "participation":
            targets = [role] if role else ["source", "recipient"]
        elif name == "sequencing-source":
            targets = ["source"]
        elif name == "sequencing-recipient":
            targets = ["recipient"]
        else:
            targets = [role] if role in roles else ["source", "recipient"]
        for t in targets:
            roles[t].append(draws)
        if cv is not None:
            cv_rows.append([name, role or "", repr(cv.coverage), repr(cv.mae), repr(cv.elpd)])
    if not roles["source"] or not roles["recipient"]:
        raise io.InputError("stage counts must cover both the source and the recipient role")
    spec = cascade.CascadeSpec(ids, roles["source"], roles["recipient"])
    prod = cascade.cascade_product(spec, stream(run.seed, 700_000))
    io.write_xi_draws(ids, prod["source"], run.path("xi_source.csv"))
    io.write_xi_draws(ids, prod["recipient"], run.path("xi_recipient.csv"))
    if cv_rows:
        io.write_rows(run.path("cv_metrics.csv"), ["stage", "role", "coverage", "mae", "elpd"], cv_rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _sampling_spec(cfg, args, space, run, base):
    xi = dict(cfg.get("xi", {"type": "fixed", "source": 1.0}))
    if args.xi_source:
        xi = {"type": "draws", "source": args.xi_source}
        if args.xi_recipient:
            xi["recipient"] = args.xi_recipient
    kind = xi["type"]

    def role(value, name):
        if value is None:
            return None
        if kind == "fixed":
            v = _xi_values(space, value, name)
            return [FixedXi(float(x)) for x in v]
        if kind == "beta":
            missing = [s for s in space.ids if s not in value]
            if missing:
                raise ConfigError(f"xi/{name}: missing strata {missing}")
            return [BetaXi(*value[s]) for s in space.ids]
        path = Path(value)
        if not path.is_absolute() and base is not None and not path.exists():
            path = base / path
        draws = io.read_xi_draws(run.input(path))
        missing = [s for s in space.ids if s not in draws]
        if missing:
            raise io.InputError(f"{path}: no draws for strata {missing}")
        return [EmpiricalXi(draws[s]) for s in space.ids]

    try:
        return SamplingSpec(space, role(xi["source"], "source"), role(xi.get("recipient"), "recipient"))
    except ValueError as e:
        raise ConfigError(f"xi: {e}") from e


def cmd_fit(args, cfg, run):
    model_kind = args.model or cfg.get("model")
    if model_kind is None:
        raise ConfigError("choose a model with --model or the config key 'model'")
    space = io.read_strata(run.input(args.strata))
    if args.counts:
        counts = io.read_counts(run.input(args.counts), space)
    elif args.scores and args.individuals:
        scores = io.read_scores(run.input(args.scores), run.input(args.individuals))
        counts = counts_from_scores(scores, space, args.zeta)
        io.write_flow(counts, run.path("counts.csv"), "count")
    else:
        raise ConfigError("fit needs --counts, or --scores together with --individuals")
    base = Path(args.config).parent if args.config else None
    sampling = _sampling_spec(cfg, args, space, run, base)
    threads = _threads(args)
    chains = cfg.get("chains", 4)
    if model_kind == "gamma":
        model = GammaFlowModel(counts, sampling, cfg.get("alpha"), cfg.get("beta"))
        draws = gibbs_fit(
            model, chains=chains, warmup=cfg.get("warmup", 500), iterations=cfg.get("iterations", 1000),
            seed=run.seed, threads=threads,
        )
    else:
        basis = cfg.get("basis", {})
        model = build_flow_gp(
            counts,
            prior=cfg.get("prior", "hsgp"),
            m=basis.get("m", 30),
            boundary_factor=basis.get("boundary_factor", 1.25),
            scheme=basis.get("scheme", "centered"),
            intercepts=cfg.get("intercepts", "auto"),
            gp_blocks=cfg.get("gp_blocks", "direction"),
        )
        draws = hmc_fit(
            model, space, sampling, chains=chains, warmup=cfg.get("warmup", 500),
            iterations=cfg.get("iterations", 500), seed=run.seed, target_accept=cfg.get("target_accept", 0.8),
            n_steps=cfg.get("n_steps", 16), threads=threads,
        )
        ndiv = int(np.sum(draws.stats["divergent"]))
        if ndiv:
            run.warn("divergences", f"{ndiv} divergent transitions after warmup", count=ndiv)
        if int(np.sum(draws.stats["clamped"])):
            run.warn("clamped", "linear predictor clamped at +-700 during sampling")
    with run.path("draws.csv").open("w", newline="") as fh:
        draws.to_long_csv(fh)
    diag = diagnostics(draws)
    rows = []
    for name in draws.names:
        d = diag[name]
        rows.append([name, "" if d.rhat is None else repr(float(d.rhat)),
                     "" if d.ess_bulk is None else repr(float(d.ess_bulk)), d.note or ""])
    io.write_rows(run.path("diagnostics.csv"), ["parameter", "rhat", "ess_bulk", "note"], rows)
    threshold = cfg.get("rhat_threshold", 1.05)
    bad = [n for n in draws.block_names("pi") if diag[n].rhat is not None and diag[n].rhat > threshold]
    if bad:
        run.warn("convergence", f"R-hat above {threshold} for {len(bad)} flow parameter(s)", parameters=bad)
    pi = draws.get("pi", flatten=True)
    q = np.quantile(pi, [0.025, 0.5, 0.975], axis=0)
    rhats = [diag[n].rhat for n in draws.block_names("pi") if diag[n].rhat is not None]
    summary = {
        "model": model_kind,
        "chains": draws.chains,
        "iterations": draws.iterations,
        "divergent": int(np.sum(draws.stats.get("divergent", 0))),
        "max_rhat_pi": max(rhats) if rhats else None,
        "cells": [
            {"source": a, "recipient": b, "mean": float(m), "q2.5": float(lo), "median": float(md), "q97.5": float(hi)}
            for (a, b), m, lo, md, hi in zip(space.pair_labels(), pi.mean(axis=0), q[0], q[1], q[2])
        ],
    }
    run.path("summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# summarize


def cmd_summarize(args, cfg, run):
    space = io.read_strata(run.input(args.strata))
    with run.input(args.draws).open(newline="") as fh:
        draws = PosteriorDraws.from_long_csv(fh)
    name = cfg.get("name", "pi")
    funcs = args.functional or cfg.get("functionals") or ["flows", "sources", "recipients", "ratio", "cv"]
    bad = [f for f in funcs if f not in schemas.SUMMARIZE["properties"]["functionals"]["items"]["enum"]]
    if bad:
        raise ConfigError(f"unknown functional(s) {bad}")
    mapping = io.read_mapping(run.input(args.mapping)) if args.mapping else None
    try:
        draws.columns(name)
    except KeyError as e:
        raise io.InputError(f"{args.draws}: no '{name}[...]' parameters") from e
    for f in funcs:
        try:
            table = summarize(draws, space, f, mapping, name)
        except ValueError as e:
            raise ConfigError(f"functional {f}: {e}") from e
        flagged = sum(bool(r["flagged"]) for r in table.rows)
        if flagged:
            run.warn("undefined", f"{f}: {flagged} row(s) undefined in more than half of the draws")
        with run.path(f"summary_{f}.csv").open("w", newline="") as fh:
            table.to_csv(fh)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="JSON configuration / scenario file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="strataflows", description="Stratified transmission-flow estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate epidemics or flows")
    s.add_argument("kind", choices=sorted(schemas.SCENARIO))

    e = sub.add_parser("estimate-sampling", parents=[common], help="estimate sampling probabilities")
    e.add_argument("--stages", required=True, help="stage counts CSV")
    e.add_argument("--strata", help="strata CSV (needed for regression designs)")

    f = sub.add_parser("fit", parents=[common], help="fit a flow model")
    f.add_argument("--model", choices=["gamma", "hsgp"])
    f.add_argument("--counts", help="counts CSV")
    f.add_argument("--scores", help="pairwise direction scores CSV (alternative to --counts)")
    f.add_argument("--individuals", help="individuals CSV (id, stratum, sampled) for --scores")
    f.add_argument("--zeta", type=float, default=0.6, help="score threshold for a linked pair (default 0.6)")
    f.add_argument("--strata", required=True)
    f.add_argument("--xi-source", help="source sampling draws CSV")
    f.add_argument("--xi-recipient", help="recipient sampling draws CSV")

    m = sub.add_parser("summarize", parents=[common], help="summarise posterior flow draws")
    m.add_argument("--draws", required=True)
    m.add_argument("--strata", required=True)
    m.add_argument("--mapping", help="aggregation mapping CSV (fine, coarse)")
    m.add_argument(
        "--functional", action="append", choices=schemas.SUMMARIZE["properties"]["functionals"]["items"]["enum"]
    )
    return p


_COMMANDS = {
    "simulate": (cmd_simulate, None),
    "estimate-sampling": (cmd_estimate_sampling, schemas.ESTIMATE_SAMPLING),
    "fit": (cmd_fit, schemas.FIT),
    "summarize": (cmd_summarize, schemas.SUMMARIZE),
}

_INPUT_ERRORS = (
    ConfigError,
    io.InputError,
    StrataError,
    cascade.CascadeError,
    PriorError,
    DomainError,
)
_RUNTIME_ERRORS = (SimulationError, SamplerError, GibbsError, np.linalg.LinAlgError, FloatingPointError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    fn, schema = _COMMANDS[args.command]
    try:
        if schema is None:
            if args.config is None:
                raise ConfigError("simulate needs a scenario --config")
            schema = schemas.SCENARIO[args.kind]
        cfg = _load_config(args.config, schema)
        run = Run(args, cfg)
        code = fn(args, cfg, run)
        run.finish()
        return code
    except _INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except _RUNTIME_ERRORS as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        # remaining value errors stem from inconsistent inputs (e.g. zero-support sampling)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
