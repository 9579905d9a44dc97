"""Command-line front end.

    tiltgen tune     --config cfg.json --out dir [--seed-override N]
    tiltgen pareto   --config cfg.json --out dir [--seed-override N]
    tiltgen diagnose --config cfg.json --out dir [--seed-override N]
    tiltgen oracle   tilt|kl-bound [params]

Exit codes: 0 success/convergence, 2 solver non-convergence (the manifest is
still written), 1 configuration or runtime error.  Set TILTGEN_LOG to
debug/info/warning to control verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import build_plan, criterion_from_spec, load_config, validate_config
from .criteria import normalize_affine
from .diagnostics import compare_criteria, importance_curves
from .dists import LatentDecoder
from .errors import ConfigError, TiltgenError
from .flows import init_identity
from .manifest import (
    MOMENT_COLUMNS,
    build_manifest,
    moments_dict,
    moments_row,
    write_csv,
    write_json_atomic,
    write_run_outputs,
)
from .oracles import latent_kl_bound_check, tilt_closed_form
from .rng import derive_seed, make_generator
from .solver import estimate_moments, pareto_sweep, solve
from .tuner import fit_q

log = logging.getLogger("tiltgen")


def _setup_logging():
    level = os.environ.get("TILTGEN_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load(args) -> dict:
    raw = load_config(args.config)
    if args.seed_override is not None:
        n = args.seed_override
        raw = dict(raw)
        raw["seeds"] = {
            "init": derive_seed(n, "init"),
            "sampling": derive_seed(n, "sampling"),
            "diagnostics": derive_seed(n, "diagnostics"),
        }
        validate_config(raw)
    return raw


def _prepare_criterion(plan):
    """Apply the configured affine normalization; returns (criterion, info)."""
    if not plan.normalize:
        return plan.criterion, None
    f = normalize_affine(
        plan.criterion,
        plan.base,
        plan.normalize_samples,
        derive_seed(plan.seeds["sampling"], "normalize"),
    )
    return f, {"shift": f.shift, "scale": f.scale}


def _write_samples(out, plan, model):
    n = plan.output_samples
    points = model.sample(n, derive_seed(plan.seeds["sampling"], "dump"))
    data = plan.decode_samples(points)
    data = np.atleast_2d(data)
    header = [f"x{i}" for i in range(data.shape[1])]
    write_csv(out / "samples.csv", header, data)


def _write_traces(out, traces_by_iteration):
    rows = []
    for iteration, trace in enumerate(traces_by_iteration):
        for step, obj, mean_f, dkl in trace:
            rows.append([iteration, step, obj, mean_f, dkl])
    write_csv(out / "trace.csv", ["iteration", "step", "objective", "mean_f", "dkl"], rows)


def cmd_tune(args) -> int:
    raw = _load(args)
    plan = build_plan(raw, require="target")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    f_used, norm_info = _prepare_criterion(plan)
    if plan.fixed_beta is not None:
        flow0 = init_identity(plan.base.dim, plan.flow_arch, seed=plan.seeds["init"])
        model = fit_q(plan.base, f_used, plan.fixed_beta, flow0, plan.tune)
        est = estimate_moments(
            model, f_used, plan.moments_samples,
            derive_seed(plan.seeds["sampling"], "moments", 0), plan.moments_batches,
        )
        records = [
            {
                "iteration": 0,
                "beta": plan.fixed_beta,
                "moments": est,
                "achieved": est.dkl,
                "residual": 0.0,
                "trace": model.trace_rows,
            }
        ]
        beta, converged, message = plan.fixed_beta, True, "fixed tilt strength"
        final_est = est
    else:
        res = solve(
            plan.base,
            f_used,
            plan.target,
            arch=plan.flow_arch,
            tune_cfg=plan.tune,
            moments_n=plan.moments_samples,
            moments_batches=plan.moments_batches,
            seed=plan.seeds["sampling"],
            init_seed=plan.seeds["init"],
            normalize=False,
            **plan.solver_options,
        )
        model = res.model
        records = res.records
        beta = res.state.beta
        converged = res.converged
        message = res.message
        final_est = records[-1]["moments"]
    t_solve = time.perf_counter()

    write_csv(
        out / "trajectory.csv",
        ["iteration", "beta"] + MOMENT_COLUMNS,
        [[r["iteration"], r["beta"]] + moments_row(r["moments"]) for r in records],
    )
    _write_traces(out, [r["trace"] for r in records])
    _write_samples(out, plan, model)
    t_end = time.perf_counter()

    iterations = [
        {
            "iteration": r["iteration"],
            "beta": r["beta"],
            "achieved": r["achieved"],
            "residual": r["residual"],
            **moments_dict(r["moments"]),
        }
        for r in records
    ]
    final = {
        "beta": beta,
        "converged": converged,
        "message": message,
        **moments_dict(final_est),
    }
    artifacts = {
        "trajectory": "trajectory.csv",
        "trace": "trace.csv",
        "samples": "samples.csv",
    }
    manifest = build_manifest(
        "tune", raw, plan.seeds, iterations, final, artifacts, norm_info
    )
    timings = {
        "wall_seconds": {
            "solve": t_solve - t_start,
            "artifacts": t_end - t_solve,
            "total": t_end - t_start,
        }
    }
    write_run_outputs(out, manifest, timings)
    log.info("tune finished: %s", message)
    if not converged:
        print(f"tiltgen tune: non-convergence: {message}", file=sys.stderr)
        return 2
    print(f"tiltgen tune: {message} (out: {out})")
    return 0


def cmd_pareto(args) -> int:
    raw = _load(args)
    plan = build_plan(raw, require="sweep")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    f_used, norm_info = _prepare_criterion(plan)
    traces: list = []
    points = pareto_sweep(
        plan.base,
        f_used,
        plan.sweep_betas,
        arch=plan.flow_arch,
        tune_cfg=plan.tune,
        moments_n=plan.moments_samples,
        moments_batches=plan.moments_batches,
        seed=plan.seeds["sampling"],
        init_seed=plan.seeds["init"],
        traces=traces,
    )
    t_solve = time.perf_counter()
    write_csv(
        out / "sweep.csv",
        ["beta"] + MOMENT_COLUMNS,
        [[beta] + moments_row(est) for beta, est in points],
    )
    _write_traces(out, traces)
    t_end = time.perf_counter()
    iterations = [
        {"iteration": i, "beta": beta, **moments_dict(est)}
        for i, (beta, est) in enumerate(points)
    ]
    final = {
        "beta": points[-1][0],
        "converged": True,
        "message": f"swept {len(points)} grid points",
        **moments_dict(points[-1][1]),
    }
    manifest = build_manifest(
        "pareto",
        raw,
        plan.seeds,
        iterations,
        final,
        {"sweep": "sweep.csv", "trace": "trace.csv"},
        norm_info,
    )
    timings = {
        "wall_seconds": {
            "sweep": t_solve - t_start,
            "artifacts": t_end - t_solve,
            "total": t_end - t_start,
        }
    }
    write_run_outputs(out, manifest, timings)
    print(f"tiltgen pareto: wrote {len(points)} points (out: {out})")
    return 0


def _slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-") or "criterion"


def cmd_diagnose(args) -> int:
    raw = _load(args)
    plan = build_plan(raw, require="diagnostics")
    diag = raw["diagnostics"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    specs = diag["candidates"]
    lifted = [s.get("lift") is not None for s in specs]
    if any(lifted) and not all(lifted):
        raise ConfigError("candidates must be all lifted or all unlifted to compare")
    eval_dist = plan.base if not any(lifted) else plan.decoder.prior()
    seeds = plan.seeds
    candidates = []
    for i, spec in enumerate(specs):
        f = criterion_from_spec(spec, plan.data_dist, plan.decoder, seeds)
        f = normalize_affine(
            f, eval_dist, spec.get("normalize_samples", 10000),
            derive_seed(seeds["diagnostics"], "normalize", i),
        )
        candidates.append(f)

    n = diag.get("samples", 10000)
    bins = diag.get("bins", 50)
    cap = diag.get("cap")
    report = compare_criteria(
        candidates, eval_dist, n, derive_seed(seeds["diagnostics"], "compare"),
        bins=bins, cap=cap,
    )
    artifacts = {}
    for entry in report.entries:
        name = f"hist_{entry.position}_{_slug(entry.label)}.csv"
        edges = entry.profile.bin_edges
        write_csv(
            out / name,
            ["bin_lo", "bin_hi", "count"],
            [
                [edges[i], edges[i + 1], int(c)]
                for i, c in enumerate(entry.profile.counts)
            ],
        )
        artifacts[f"histogram_{entry.position}"] = name

    curves_payload = None
    if "curve_betas" in diag:
        curves_payload = []
        m = diag.get("curve_samples", max(10000, n))
        for i, f in enumerate(candidates):
            curve = importance_curves(
                f, eval_dist, diag["curve_betas"], m,
                derive_seed(seeds["diagnostics"], "curve", i),
            )
            name = f"curve_{i}_{_slug(f.label)}.csv"
            write_csv(
                out / name,
                ["beta", "log_z", "mean_f", "dkl", "ess", "reliable"],
                zip(curve.betas, curve.log_z, curve.mean_f, curve.dkl,
                    curve.ess, curve.reliable),
            )
            artifacts[f"curve_{i}"] = name
            curves_payload.append(curve.to_dict())

    report_payload = report.to_dict()
    if curves_payload is not None:
        report_payload["curves"] = curves_payload
    write_csv(
        out / "ranking.csv",
        ["rank", "position", "label", "regularity_score", "zero_mass_fraction"],
        [
            [rank, e.position, e.label, e.regularity_score, e.zero_mass_fraction]
            for rank, e in enumerate(report.ranked())
        ],
    )
    artifacts["ranking"] = "ranking.csv"
    artifacts["report"] = "report.json"
    t_end = time.perf_counter()
    manifest = build_manifest(
        "diagnose", raw, plan.seeds, [],
        {"best": report.ranked()[0].label, "converged": True, "message": "diagnosis complete"},
        artifacts, None,
    )
    write_json_atomic(out / "report.json", report_payload)
    timings = {"wall_seconds": {"total": t_end - t_start}}
    write_run_outputs(out, manifest, timings)
    best = report.ranked()[0]
    print(
        f"tiltgen diagnose: best criterion is {best.label!r} "
        f"(regularity score {best.regularity_score:.6g})"
    )
    return 0


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_oracle(args) -> int:
    if args.oracle_command == "tilt":
        mean = _floats(args.mean)
        variance = _floats(args.variance)
        coeff = _floats(args.coeff)
        values = tilt_closed_form(mean, variance, coeff, args.beta)
        mean_str = ",".join(f"{v:.12g}" for v in values.mean)
        var_str = ",".join(f"{v:.12g}" for v in values.variance)
        print(f"q = N([{mean_str}], [{var_str}])")
        print(f"E_f = {values.mean_f:.12g}")
        print(f"Var_f = {values.var_f:.12g}")
        print(f"D_KL = {values.dkl:.12g}")
        return 0
    if args.oracle_command == "kl-bound":
        rng = make_generator(args.seed)
        worst = float("inf")
        failures = 0
        for _ in range(args.trials):
            latent = int(rng.integers(1, 4))
            data = int(rng.integers(1, 5))
            dec = LatentDecoder(
                rng.standard_normal((data, latent)),
                float(rng.uniform(0.05, 2.0)),
            )
            result = latent_kl_bound_check(
                dec,
                rng.standard_normal(latent),
                rng.uniform(0.2, 3.0, size=latent),
            )
            worst = min(worst, result.margin)
            if not result.holds:
                failures += 1
        status = "bound holds" if failures == 0 else f"BOUND VIOLATED {failures}x"
        print(f"{status} in {args.trials - failures}/{args.trials} trials; "
              f"min margin = {worst:.6g}")
        return 0 if failures == 0 else 1
    raise ConfigError(f"unknown oracle subcommand {args.oracle_command!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tiltgen",
        description="Tilt a generative model toward high criterion values.",
    )
    parser.add_argument("--version", action="version", version=f"tiltgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_command(name, func, help_text):
        cp = sub.add_parser(name, help=help_text)
        cp.add_argument("--config", required=True, help="path to JSON run config")
        cp.add_argument("--out", required=True, help="output directory")
        cp.add_argument(
            "--seed-override", type=int, default=None,
            help="replace all three named seeds with streams derived from N",
        )
        cp.set_defaults(func=func)

    add_run_command("tune", cmd_tune, "search the tilt strength for a target")
    add_run_command("pareto", cmd_pareto, "sweep a beta grid (trade-off curve)")
    add_run_command("diagnose", cmd_diagnose, "compare candidate criteria")

    op = sub.add_parser("oracle", help="print closed-form oracle values")
    osub = op.add_subparsers(dest="oracle_command", required=True)
    tilt = osub.add_parser("tilt", help="closed-form Gaussian tilt")
    tilt.add_argument("--mean", default="0", help="comma-separated mean")
    tilt.add_argument("--variance", default="1", help="comma-separated variances")
    tilt.add_argument("--coeff", default="1", help="comma-separated criterion coefficients")
    tilt.add_argument("--beta", type=float, required=True)
    tilt.set_defaults(func=cmd_oracle)
    bound = osub.add_parser("kl-bound", help="random latent-vs-marginal KL trials")
    bound.add_argument("--trials", type=int, default=1000)
    bound.add_argument("--seed", type=int, default=0)
    bound.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"tiltgen: config error: {err}", file=sys.stderr)
        return 1
    except TiltgenError as err:
        print(f"tiltgen: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
