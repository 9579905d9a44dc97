"""Run manifests and deterministic artifact writers.

Every run writes a ``manifest.json`` capturing the config echo, tool
version, effective seeds, per-iteration records, final numbers with standard
errors, and relative paths of the emitted artifacts.  The manifest is
written atomically and contains nothing volatile, so re-running a config
with the same seeds reproduces it byte for byte; wall-clock timings go to a
sibling ``timings.json`` referenced by path.

CSV floats are formatted with 17 significant digits (full float64
round-trip), which makes CSV artifacts byte-reproducible as well.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from . import __version__
from .solver import MomentEstimates

MANIFEST_NAME = "manifest.json"
TIMINGS_NAME = "timings.json"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_json_atomic(path, payload: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def moments_dict(est: MomentEstimates) -> dict:
    return {
        "mean_f": est.mean_f,
        "se_mean": est.se_mean,
        "var_f": est.var_f,
        "se_var": est.se_var,
        "third_central_f": est.third_central_f,
        "se_third": est.se_third,
        "dkl": est.dkl,
        "se_dkl": est.se_dkl,
        "n": est.n,
    }


MOMENT_COLUMNS = [
    "mean_f",
    "se_mean",
    "var_f",
    "se_var",
    "third_central_f",
    "se_third",
    "dkl",
    "se_dkl",
]


def moments_row(est: MomentEstimates) -> list[float]:
    return [
        est.mean_f,
        est.se_mean,
        est.var_f,
        est.se_var,
        est.third_central_f,
        est.se_third,
        est.dkl,
        est.se_dkl,
    ]


def build_manifest(
    command: str,
    config: dict,
    seeds: dict,
    iterations: list[dict],
    final: dict,
    artifacts: dict,
    normalization: dict | None,
) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "normalization": normalization,
        "iterations": iterations,
        "final": final,
        "artifacts": artifacts,
        "conventions": {
            "rejection_comparison": (
                "tilted and hard-threshold (rejection) samplers are compared by "
                "a soft band on the criterion mean, not distributional equality"
            ),
            "csv_float_format": "%.17g",
        },
        "timings_path": TIMINGS_NAME,
    }


def write_run_outputs(out_dir, manifest: dict, timings: dict) -> None:
    out_dir = Path(out_dir)
    write_json_atomic(out_dir / TIMINGS_NAME, timings)
    write_json_atomic(out_dir / MANIFEST_NAME, manifest)
