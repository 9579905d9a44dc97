"""Run configuration: JSON schema, validation, and plan construction.

A run config is a single JSON object validated against ``SCHEMA`` (unknown
keys are rejected everywhere) and then materialized into live objects: the
base distribution, the criterion (lifted to latent space when requested),
the flow architecture and the tuning/solver settings.

All randomness in a run flows from the three named seeds in the ``seeds``
block: ``init`` (flow initialization), ``sampling`` (training batches,
moment estimation, criterion normalization) and ``diagnostics`` (profiles,
curves, auto-scaled temperatures).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from . import criteria as crit
from .dists import (
    DiagGaussian,
    Distribution,
    GaussianMixture,
    LatentDecoder,
    distribution_from_spec,
)
from .errors import ConfigError
from .flows import FlowArchitecture
from .rng import derive_seed
from .solver import Target
from .tuner import TuneConfig

_NUMBER_ARRAY = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_NUMBER_MATRIX = {"type": "array", "items": _NUMBER_ARRAY, "minItems": 1}

_DISTRIBUTION_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["diag-gaussian", "gaussian-mixture", "latent-decoder"]},
        "mean": _NUMBER_ARRAY,
        "variance": _NUMBER_ARRAY,
        # mixture weights (flat) or decoder weight matrix (nested)
        "weights": {"oneOf": [_NUMBER_ARRAY, _NUMBER_MATRIX]},
        "components": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["mean", "variance"],
                "properties": {"mean": _NUMBER_ARRAY, "variance": _NUMBER_ARRAY},
            },
        },
        "noise_variance": {"type": "number", "minimum": 0},
    },
}

_CRITERION_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name"],
    "properties": {
        "name": {
            "enum": ["linear", "classifier", "adversarial", "peak", "window-mean"]
        },
        "normalize": {"type": "boolean"},
        "normalize_samples": {"type": "integer", "minimum": 2},
        "coefficients": _NUMBER_ARRAY,
        "form": {"enum": ["prob", "log-prob", "entropy"]},
        "log_prob_floor": {"type": "number"},
        "target_class": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type"],
            "properties": {
                "type": {"enum": ["logistic", "bayes-mixture"]},
                "weights": _NUMBER_ARRAY,
                "bias": {"type": "number"},
            },
        },
        "data": _DISTRIBUTION_SCHEMA,
        "window": {
            "type": "array",
            "items": {"type": "integer", "minimum": 0},
            "minItems": 2,
            "maxItems": 2,
        },
        "temperature": {
            "oneOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "auto"}]
        },
        "lift": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"mc_samples": {"type": "integer", "minimum": 1}},
        },
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["distribution", "seeds"],
    "properties": {
        "distribution": _DISTRIBUTION_SCHEMA,
        "criterion": _CRITERION_SCHEMA,
        "flow": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "blocks": {"type": "integer", "minimum": 1},
                "hidden_width": {"type": "integer", "minimum": 1},
                "hidden_depth": {"type": "integer", "minimum": 1},
                "scale_clamp": {"type": "number", "exclusiveMinimum": 0},
                "permute": {"type": "boolean"},
            },
        },
        "tune": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 2},
                "steps": {"type": "integer", "minimum": 1},
                "warm_steps": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "lr_decay": {"enum": ["cosine", "none"]},
                "window": {"type": "integer", "minimum": 1},
                "improvement_tol": {"type": "number", "minimum": 0},
                "improvement_patience": {"type": "integer", "minimum": 1},
            },
        },
        "target": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mode"],
            "properties": {
                "mode": {"enum": ["expectation", "divergence", "fixed"]},
                "value": {"type": "number"},
                "rho": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_iterations": {"type": "integer", "minimum": 1},
                "relative_tolerance": {"type": "number", "exclusiveMinimum": 0},
                "beta_tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["betas"],
            "properties": {"betas": _NUMBER_ARRAY},
        },
        "moments": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": "integer", "minimum": 100},
                "batches": {"type": "integer", "minimum": 2},
            },
        },
        "diagnostics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "candidates": {
                    "type": "array",
                    "minItems": 2,
                    "items": _CRITERION_SCHEMA,
                },
                "samples": {"type": "integer", "minimum": 1000},
                "bins": {"type": "integer", "minimum": 1},
                "cap": {"type": ["number", "null"]},
                "curve_betas": _NUMBER_ARRAY,
                "curve_samples": {"type": "integer", "minimum": 10000},
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"samples": {"type": "integer", "minimum": 1}},
        },
        "seeds": {
            "type": "object",
            "additionalProperties": False,
            "required": ["init", "sampling", "diagnostics"],
            "properties": {
                "init": {"type": "integer", "minimum": 0},
                "sampling": {"type": "integer", "minimum": 0},
                "diagnostics": {"type": "integer", "minimum": 0},
            },
        },
    },
}


def validate_config(raw: dict) -> dict:
    """Schema-check a raw config mapping; returns it unchanged on success."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {err.message}") from err
    return raw


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return validate_config(raw)


@dataclass
class RunPlan:
    """A validated config materialized into live objects.

    ``base`` is the distribution the flow perturbs (the latent prior when the
    criterion is lifted); ``data_dist`` is the data-space model used for
    dumps and criterion construction; they coincide for non-lifted runs.
    """

    config: dict
    base: Distribution
    data_dist: Distribution
    decoder: LatentDecoder | None
    criterion: crit.Criterion
    normalize: bool
    normalize_samples: int
    flow_arch: FlowArchitecture
    tune: TuneConfig
    target: Target | None
    fixed_beta: float | None
    sweep_betas: list | None
    solver_options: dict
    moments_samples: int
    moments_batches: int
    output_samples: int
    seeds: dict

    def decode_samples(self, latent_points):
        """Map latent samples to data space; identity for non-lifted runs."""
        if self.decoder is None:
            return latent_points
        return self.decoder.decode(
            latent_points, derive_seed(self.seeds["sampling"], "decode")
        )


def _build_criterion(spec: dict, data_dist: Distribution, diag_seed: int) -> crit.Criterion:
    name = spec["name"]
    if name == "linear":
        if "coefficients" not in spec:
            raise ConfigError("linear criterion needs 'coefficients'")
        f = crit.LinearCriterion(spec["coefficients"])
    elif name == "classifier":
        model_spec = spec.get("model")
        if model_spec is None:
            raise ConfigError("classifier criterion needs a 'model'")
        if model_spec["type"] == "logistic":
            if "weights" not in model_spec:
                raise ConfigError("logistic model needs 'weights'")
            model = crit.LogisticClassifier(
                model_spec["weights"], model_spec.get("bias", 0.0)
            )
        else:
            if not isinstance(data_dist, GaussianMixture):
                raise ConfigError(
                    "bayes-mixture classifier requires a gaussian-mixture distribution"
                )
            model = crit.BayesPosteriorClassifier(data_dist)
        f = crit.classifier_criterion(
            model,
            spec.get("target_class", 1),
            spec.get("form", "log-prob"),
            spec.get("log_prob_floor", crit.LOG_PROB_FLOOR),
        )
    elif name == "adversarial":
        if "data" not in spec:
            raise ConfigError("adversarial criterion needs a 'data' distribution")
        f = crit.adversarial_criterion(data_dist, distribution_from_spec(spec["data"]))
    elif name == "peak":
        if "window" not in spec:
            raise ConfigError("peak criterion needs a 'window'")
        temp = spec.get("temperature", "auto")
        if temp == "auto":
            temp = crit.default_peak_temperature(
                data_dist, 10000, derive_seed(diag_seed, "peak-temperature")
            )
        f = crit.peak_criterion(data_dist.dim, spec["window"], temp)
    elif name == "window-mean":
        if "window" not in spec:
            raise ConfigError("window-mean criterion needs a 'window'")
        f = crit.window_mean_criterion(data_dist.dim, spec["window"])
    else:  # unreachable behind the schema
        raise ConfigError(f"unknown criterion {name!r}")
    if f.dim != data_dist.dim:
        raise ConfigError(
            f"criterion dimension {f.dim} does not match distribution dimension "
            f"{data_dist.dim}"
        )
    return f


def criterion_from_spec(
    spec: dict,
    data_dist: Distribution,
    decoder: LatentDecoder | None,
    seeds: dict,
) -> crit.Criterion:
    """Build a criterion from its config mapping, applying latent lifting."""
    f = _build_criterion(spec, data_dist, seeds["diagnostics"])
    lift_spec = spec.get("lift")
    if lift_spec is not None:
        if decoder is None:
            raise ConfigError("criterion lifting requires a latent-decoder distribution")
        f = crit.lift_to_latent(
            f, decoder, lift_spec.get("mc_samples", 1),
            derive_seed(seeds["sampling"], "lift"),
        )
    return f


def build_plan(raw: dict, require: str | None = None) -> RunPlan:
    """Materialize a validated config; ``require`` names the command-specific
    block that must be present ('target', 'sweep' or 'diagnostics')."""
    config = validate_config(raw)
    seeds = config["seeds"]

    dist_spec = config["distribution"]
    decoder = None
    if dist_spec["kind"] == "latent-decoder":
        decoder = LatentDecoder(dist_spec["weights"], dist_spec["noise_variance"])
        data_dist: Distribution = decoder.marginal()
    else:
        data_dist = distribution_from_spec(dist_spec)

    crit_spec = config.get("criterion")
    criterion = None
    normalize = True
    normalize_samples = 10000
    if crit_spec is not None:
        criterion = criterion_from_spec(crit_spec, data_dist, decoder, seeds)
        normalize = crit_spec.get("normalize", True)
        normalize_samples = crit_spec.get("normalize_samples", 10000)
    lifted = crit_spec is not None and crit_spec.get("lift") is not None
    base = decoder.prior() if (decoder is not None and lifted) else data_dist

    flow_spec = config.get("flow", {})
    flow_arch = FlowArchitecture(
        blocks=flow_spec.get("blocks", 2),
        hidden_width=flow_spec.get("hidden_width", 32),
        hidden_depth=flow_spec.get("hidden_depth", 2),
        scale_clamp=flow_spec.get("scale_clamp", 5.0),
        permute=flow_spec.get("permute", True),
    )

    tune_spec = dict(config.get("tune", {}))
    tune = TuneConfig(seed=derive_seed(seeds["sampling"], "tune"), **tune_spec)

    target = None
    fixed_beta = None
    target_spec = config.get("target")
    if target_spec is not None:
        mode = target_spec["mode"]
        if mode != "divergence" and "rho" in target_spec:
            raise ConfigError("the rho shorthand only applies to divergence targets")
        if mode == "fixed":
            if "value" not in target_spec:
                raise ConfigError("fixed target needs a 'value' (the tilt strength)")
            fixed_beta = float(target_spec["value"])
        elif mode == "divergence" and "rho" in target_spec:
            target = Target.from_quantile(target_spec["rho"])
        else:
            if "value" not in target_spec:
                raise ConfigError(f"{mode} target needs a 'value'")
            target = Target(mode, float(target_spec["value"]))

    sweep_betas = config.get("sweep", {}).get("betas")
    moments_spec = config.get("moments", {})
    solver_spec = config.get("solver", {})

    if require == "target" and target is None and fixed_beta is None:
        raise ConfigError("this command requires a 'target' block")
    if require == "sweep" and sweep_betas is None:
        raise ConfigError("this command requires a 'sweep' block")
    if require == "diagnostics" and "candidates" not in config.get("diagnostics", {}):
        raise ConfigError("this command requires 'diagnostics.candidates'")
    if require in ("target", "sweep") and criterion is None:
        raise ConfigError("this command requires a 'criterion' block")

    return RunPlan(
        config=config,
        base=base,
        data_dist=data_dist,
        decoder=decoder,
        criterion=criterion,
        normalize=normalize,
        normalize_samples=normalize_samples,
        flow_arch=flow_arch,
        tune=tune,
        target=target,
        fixed_beta=fixed_beta,
        sweep_betas=sweep_betas,
        solver_options=dict(
            max_iterations=solver_spec.get("max_iterations", 20),
            relative_tolerance=solver_spec.get("relative_tolerance", 1e-2),
            beta_tolerance=solver_spec.get("beta_tolerance", 1e-3),
        ),
        moments_samples=moments_spec.get("samples", 20000),
        moments_batches=moments_spec.get("batches", 32),
        output_samples=config.get("outputs", {}).get("samples", 1000),
        seeds=dict(seeds),
    )
