"""Variational fit of the tilted model at a fixed tilt strength.

``fit_q`` maximizes the three-term objective

    E_{x ~ p} [ beta * f(g(x)) + log p(g(x)) + log|det J(g)(x)| ]

over the parameters of an invertible perturbation g by stochastic gradient
ascent (Adam), starting from an identity-initialized or warm-started flow.
The resulting ``TunedModel`` is the pushforward of the base model through g:
it samples by perturbing base draws and evaluates its own log-density through
the flow inverse and the change-of-variables identity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dists import Distribution
from .errors import ContractError, DivergenceError, NumericError
from .flows import FlowGradients, FlowModel
from .rng import derive_seed

__all__ = [
    "TuneConfig",
    "TunedModel",
    "Adam",
    "elbo_objective",
    "fit_q",
    "kl_divergence_estimate",
    "kl_between",
]


@dataclass(frozen=True)
class TuneConfig:
    """Stochastic-optimization settings for one variational fit.

    ``steps`` applies to cold-started fits; ``warm_steps`` is the shorter
    budget the solver uses once a previous solution seeds the flow.
    ``improvement_tol`` stops a fit early when the trailing moving-average
    objective (window ``window``) improves by less than that fraction of its
    magnitude at ``improvement_patience`` consecutive window boundaries; the
    batch noise of a single window comparison is far above the tolerance, so
    a one-shot check would fire long before convergence.  Set the tolerance
    to 0 to disable early stopping.
    """

    batch_size: int = 256
    steps: int = 2000
    warm_steps: int = 500
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_decay: str = "cosine"  # "cosine" or "none"
    window: int = 50
    improvement_tol: float = 1e-4
    improvement_patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2")
        if self.lr_decay not in ("cosine", "none"):
            raise ContractError("lr_decay must be 'cosine' or 'none'")

    def for_warm_start(self, seed: int) -> "TuneConfig":
        return replace(self, steps=self.warm_steps, seed=seed)


class Adam:
    """Adaptive first-order ascent on a list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], cfg: TuneConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float):
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p += lr * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)


class TunedModel(Distribution):
    """Pushforward of a base distribution through a fitted flow.

    Sampling perturbs base draws: sample(n, seed) == flow.forward(base.sample
    (n, seed)).  The log-density inverts the flow (change of variables); the
    pathwise log-ratio against the base needs no inverse at all.
    """

    kind = "flow-pushforward"

    def __init__(self, base: Distribution, flow: FlowModel, beta: float,
                 objective_trace=(), trace_rows=()):
        self.base = base
        self.flow = flow
        self.beta = float(beta)
        self.objective_trace = list(objective_trace)
        self.trace_rows = list(trace_rows)
        self.dim = base.dim

    def sample(self, n: int, seed: int) -> np.ndarray:
        y, _ = self.flow.forward(self.base.sample(n, seed))
        return y

    def sample_with_logratio(self, n: int, seed: int):
        """Draw n samples y and the exact log q(y) - log p(y) per sample.

        Uses the generating base point: log q(y) = log p(x_hat) - logdet,
        so no flow inversion is required.
        """
        x_hat = self.base.sample(n, seed)
        y, logdet = self.flow.forward(x_hat)
        logratio = self.base.log_density(x_hat) - logdet - self.base.log_density(y)
        return y, logratio

    def log_density(self, x):
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        batch = np.atleast_2d(arr)
        x_hat, logdet = self.flow.inverse(batch)
        out = self.base.log_density(x_hat) - logdet
        return out[0] if single else out

    def spec(self) -> dict:
        return {
            "kind": self.kind,
            "beta": self.beta,
            "base": self.base.spec(),
            "flow": self.flow.to_spec(),
        }


def _objective_parts(p: Distribution, f, beta: float, flow: FlowModel, batch: np.ndarray):
    """Forward pass of the tilt objective on one batch.

    Returns (objective, grads, mean_f, batch_kl) where grads are the
    gradients of the batch-mean objective with respect to flow parameters.
    """
    n = batch.shape[0]
    y, logdet, caches = flow._forward_cached(batch)
    f_vals = np.asarray(f.value(y), dtype=float)
    if not np.all(np.isfinite(f_vals)):
        raise NumericError("criterion term is non-finite")
    log_p = p.log_density(y)
    if not np.all(np.isfinite(log_p)):
        raise NumericError("base log-density term is non-finite")
    objective = float(np.mean(beta * f_vals + log_p + logdet))
    dy = (beta * f.grad(y) + p.score(y)) / n
    dld = np.full(n, 1.0 / n)
    grads, _ = flow._backward_cached(caches, dy, dld)
    # diagnostics riding along with the batch
    mean_f = float(f_vals.mean())
    log_p_hat = p.log_density(batch)
    batch_kl = float(np.mean(log_p_hat - logdet - log_p))
    return objective, grads, mean_f, batch_kl


def elbo_objective(p: Distribution, f, beta: float, flow: FlowModel,
                   batch: np.ndarray) -> tuple[float, FlowGradients]:
    """Batch-mean tilt objective and its parameter gradients.

    The three terms are the scaled criterion, the base log-density of the
    perturbed points, and the flow log-determinant.  A non-finite term raises
    ``NumericError`` naming the offender.
    """
    objective, grads, _, _ = _objective_parts(p, f, beta, flow, batch)
    return objective, grads


def _decayed_lr(cfg: TuneConfig, step: int) -> float:
    if cfg.lr_decay == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / cfg.steps))
    return cfg.learning_rate


def fit_q(p: Distribution, f, beta: float, init: FlowModel, cfg: TuneConfig) -> TunedModel:
    """Fit the tilted model at fixed ``beta`` by stochastic ascent.

    The initial flow is copied, never mutated, so warm-start chains can keep
    their history.  Divergence (non-finite objective) aborts with the trace
    collected so far attached to the exception.
    """
    flow = init.copy()
    opt = Adam(flow.parameters(), cfg)
    objectives: list[float] = []
    trace_rows: list[tuple] = []
    w = cfg.window
    flat_checks = 0
    for step in range(cfg.steps):
        batch = p.sample(cfg.batch_size, derive_seed(cfg.seed, "batch", step))
        try:
            obj, grads, mean_f, batch_kl = _objective_parts(p, f, beta, flow, batch)
        except NumericError as err:
            raise DivergenceError(
                f"objective diverged at step {step}: {err}", trace=trace_rows
            ) from err
        opt.step(grads.flat(), _decayed_lr(cfg, step))
        objectives.append(obj)
        trace_rows.append((step, obj, mean_f, batch_kl))
        if cfg.improvement_tol > 0 and (step + 1) % w == 0 and step + 1 >= 2 * w:
            recent = float(np.mean(objectives[-w:]))
            previous = float(np.mean(objectives[-2 * w : -w]))
            if recent - previous < cfg.improvement_tol * max(1.0, abs(recent)):
                flat_checks += 1
                if flat_checks >= cfg.improvement_patience:
                    break
            else:
                flat_checks = 0
    return TunedModel(p, flow, beta, objectives, trace_rows)


def _mean_and_se(values: np.ndarray) -> tuple[float, float]:
    n = values.shape[0]
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n))


def kl_divergence_estimate(model: TunedModel, n: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo KL(q || p) of a tuned model against its base, with se."""
    _, logratio = model.sample_with_logratio(n, seed)
    return _mean_and_se(logratio)


def kl_between(model: TunedModel, other: Distribution, n: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo KL(q || other) using exact pathwise log q on own samples."""
    x_hat = model.base.sample(n, seed)
    y, logdet = model.flow.forward(x_hat)
    log_q = model.base.log_density(x_hat) - logdet
    return _mean_and_se(log_q - other.log_density(y))
