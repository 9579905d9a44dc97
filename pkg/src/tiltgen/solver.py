"""Second-order search for the tilt strength hitting a target.

The outer loop alternates a variational fit of the tilted model at the
current beta with Monte-Carlo moment estimation, then updates beta with a
safeguarded second-order root-finding step.  The derivative structure comes
from exact identities of the tilted family:

    d/dbeta E[f]      = Var(f)
    d2/dbeta2 E[f]    = E[(f - E f)^3]
    d/dbeta D_KL      = beta * Var(f)
    d2/dbeta2 D_KL    = Var(f) + beta * E[(f - E f)^3]

all evaluated under the current tilted model.  Steps are clamped to a trust
region; once a sign change of the residual is bracketed, any model step that
escapes the bracket is replaced by bisection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .criteria import Criterion, normalize_affine
from .dists import Distribution
from .errors import ContractError, FlatCriterionError
from .flows import FlowArchitecture, init_identity
from .rng import derive_seed
from .tuner import TuneConfig, TunedModel, fit_q

__all__ = [
    "MomentEstimates",
    "Target",
    "BetaState",
    "SolveResult",
    "estimate_moments",
    "newton_step",
    "solve",
    "pareto_sweep",
]


@dataclass(frozen=True)
class MomentEstimates:
    """Sample moments of f and the divergence under a tuned model."""

    mean_f: float
    var_f: float
    third_central_f: float
    dkl: float
    n: int
    se_mean: float
    se_var: float
    se_third: float
    se_dkl: float

    def __post_init__(self):
        if self.n < 2:
            raise ContractError("moment estimates need n >= 2")
        if self.var_f < 0.0:
            raise ContractError("variance estimate must be nonnegative")
        if self.dkl < -(3.0 * self.se_dkl) - 1e-9:
            raise ContractError(
                "divergence estimate is negative beyond its noise band"
            )


@dataclass(frozen=True)
class Target:
    """What the search drives to: E_q f = value or D_KL(q||p) = value."""

    mode: str  # "expectation" or "divergence"
    value: float

    def __post_init__(self):
        if self.mode not in ("expectation", "divergence"):
            raise ContractError(f"unknown target mode {self.mode!r}")
        if self.mode == "divergence" and self.value < 0.0:
            raise ContractError("divergence target must be >= 0")

    @classmethod
    def expectation(cls, value: float) -> "Target":
        return cls("expectation", float(value))

    @classmethod
    def divergence(cls, value: float) -> "Target":
        return cls("divergence", float(value))

    @classmethod
    def from_quantile(cls, rho: float) -> "Target":
        """Divergence budget -log(rho) for sampling the top rho mass."""
        if not 0.0 < rho <= 1.0:
            raise ContractError("quantile mass rho must lie in (0, 1]")
        return cls("divergence", -math.log(rho))

    def achieved(self, est: MomentEstimates) -> tuple[float, float]:
        """(measured value, its standard error) for this target mode."""
        if self.mode == "expectation":
            return est.mean_f, est.se_mean
        return est.dkl, est.se_dkl


@dataclass
class BetaState:
    """Search state: current beta, measurement history, residual bracket."""

    beta: float = 0.0
    history: list[tuple[float, MomentEstimates]] = field(default_factory=list)
    bracket: tuple[float, float] | None = None

    def record(self, beta: float, est: MomentEstimates, residual: float):
        self.history.append((beta, est))
        lo, hi = self.bracket if self.bracket else (None, None)
        if residual < 0.0:
            lo = beta if lo is None else max(lo, beta)
        else:
            hi = beta if hi is None else min(hi, beta)
        self.bracket = (lo, hi)

    def sign_change_bracketed(self) -> bool:
        return (
            self.bracket is not None
            and self.bracket[0] is not None
            and self.bracket[1] is not None
        )


def _third_central(values: np.ndarray) -> float:
    """k-statistic (unbiased) estimate of the third central moment."""
    n = values.shape[0]
    m3 = float(np.mean((values - values.mean()) ** 3))
    if n < 3:
        return m3
    return m3 * n * n / ((n - 1) * (n - 2))


def _batch_se(values: np.ndarray, stat, batches: int) -> float:
    """Standard error of a statistic by the method of batch means."""
    n = values.shape[0]
    b = max(2, min(batches, n // 4))
    size = n // b
    stats = np.array([stat(values[i * size : (i + 1) * size]) for i in range(b)])
    return float(stats.std(ddof=1) / np.sqrt(b))


def estimate_moments(
    q: TunedModel, f: Criterion, n: int, seed: int, batches: int = 32
) -> MomentEstimates:
    """Sample moments of f under q plus the pathwise divergence estimate.

    Standard errors come from batch means over contiguous sample blocks.
    """
    if n < 100:
        raise ContractError("moment estimation needs n >= 100")
    y, logratio = q.sample_with_logratio(n, seed)
    f_vals = np.asarray(f.value(y), dtype=float)
    return MomentEstimates(
        mean_f=float(f_vals.mean()),
        var_f=float(f_vals.var(ddof=1)),
        third_central_f=_third_central(f_vals),
        dkl=float(logratio.mean()),
        n=n,
        se_mean=_batch_se(f_vals, lambda v: v.mean(), batches),
        se_var=_batch_se(f_vals, lambda v: v.var(ddof=1), batches),
        se_third=_batch_se(f_vals, _third_central, batches),
        se_dkl=_batch_se(logratio, lambda v: v.mean(), batches),
    )


def _residual_terms(beta: float, est: MomentEstimates, target: Target):
    """(residual, first derivative, second derivative) for the target mode."""
    if target.mode == "expectation":
        return est.mean_f - target.value, est.var_f, est.third_central_f
    return (
        est.dkl - target.value,
        beta * est.var_f,
        est.var_f + beta * est.third_central_f,
    )


def _quadratic_root(r: float, d1: float, d2: float) -> float:
    """Smallest-magnitude real root of r + d1*x + x^2*d2/2 = 0.

    Falls back to the first-order (Newton) step when the quadratic has no
    real root or the curvature is negligible.  With d1 = 0 the curvature-only
    step is taken in the direction that reduces the residual (the residual is
    an increasing function of beta for both target modes).
    """
    if abs(d2) < 1e-12 * max(1.0, abs(d1)) and d1 != 0.0:
        return -r / d1
    if d1 == 0.0:
        ratio = -2.0 * r / d2
        if ratio <= 0.0:
            return -math.copysign(1.0, r)
        return -math.copysign(math.sqrt(ratio), r)
    disc = d1 * d1 - 2.0 * d2 * r
    if disc < 0.0:
        return -r / d1
    return -2.0 * r / (d1 + math.copysign(math.sqrt(disc), d1))


def newton_step(state: BetaState, target: Target) -> float:
    """Propose the next beta from the latest moment estimates.

    Second-order model step, clamped to the trust region |step| <=
    max(1, |beta|); if a residual sign change is bracketed and the model step
    escapes the bracket, bisect instead.  A criterion variance below its own
    noise floor aborts: the tilt strength has no measurable effect.
    """
    if not state.history:
        raise ContractError("newton_step requires at least one moment estimate")
    beta, est = state.history[-1]
    noise_floor = max(1e-12, 3.0 * est.se_var)
    if est.var_f <= noise_floor:
        raise FlatCriterionError(
            "criterion variance is below the noise floor: beta has no effect"
        )
    r, d1, d2 = _residual_terms(beta, est, target)
    if d1 == 0.0 and d2 == 0.0:
        raise FlatCriterionError("no usable derivative information at this beta")
    step = _quadratic_root(r, d1, d2)
    cap = max(1.0, abs(beta))
    step = float(np.clip(step, -cap, cap))
    proposed = max(0.0, beta + step)
    if state.sign_change_bracketed():
        lo, hi = state.bracket
        if not lo <= proposed <= hi:
            proposed = 0.5 * (lo + hi)
    return proposed


@dataclass
class SolveResult:
    """Outcome of the full search: final model, state, per-iteration records."""

    model: TunedModel
    state: BetaState
    records: list[dict]
    converged: bool
    message: str
    criterion: Criterion


def solve(
    p: Distribution,
    f: Criterion,
    target: Target,
    arch: FlowArchitecture = FlowArchitecture(),
    tune_cfg: TuneConfig = TuneConfig(),
    moments_n: int = 20000,
    moments_batches: int = 32,
    seed: int = 0,
    init_seed: int | None = None,
    max_iterations: int = 20,
    relative_tolerance: float = 1e-2,
    beta_tolerance: float = 1e-3,
    normalize: bool = True,
    normalize_n: int = 10000,
) -> SolveResult:
    """Run the full search: fit, measure, update beta, repeat.

    ``seed`` drives all sampling (normalization, moments); ``init_seed``
    drives the flow initialization and defaults to a stream derived from
    ``seed``.  Convergence means the measured target quantity is within
    max(relative_tolerance * |target|, 3 se) of the target value.  A beta
    update smaller than beta_tolerance * max(1, beta) while the target is
    still missed reports non-convergence (stagnation), as does exhausting
    ``max_iterations``.  The per-iteration records always come back, so a
    non-converged run can still be audited.
    """
    f_used = (
        normalize_affine(f, p, normalize_n, derive_seed(seed, "normalize"))
        if normalize
        else f
    )
    if init_seed is None:
        init_seed = derive_seed(seed, "init")
    identity_flow = init_identity(p.dim, arch, seed=init_seed)
    state = BetaState()
    records: list[dict] = []
    model = None
    converged = False
    message = f"iteration cap ({max_iterations}) exceeded"
    beta = 0.0
    for iteration in range(max_iterations):
        cfg_i = (
            tune_cfg.for_warm_start(derive_seed(tune_cfg.seed, "fit", iteration))
            if iteration > 0
            else tune_cfg
        )
        init_flow = model.flow if model is not None else identity_flow
        model = fit_q(p, f_used, beta, init_flow, cfg_i)
        est = estimate_moments(
            model, f_used, moments_n, derive_seed(seed, "moments", iteration),
            moments_batches,
        )
        achieved, se = target.achieved(est)
        residual = achieved - target.value
        state.beta = beta
        state.record(beta, est, residual)
        records.append(
            {
                "iteration": iteration,
                "beta": beta,
                "moments": est,
                "achieved": achieved,
                "residual": residual,
                "trace": model.trace_rows,
            }
        )
        tolerance = max(relative_tolerance * abs(target.value), 3.0 * se)
        if abs(residual) <= tolerance:
            converged = True
            message = f"target reached at beta={beta:.6g}"
            break
        new_beta = newton_step(state, target)
        if abs(new_beta - beta) < beta_tolerance * max(1.0, abs(beta)):
            message = "beta stagnated before reaching the target"
            break
        beta = new_beta
    return SolveResult(model, state, records, converged, message, f_used)


def pareto_sweep(
    p: Distribution,
    f: Criterion,
    beta_grid,
    arch: FlowArchitecture = FlowArchitecture(),
    tune_cfg: TuneConfig = TuneConfig(),
    moments_n: int = 20000,
    moments_batches: int = 32,
    seed: int = 0,
    init_seed: int | None = None,
    traces: list | None = None,
) -> list[tuple[float, MomentEstimates]]:
    """Warm-started fits along an increasing beta grid starting at 0.

    Returns one (beta, MomentEstimates) point per grid value, suitable for
    plotting the divergence-vs-expectation trade-off curve.  Pass a list as
    ``traces`` to collect the per-fit objective trace rows.
    """
    grid = [float(b) for b in beta_grid]
    if not grid or grid[0] != 0.0:
        raise ContractError("beta grid must start at 0")
    if any(b2 <= b1 for b1, b2 in zip(grid, grid[1:])):
        raise ContractError("beta grid must be strictly increasing")
    points: list[tuple[float, MomentEstimates]] = []
    if init_seed is None:
        init_seed = derive_seed(seed, "init")
    flow = init_identity(p.dim, arch, seed=init_seed)
    for i, beta in enumerate(grid):
        cfg_i = (
            tune_cfg.for_warm_start(derive_seed(tune_cfg.seed, "sweep", i))
            if i > 0
            else tune_cfg
        )
        model = fit_q(p, f, beta, flow, cfg_i)
        flow = model.flow
        est = estimate_moments(
            model, f, moments_n, derive_seed(seed, "sweep-moments", i), moments_batches
        )
        points.append((beta, est))
        if traces is not None:
            traces.append(model.trace_rows)
    return points
