"""Criterion assessment and run auditing.

Two complementary tools: gradient-norm profiling compares candidate criteria
before any tuning (a criterion whose gradient norms are spread over many
orders of magnitude makes a harder optimization landscape), and
self-normalized importance curves predict the expectation/divergence
trade-off directly from base-model samples, giving a theoretical reference
that converged runs should track.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .criteria import Criterion
from .dists import Distribution
from .errors import ContractError

__all__ = [
    "GradNormProfile",
    "grad_norm_profile",
    "TheoreticalCurve",
    "importance_curves",
    "CriterionEntry",
    "ComparisonReport",
    "compare_criteria",
    "AuditRow",
    "AuditReport",
    "audit_run",
]

ZERO_MASS_EPS = 1e-3  # a norm below eps * max counts as a dead-gradient point


@dataclass(frozen=True)
class GradNormProfile:
    """Histogram summary of criterion gradient norms under the base model."""

    label: str
    sample_count: int
    bin_edges: np.ndarray
    counts: np.ndarray
    median: float
    p90: float
    p99: float
    max: float
    zero_mass_fraction: float
    truncated: bool
    cap: float | None

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "sample_count": self.sample_count,
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "median": self.median,
            "p90": self.p90,
            "p99": self.p99,
            "max": self.max,
            "zero_mass_fraction": self.zero_mass_fraction,
            "truncated": self.truncated,
            "cap": self.cap,
        }


def grad_norm_profile(
    f: Criterion,
    p: Distribution,
    n: int,
    bins: int,
    seed: int,
    cap: float | None = None,
) -> GradNormProfile:
    """Histogram of ||grad f|| over ``n`` base-model samples.

    With ``cap`` set, norms above it are folded into the top bin and the
    profile is flagged as truncated, so counts always sum to ``n``.
    """
    if n < 1000:
        raise ContractError("gradient profiling needs n >= 1000")
    norms = np.linalg.norm(np.atleast_2d(f.grad(p.sample(n, seed))), axis=1)
    top = float(norms.max())
    truncated = cap is not None and top > cap
    hi = min(top, cap) if cap is not None else top
    counts, edges = np.histogram(
        np.minimum(norms, hi), bins=bins, range=(0.0, hi if hi > 0 else 1.0)
    )
    return GradNormProfile(
        label=f.label,
        sample_count=n,
        bin_edges=edges,
        counts=counts,
        median=float(np.quantile(norms, 0.5)),
        p90=float(np.quantile(norms, 0.9)),
        p99=float(np.quantile(norms, 0.99)),
        max=top,
        zero_mass_fraction=float(np.mean(norms < ZERO_MASS_EPS * max(top, 1e-300))),
        truncated=truncated,
        cap=cap,
    )


@dataclass(frozen=True)
class TheoreticalCurve:
    """Importance-sampling predictions of the tilt trade-off from p-samples.

    For each beta the weights are w = exp(beta * f) over a fixed sample set:
    log Z is the self-normalized log-mean weight, the expectation is the
    weighted mean of f, and the divergence is beta * E - log Z.  ``reliable``
    turns False from the first beta whose effective sample size drops below
    the floor and stays False beyond it.
    """

    betas: np.ndarray
    log_z: np.ndarray
    mean_f: np.ndarray
    dkl: np.ndarray
    ess: np.ndarray
    reliable: np.ndarray

    def to_dict(self) -> dict:
        return {
            "betas": self.betas.tolist(),
            "log_z": self.log_z.tolist(),
            "mean_f": self.mean_f.tolist(),
            "dkl": self.dkl.tolist(),
            "ess": self.ess.tolist(),
            "reliable": self.reliable.tolist(),
        }


def importance_curves(
    f: Criterion,
    p: Distribution,
    beta_grid,
    n: int,
    seed: int,
    ess_floor: float = 50.0,
) -> TheoreticalCurve:
    if n < 10**4:
        raise ContractError("importance curves need n >= 10^4")
    values = np.asarray(f.value(p.sample(n, seed)), dtype=float)
    betas = np.asarray(list(beta_grid), dtype=float)
    log_z = np.empty_like(betas)
    mean_f = np.empty_like(betas)
    dkl = np.empty_like(betas)
    ess = np.empty_like(betas)
    for i, beta in enumerate(betas):
        log_w = beta * values
        m = log_w.max()
        lse = m + np.log(np.exp(log_w - m).sum())
        log_z[i] = lse - np.log(n)
        w = np.exp(log_w - lse)  # normalized to sum 1
        mean_f[i] = w @ values
        dkl[i] = beta * mean_f[i] - log_z[i]
        ess[i] = 1.0 / np.sum(w * w)
    reliable = np.logical_and.accumulate(ess >= ess_floor)
    return TheoreticalCurve(betas, log_z, mean_f, dkl, ess, reliable)


@dataclass(frozen=True)
class CriterionEntry:
    """One candidate's profile plus the declared regularity score.

    The score is p99/median over the nonzero gradient norms; lower means a
    more evenly informative gradient field, hence an easier tuning problem.
    """

    position: int
    label: str
    profile: GradNormProfile
    regularity_score: float
    zero_mass_fraction: float

    def to_dict(self) -> dict:
        return {
            "position": self.position,
            "label": self.label,
            "regularity_score": self.regularity_score,
            "zero_mass_fraction": self.zero_mass_fraction,
            "profile": self.profile.to_dict(),
        }


@dataclass(frozen=True)
class ComparisonReport:
    entries: tuple
    ranking: tuple  # entry positions, best first

    def ranked(self) -> list[CriterionEntry]:
        return [self.entries[i] for i in self.ranking]

    def to_dict(self) -> dict:
        return {
            "ranking": list(self.ranking),
            "entries": [e.to_dict() for e in self.entries],
        }


def _regularity_score(f: Criterion, p: Distribution, n: int, seed: int) -> float:
    norms = np.linalg.norm(np.atleast_2d(f.grad(p.sample(n, seed))), axis=1)
    top = norms.max()
    nonzero = norms[norms >= ZERO_MASS_EPS * max(top, 1e-300)]
    if nonzero.size == 0:
        return float("inf")
    med = float(np.quantile(nonzero, 0.5))
    p99 = float(np.quantile(nonzero, 0.99))
    return p99 / med if med > 0 else float("inf")


def compare_criteria(
    candidates,
    p: Distribution,
    n: int,
    seed: int,
    bins: int = 50,
    cap: float | None = None,
) -> ComparisonReport:
    """Profile each candidate and rank them by regularity score.

    Candidates should already be normalized (the score is scale-free, but
    the raw histograms are only comparable on a common scale).  Ties go to
    the smaller zero-mass fraction, then to input order.
    """
    if len(candidates) < 2:
        raise ContractError("need at least two candidate criteria to compare")
    entries = []
    for i, f in enumerate(candidates):
        profile = grad_norm_profile(f, p, n, bins, seed, cap=cap)
        entries.append(
            CriterionEntry(
                position=i,
                label=f.label,
                profile=profile,
                regularity_score=_regularity_score(f, p, n, seed),
                zero_mass_fraction=profile.zero_mass_fraction,
            )
        )
    ranking = sorted(
        range(len(entries)),
        key=lambda i: (
            entries[i].regularity_score,
            entries[i].zero_mass_fraction,
            entries[i].position,
        ),
    )
    return ComparisonReport(tuple(entries), tuple(ranking))


@dataclass(frozen=True)
class AuditRow:
    beta: float
    empirical_mean_f: float
    theoretical_mean_f: float
    mean_f_gap: float
    empirical_dkl: float
    theoretical_dkl: float
    dkl_gap: float
    undershoot: bool
    stagnation: bool

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "empirical_mean_f": self.empirical_mean_f,
            "theoretical_mean_f": self.theoretical_mean_f,
            "mean_f_gap": self.mean_f_gap,
            "empirical_dkl": self.empirical_dkl,
            "theoretical_dkl": self.theoretical_dkl,
            "dkl_gap": self.dkl_gap,
            "undershoot": self.undershoot,
            "stagnation": self.stagnation,
        }


@dataclass(frozen=True)
class AuditReport:
    rows: tuple
    undershoot: bool
    stagnation: bool

    def to_dict(self) -> dict:
        return {
            "undershoot": self.undershoot,
            "stagnation": self.stagnation,
            "rows": [r.to_dict() for r in self.rows],
        }


def audit_run(
    sweep,
    curve: TheoreticalCurve,
    undershoot_margin: float = 0.1,
    stagnation_ratio: float = 0.2,
) -> AuditReport:
    """Compare a sweep's measured points against the theoretical curve.

    ``sweep`` is a sequence of (beta, mean_f, dkl) triples (or (beta,
    MomentEstimates) pairs from the solver) on the same beta grid as
    ``curve``.  An undershoot flag marks a point whose measured expectation
    falls short of the prediction by more than the margin; a stagnation flag
    marks a step where the measured divergence barely moves while the
    predicted one grows.
    """
    triples = []
    for point in sweep:
        if len(point) == 2 and hasattr(point[1], "mean_f"):
            beta, est = point
            triples.append((float(beta), est.mean_f, est.dkl))
        else:
            beta, mean_f, dkl = point
            triples.append((float(beta), float(mean_f), float(dkl)))
    betas = np.array([t[0] for t in triples])
    if betas.shape != curve.betas.shape or not np.allclose(betas, curve.betas):
        raise ContractError("sweep and theoretical curve must share a beta grid")
    rows = []
    any_under = False
    any_stag = False
    prev_emp_dkl = prev_theo_dkl = None
    for i, (beta, emp_e, emp_d) in enumerate(triples):
        theo_e = float(curve.mean_f[i])
        theo_d = float(curve.dkl[i])
        scale_e = max(abs(theo_e), 1.0)
        scale_d = max(abs(theo_d), 1.0)
        mean_gap = (emp_e - theo_e) / scale_e
        dkl_gap = (emp_d - theo_d) / scale_d
        undershoot = (theo_e - emp_e) > undershoot_margin * scale_e
        stagnation = False
        if prev_theo_dkl is not None:
            theo_inc = theo_d - prev_theo_dkl
            emp_inc = emp_d - prev_emp_dkl
            stagnation = theo_inc > 0.1 and emp_inc < stagnation_ratio * theo_inc
        prev_emp_dkl, prev_theo_dkl = emp_d, theo_d
        any_under = any_under or undershoot
        any_stag = any_stag or stagnation
        rows.append(
            AuditRow(
                beta=beta,
                empirical_mean_f=emp_e,
                theoretical_mean_f=theo_e,
                mean_f_gap=mean_gap,
                empirical_dkl=emp_d,
                theoretical_dkl=theo_d,
                dkl_gap=dkl_gap,
                undershoot=undershoot,
                stagnation=stagnation,
            )
        )
    return AuditReport(tuple(rows), any_under, any_stag)
