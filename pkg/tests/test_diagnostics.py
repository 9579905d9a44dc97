import numpy as np
import pytest

from tiltgen import (
    ContractError,
    DiagGaussian,
    LinearCriterion,
    LogisticClassifier,
    audit_run,
    classifier_criterion,
    compare_criteria,
    grad_norm_profile,
    importance_curves,
    normalize_affine,
)
from tiltgen.criteria import Criterion
from tiltgen.dists import Distribution
from tiltgen.rng import make_generator
from tiltgen.solver import pareto_sweep
from tiltgen.tuner import TuneConfig


class TwoPointDistribution(Distribution):
    """Uniform on {0, 1} (one-dimensional); enough protocol for diagnostics."""

    kind = "two-point"
    dim = 1

    def sample(self, n, seed):
        rng = make_generator(seed)
        return rng.integers(0, 2, size=(n, 1)).astype(float)


class ScaledCriterion(Criterion):
    def __init__(self, base, factor):
        self.base = base
        self.factor = factor
        self.dim = base.dim
        self.label = f"{base.label} x{factor}"

    def value(self, x):
        return self.factor * self.base.value(x)

    def grad(self, x):
        return self.factor * self.base.grad(x)


# ---------------------------------------------------------------------------
# gradient-norm profiles


def test_profile_linear_criterion_single_bin(std_normal_2d):
    f = LinearCriterion([3.0, 4.0])
    profile = grad_norm_profile(f, std_normal_2d, n=2000, bins=20, seed=1)
    assert profile.median == pytest.approx(5.0)
    assert profile.p99 == pytest.approx(5.0)
    assert profile.max == pytest.approx(5.0)
    assert (profile.counts > 0).sum() == 1
    assert profile.counts.sum() == 2000
    assert profile.zero_mass_fraction == 0.0


def test_profile_truncation_flag(std_normal_1d):
    f = classifier_criterion(LogisticClassifier([10.0]), 1, "log-prob")
    capped = grad_norm_profile(f, std_normal_1d, n=2000, bins=10, seed=2, cap=5.0)
    assert capped.truncated
    assert capped.counts.sum() == 2000  # tail folded into the top bin
    assert capped.bin_edges[-1] == pytest.approx(5.0)
    uncapped = grad_norm_profile(f, std_normal_1d, n=2000, bins=10, seed=2)
    assert not uncapped.truncated


def test_profile_deterministic(std_normal_1d):
    f = LinearCriterion([1.0])
    p1 = grad_norm_profile(f, std_normal_1d, n=1500, bins=8, seed=3)
    p2 = grad_norm_profile(f, std_normal_1d, n=1500, bins=8, seed=3)
    assert np.array_equal(p1.counts, p2.counts)
    assert np.array_equal(p1.bin_edges, p2.bin_edges)


def test_profile_requires_enough_samples(std_normal_1d):
    with pytest.raises(ContractError):
        grad_norm_profile(LinearCriterion([1.0]), std_normal_1d, 100, 10, seed=0)


def test_profile_scales_linearly_with_tilt_strength(std_normal_1d):
    # the log-ratio gradient of the tilted model is beta * grad f exactly,
    # so its norm profile is the criterion's profile with scaled bin edges
    f = classifier_criterion(LogisticClassifier([4.0]), 1, "log-prob")
    beta = 2.5
    base = grad_norm_profile(f, std_normal_1d, n=3000, bins=25, seed=4)
    scaled = grad_norm_profile(
        ScaledCriterion(f, beta), std_normal_1d, n=3000, bins=25, seed=4
    )
    assert np.allclose(scaled.bin_edges, beta * base.bin_edges)
    assert np.array_equal(scaled.counts, base.counts)
    assert scaled.median == pytest.approx(beta * base.median)
    assert scaled.p99 == pytest.approx(beta * base.p99)


# ---------------------------------------------------------------------------
# importance curves


def test_curves_beta_zero_exact(std_normal_1d):
    f = LinearCriterion([1.0])
    curve = importance_curves(f, std_normal_1d, [0.0, 0.5], n=10**4, seed=5)
    values = f.value(std_normal_1d.sample(10**4, seed=5))
    assert curve.log_z[0] == 0.0
    assert curve.dkl[0] == 0.0
    assert curve.mean_f[0] == pytest.approx(values.mean(), abs=1e-14)
    assert curve.ess[0] == pytest.approx(10**4)


def test_curves_two_point_matches_hand_values(oracle_values):
    ref = oracle_values["two_point"]
    p = TwoPointDistribution()
    f = LinearCriterion([1.0])
    n = 40000
    curve = importance_curves(f, p, [0.0, ref["beta"]], n=n, seed=6)
    # batch-means standard errors of the self-normalized estimates
    values = f.value(p.sample(n, seed=6))
    w = np.exp(ref["beta"] * values)
    blocks = values.reshape(20, -1)
    wb = w.reshape(20, -1)
    e_blocks = (blocks * wb).sum(axis=1) / wb.sum(axis=1)
    se_e = e_blocks.std(ddof=1) / np.sqrt(20)
    assert curve.mean_f[1] == pytest.approx(ref["E"], abs=3 * se_e)
    z_blocks = wb.mean(axis=1)
    d_blocks = ref["beta"] * e_blocks - np.log(z_blocks)
    se_d = d_blocks.std(ddof=1) / np.sqrt(20)
    assert curve.dkl[1] == pytest.approx(ref["dkl"], abs=3 * se_d)


def test_curves_match_gaussian_tilt(std_normal_1d):
    f = LinearCriterion([1.0])
    betas = [0.0, 0.5, 1.0, 1.5]
    n = 50000
    curve = importance_curves(f, std_normal_1d, betas, n=n, seed=7)
    assert np.all(curve.ess >= 100)
    for i, beta in enumerate(betas):
        # se of the self-normalized mean is roughly sqrt(Var_q f / ESS)
        se = np.sqrt(1.0 / curve.ess[i])
        assert curve.mean_f[i] == pytest.approx(beta, abs=3 * se + 1e-9)
        assert curve.dkl[i] == pytest.approx(beta**2 / 2, abs=3 * se * max(beta, 0.1) + 1e-9)


def test_curves_dkl_identity_exact(std_normal_1d):
    f = LinearCriterion([1.0])
    curve = importance_curves(f, std_normal_1d, [0.0, 0.7, 1.3], n=10**4, seed=8)
    assert np.allclose(
        curve.dkl, curve.betas * curve.mean_f - curve.log_z, atol=1e-12
    )


def test_curves_monotone_and_reliability_marking(std_normal_1d):
    f = LinearCriterion([1.0])
    betas = [0.0, 1.0, 2.0, 6.0, 8.0]
    curve = importance_curves(f, std_normal_1d, betas, n=10**4, seed=9)
    reliable_part = curve.reliable
    assert reliable_part[0] and reliable_part[1]
    assert not curve.reliable[-1]  # ESS collapses at beta=8
    # once unreliable, stays unreliable
    first_bad = int(np.argmin(curve.reliable))
    assert not curve.reliable[first_bad:].any()
    good = curve.reliable
    assert np.all(np.diff(curve.mean_f[good]) > -0.05)
    assert np.all(np.diff(curve.dkl[good]) > -0.05)


def test_curves_require_enough_samples(std_normal_1d):
    with pytest.raises(ContractError):
        importance_curves(LinearCriterion([1.0]), std_normal_1d, [0.0], n=100, seed=0)


# ---------------------------------------------------------------------------
# criterion comparison


def toy_candidates(p, n=20000):
    h = LogisticClassifier([10.0])
    prob = classifier_criterion(h, 1, "prob")
    logp = classifier_criterion(h, 1, "log-prob")
    return (
        normalize_affine(prob, p, n, seed=10),
        normalize_affine(logp, p, n, seed=11),
    )


def test_compare_ranks_log_form_first(std_normal_1d):
    prob, logp = toy_candidates(std_normal_1d)
    report = compare_criteria([prob, logp], std_normal_1d, n=20000, seed=12)
    assert report.ranked()[0].label == logp.label
    scores = {e.label: e.regularity_score for e in report.entries}
    assert scores[prob.label] / scores[logp.label] >= 2.0
    zm = {e.label: e.zero_mass_fraction for e in report.entries}
    assert zm[prob.label] > zm[logp.label]


def test_compare_identical_candidates_stable_order(std_normal_1d):
    f1 = normalize_affine(LinearCriterion([1.0]), std_normal_1d, 5000, seed=13)
    f2 = normalize_affine(LinearCriterion([1.0]), std_normal_1d, 5000, seed=13)
    report = compare_criteria([f1, f2], std_normal_1d, n=5000, seed=14)
    assert report.entries[0].regularity_score == report.entries[1].regularity_score
    assert report.ranking == (0, 1)


def test_compare_linear_beats_saturating(std_normal_1d):
    linear = normalize_affine(LinearCriterion([1.0]), std_normal_1d, 5000, seed=15)
    saturating = normalize_affine(
        classifier_criterion(LogisticClassifier([8.0]), 1, "prob"),
        std_normal_1d, 5000, seed=16,
    )
    report = compare_criteria([saturating, linear], std_normal_1d, n=5000, seed=17)
    assert report.ranked()[0].label == linear.label
    assert report.ranked()[0].regularity_score == pytest.approx(1.0)
    assert report.ranked()[1].regularity_score > 1.0


def test_compare_needs_two_candidates(std_normal_1d):
    f = normalize_affine(LinearCriterion([1.0]), std_normal_1d, 5000, seed=18)
    with pytest.raises(ContractError):
        compare_criteria([f], std_normal_1d, n=5000, seed=19)


# ---------------------------------------------------------------------------
# run audit


def test_audit_converged_benchmark_has_small_gaps(std_normal_1d):
    f = LinearCriterion([1.0])
    betas = [0.0, 0.5, 1.0, 1.5]
    curve = importance_curves(f, std_normal_1d, betas, n=10**5, seed=20)
    # a converged run's sweep: exact tilt values plus realistic MC noise
    sweep = [(b, b + 0.005, b**2 / 2 + 0.005) for b in betas]
    report = audit_run(sweep, curve)
    assert not report.undershoot
    assert not report.stagnation
    assert all(abs(r.mean_f_gap) < 0.05 for r in report.rows)
    assert all(abs(r.dkl_gap) < 0.05 for r in report.rows)
    assert abs(report.rows[0].mean_f_gap) < 0.02  # beta = 0 gap is noise-level


def test_audit_flags_undertrained_run(std_normal_1d):
    # 10-step fits cannot move the flow, so measured values hug beta=0
    f = LinearCriterion([1.0])
    betas = [0.0, 1.0, 2.0]
    cfg = TuneConfig(steps=10, warm_steps=10, learning_rate=1e-3, seed=21,
                     improvement_tol=0)
    points = pareto_sweep(std_normal_1d, f, betas, tune_cfg=cfg,
                          moments_n=5000, seed=22)
    curve = importance_curves(f, std_normal_1d, betas, n=10**4, seed=23)
    report = audit_run(points, curve)
    assert report.undershoot
    assert report.stagnation


def test_audit_requires_matching_grids(std_normal_1d):
    f = LinearCriterion([1.0])
    curve = importance_curves(f, std_normal_1d, [0.0, 1.0], n=10**4, seed=24)
    with pytest.raises(ContractError):
        audit_run([(0.0, 0.0, 0.0)], curve)
