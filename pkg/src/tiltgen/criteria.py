"""Differentiable criteria with normalization and latent lifting.

A criterion is a scalar function of a sample point together with its input
gradient.  Constructors cover the built-in families: linear scores,
classifier-based targets (probability, log-probability, prediction entropy),
density log-ratios for adversarial refinement, and peak / windowed-mean
summaries of curve-valued samples.

Criteria are immutable and their ``value``/``grad`` are pure, so batch
evaluation can be parallelized freely.
"""

from __future__ import annotations

import numpy as np

from .dists import Distribution, GaussianMixture, LatentDecoder, _as_batch
from .errors import ContractError, DegenerateCriterionError
from .rng import make_generator

LOG_PROB_FLOOR = -30.0


class Criterion:
    """Scalar criterion f with value and input gradient.

    ``value`` maps (n, d) points to (n,) reals (or a vector to a scalar);
    ``grad`` returns the matching input gradients.
    """

    label = "criterion"
    dim: int  # input dimension

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def _batch(self, x):
        return _as_batch(x, self.dim)


class LinearCriterion(Criterion):
    """f(x) = a . x"""

    def __init__(self, coefficients, label: str = "linear"):
        self.coefficients = np.atleast_1d(np.asarray(coefficients, dtype=float)).copy()
        self.dim = self.coefficients.shape[0]
        self.label = label
        self.coefficients.flags.writeable = False

    def value(self, x):
        batch, single = self._batch(x)
        out = batch @ self.coefficients
        return out[0] if single else out

    def grad(self, x):
        batch, single = self._batch(x)
        out = np.broadcast_to(self.coefficients, batch.shape).copy()
        return out[0] if single else out


class AffineNormalizedCriterion(Criterion):
    """(f - shift) / scale; the gradient is rescaled by 1/scale."""

    def __init__(self, base: Criterion, shift: float, scale: float):
        if scale <= 0.0:
            raise ContractError("normalization scale must be positive")
        self.base = base
        self.shift = float(shift)
        self.scale = float(scale)
        self.dim = base.dim
        self.label = f"{base.label} (normalized)"

    def value(self, x):
        return (self.base.value(x) - self.shift) / self.scale

    def grad(self, x):
        return self.base.grad(x) / self.scale


def normalize_affine(f: Criterion, p: Distribution, n: int, seed: int) -> Criterion:
    """Shift/scale ``f`` so its sample mean and std under ``p`` are 0 and 1.

    Raises ``DegenerateCriterionError`` when the empirical variance is zero
    (a constant criterion cannot drive any tilt).
    """
    if n < 2:
        raise ContractError("normalization needs at least 2 samples")
    values = np.asarray(f.value(p.sample(n, seed)), dtype=float)
    shift = float(values.mean())
    scale = float(values.std(ddof=1))
    if not np.isfinite(scale) or scale < 1e-12 * max(1.0, abs(shift)):
        raise DegenerateCriterionError(
            f"criterion {f.label!r} has zero empirical variance under the base model"
        )
    return AffineNormalizedCriterion(f, shift, scale)


# ---------------------------------------------------------------------------
# Classifier-based criteria


class LogisticClassifier:
    """Binary classifier h(1|x) = sigmoid(w.x + b) with analytic gradients."""

    def __init__(self, weights, bias: float = 0.0):
        self.weights = np.atleast_1d(np.asarray(weights, dtype=float)).copy()
        self.bias = float(bias)
        self.dim = self.weights.shape[0]
        self.num_classes = 2
        self.weights.flags.writeable = False

    def _logit(self, batch):
        return batch @ self.weights + self.bias

    def log_probabilities(self, batch) -> np.ndarray:
        z = self._logit(batch)
        # log sigma(z) = -softplus(-z); stable on both tails
        log_p1 = -np.logaddexp(0.0, -z)
        log_p0 = -np.logaddexp(0.0, z)
        return np.stack([log_p0, log_p1], axis=1)

    def log_prob_grad(self, batch, label: int) -> np.ndarray:
        z = self._logit(batch)
        sig = 1.0 / (1.0 + np.exp(-z))
        factor = (1.0 - sig) if label == 1 else -sig
        return factor[:, None] * self.weights


class BayesPosteriorClassifier:
    """Exact posterior p(component | x) of a Gaussian mixture.

    grad log h(c|x) = score of component c minus score of the mixture.
    """

    def __init__(self, mixture: GaussianMixture):
        self.mixture = mixture
        self.dim = mixture.dim
        self.num_classes = len(mixture.components)

    def log_probabilities(self, batch) -> np.ndarray:
        resp = self.mixture.responsibilities(batch)
        return np.log(np.maximum(resp, 1e-300))

    def log_prob_grad(self, batch, label: int) -> np.ndarray:
        return self.mixture.components[label].score(batch) - self.mixture.score(batch)


class ClassifierCriterion(Criterion):
    """Criterion built from a probabilistic classifier.

    form "prob"      -- f = h(target | x)
    form "log-prob"  -- f = log h(target | x), clamped at ``floor`` with zero
                        gradient below it (keeps the objective finite when
                        the classifier saturates, without adding spurious
                        gradient)
    form "entropy"   -- f = entropy of the prediction (debugging aid)
    """

    FORMS = ("prob", "log-prob", "entropy")

    def __init__(self, classifier, target_class: int = 1, form: str = "log-prob",
                 floor: float = LOG_PROB_FLOOR):
        if form not in self.FORMS:
            raise ContractError(f"unknown classifier criterion form {form!r}")
        if form != "entropy" and not 0 <= target_class < classifier.num_classes:
            raise ContractError("target class out of range")
        self.classifier = classifier
        self.target_class = int(target_class)
        self.form = form
        self.floor = float(floor)
        self.dim = classifier.dim
        if form == "entropy":
            self.label = "classifier-entropy"
        else:
            self.label = f"class-{form}[{target_class}]"

    def value(self, x):
        batch, single = self._batch(x)
        log_p = self.classifier.log_probabilities(batch)
        if self.form == "prob":
            out = np.exp(log_p[:, self.target_class])
        elif self.form == "log-prob":
            out = np.maximum(log_p[:, self.target_class], self.floor)
        else:
            out = -np.sum(np.exp(log_p) * log_p, axis=1)
        return out[0] if single else out

    def grad(self, x):
        batch, single = self._batch(x)
        if self.form == "entropy":
            log_p = self.classifier.log_probabilities(batch)
            out = np.zeros_like(batch)
            for c in range(self.classifier.num_classes):
                g = self.classifier.log_prob_grad(batch, c)
                # d(-sum p log p) = -sum (log p) dp, since sum dp = 0
                out -= (np.exp(log_p[:, c]) * log_p[:, c])[:, None] * g
        else:
            log_p = self.classifier.log_probabilities(batch)[:, self.target_class]
            g = self.classifier.log_prob_grad(batch, self.target_class)
            if self.form == "prob":
                out = np.exp(log_p)[:, None] * g
            else:
                out = np.where((log_p > self.floor)[:, None], g, 0.0)
        return out[0] if single else out


def classifier_criterion(
    classifier, target_class: int = 1, form: str = "log-prob",
    floor: float = LOG_PROB_FLOOR,
) -> ClassifierCriterion:
    """Criterion from a probabilistic classifier; see ClassifierCriterion."""
    return ClassifierCriterion(classifier, target_class, form, floor)


# ---------------------------------------------------------------------------
# Density-ratio and curve criteria


class AdversarialCriterion(Criterion):
    """f(x) = log p_data(x) - log p_model(x); gradient is the score difference."""

    def __init__(self, p_model: Distribution, p_data: Distribution):
        if p_model.dim != p_data.dim:
            raise ContractError("model and data distributions must share dimension")
        self.p_model = p_model
        self.p_data = p_data
        self.dim = p_model.dim
        self.label = "log-density-ratio"

    def value(self, x):
        return self.p_data.log_density(x) - self.p_model.log_density(x)

    def grad(self, x):
        return self.p_data.score(x) - self.p_model.score(x)


def adversarial_criterion(p_model, p_data) -> AdversarialCriterion:
    return AdversarialCriterion(p_model, p_data)


def _check_window(window, dim: int) -> tuple[int, int]:
    start, stop = int(window[0]), int(window[1])
    if not (0 <= start < stop <= dim):
        raise ContractError(
            f"window [{start}, {stop}) empty or outside curve length {dim}"
        )
    return start, stop


class PeakCriterion(Criterion):
    """Smoothed maximum over a window: tau * log-sum-exp(x / tau).

    Always >= the hard max over the window; tends to it as tau -> 0.
    """

    def __init__(self, dim: int, window, temperature: float):
        if temperature <= 0.0:
            raise ContractError("temperature must be positive")
        self.dim = int(dim)
        self.window = _check_window(window, self.dim)
        self.temperature = float(temperature)
        self.label = f"soft-peak[{self.window[0]}:{self.window[1]}]"

    def value(self, x):
        batch, single = self._batch(x)
        w = batch[:, self.window[0] : self.window[1]] / self.temperature
        m = w.max(axis=1)
        out = self.temperature * (np.log(np.exp(w - m[:, None]).sum(axis=1)) + m)
        return out[0] if single else out

    def grad(self, x):
        batch, single = self._batch(x)
        w = batch[:, self.window[0] : self.window[1]] / self.temperature
        w -= w.max(axis=1, keepdims=True)
        soft = np.exp(w)
        soft /= soft.sum(axis=1, keepdims=True)
        out = np.zeros_like(batch)
        out[:, self.window[0] : self.window[1]] = soft
        return out[0] if single else out


class WindowMeanCriterion(Criterion):
    """Mean over a window minus the mean over the whole curve."""

    def __init__(self, dim: int, window):
        self.dim = int(dim)
        self.window = _check_window(window, self.dim)
        self.label = f"window-mean[{self.window[0]}:{self.window[1]}]"
        g = np.full(self.dim, -1.0 / self.dim)
        g[self.window[0] : self.window[1]] += 1.0 / (self.window[1] - self.window[0])
        self._grad = g

    def value(self, x):
        batch, single = self._batch(x)
        out = batch @ self._grad
        return out[0] if single else out

    def grad(self, x):
        batch, single = self._batch(x)
        out = np.broadcast_to(self._grad, batch.shape).copy()
        return out[0] if single else out


def peak_criterion(dim: int, window, temperature: float) -> PeakCriterion:
    return PeakCriterion(dim, window, temperature)


def window_mean_criterion(dim: int, window) -> WindowMeanCriterion:
    return WindowMeanCriterion(dim, window)


def default_peak_temperature(p: Distribution, n: int, seed: int) -> float:
    """Declared default smoothing scale: 0.05 x std of curve values under p."""
    samples = p.sample(n, seed)
    return 0.05 * float(samples.std())


# ---------------------------------------------------------------------------
# Latent lifting


class LatentCriterion(Criterion):
    """Criterion on latent space: f_hat(z) = E_{x ~ p(x|z)} f(x).

    The expectation is a Monte-Carlo mean over ``mc_samples`` decoder noise
    draws that are frozen at construction (common random numbers), so value
    and grad are pure deterministic functions of z.  The gradient is the
    pathwise estimator A^T grad f(A z + sigma eps), unbiased because the
    decoder is frozen.  With a deterministic decoder (sigma^2 = 0) the lift
    is exact: f_hat(z) = f(A z).
    """

    def __init__(self, base: Criterion, decoder: LatentDecoder, mc_samples: int, seed: int = 0):
        if mc_samples < 1:
            raise ContractError("mc_samples must be >= 1")
        if base.dim != decoder.data_dim:
            raise ContractError("criterion dimension must match decoder output")
        self.base = base
        self.decoder = decoder
        self.mc_samples = 1 if decoder.noise_variance == 0.0 else int(mc_samples)
        self.dim = decoder.latent_dim
        self.label = f"{base.label} (latent)"
        if decoder.noise_variance > 0.0:
            rng = make_generator(seed)
            self._eps = rng.standard_normal((self.mc_samples, decoder.data_dim))
        else:
            self._eps = np.zeros((1, decoder.data_dim))
        self._sigma = np.sqrt(decoder.noise_variance)

    def value(self, z):
        batch, single = self._batch(z)
        mean = batch @ self.decoder.weights.T
        total = np.zeros(batch.shape[0])
        for eps in self._eps:
            total += self.base.value(mean + self._sigma * eps)
        out = total / self.mc_samples
        return out[0] if single else out

    def grad(self, z):
        batch, single = self._batch(z)
        mean = batch @ self.decoder.weights.T
        total = np.zeros_like(batch)
        for eps in self._eps:
            total += self.base.grad(mean + self._sigma * eps) @ self.decoder.weights
        out = total / self.mc_samples
        return out[0] if single else out


def lift_to_latent(
    f: Criterion, decoder: LatentDecoder, mc_samples: int, seed: int = 0
) -> LatentCriterion:
    """Replace a data-space criterion by its decoder-averaged latent version."""
    return LatentCriterion(f, decoder, mc_samples, seed)
