"""Probability-model abstraction and exactly-evaluable built-ins.

Every distribution here exposes three operations computed in log space:

* ``log_density(x)`` -- exact log p(x), batched,
* ``score(x)`` -- the input gradient of ``log_density`` (analytic per kind),
* ``sample(n, seed)`` -- reproducible draws from an explicit seed.

Built-ins are a diagonal Gaussian, a Gaussian mixture with diagonal
components, and the marginal of a linear-Gaussian latent decoder.  All are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import numpy as np

from .errors import CapabilityError, ContractError
from .rng import make_generator

_LOG_2PI = np.log(2.0 * np.pi)


def _as_batch(x, dim: int):
    """Coerce ``x`` to shape (n, dim); return (batch, was_single_vector)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ContractError(
                f"expected a vector of length {dim}, got shape {arr.shape}"
            )
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != dim:
            raise ContractError(
                f"expected points of dimension {dim}, got shape {arr.shape}"
            )
        return arr, False
    raise ContractError(f"expected a vector or a matrix of points, got ndim={arr.ndim}")


class Distribution:
    """Common interface: ``dim``, ``kind``, log_density / score / sample."""

    dim: int
    kind: str

    def log_density(self, x):
        raise NotImplementedError

    def score(self, x):
        raise CapabilityError(f"no analytic score for kind {self.kind!r}")

    def sample(self, n: int, seed: int) -> np.ndarray:
        raise NotImplementedError

    def spec(self) -> dict:
        """JSON-ready constructor parameters (run-config schema)."""
        raise CapabilityError(f"kind {self.kind!r} is not config-serializable")


class DiagGaussian(Distribution):
    """Gaussian with diagonal covariance.

    Parameters
    ----------
    mean : array of shape (dim,)
    variance : array of shape (dim,), strictly positive
    """

    kind = "diag-gaussian"

    def __init__(self, mean, variance):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        self.variance = np.atleast_1d(np.asarray(variance, dtype=float)).copy()
        if self.mean.shape != self.variance.shape or self.mean.ndim != 1:
            raise ContractError("mean and variance must be 1-d arrays of equal length")
        if np.any(self.variance <= 0.0):
            raise ContractError("variances must be strictly positive")
        self.dim = self.mean.shape[0]
        self._log_norm = 0.5 * np.sum(_LOG_2PI + np.log(self.variance))
        self.mean.flags.writeable = False
        self.variance.flags.writeable = False

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.ones(dim))

    def log_density(self, x):
        batch, single = _as_batch(x, self.dim)
        diff = batch - self.mean
        out = -0.5 * np.sum(diff * diff / self.variance, axis=1) - self._log_norm
        return out[0] if single else out

    def score(self, x):
        batch, single = _as_batch(x, self.dim)
        out = -(batch - self.mean) / self.variance
        return out[0] if single else out

    def sample(self, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise ContractError("sample count must be >= 1")
        rng = make_generator(seed)
        z = rng.standard_normal((n, self.dim))
        return self.mean + z * np.sqrt(self.variance)

    def entropy(self) -> float:
        """Differential entropy, 0.5 * sum(1 + log(2 pi variance))."""
        return 0.5 * np.sum(1.0 + _LOG_2PI + np.log(self.variance))

    def spec(self) -> dict:
        return {
            "kind": self.kind,
            "mean": self.mean.tolist(),
            "variance": self.variance.tolist(),
        }


class GaussianMixture(Distribution):
    """Finite mixture of diagonal Gaussians.

    Weights must be nonnegative and sum to 1 within 1e-12.  Sampling draws
    an exact categorical component index, then the component.
    """

    kind = "gaussian-mixture"

    def __init__(self, weights, components):
        self.weights = np.atleast_1d(np.asarray(weights, dtype=float)).copy()
        self.components = tuple(components)
        if len(self.components) != self.weights.shape[0]:
            raise ContractError("one weight per component required")
        if np.any(self.weights < 0.0):
            raise ContractError("mixture weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ContractError("mixture weights must sum to 1 within 1e-12")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ContractError("all components must share one dimension")
        self.dim = dims.pop()
        self._log_weights = np.log(np.where(self.weights > 0, self.weights, 1e-300))
        self.weights.flags.writeable = False

    def _component_log_densities(self, batch) -> np.ndarray:
        return np.stack(
            [c.log_density(batch) for c in self.components], axis=1
        )  # (n, k)

    def log_density(self, x):
        batch, single = _as_batch(x, self.dim)
        joint = self._component_log_densities(batch) + self._log_weights
        m = joint.max(axis=1, keepdims=True)
        out = np.log(np.exp(joint - m).sum(axis=1)) + m[:, 0]
        return out[0] if single else out

    def responsibilities(self, x) -> np.ndarray:
        """Posterior component probabilities p(component | x), shape (n, k)."""
        batch, single = _as_batch(x, self.dim)
        joint = self._component_log_densities(batch) + self._log_weights
        joint -= joint.max(axis=1, keepdims=True)
        w = np.exp(joint)
        w /= w.sum(axis=1, keepdims=True)
        return w[0] if single else w

    def score(self, x):
        batch, single = _as_batch(x, self.dim)
        resp = self.responsibilities(batch)  # (n, k)
        comp_scores = np.stack([c.score(batch) for c in self.components], axis=1)
        out = np.einsum("nk,nkd->nd", resp, comp_scores)
        return out[0] if single else out

    def sample(self, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise ContractError("sample count must be >= 1")
        rng = make_generator(seed)
        idx = rng.choice(len(self.components), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        means = np.stack([c.mean for c in self.components])[idx]
        stds = np.sqrt(np.stack([c.variance for c in self.components])[idx])
        return means + z * stds

    def spec(self) -> dict:
        return {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "components": [
                {"mean": c.mean.tolist(), "variance": c.variance.tolist()}
                for c in self.components
            ],
        }


class LatentDecoder:
    """Linear-Gaussian decoder x = A z + sigma * eps with standard-normal prior.

    ``noise_variance`` may be zero, in which case the decoder is deterministic
    (x = A z); the marginal density then requires A A^T to be nonsingular.
    """

    def __init__(self, weights, noise_variance: float):
        self.weights = np.atleast_2d(np.asarray(weights, dtype=float)).copy()
        self.noise_variance = float(noise_variance)
        if self.noise_variance < 0.0:
            raise ContractError("observation noise variance must be >= 0")
        self.data_dim, self.latent_dim = self.weights.shape
        self.weights.flags.writeable = False

    def prior(self) -> DiagGaussian:
        return DiagGaussian.standard(self.latent_dim)

    def decode_mean(self, z) -> np.ndarray:
        batch, single = _as_batch(z, self.latent_dim)
        out = batch @ self.weights.T
        return out[0] if single else out

    def decode(self, z, seed: int) -> np.ndarray:
        """Sample x ~ p(x | z) for each latent row; deterministic if sigma^2=0."""
        mean = self.decode_mean(np.atleast_2d(z))
        if self.noise_variance == 0.0:
            out = mean
        else:
            rng = make_generator(seed)
            eps = rng.standard_normal(mean.shape)
            out = mean + np.sqrt(self.noise_variance) * eps
        return out[0] if np.asarray(z).ndim == 1 else out

    def marginal_covariance(self) -> np.ndarray:
        return self.weights @ self.weights.T + self.noise_variance * np.eye(
            self.data_dim
        )

    def marginal(self) -> "DecoderMarginal":
        return DecoderMarginal(self)

    def spec(self) -> dict:
        return {
            "kind": "latent-decoder",
            "weights": self.weights.tolist(),
            "noise_variance": self.noise_variance,
        }


class DecoderMarginal(Distribution):
    """Marginal N(0, A A^T + sigma^2 I) of a linear-Gaussian decoder.

    The Cholesky factor is computed lazily: sampling never needs it, so a
    rank-deficient noiseless decoder only fails if its marginal density is
    actually evaluated.
    """

    kind = "latent-decoder"

    def __init__(self, decoder: LatentDecoder):
        self.decoder = decoder
        self.dim = decoder.data_dim
        self._chol = None
        self._log_norm = None

    def _factor(self) -> np.ndarray:
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(self.decoder.marginal_covariance())
            except np.linalg.LinAlgError:
                raise ContractError(
                    "marginal covariance A A^T + sigma^2 I is singular; "
                    "need positive noise variance or full-rank decoder"
                ) from None
            self._log_norm = 0.5 * (
                self.dim * _LOG_2PI + 2.0 * np.sum(np.log(np.diag(self._chol)))
            )
        return self._chol

    def _solve(self, batch) -> np.ndarray:
        # Sigma^{-1} x via the Cholesky factor, batched over rows.
        chol = self._factor()
        y = np.linalg.solve(chol, batch.T)
        return np.linalg.solve(chol.T, y).T

    def log_density(self, x):
        batch, single = _as_batch(x, self.dim)
        quad = np.sum(batch * self._solve(batch), axis=1)
        out = -0.5 * quad - self._log_norm
        return out[0] if single else out

    def entropy(self) -> float:
        self._factor()
        return self._log_norm + 0.5 * self.dim

    def score(self, x):
        batch, single = _as_batch(x, self.dim)
        out = -self._solve(batch)
        return out[0] if single else out

    def sample(self, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise ContractError("sample count must be >= 1")
        rng = make_generator(seed)
        z = rng.standard_normal((n, self.decoder.latent_dim))
        x = z @ self.decoder.weights.T
        if self.decoder.noise_variance > 0.0:
            eps = rng.standard_normal((n, self.dim))
            x = x + np.sqrt(self.decoder.noise_variance) * eps
        return x

    def spec(self) -> dict:
        return self.decoder.spec()


def distribution_from_spec(spec: dict) -> Distribution:
    """Construct a built-in distribution from its run-config mapping."""
    kind = spec.get("kind")
    if kind == "diag-gaussian":
        return DiagGaussian(spec["mean"], spec["variance"])
    if kind == "gaussian-mixture":
        comps = [DiagGaussian(c["mean"], c["variance"]) for c in spec["components"]]
        return GaussianMixture(spec["weights"], comps)
    if kind == "latent-decoder":
        return LatentDecoder(spec["weights"], spec["noise_variance"]).marginal()
    raise ContractError(f"unknown distribution kind {kind!r}")
