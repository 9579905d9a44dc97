"""Invertible perturbation models with analytic log-determinants.

A ``FlowModel`` is a stack of three layer types:

* affine-diagonal -- per-dimension log-scale and shift (carries the
  log-determinant; the log-scale is clamped to ``scale_clamp``),
* additive-coupling -- shifts one half of the coordinates by a small tanh
  MLP of the other half (volume preserving),
* permutation -- fixed coordinate reorder (volume preserving).

All layers have exact analytic inverses.  Gradients of any scalar objective
of (output, logdet) with respect to the layer parameters are computed by a
hand-written reverse-mode pass; no autodiff framework is involved, which
keeps runs bit-reproducible.

``init_identity`` builds a model whose forward map is exactly the identity:
log-scales and shifts start at zero, conditioner output layers are
zero-initialized, and the inter-block permutations are cancelled by a final
unscrambling permutation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .rng import derive_seed, make_generator


class Mlp:
    """Small feed-forward conditioner: tanh hidden layers, linear output.

    Weight matrices are stored as (fan_in, fan_out).  The output layer is
    zero-initialized so a freshly built conditioner returns zeros.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = weights
        self.biases = biases

    @classmethod
    def build(cls, in_dim: int, hidden_width: int, hidden_depth: int, out_dim: int, rng):
        weights, biases = [], []
        fan_in = in_dim
        for _ in range(hidden_depth):
            weights.append(rng.standard_normal((fan_in, hidden_width)) / np.sqrt(fan_in))
            biases.append(np.zeros(hidden_width))
            fan_in = hidden_width
        weights.append(np.zeros((fan_in, out_dim)))
        biases.append(np.zeros(out_dim))
        return cls(weights, biases)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def forward(self, u: np.ndarray):
        acts = [u]
        h = u
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout: np.ndarray):
        grads: dict[str, np.ndarray] = {}
        dh = dout
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                dh = dh * (1.0 - acts[i + 1] ** 2)  # through tanh
            grads[f"w{i}"] = acts[i].T @ dh
            grads[f"b{i}"] = dh.sum(axis=0)
            dh = dh @ self.weights[i].T
        return dh, grads


class AffineDiagonalLayer:
    """y = x * exp(s) + t elementwise, with s clipped to [-clamp, clamp].

    logdet = sum(s) per sample.  Clipped coordinates get zero gradient for s.
    """

    kind = "affine-diagonal"

    def __init__(self, dim: int, log_scale=None, shift=None, scale_clamp: float = 5.0):
        self.dim = dim
        self.scale_clamp = float(scale_clamp)
        self.log_scale = (
            np.zeros(dim) if log_scale is None else np.asarray(log_scale, dtype=float).copy()
        )
        self.shift = np.zeros(dim) if shift is None else np.asarray(shift, dtype=float).copy()

    def params(self):
        return {"log_scale": self.log_scale, "shift": self.shift}

    def _effective(self):
        return np.clip(self.log_scale, -self.scale_clamp, self.scale_clamp)

    def forward(self, x: np.ndarray):
        s = self._effective()
        y = x * np.exp(s) + self.shift
        logdet = np.full(x.shape[0], s.sum())
        return y, logdet, x

    def inverse(self, y: np.ndarray):
        s = self._effective()
        return (y - self.shift) * np.exp(-s)

    def backward(self, cache, dy: np.ndarray, dlogdet: np.ndarray):
        x = cache
        s = self._effective()
        active = np.abs(self.log_scale) < self.scale_clamp
        ds = (dy * x).sum(axis=0) * np.exp(s) + dlogdet.sum()
        grads = {
            "log_scale": np.where(active, ds, 0.0),
            "shift": dy.sum(axis=0),
        }
        dx = dy * np.exp(s)
        return dx, grads

    def to_spec(self):
        return {
            "type": self.kind,
            "log_scale": self.log_scale.tolist(),
            "shift": self.shift.tolist(),
            "scale_clamp": self.scale_clamp,
        }

    @classmethod
    def from_spec(cls, spec):
        return cls(
            len(spec["log_scale"]),
            spec["log_scale"],
            spec["shift"],
            spec.get("scale_clamp", 5.0),
        )


class AdditiveCouplingLayer:
    """Shift the unmasked coordinates by a conditioner of the masked ones.

    mask[i] True marks a conditioning (passthrough) coordinate.  The map is
    volume preserving: logdet = 0.
    """

    kind = "additive-coupling"

    def __init__(self, mask: np.ndarray, mlp: Mlp):
        self.mask = np.asarray(mask, dtype=bool).copy()
        self.cond_idx = np.flatnonzero(self.mask)
        self.shift_idx = np.flatnonzero(~self.mask)
        if self.cond_idx.size == 0 or self.shift_idx.size == 0:
            raise ContractError("coupling mask must leave both sides nonempty")
        self.dim = self.mask.shape[0]
        self.mlp = mlp

    def params(self):
        return self.mlp.params()

    def forward(self, x: np.ndarray):
        shift, acts = self.mlp.forward(x[:, self.cond_idx])
        y = x.copy()
        y[:, self.shift_idx] += shift
        return y, np.zeros(x.shape[0]), acts

    def inverse(self, y: np.ndarray):
        shift, _ = self.mlp.forward(y[:, self.cond_idx])
        x = y.copy()
        x[:, self.shift_idx] -= shift
        return x

    def backward(self, cache, dy: np.ndarray, dlogdet: np.ndarray):
        acts = cache
        du, grads = self.mlp.backward(acts, dy[:, self.shift_idx])
        dx = dy.copy()
        dx[:, self.cond_idx] += du
        return dx, grads

    def to_spec(self):
        return {
            "type": self.kind,
            "mask": self.mask.astype(int).tolist(),
            "weights": [w.tolist() for w in self.mlp.weights],
            "biases": [b.tolist() for b in self.mlp.biases],
        }

    @classmethod
    def from_spec(cls, spec):
        mlp = Mlp(
            [np.asarray(w, dtype=float) for w in spec["weights"]],
            [np.asarray(b, dtype=float) for b in spec["biases"]],
        )
        return cls(np.asarray(spec["mask"], dtype=bool), mlp)


class PermutationLayer:
    """Fixed coordinate permutation; no parameters, logdet = 0."""

    kind = "permutation"

    def __init__(self, perm):
        self.perm = np.asarray(perm, dtype=int).copy()
        self.inv = np.argsort(self.perm)
        self.dim = self.perm.shape[0]

    def params(self):
        return {}

    def forward(self, x: np.ndarray):
        return x[:, self.perm], np.zeros(x.shape[0]), None

    def inverse(self, y: np.ndarray):
        return y[:, self.inv]

    def backward(self, cache, dy: np.ndarray, dlogdet: np.ndarray):
        return dy[:, self.inv], {}

    def to_spec(self):
        return {"type": self.kind, "perm": self.perm.tolist()}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["perm"])


_LAYER_TYPES = {
    AffineDiagonalLayer.kind: AffineDiagonalLayer,
    AdditiveCouplingLayer.kind: AdditiveCouplingLayer,
    PermutationLayer.kind: PermutationLayer,
}


class FlowGradients:
    """Per-parameter gradient buffers aligned with a model's layers."""

    def __init__(self, layers: list[dict[str, np.ndarray]]):
        self.layers = layers

    @classmethod
    def zeros_like(cls, model: "FlowModel") -> "FlowGradients":
        return cls([{k: np.zeros_like(v) for k, v in l.params().items()} for l in model.layers])

    def flat(self) -> list[np.ndarray]:
        return [d[k] for d in self.layers for k in sorted(d)]

    def check_shapes(self, model: "FlowModel"):
        if len(self.layers) != len(model.layers):
            raise ContractError("gradient buffers do not match layer count")
        for bufs, layer in zip(self.layers, model.layers):
            params = layer.params()
            if set(bufs) != set(params):
                raise ContractError("gradient buffer names do not match parameters")
            for k in bufs:
                if bufs[k].shape != params[k].shape:
                    raise ContractError(f"gradient shape mismatch for {k!r}")


class FlowModel:
    """Ordered stack of invertible layers acting on dimension ``dim``."""

    def __init__(self, dim: int, layers: list):
        self.dim = int(dim)
        self.layers = list(layers)
        for layer in self.layers:
            if layer.dim != self.dim:
                raise ContractError("all layers must act on the model dimension")

    # -- evaluation ---------------------------------------------------------

    def _forward_cached(self, batch: np.ndarray):
        h = batch
        logdet = np.zeros(batch.shape[0])
        caches = []
        for i, layer in enumerate(self.layers):
            h, ld, cache = layer.forward(h)
            if not np.all(np.isfinite(h)) or not np.all(np.isfinite(ld)):
                raise NumericError(f"non-finite output at layer {i} ({layer.kind})")
            logdet += ld
            caches.append(cache)
        return h, logdet, caches

    def forward(self, x):
        """Map points forward; returns (y, logdet) with logdet per sample."""
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        batch = arr[None, :] if single else arr
        if batch.shape[1] != self.dim:
            raise ContractError(f"expected dimension {self.dim}, got {batch.shape[1]}")
        y, logdet, _ = self._forward_cached(batch)
        if single:
            return y[0], float(logdet[0])
        return y, logdet

    def inverse(self, y):
        """Invert the stack; returns (x, logdet) where logdet is the forward
        log-determinant evaluated at x (constant per sample for these layers)."""
        arr = np.asarray(y, dtype=float)
        single = arr.ndim == 1
        batch = arr[None, :] if single else arr
        if batch.shape[1] != self.dim:
            raise ContractError(f"expected dimension {self.dim}, got {batch.shape[1]}")
        h = batch
        for layer in reversed(self.layers):
            h = layer.inverse(h)
        logdet = np.full(batch.shape[0], self.constant_logdet())
        if single:
            return h[0], float(logdet[0])
        return h, logdet

    def constant_logdet(self) -> float:
        """The stack's log|det J|; x-independent for these layer types."""
        total = 0.0
        for layer in self.layers:
            if isinstance(layer, AffineDiagonalLayer):
                total += layer._effective().sum()
        return float(total)

    # -- gradients ----------------------------------------------------------

    def _backward_cached(self, caches, dy: np.ndarray, dlogdet: np.ndarray):
        grads = []
        dh = dy
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dh, g = layer.backward(cache, dh, dlogdet)
            grads.append(g)
        grads.reverse()
        return FlowGradients(grads), dh

    def backward(self, x, grad_y, grad_logdet) -> FlowGradients:
        """Parameter gradients of sum_i [grad_y[i] . y_i + grad_logdet[i] * logdet_i].

        Recomputes the forward pass at ``x`` to rebuild intermediate state.
        """
        batch = np.atleast_2d(np.asarray(x, dtype=float))
        dy = np.atleast_2d(np.asarray(grad_y, dtype=float))
        dld = np.atleast_1d(np.asarray(grad_logdet, dtype=float))
        _, _, caches = self._forward_cached(batch)
        grads, _ = self._backward_cached(caches, dy, dld)
        return grads

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        """Live parameter arrays, ordered as FlowGradients.flat()."""
        return [d[k] for layer in self.layers for d in [layer.params()] for k in sorted(d)]

    def copy(self) -> "FlowModel":
        return copy.deepcopy(self)

    # -- serialization ------------------------------------------------------

    def to_spec(self) -> dict:
        return {"dim": self.dim, "layers": [l.to_spec() for l in self.layers]}

    @classmethod
    def from_spec(cls, spec: dict) -> "FlowModel":
        layers = []
        for lspec in spec["layers"]:
            ltype = _LAYER_TYPES.get(lspec["type"])
            if ltype is None:
                raise ContractError(f"unknown layer type {lspec['type']!r}")
            layers.append(ltype.from_spec(lspec))
        return cls(spec["dim"], layers)


@dataclass(frozen=True)
class FlowArchitecture:
    """Stack shape: ``blocks`` repetitions of [affine-diagonal, coupling pair],
    seeded permutations between blocks (cancelled at the end), and a closing
    affine-diagonal layer."""

    blocks: int = 2
    hidden_width: int = 32
    hidden_depth: int = 2
    scale_clamp: float = 5.0
    permute: bool = True


def _alternating_masks(dim: int):
    even = np.zeros(dim, dtype=bool)
    even[::2] = True
    return even, ~even


def init_identity(dim: int, arch: FlowArchitecture = FlowArchitecture(), seed: int = 0) -> FlowModel:
    """Build a flow whose forward map is exactly the identity.

    Conditioner hidden weights are seeded (so two seeds differ there), but
    zero output layers, zero log-scales/shifts, and self-cancelling
    permutations make forward(x) = x and logdet = 0 exactly at init.
    """
    if dim < 1:
        raise ContractError("dimension must be >= 1")
    rng = make_generator(derive_seed(seed, "flow-init"))
    even, odd = _alternating_masks(dim) if dim >= 2 else (None, None)
    layers: list = []
    net_perm = np.arange(dim)
    for b in range(arch.blocks):
        layers.append(AffineDiagonalLayer(dim, scale_clamp=arch.scale_clamp))
        if dim >= 2:
            for mask in (even, odd):
                mlp = Mlp.build(
                    int(mask.sum()), arch.hidden_width, arch.hidden_depth,
                    int((~mask).sum()), rng,
                )
                layers.append(AdditiveCouplingLayer(mask, mlp))
            if arch.permute and b < arch.blocks - 1:
                perm = rng.permutation(dim)
                if np.array_equal(perm, np.arange(dim)):
                    perm = np.roll(perm, 1)
                layers.append(PermutationLayer(perm))
                net_perm = net_perm[perm]
    if not np.array_equal(net_perm, np.arange(dim)):
        layers.append(PermutationLayer(np.argsort(net_perm)))
    layers.append(AffineDiagonalLayer(dim, scale_clamp=arch.scale_clamp))
    return FlowModel(dim, layers)
