"""Small dense networks with explicit parameter vectors.

Parameters live in a flat float vector plus a named layout, so training
states checkpoint bit-exactly and finite-difference probes can poke single
coordinates. Forward passes are built on the autodiff tape; the meta
gradient that flows through an inner adaptation step is exact second-order
by default, with a cheaper first-order mode that is flagged in outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass(frozen=True)
class ModelConfig:
    """Shape of an embedding network plus one classifier head."""

    input_dim: int
    hidden_dims: tuple = (64, 64)
    embed_dim: int = 64
    head_width: int = 5
    activation: str = "relu"
    use_normalization_layers: bool = False

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim, self.head_width)
        if any(int(d) <= 0 for d in dims):
            raise ConfigError(f"all dimensions must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    def embed_layer_dims(self):
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        return list(zip(dims[:-1], dims[1:]))

    def with_head_width(self, width):
        return ModelConfig(
            input_dim=self.input_dim,
            hidden_dims=self.hidden_dims,
            embed_dim=self.embed_dim,
            head_width=int(width),
            activation=self.activation,
            use_normalization_layers=self.use_normalization_layers,
        )


@dataclass
class ParameterVector:
    """Flat parameter storage with a named segment layout."""

    values: np.ndarray
    layout: tuple  # ((name, shape), ...) in storage order

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        total = sum(int(np.prod(shape)) for _, shape in self.layout)
        if total != self.values.size:
            raise ConfigError(
                f"layout covers {total} values but vector has {self.values.size}"
            )
        if not np.isfinite(self.values).all():
            raise NumericError("parameter vector contains non-finite values")

    def segments(self):
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            yield name, offset, tuple(shape)
            offset += size

    def to_dict(self):
        out = {}
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[offset : offset + size].reshape(shape).copy()
            offset += size
        return out

    @classmethod
    def from_dict(cls, arrays, order=None):
        names = list(order) if order is not None else list(arrays)
        flat = np.concatenate([np.asarray(arrays[n], dtype=np.float64).ravel() for n in names])
        layout = tuple((n, tuple(np.asarray(arrays[n]).shape)) for n in names)
        return cls(flat, layout)

    def copy(self):
        return ParameterVector(self.values.copy(), self.layout)

    @property
    def size(self):
        return self.values.size


def init_params(config, rng):
    """Uniform fan-in initialization; biases start at zero."""
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(config.embed_layer_dims()):
        bound = 1.0 / np.sqrt(fan_in)
        arrays[f"embed{i}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"embed{i}.b"] = np.zeros(fan_out)
    bound = 1.0 / np.sqrt(config.embed_dim)
    arrays["head.w"] = rng.uniform(-bound, bound, size=(config.embed_dim, config.head_width))
    arrays["head.b"] = np.zeros(config.head_width)
    return ParameterVector.from_dict(arrays)


def init_head_params(config, rng):
    """Fresh head-only parameters (used when re-sizing the readout)."""
    bound = 1.0 / np.sqrt(config.embed_dim)
    return {
        "head.w": rng.uniform(-bound, bound, size=(config.embed_dim, config.head_width)),
        "head.b": np.zeros(config.head_width),
    }


def params_to_tensors(pvec, requires_grad=True):
    return {
        name: ad.Tensor(arr, requires_grad=requires_grad)
        for name, arr in pvec.to_dict().items()
    }


def tensors_to_params(tensors, layout):
    arrays = {name: t.data for name, t in tensors.items()}
    return ParameterVector.from_dict(arrays, order=[n for n, _ in layout])


def _feature_norm(h):
    # parameter-free normalization over the feature axis
    mu = ad.tmean(h, axis=1, keepdims=True)
    centered = ad.sub(h, mu)
    var = ad.tmean(ad.mul(centered, centered), axis=1, keepdims=True)
    return ad.div(centered, ad.sqrt(ad.add(var, ad.Tensor(1e-8))))


def embed_tensors(config, params, x):
    """Embedding network forward pass; no activation after the last layer."""
    act = ACTIVATIONS[config.activation]
    h = x if isinstance(x, ad.Tensor) else ad.Tensor(np.atleast_2d(x))
    n_layers = len(config.embed_layer_dims())
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"embed{i}.w"]), params[f"embed{i}.b"])
        if i < n_layers - 1:
            if config.use_normalization_layers:
                h = _feature_norm(h)
            h = act(h)
    return h


def head_logits_tensors(config, params, z):
    z = z if isinstance(z, ad.Tensor) else ad.Tensor(np.atleast_2d(z))
    return ad.add(ad.matmul(z, params["head.w"]), params["head.b"])


def head_prob_tensors(config, params, z):
    return ad.softmax(head_logits_tensors(config, params, z), axis=1)


def forward_embed(config, pvec, x):
    """Embed feature vectors; returns (N, embed_dim) float64."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != config.input_dim:
        raise ConfigError(
            f"input has {x.shape[1]} features, model expects {config.input_dim}"
        )
    with ad.no_grad():
        out = embed_tensors(config, params_to_tensors(pvec, requires_grad=False), x)
    if not np.isfinite(out.data).all():
        raise NumericError("embedding produced non-finite values")
    return out.data


def head_output(config, pvec, z):
    """Class-probability rows for embeddings ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != config.embed_dim:
        raise ConfigError(
            f"embedding has {z.shape[1]} dims, head expects {config.embed_dim}"
        )
    with ad.no_grad():
        out = head_prob_tensors(config, params_to_tensors(pvec, requires_grad=False), z)
    return out.data


def gradient(loss_builder, pvec):
    """Gradient of a scalar loss w.r.t. a ParameterVector.

    ``loss_builder`` maps a dict of parameter tensors to a scalar tensor.
    """
    tensors = params_to_tensors(pvec)
    loss = loss_builder(tensors)
    if not np.isfinite(loss.data).all():
        raise NumericError(f"loss is non-finite: {float(loss.data)!r}")
    names = [n for n, _ in pvec.layout]
    grads = ad.grad(loss, [tensors[n] for n in names])
    flat = np.concatenate([g.data.ravel() for g in grads])
    return ParameterVector(flat, pvec.layout), float(loss.data)


def _adapt_tensors(inner_builder, tensors, names, alpha, steps, create_graph):
    current = dict(tensors)
    for step in range(steps):
        loss = inner_builder(current)
        if not np.isfinite(loss.data).all():
            raise NumericError(f"inner loss non-finite at step {step}")
        grads = ad.grad(loss, [current[n] for n in names], create_graph=create_graph)
        current = {
            n: ad.sub(current[n], ad.mul(ad.Tensor(alpha), g))
            for n, g in zip(names, grads)
        }
    return current


def adapt_params(inner_builder, pvec, alpha, steps):
    """Plain (detached) gradient-descent adaptation; returns new parameters."""
    tensors = params_to_tensors(pvec)
    names = [n for n, _ in pvec.layout]
    adapted = _adapt_tensors(inner_builder, tensors, names, float(alpha), steps, False)
    return tensors_to_params(adapted, pvec.layout)


def gradient_through_adaptation(
    meta_builder, inner_builder, pvec, alpha, inner_steps=1, order="second"
):
    """d(meta loss at adapted params)/d(params).

    ``order="second"`` differentiates through the adaptation (exact);
    ``order="first"`` treats the adapted parameters as fresh leaves. The
    mode used is reported in the returned info dict.
    """
    if order not in ("second", "first"):
        raise ConfigError(f"order must be 'second' or 'first', got {order!r}")
    if alpha < 0:
        raise ConfigError("alpha must be nonnegative")
    names = [n for n, _ in pvec.layout]

    if order == "second":
        tensors = params_to_tensors(pvec)
        adapted = _adapt_tensors(
            inner_builder, tensors, names, float(alpha), inner_steps, True
        )
        meta = meta_builder(adapted)
        if not np.isfinite(meta.data).all():
            raise NumericError("meta loss is non-finite")
        grads = ad.grad(meta, [tensors[n] for n in names])
    else:
        adapted_vec = adapt_params(inner_builder, pvec, alpha, inner_steps)
        tensors = params_to_tensors(adapted_vec)
        meta = meta_builder(tensors)
        if not np.isfinite(meta.data).all():
            raise NumericError("meta loss is non-finite")
        grads = ad.grad(meta, [tensors[n] for n in names])

    flat = np.concatenate([g.data.ravel() for g in grads])
    info = {"order_mode": order, "meta_loss": float(meta.data)}
    return ParameterVector(flat, pvec.layout), info


class Adam:
    """Adaptive-moment optimizer over a flat parameter vector."""

    def __init__(self, size, rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.rate = rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values, grad_flat, rate=None):
        self.t += 1
        lr = self.rate if rate is None else rate
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad_flat
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad_flat ** 2
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return values - lr * mhat / (np.sqrt(vhat) + self.eps)


def save_checkpoint(pvec, path):
    """Write a flat binary vector plus a text layout sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pvec.values.astype(np.float64).tofile(path.with_suffix(".bin"))
    sidecar = {
        "dtype": "float64",
        "layout": [[name, list(shape)] for name, shape in pvec.layout],
    }
    path.with_suffix(".layout.json").write_text(json.dumps(sidecar, indent=1))


def load_checkpoint(path):
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".layout.json").read_text())
    values = np.fromfile(path.with_suffix(".bin"), dtype=sidecar["dtype"])
    layout = tuple((name, tuple(shape)) for name, shape in sidecar["layout"])
    return ParameterVector(values, layout)
