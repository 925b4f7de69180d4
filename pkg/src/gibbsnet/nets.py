"""Encoder q(z|x), decoder p(x|z) and joint discriminator D(x, z) as MLPs.

Both conditionals are diagonal Gaussians sampled by reparameterization, so
gradients reach the network through the sampled value.  The decoder can
additionally emit logits over discrete labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, DimensionError

LOG_VAR_MIN = -8.0
LOG_VAR_MAX = 4.0
PROB_EPS = 1e-12

ROLES = ("encoder", "decoder", "discriminator")
ACTIVATIONS = {
    "leaky_relu": dc.leaky_relu,
    "relu": dc.relu,
    "tanh": dc.tanh,
    "sigmoid": dc.sigmoid,
    "linear": lambda t: t,
}


@dataclass
class NetParams:
    """Weights ``[out, in]`` and biases ``[out]`` of one fully-connected network."""

    layers: list[tuple[Tensor, Tensor]]
    activations: list[str]
    role: str
    dim_x: int = 0
    dim_z: int = 0
    n_labels: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown network role {self.role!r}")
        if len(self.activations) != len(self.layers):
            raise ConfigError("one activation tag per layer is required")
        for (w, b), (w_next, _) in zip(self.layers, self.layers[1:]):
            if w_next.shape[1] != w.shape[0]:
                raise DimensionError(f"layer widths do not chain: {w.shape} -> {w_next.shape}")
        for w, b in self.layers:
            if b.shape != (w.shape[0],):
                raise DimensionError(f"bias {b.shape} does not match weight {w.shape}")

    @property
    def in_width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_width(self) -> int:
        return self.layers[-1][0].shape[0]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"{i}.weight", w))
            out.append((f"{i}.bias", b))
        return out

    def copy(self) -> "NetParams":
        layers = [(Tensor(w.data.copy(), requires_grad=True), Tensor(b.data.copy(), requires_grad=True))
                  for w, b in self.layers]
        return NetParams(layers, list(self.activations), self.role,
                         self.dim_x, self.dim_z, self.n_labels)


def init_params(sizes, seed: int, role: str, activation: str = "leaky_relu", **dims) -> NetParams:
    """He-initialized MLP with layer widths ``sizes`` (input first, output last).

    Hidden layers use ``activation``; the output layer is linear.
    """
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ConfigError(f"need at least an input and an output width, got {sizes}")
    if any(int(s) < 1 for s in sizes):
        raise ConfigError(f"layer widths must be positive, got {sizes}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append((Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)))
    acts = [activation] * (len(layers) - 1) + ["linear"]
    return NetParams(layers, acts, role, **dims)


def _set_log_var_bias(params: NetParams, dim: int, value: float) -> NetParams:
    params.layers[-1][1].data[dim:2 * dim] = value
    return params


def make_encoder(dim_x: int, dim_z: int, hidden=(256, 256, 256), seed: int = 0,
                 n_labels: int = 0, activation: str = "leaky_relu", init_log_var: float = 0.0) -> NetParams:
    """q(z|x[, y]); ``init_log_var`` is the initial bias of the log-variance head."""
    sizes = [dim_x + n_labels, *hidden, 2 * dim_z]
    params = init_params(sizes, seed, "encoder", activation, dim_x=dim_x, dim_z=dim_z, n_labels=n_labels)
    return _set_log_var_bias(params, dim_z, init_log_var)


def make_decoder(dim_z: int, dim_x: int, hidden=(256, 256, 256), seed: int = 0,
                 n_labels: int = 0, activation: str = "leaky_relu", init_log_var: float = 0.0) -> NetParams:
    """p(x|z) with an optional label head after the Gaussian mean and log-variance columns."""
    sizes = [dim_z, *hidden, 2 * dim_x + n_labels]
    params = init_params(sizes, seed, "decoder", activation, dim_x=dim_x, dim_z=dim_z, n_labels=n_labels)
    return _set_log_var_bias(params, dim_x, init_log_var)


def make_discriminator(dim_x: int, dim_z: int, hidden=(256, 256, 256), seed: int = 0,
                       n_labels: int = 0, activation: str = "leaky_relu") -> NetParams:
    sizes = [dim_x + dim_z + n_labels, *hidden, 1]
    return init_params(sizes, seed, "discriminator", activation,
                       dim_x=dim_x, dim_z=dim_z, n_labels=n_labels)


def mlp_forward(params: NetParams, h: Tensor) -> Tensor:
    if h.ndim != 2 or h.shape[1] != params.in_width:
        raise DimensionError(f"{params.role}: expected input [batch, {params.in_width}], got {h.shape}")
    for (w, b), act in zip(params.layers, params.activations):
        h = ACTIVATIONS[act](dc.matmul(h, dc.transpose(w)) + b)
    return h


@dataclass
class GaussianHead:
    """Diagonal Gaussian with log-variance clamped to [-8, 4]."""

    mean: Tensor
    log_var: Tensor

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)

    def sample(self, eps: np.ndarray) -> Tensor:
        if eps.shape != self.mean.shape:
            raise DimensionError(f"noise shape {eps.shape} != head shape {self.mean.shape}")
        return self.mean + dc.exp(0.5 * self.log_var) * Tensor(eps)


@dataclass
class LabelHead:
    """Categorical head; ``onehot`` carries the hard sample forward and softmax gradients back."""

    logits: Tensor
    probs: Tensor
    sample: np.ndarray
    onehot: Tensor = field(repr=False)


def gaussian_head(out: Tensor, dim: int) -> GaussianHead:
    mean = dc.columns(out, 0, dim)
    log_var = dc.clip(dc.columns(out, dim, 2 * dim), LOG_VAR_MIN, LOG_VAR_MAX)
    return GaussianHead(mean, log_var)


def one_hot(labels, n_labels: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_labels):
        raise DimensionError(f"labels must lie in [0, {n_labels})")
    out = np.zeros((labels.shape[0], n_labels))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row given uniforms ``u``."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def _noise(rng, eps, shape):
    if eps is not None:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != shape:
            raise DimensionError(f"noise shape {eps.shape} != {shape}")
        return eps
    if rng is None:
        return np.zeros(shape)
    return rng.standard_normal(shape)


def _check_role(params: NetParams, role: str) -> None:
    if params.role != role:
        raise ContractError(f"expected {role} parameters, got {params.role}")


def _label_input(y, n_labels: int, batch: int):
    if n_labels == 0:
        if y is not None:
            raise DimensionError("labels given to a network built without a label input")
        return None
    if y is None:
        raise DimensionError(f"network expects {n_labels}-way labels")
    if isinstance(y, Tensor):
        if y.shape != (batch, n_labels):
            raise DimensionError(f"label features {y.shape} != ({batch}, {n_labels})")
        return y
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape != (batch, n_labels):
            raise DimensionError(f"label features {y.shape} != ({batch}, {n_labels})")
        return Tensor(y)
    if y.shape != (batch,):
        raise DimensionError(f"{y.shape[0]} labels for a batch of {batch}")
    return Tensor(one_hot(y, n_labels))


def encode(params: NetParams, x: Tensor, rng: np.random.Generator | None = None, *,
           y=None, eps=None) -> tuple[Tensor, GaussianHead]:
    """Sample z ~ q(z|x[, y]).

    Noise comes from ``eps`` if given, else from ``rng``; with neither, z is
    the head mean.  ``y`` may be integer labels or [batch, K] label features.
    """
    _check_role(params, "encoder")
    x = dc.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.dim_x:
        raise DimensionError(f"encoder expects x of width {params.dim_x}, got shape {x.shape}")
    feats = _label_input(y, params.n_labels, x.shape[0])
    h = x if feats is None else dc.concat([x, feats])
    head = gaussian_head(mlp_forward(params, h), params.dim_z)
    z = head.sample(_noise(rng, eps, head.mean.shape))
    return z, head


def decode(params: NetParams, z: Tensor, rng: np.random.Generator | None = None, *,
           eps=None, stochastic: bool = True, label_u=None):
    """Sample x ~ p(x|z) and, with a label head, y ~ softmax(logits).

    Returns ``(x, head, labels)`` where ``labels`` is a :class:`LabelHead` or
    None.  A deterministic decoder (``stochastic=False``) returns the mean.
    Gaussian noise is drawn before the label uniforms.
    """
    _check_role(params, "decoder")
    z = dc.as_tensor(z)
    if z.ndim != 2 or z.shape[1] != params.dim_z:
        raise DimensionError(f"decoder expects z of width {params.dim_z}, got shape {z.shape}")
    out = mlp_forward(params, z)
    head = gaussian_head(out, params.dim_x)
    eps = _noise(rng, eps, head.mean.shape)
    x = head.sample(eps) if stochastic else head.mean
    labels = None
    if params.n_labels:
        logits = dc.columns(out, 2 * params.dim_x, 2 * params.dim_x + params.n_labels)
        probs = dc.softmax(logits)
        if label_u is None:
            label_u = rng.random(z.shape[0]) if rng is not None else np.full(z.shape[0], 0.5)
        y = sample_categorical(probs.data, np.asarray(label_u))
        onehot = dc.straight_through(one_hot(y, params.n_labels), probs)
        labels = LabelHead(logits, probs, y, onehot)
    return x, head, labels


def discriminate(params: NetParams, x: Tensor, z: Tensor, y=None) -> Tensor:
    """D(x, z[, y]) in (0, 1), one row per pair."""
    _check_role(params, "discriminator")
    x, z = dc.as_tensor(x), dc.as_tensor(z)
    if x.ndim != 2 or z.ndim != 2 or x.shape[0] != z.shape[0]:
        raise DimensionError(f"discriminator needs paired 2-D x and z, got {x.shape} and {z.shape}")
    if x.shape[1] != params.dim_x or z.shape[1] != params.dim_z:
        raise DimensionError(
            f"discriminator expects widths ({params.dim_x}, {params.dim_z}), got ({x.shape[1]}, {z.shape[1]})")
    feats = _label_input(y, params.n_labels, x.shape[0])
    parts = [x, z] if feats is None else [x, z, feats]
    logit = mlp_forward(params, dc.concat(parts))
    return dc.clip(dc.sigmoid(logit), PROB_EPS, 1.0 - PROB_EPS)
