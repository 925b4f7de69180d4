"""Adversarial objectives and the Adam optimizer.

Clamped (data-driven) pairs are the discriminator's positives, unclamped
(model) pairs its negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, DimensionError

GENERATOR_LOSSES = ("non_saturating", "boundary_seeking")
LABEL_LOSSES = ("expected_softmax", "importance_weighted")


@dataclass
class LossConfig:
    generator_loss: str = "boundary_seeking"
    label_loss: str = "expected_softmax"
    disc_steps_per_gen_step: int = 1

    def __post_init__(self):
        if self.generator_loss not in GENERATOR_LOSSES:
            raise ConfigError(f"generator_loss must be one of {GENERATOR_LOSSES}")
        if self.label_loss not in LABEL_LOSSES:
            raise ConfigError(f"label_loss must be one of {LABEL_LOSSES}")
        if int(self.disc_steps_per_gen_step) < 1:
            raise ConfigError("disc_steps_per_gen_step must be >= 1")


def _check_prob(d: Tensor, name: str) -> None:
    v = d.data
    if not np.all(np.isfinite(v)) or np.any(v < 0.0) or np.any(v > 1.0):
        raise ContractError(f"{name} must hold probabilities in (0, 1)")


def disc_loss(d_clamped: Tensor, d_unclamped: Tensor) -> Tensor:
    """mean(-log D(clamped)) + mean(-log(1 - D(unclamped)))."""
    _check_prob(d_clamped, "D_clamped")
    _check_prob(d_unclamped, "D_unclamped")
    return dc.neg(dc.log(d_clamped)).mean() + dc.neg(dc.log(1.0 - d_unclamped)).mean()


def _log_odds(d: Tensor) -> Tensor:
    return dc.log(d) - dc.log(1.0 - d)


def gen_loss(d_unclamped: Tensor, config: LossConfig | str = "boundary_seeking") -> Tensor:
    """Generator objective on the model pair.

    ``non_saturating``: mean(-log D).  ``boundary_seeking``: mean of half the
    squared log-odds, zero exactly on the decision boundary D = 1/2.
    """
    kind = config if isinstance(config, str) else config.generator_loss
    _check_prob(d_unclamped, "D_unclamped")
    if kind == "non_saturating":
        return dc.neg(dc.log(d_unclamped)).mean()
    if kind == "boundary_seeking":
        s = _log_odds(d_unclamped)
        return (0.5 * (s * s)).mean()
    raise ConfigError(f"unknown generator loss {kind!r}")


def encoder_clamped_loss(d_clamped: Tensor, config: LossConfig | str = "boundary_seeking") -> Tensor:
    """Encoder objective on the data pair: make it look like a model pair."""
    kind = config if isinstance(config, str) else config.generator_loss
    _check_prob(d_clamped, "D_clamped")
    if kind == "non_saturating":
        return dc.neg(dc.log(1.0 - d_clamped)).mean()
    if kind == "boundary_seeking":
        s = _log_odds(d_clamped)
        return (0.5 * (s * s)).mean()
    raise ConfigError(f"unknown generator loss {kind!r}")


def importance_weights(d_outputs: np.ndarray) -> np.ndarray:
    """Self-normalized weights proportional to D / (1 - D) along the last axis."""
    d = np.clip(np.asarray(d_outputs, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    log_r = np.log(d) - np.log1p(-d)
    log_r -= log_r.max(axis=-1, keepdims=True)
    r = np.exp(log_r)
    return r / r.sum(axis=-1, keepdims=True)


def importance_weighted_label_loss(logits: Tensor, sampled_labels, d_outputs, m: int | None = None) -> Tensor:
    """Discrete boundary-seeking label objective.

    ``sampled_labels`` and ``d_outputs`` are [batch, M]: M labels drawn per
    example and the discriminator's output for each.  The weights are
    constants; only ``logits`` receive gradient.
    """
    labels = np.asarray(sampled_labels, dtype=np.int64)
    d_outputs = np.asarray(d_outputs, dtype=np.float64)
    if labels.ndim == 1:
        labels, d_outputs = labels[None, :], d_outputs[None, :]
    m = labels.shape[1] if m is None else m
    if m < 2:
        raise ConfigError(f"importance-weighted label loss needs M >= 2 samples, got {m}")
    if labels.shape != d_outputs.shape or labels.shape[1] != m:
        raise DimensionError(f"labels {labels.shape} and D outputs {d_outputs.shape} must be [batch, {m}]")
    logits = dc.as_tensor(logits)
    if logits.ndim == 1:
        # [K] -> [1, K] by broadcasting, keeping the tape connection
        logits = dc.add(Tensor(np.zeros((1, logits.shape[0]))), logits)
    batch, k = logits.shape
    if labels.shape[0] != batch:
        raise DimensionError(f"{labels.shape[0]} label rows for {batch} logit rows")
    w = importance_weights(d_outputs)
    mass = np.zeros((batch, k))
    np.add.at(mass, (np.repeat(np.arange(batch), m), labels.reshape(-1)), w.reshape(-1))
    return dc.neg((dc.log_softmax(logits) * Tensor(mass)).sum()) * (1.0 / batch)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        state = cls(**hyper)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, grads, state: AdamState) -> AdamState:
    """Bias-corrected Adam update; replaces each ``param.data`` with a new array."""
    params = list(params)
    grads = list(grads)
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise DimensionError(f"{len(params)} params, {len(grads)} grads, {len(state.first_moment)} moments")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.data.shape != np.shape(g) or m.shape != p.data.shape:
            raise DimensionError(f"gradient shape {np.shape(g)} != parameter shape {p.data.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    step_size = state.lr / bc1
    inv_bc2 = 1.0 / bc2
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v * inv_bc2)
        denom += state.eps
        p.data = p.data - step_size * m / denom
    return state
