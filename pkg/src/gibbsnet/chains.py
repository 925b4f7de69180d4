"""Clamped and unclamped chains, inpainting, and the exact tabular oracle.

Chain indexing: the unclamped chain draws ``z_1 ~ N(0, I)`` and then
alternates ``x_k ~ p(x|z_k)`` and ``z_{k+1} ~ q(z|x_k)``.  A chain of ``N``
steps applies the decoder ``N`` times and returns the pair ``(z_N, x_N)``,
so ``N = 1`` is exactly the ALI generator.  Only the last transition
(``q`` on a detached ``x_{N-1}``, then ``p``) is recorded on the tape.
"""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import seeding
from .diffcore import Tensor
from .errors import ConfigError, ContractError, DimensionError, InvariantError, NumericError
from .nets import NetParams, decode, encode, one_hot


@dataclass
class ChainState:
    x: Tensor
    z: Tensor
    step: int
    live_gradient: bool = False
    y: np.ndarray | None = None
    y_features: Tensor | None = field(default=None, repr=False)
    label_logits: Tensor | None = field(default=None, repr=False)

    def detached(self) -> "ChainState":
        feats = None if self.y_features is None else dc.detach(self.y_features)
        return ChainState(dc.detach(self.x), dc.detach(self.z), self.step, False, self.y, feats)


@dataclass
class JointBatch:
    x: Tensor
    z: Tensor
    source: str
    y: np.ndarray | None = None
    y_features: Tensor | None = field(default=None, repr=False)
    label_logits: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.source not in ("clamped", "unclamped"):
            raise ValueError(f"unknown source {self.source!r}")


def prior_sample(batch: int, dim_z: int, seed: int) -> np.ndarray:
    return seeding.stream(seed, seeding.PRIOR).standard_normal((batch, dim_z))


def _decode_step(dec: NetParams, z: Tensor, step: int, seed: int, stochastic: bool):
    rng = seeding.stream(seed, seeding.DECODER, step)
    x, _, labels = decode(dec, z, rng, stochastic=stochastic)
    if labels is None:
        return x, None, None, None
    return x, labels.sample, labels.onehot, labels.logits


def initial_state(dec: NetParams, batch: int, seed: int, stochastic: bool = True) -> ChainState:
    """State 1: ``z_1 ~ N(0, I)`` and ``x_1 ~ p(x|z_1)``."""
    z = Tensor(prior_sample(batch, dec.dim_z, seed))
    x, y, feats, logits = _decode_step(dec, z, 1, seed, stochastic)
    return ChainState(x, z, 1, x.requires_grad, y, feats, logits)


def transition(enc: NetParams, dec: NetParams, state: ChainState, seed: int,
               stochastic: bool = True) -> ChainState:
    """One application of the transition operator: ``z' ~ q(z|x)``, ``x' ~ p(x|z')``.

    The incoming state is detached, so at most this step is live.  Noise
    depends only on ``(seed, state.step + 1)``.
    """
    prev = state.detached()
    step = state.step + 1
    z, _ = encode(enc, prev.x, seeding.stream(seed, seeding.ENCODER, step), y=prev.y_features)
    x, y, feats, logits = _decode_step(dec, z, step, seed, stochastic)
    return ChainState(x, z, step, x.requires_grad, y, feats, logits)


def unclamped_chain(enc: NetParams, dec: NetParams, n_steps: int, batch: int, seed: int, *,
                    stochastic: bool = True) -> tuple[JointBatch, list[ChainState]]:
    """Run the free chain for ``n_steps`` decoder applications.

    Returns the final pair (live on the active tape, if any) and the
    detached trajectory of every state.
    """
    if n_steps < 1:
        raise ConfigError(f"chain needs at least one step, got {n_steps}")
    if n_steps == 1:
        state = initial_state(dec, batch, seed, stochastic)
    else:
        with dc.no_grad():
            state = initial_state(dec, batch, seed, stochastic)
            trajectory = [state]
            for _ in range(n_steps - 2):
                state = transition(enc, dec, state, seed, stochastic)
                trajectory.append(state)
        state = transition(enc, dec, state, seed, stochastic)
    trajectory = ([] if n_steps == 1 else trajectory) + [state.detached()]
    pair = JointBatch(state.x, state.z, "unclamped", state.y, state.y_features, state.label_logits)
    return pair, trajectory


def continue_chain(enc: NetParams, dec: NetParams, state: ChainState, n_more: int, seed: int, *,
                   stochastic: bool = True, every: int = 1) -> list[ChainState]:
    """Detached continuation of a chain; keeps states whose step is a multiple of ``every``."""
    kept = []
    with dc.no_grad():
        for _ in range(n_more):
            state = transition(enc, dec, state, seed, stochastic)
            if state.step % every == 0:
                kept.append(state)
    return kept


def clamped_step(enc: NetParams, x_data, seed: int, y=None) -> JointBatch:
    """Data-driven pair ``(x_data, z ~ q(z|x_data))``; gradient flows into the encoder."""
    x = Tensor(x_data) if not isinstance(x_data, Tensor) else x_data
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"clamped step needs a non-empty [batch, dim_x] array, got {x.shape}")
    feats = None
    labels = None
    if enc.n_labels:
        if y is None:
            raise DimensionError("label-modeling encoder needs dataset labels")
        labels = np.asarray(y, dtype=np.int64)
        feats = Tensor(one_hot(labels, enc.n_labels))
    z, _ = encode(enc, x, seeding.stream(seed, seeding.CLAMPED), y=feats)
    return JointBatch(x, z, "clamped", labels, feats)


def inpaint_chain(enc: NetParams, dec: NetParams, x_obs, mask, steps: int, seed: int, *,
                  stochastic: bool = True) -> list[ChainState]:
    """Run the transition operator, overwriting observed coordinates after every decoder sample.

    ``mask[j]`` is True where coordinate ``j`` is observed.  Returns states
    1..steps, all detached.
    """
    x_obs = np.asarray(x_obs, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if x_obs.ndim != 2 or mask.ndim != 1 or mask.shape[0] != x_obs.shape[1] or mask.shape[0] != dec.dim_x:
        raise DimensionError(f"mask of width {mask.shape} does not match observations {x_obs.shape}"
                             f" and model width {dec.dim_x}")
    if steps < 1:
        raise ConfigError(f"inpainting needs at least one step, got {steps}")

    def clamp(state: ChainState) -> ChainState:
        x = np.where(mask, x_obs, state.x.data)
        return ChainState(Tensor(x), state.z, state.step, False, state.y, state.y_features)

    batch = x_obs.shape[0]
    inpaint_seed = seeding.derive(seed, seeding.INPAINT)
    with dc.no_grad():
        state = clamp(initial_state(dec, batch, inpaint_seed, stochastic))
        out = [state]
        for _ in range(steps - 1):
            state = clamp(transition(enc, dec, state, inpaint_seed, stochastic))
            out.append(state)
    return out


def write_trajectory_csv(path, trajectory: list[ChainState]) -> int:
    """Write ``step, index, x0.., z0.. [, y]`` rows; returns the row count."""
    if not trajectory:
        raise ValueError("empty trajectory")
    dim_x, dim_z = trajectory[0].x.shape[1], trajectory[0].z.shape[1]
    has_y = trajectory[0].y is not None
    header = ["step", "index"] + [f"x{i}" for i in range(dim_x)] + [f"z{i}" for i in range(dim_z)]
    if has_y:
        header.append("y")
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for state in trajectory:
            for i in range(state.x.shape[0]):
                row = [state.step, i] + [repr(float(v)) for v in state.x.data[i]] \
                    + [repr(float(v)) for v in state.z.data[i]]
                if has_y:
                    row.append(int(state.y[i]))
                writer.writerow(row)
                rows += 1
    return rows


# exact tabular oracle


@dataclass
class TabularModel:
    """Finite-state conditionals: ``p_x_given_z[z, x]``, ``q_z_given_x[x, z]``, ``data_dist[x]``."""

    p_x_given_z: np.ndarray
    q_z_given_x: np.ndarray
    data_dist: np.ndarray

    def __post_init__(self):
        self.p_x_given_z = np.asarray(self.p_x_given_z, dtype=np.float64)
        self.q_z_given_x = np.asarray(self.q_z_given_x, dtype=np.float64)
        self.data_dist = np.asarray(self.data_dist, dtype=np.float64)
        nx = self.data_dist.shape[0]
        nz = self.q_z_given_x.shape[1] if self.q_z_given_x.ndim == 2 else -1
        if self.q_z_given_x.shape != (nx, nz) or self.p_x_given_z.shape != (nz, nx):
            raise InvariantError(
                f"inconsistent shapes: data {self.data_dist.shape}, q {self.q_z_given_x.shape},"
                f" p {self.p_x_given_z.shape}")
        for name, arr in (("p_x_given_z", self.p_x_given_z), ("q_z_given_x", self.q_z_given_x),
                          ("data_dist", self.data_dist[None, :])):
            if not np.all(arr > 0):
                raise InvariantError(f"{name} has non-positive entries; chain would not be ergodic")
            if np.max(np.abs(arr.sum(axis=1) - 1.0)) > 1e-12:
                raise InvariantError(f"{name} rows do not sum to 1")

    @property
    def n_x(self) -> int:
        return self.data_dist.shape[0]

    @property
    def n_z(self) -> int:
        return self.q_z_given_x.shape[1]

    def data_joint(self) -> np.ndarray:
        """pi_D(x, z) = data(x) q(z|x), shape [n_x, n_z]."""
        return self.data_dist[:, None] * self.q_z_given_x

    @classmethod
    def consistent(cls, data_dist, q_z_given_x) -> "TabularModel":
        """Model whose decoder is the exact x|z conditional of data(x) q(z|x)."""
        data_dist = np.asarray(data_dist, dtype=np.float64)
        q = np.asarray(q_z_given_x, dtype=np.float64)
        joint = data_dist[:, None] * q
        p = (joint / joint.sum(axis=0, keepdims=True)).T
        p = p / p.sum(axis=1, keepdims=True)
        return cls(p, q, data_dist)

    @classmethod
    def random(cls, n_x: int, n_z: int, seed: int, perturb: float = 0.0) -> "TabularModel":
        """Random all-positive consistent model; ``perturb`` mixes that fraction of uniform into p."""
        rng = np.random.default_rng(seed)
        data = rng.dirichlet(np.full(n_x, 2.0))
        q = rng.dirichlet(np.full(n_z, 2.0), size=n_x)
        # dirichlet rows can sum to 1 - ulp; renormalize so degenerate sizes give exact zeros
        data /= data.sum()
        q /= q.sum(axis=1, keepdims=True)
        model = cls.consistent(data, q)
        if perturb:
            p = (1.0 - perturb) * model.p_x_given_z + perturb / n_x
            model = cls(p / p.sum(axis=1, keepdims=True), model.q_z_given_x, model.data_dist)
        return model


def _check_stochastic(m: np.ndarray, name: str) -> None:
    if np.any(m < 0) or np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-12:
        raise InvariantError(f"{name} is not row-stochastic")


def tabular_transition(m: TabularModel, order: str = "z_first") -> np.ndarray:
    """Exact transition matrix over joint states indexed ``x * n_z + z``.

    ``order`` names the variable resampled first: ``z_first`` is
    ``z' ~ q(z|x), x' ~ p(x|z')`` (the chain's operator); ``x_first`` is
    ``x' ~ p(x|z), z' ~ q(z|x')`` (the odd-pair operator).
    """
    _check_stochastic(m.p_x_given_z, "p_x_given_z")
    _check_stochastic(m.q_z_given_x, "q_z_given_x")
    nx, nz = m.n_x, m.n_z
    q, p = m.q_z_given_x, m.p_x_given_z
    if order == "z_first":
        # T[(x,z),(x',z')] = q(z'|x) p(x'|z'), independent of z
        t = np.einsum("ab,bc->acb", q, p)  # [x, x', z']
        t = np.broadcast_to(t[:, None, :, :], (nx, nz, nx, nz))
    elif order == "x_first":
        # T[(x,z),(x',z')] = p(x'|z) q(z'|x'), independent of x
        t = np.einsum("ab,bc->abc", p, q)  # [z, x', z']
        t = np.broadcast_to(t[None, :, :, :], (nx, nz, nx, nz))
    else:
        raise ValueError(f"unknown order {order!r}")
    t = np.ascontiguousarray(t).reshape(nx * nz, nx * nz)
    _check_stochastic(t, "transition matrix")
    return t


def tabular_stationary(t: np.ndarray, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary distribution by power iteration, until ``|pi T - pi|_1 < tol``."""
    t = np.asarray(t, dtype=np.float64)
    n = t.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ t
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    raise NumericError(f"power iteration did not reach residual {tol} in {max_iter} iterations")


def total_variation(a, b) -> float:
    return 0.5 * float(np.abs(np.asarray(a) - np.asarray(b)).sum())


def check_proposition1(m: TabularModel) -> dict:
    """Stationarity and compatibility diagnostics for a tabular model.

    ``data_marginal_tv``: TV between the x-marginal of the chain's stationary
    joint and the data distribution.  ``odd_pair_tv``: TV between the
    stationary joints of the two operator orders.  ``conditional_deviation``:
    max |p(x|z) - pi_D(x|z)| with pi_D(x, z) = data(x) q(z|x).
    ``stationary_joint_tv`` and ``encoder_deviation`` add TV(pi_T, pi_D) and
    max |q(z|x) - pi_T(z|x)|.
    """
    nx, nz = m.n_x, m.n_z
    pi_t = tabular_stationary(tabular_transition(m, "z_first")).reshape(nx, nz)
    pi_odd = tabular_stationary(tabular_transition(m, "x_first")).reshape(nx, nz)
    pi_d = m.data_joint()
    cond_d = (pi_d / pi_d.sum(axis=0, keepdims=True)).T  # [z, x]
    cond_t = pi_t / pi_t.sum(axis=1, keepdims=True)  # [x, z]
    return {
        "n_x": nx,
        "n_z": nz,
        "data_marginal_tv": total_variation(pi_t.sum(axis=1), m.data_dist),
        "odd_pair_tv": total_variation(pi_t, pi_odd),
        "conditional_deviation": float(np.max(np.abs(m.p_x_given_z - cond_d))),
        "stationary_joint_tv": total_variation(pi_t, pi_d),
        "encoder_deviation": float(np.max(np.abs(m.q_z_given_x - cond_t))),
    }


def simulate_tabular_chain(m: TabularModel, n_steps: int, seed: int) -> np.ndarray:
    """Visit counts over joint states of one long chain sampled from the conditionals directly."""
    rng = np.random.default_rng(seed)
    q_cdf = [list(np.cumsum(row)) for row in m.q_z_given_x]
    p_cdf = [list(np.cumsum(row)) for row in m.p_x_given_z]
    nz = m.n_z
    counts = [0] * (m.n_x * nz)
    u = rng.random(2 * n_steps).tolist()
    x = int(rng.choice(m.n_x, p=m.data_dist))
    last_z, last_x = nz - 1, m.n_x - 1
    for i in range(n_steps):
        z = min(bisect.bisect_right(q_cdf[x], u[2 * i]), last_z)
        x = min(bisect.bisect_right(p_cdf[z], u[2 * i + 1]), last_x)
        counts[x * nz + z] += 1
    return np.asarray(counts, dtype=np.float64)
