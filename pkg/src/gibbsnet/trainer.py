"""Adversarial training of the transition operator.

Each iteration runs an unclamped chain of ``n_steps`` decoder applications
and one clamped encoder step on a data batch, updates the discriminator on
the detached pairs, then updates encoder and decoder through the live final
step of the chain and through the clamped pair.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import seeding
from .chains import JointBatch, clamped_step, prior_sample, unclamped_chain
from .data import Dataset, MixtureMeta, gaussian_mixture, load_idx_images, swiss_roll_2d, two_moons
from .diffcore import Tensor
from .errors import ConfigError, TrainingDiverged
from .losses import (AdamState, LossConfig, adam_step, disc_loss, encoder_clamped_loss, gen_loss,
                     importance_weighted_label_loss)
from .nets import NetParams, decode, discriminate, make_decoder, make_discriminator, make_encoder, one_hot

log = logging.getLogger(__name__)

DATASETS = ("ring", "moons", "swiss_roll", "idx")
LR_SCHEDULES = ("constant", "linear")


@dataclass
class TrainConfig:
    n_steps: int = 3
    dim_z: int = 2
    hidden: int = 256
    depth: int = 3
    activation: str = "leaky_relu"
    init_log_var: float = -4.0
    generator_loss: str = "boundary_seeking"
    label_loss: str = "expected_softmax"
    disc_steps: int = 1
    importance_samples: int = 4
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"
    batch_size: int = 128
    iterations: int = 1000
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    decoder_stochastic: bool = True
    label_modeling: bool = False
    share_batches: bool = True
    dataset: str = "ring"
    modes: int = 8
    radius: float = 2.0
    sigma: float = 0.1
    phase: float = 0.0
    noise: float = 0.05
    n_data: int = 10000
    data_seed: int = 1234
    idx_path: str = ""
    idx_labels_path: str = ""
    idx_limit: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_steps < 1:
            raise ConfigError("n_steps: chain length must be >= 1")
        for key in ("dim_z", "hidden", "depth", "batch_size", "iterations", "n_data", "disc_steps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be positive")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset: must be one of {DATASETS}")
        if self.dataset == "idx" and not self.idx_path:
            raise ConfigError("idx_path: required for dataset=idx")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule: must be one of {LR_SCHEDULES}")
        if self.importance_samples < 2 and self.label_loss == "importance_weighted":
            raise ConfigError("importance_samples: must be >= 2")
        LossConfig(self.generator_loss, self.label_loss, self.disc_steps)

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.generator_loss, self.label_loss, self.disc_steps)

    @property
    def ali_mode(self) -> bool:
        return self.n_steps == 1

    @property
    def hidden_sizes(self) -> tuple:
        return (self.hidden,) * self.depth

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values; unknown keys raise ConfigError naming the key."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"{key}: unknown configuration key")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(key: str, raw, typ: str):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw


def build_dataset(config: TrainConfig) -> Dataset:
    if config.dataset == "ring":
        return gaussian_mixture(config.modes, config.n_data, config.radius, config.sigma,
                                config.data_seed, labeled=True, phase=config.phase)
    if config.dataset == "moons":
        return two_moons(config.n_data, config.noise, config.data_seed)
    if config.dataset == "swiss_roll":
        return swiss_roll_2d(config.n_data, config.noise, config.data_seed)
    return load_idx_images(config.idx_path, config.idx_limit or None,
                           labels_path=config.idx_labels_path or None)


@dataclass
class Networks:
    encoder: NetParams
    decoder: NetParams
    discriminator: NetParams

    def items(self):
        return (("encoder", self.encoder), ("decoder", self.decoder), ("discriminator", self.discriminator))

    def copy(self) -> "Networks":
        return Networks(self.encoder.copy(), self.decoder.copy(), self.discriminator.copy())


def build_networks(config: TrainConfig, dim_x: int, n_labels: int = 0) -> Networks:
    k = n_labels if config.label_modeling else 0
    h = config.hidden_sizes
    return Networks(
        make_encoder(dim_x, config.dim_z, h, seeding.derive(config.seed, seeding.INIT, 0), k, config.activation,
                     config.init_log_var),
        make_decoder(config.dim_z, dim_x, h, seeding.derive(config.seed, seeding.INIT, 1), k, config.activation,
                     config.init_log_var),
        make_discriminator(dim_x, config.dim_z, h, seeding.derive(config.seed, seeding.INIT, 2), k,
                           config.activation),
    )


def scheduled_lr(config: TrainConfig, iteration: int) -> float:
    """Learning rate for ``iteration``: constant, or linear decay reaching zero after the last iteration."""
    if config.lr_schedule == "linear":
        return config.lr * (1.0 - iteration / config.iterations)
    return config.lr


def build_optimizers(config: TrainConfig, nets: Networks) -> dict:
    hyper = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    return {role: AdamState.for_params(net.tensors(), **hyper) for role, net in nets.items()}


@dataclass
class TrainRecord:
    iteration: int
    disc_loss: float
    gen_loss: float
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def iteration_seed(config: TrainConfig, iteration: int) -> int:
    return seeding.derive(config.seed, iteration)


def sample_batch(dataset: Dataset, config: TrainConfig, iteration: int, which: int = 0):
    rng = seeding.stream(iteration_seed(config, iteration), seeding.BATCH, which)
    idx = rng.integers(0, len(dataset), size=config.batch_size)
    return dataset.x[idx], (None if dataset.y is None else dataset.y[idx])


def _disc_features(pair: JointBatch, config: TrainConfig):
    return pair.y_features if config.label_modeling else None


def _check_finite(*outputs: Tensor, what: str) -> None:
    for out in outputs:
        if not np.all(np.isfinite(out.data)):
            raise TrainingDiverged(f"non-finite discriminator output in the {what} step")


def _disc_update(nets: Networks, opts: dict, real: JointBatch, fake: JointBatch, config: TrainConfig) -> float:
    disc = nets.discriminator
    yr, yf = _disc_features(real, config), _disc_features(fake, config)
    with dc.Tape() as tape:
        d_real = discriminate(disc, dc.detach(real.x), dc.detach(real.z), None if yr is None else dc.detach(yr))
        d_fake = discriminate(disc, dc.detach(fake.x), dc.detach(fake.z), None if yf is None else dc.detach(yf))
        _check_finite(d_real, d_fake, what="discriminator")
        loss = disc_loss(d_real, d_fake)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite discriminator loss {value}")
    grads = tape.backward(loss)
    params = disc.tensors()
    adam_step(params, [grads[p] for p in params], opts["discriminator"])
    return value


def _label_term(nets: Networks, fake: JointBatch, config: TrainConfig, seed: int):
    """Importance-weighted discrete objective for the decoder's label head."""
    m = config.importance_samples
    probs = np.exp(dc.log_softmax(dc.detach(fake.label_logits)).data)
    u = seeding.stream(seed, seeding.LABELS).random((probs.shape[0], m))
    cdf = np.cumsum(probs, axis=1)
    labels = np.minimum((cdf[:, None, :] < u[:, :, None]).sum(axis=2), probs.shape[1] - 1)
    x, z = dc.detach(fake.x), dc.detach(fake.z)
    d_out = np.empty(labels.shape)
    with dc.no_grad():
        for j in range(m):
            feats = Tensor(one_hot(labels[:, j], nets.decoder.n_labels))
            d_out[:, j] = discriminate(nets.discriminator, x, z, feats).data[:, 0]
    return importance_weighted_label_loss(fake.label_logits, labels, d_out, m)


@contextlib.contextmanager
def _frozen(net: NetParams):
    """Skip weight gradients of ``net`` (inputs still receive theirs)."""
    params = net.tensors()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def adversarial_update(nets: Networks, opts: dict, real: JointBatch, fake: JointBatch,
                       config: TrainConfig, seed: int, tape: dc.Tape, disc_pairs=None) -> tuple[float, float]:
    """Discriminator step(s) on detached pairs, then one encoder/decoder step.

    ``real`` and ``fake`` must have been built on ``tape`` (which must be the
    active tape).  ``disc_pairs`` optionally supplies separate pairs for the
    discriminator.
    """
    d_real_pair, d_fake_pair = disc_pairs or (real, fake)
    d_values = [_disc_update(nets, opts, d_real_pair, d_fake_pair, config)
                for _ in range(config.disc_steps)]

    if config.label_modeling and config.label_loss == "importance_weighted":
        fake_feats = Tensor(one_hot(fake.y, nets.decoder.n_labels))
    else:
        fake_feats = _disc_features(fake, config)
    with _frozen(nets.discriminator):
        d_real = discriminate(nets.discriminator, real.x, real.z, _disc_features(real, config))
        d_fake = discriminate(nets.discriminator, fake.x, fake.z, fake_feats)
    _check_finite(d_real, d_fake, what="generator")
    loss = gen_loss(d_fake, config.generator_loss) + encoder_clamped_loss(d_real, config.generator_loss)
    if config.label_modeling and config.label_loss == "importance_weighted":
        loss = loss + _label_term(nets, fake, config, seed)
    g_value = loss.item()
    if not math.isfinite(g_value):
        raise TrainingDiverged(f"non-finite generator loss {g_value}")
    grads = tape.backward(loss)
    for role in ("encoder", "decoder"):
        params = getattr(nets, role).tensors()
        adam_step(params, [grads[p] for p in params], opts[role])
    return d_values[-1], g_value


def _disc_pairs(nets: Networks, dataset: Dataset, config: TrainConfig, iteration: int, seed: int, fake):
    if config.share_batches:
        return None
    x2, y2 = sample_batch(dataset, config, iteration, which=1)
    with dc.no_grad():
        real2 = clamped_step(nets.encoder, x2, seeding.derive(seed, 1), y=y2 if config.label_modeling else None)
    return real2, fake


def train_step(nets: Networks, opts: dict, dataset: Dataset, config: TrainConfig, iteration: int) -> TrainRecord:
    """One GibbsNet iteration (chain of ``config.n_steps``)."""
    seed = iteration_seed(config, iteration)
    x, y = sample_batch(dataset, config, iteration)
    y = y if config.label_modeling else None
    start = time.perf_counter()
    with dc.Tape() as tape:
        fake, _ = unclamped_chain(nets.encoder, nets.decoder, config.n_steps, config.batch_size, seed,
                                  stochastic=config.decoder_stochastic)
        real = clamped_step(nets.encoder, x, seed, y=y)
        d, g = adversarial_update(nets, opts, real, fake, config, seed, tape,
                                  _disc_pairs(nets, dataset, config, iteration, seed, fake))
    return TrainRecord(iteration, d, g, wall_time=time.perf_counter() - start)


def ali_train_step(nets: Networks, opts: dict, dataset: Dataset, config: TrainConfig, iteration: int) -> TrainRecord:
    """Standalone ALI iteration: model pair is ``z ~ N(0, I)``, ``x ~ p(x|z)``."""
    seed = iteration_seed(config, iteration)
    x, y = sample_batch(dataset, config, iteration)
    y = y if config.label_modeling else None
    start = time.perf_counter()
    dec = nets.decoder
    with dc.Tape() as tape:
        z = Tensor(prior_sample(config.batch_size, dec.dim_z, seed))
        x_gen, _, labels = decode(dec, z, seeding.stream(seed, seeding.DECODER, 1),
                                  stochastic=config.decoder_stochastic)
        fake = JointBatch(x_gen, z, "unclamped",
                          *((labels.sample, labels.onehot, labels.logits) if labels else ()))
        real = clamped_step(nets.encoder, x, seed, y=y)
        d, g = adversarial_update(nets, opts, real, fake, config, seed, tape,
                                  _disc_pairs(nets, dataset, config, iteration, seed, fake))
    return TrainRecord(iteration, d, g, wall_time=time.perf_counter() - start)


def snapshot_metrics(nets: Networks, dataset: Dataset, config: TrainConfig, iteration: int,
                     n: int = 256) -> dict:
    """Cheap in-training diagnostics: joint MMD between clamped and unclamped pairs, plus coverage."""
    from .metrics import mmd_rbf, mode_coverage

    seed = seeding.derive(config.seed, iteration, seeding.EVAL)
    rng = seeding.stream(seed, seeding.BATCH)
    idx = rng.choice(len(dataset), size=min(n, len(dataset)), replace=False)
    y = dataset.y[idx] if config.label_modeling else None
    with dc.no_grad():
        fake, _ = unclamped_chain(nets.encoder, nets.decoder, config.n_steps, idx.size, seed,
                                  stochastic=config.decoder_stochastic)
        real = clamped_step(nets.encoder, dataset.x[idx], seed, y=y)
    a = np.concatenate([real.x.data, real.z.data], axis=1)
    b = np.concatenate([fake.x.data, fake.z.data], axis=1)
    out = {"joint_mmd": mmd_rbf(a, b).value}
    if isinstance(dataset.meta, MixtureMeta):
        cov = mode_coverage(fake.x.data, dataset.meta)
        out["coverage_unassigned"] = cov.details["unassigned"]
        out["coverage_min_fraction"] = min(cov.details["fractions"])
    return out


@dataclass
class TrainResult:
    nets: Networks
    opts: dict
    records: list
    iteration: int
    checkpoints: list = field(default_factory=list)


StepFn = Callable[[Networks, dict, Dataset, TrainConfig, int], TrainRecord]


def train(config: TrainConfig, dataset: Dataset | None = None, *, resume=None, out_dir=None,
          step_fn: StepFn = train_step, on_record=None, stop_at: int | None = None) -> TrainResult:
    """Train from scratch (or from ``resume``, a loaded checkpoint) up to ``config.iterations``.

    Iteration ``i`` draws all of its noise from streams keyed by
    ``(config.seed, i)``, so a resumed run matches an uninterrupted one
    bit for bit.  ``stop_at`` ends the run early (for checkpoint/resume).
    """
    from .checkpoint import save_checkpoint

    dataset = dataset if dataset is not None else build_dataset(config)
    n_labels = dataset.n_labels if config.label_modeling else 0
    if config.label_modeling and n_labels < 2:
        raise ConfigError("label_modeling: dataset has no labels")
    if resume is not None:
        nets, opts, start = resume.nets, resume.opts, resume.iteration
    else:
        nets = build_networks(config, dataset.dim, n_labels)
        opts = build_optimizers(config, nets)
        start = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    records, checkpoints = [], []
    last_ckpt = None
    for it in range(start, end):
        for opt in opts.values():
            opt.lr = scheduled_lr(config, it)
        try:
            rec = step_fn(nets, opts, dataset, config, it)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", last_ckpt) from None
        if config.eval_every and (it + 1) % config.eval_every == 0:
            rec.metrics = snapshot_metrics(nets, dataset, config, it)
            log.info("iter %d  D %.4f  G %.4f  %s", it + 1, rec.disc_loss, rec.gen_loss, rec.metrics)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if out_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            last_ckpt = str(out_dir / f"checkpoint_{it + 1:07d}.gbn")
            save_checkpoint(last_ckpt, config, nets, opts, it + 1)
            checkpoints.append(last_ckpt)
    if out_dir is not None:
        final = str(out_dir / "final.gbn")
        save_checkpoint(final, config, nets, opts, end)
        checkpoints.append(final)
    return TrainResult(nets, opts, records, end, checkpoints)
