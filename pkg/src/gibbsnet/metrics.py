"""Two-sample, coverage and probe diagnostics for trained chains."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import seeding
from .chains import ChainState, continue_chain, unclamped_chain
from .data import MixtureMeta, nearest_mode
from .errors import ContractError, UnsupportedError

BANDWIDTH_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class MetricReport:
    name: str
    value: float
    details: dict = field(default_factory=dict)
    n_samples: int = 0
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_jsonl(path, reports) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return (d * d).sum(axis=2)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    d2 = _sq_dists(pooled, pooled)
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.sqrt(np.median(d2[iu])))
    return med if med > 0 else 1.0


def mmd_rbf(a, b, bandwidths=None, unbiased: bool = True, seed: int | None = None) -> MetricReport:
    """Squared MMD with Gaussian kernels ``exp(-|u - v|^2 / (2 h^2))``, summed over ``bandwidths``.

    Default bandwidths are the median pairwise distance times 0.25..4.  The
    unbiased estimate may be slightly negative; it is reported unclipped.
    Sums use ``math.fsum`` so the value is exactly symmetric in (a, b).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a.reshape(-1, 1) if a.ndim == 1 else a
    b = b.reshape(-1, 1) if b.ndim == 1 else b
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ContractError("mmd_rbf needs at least 2 samples per side")
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if bandwidths is None:
        base = median_bandwidth(a, b)
        bandwidths = [m * base for m in BANDWIDTH_MULTIPLIERS]
    bandwidths = [float(h) for h in np.atleast_1d(bandwidths)]
    n, m = a.shape[0], b.shape[0]
    daa, dbb, dab = _sq_dists(a, a), _sq_dists(b, b), _sq_dists(a, b)
    per_bw = []
    for h in bandwidths:
        g = 1.0 / (2.0 * h * h)
        kaa, kbb, kab = np.exp(-g * daa), np.exp(-g * dbb), np.exp(-g * dab)
        if unbiased:
            taa = (math.fsum(kaa.ravel()) - math.fsum(np.diag(kaa))) / (n * (n - 1))
            tbb = (math.fsum(kbb.ravel()) - math.fsum(np.diag(kbb))) / (m * (m - 1))
        else:
            taa = math.fsum(kaa.ravel()) / (n * n)
            tbb = math.fsum(kbb.ravel()) / (m * m)
        tab = math.fsum(kab.ravel()) / (n * m)
        per_bw.append((taa + tbb) - 2.0 * tab)
    value = math.fsum(per_bw)
    return MetricReport("mmd_rbf", value, {"bandwidths": bandwidths, "per_bandwidth": per_bw,
                                            "unbiased": unbiased}, n + m, seed)


def mode_coverage(samples, meta: MixtureMeta, threshold_sigmas: float = 3.0) -> MetricReport:
    """Fraction of samples within ``threshold_sigmas * sigma`` of each mode centre.

    ``value`` is the assigned fraction (1 - unassigned).
    """
    if not isinstance(meta, MixtureMeta):
        raise UnsupportedError("mode coverage needs a Gaussian mixture descriptor")
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = x.shape[0]
    idx, dist = nearest_mode(x, meta.centers)
    inside = dist <= threshold_sigmas * meta.sigma
    counts = np.bincount(idx[inside], minlength=meta.n_modes)
    fractions = counts / n
    unassigned = float(np.count_nonzero(~inside)) / n
    return MetricReport("mode_coverage", 1.0 - unassigned,
                        {"fractions": fractions.tolist(), "unassigned": unassigned,
                         "threshold_sigmas": threshold_sigmas}, n)


def histogram_kl(a, b, bins: int = 20, value_range=None) -> MetricReport:
    """KL(hist_a || hist_b) in nats on a shared grid.

    Each histogram gets ``1 / (n * n_bins)`` added to every bin probability
    (``n`` its sample count, ``n_bins`` the total cell count) and is then
    renormalized.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractError("histogram_kl needs non-empty inputs")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    d = a.shape[1]
    if value_range is None:
        lo = np.minimum(a.min(axis=0), b.min(axis=0))
        hi = np.maximum(a.max(axis=0), b.max(axis=0))
        value_range = [(float(l), float(h) if h > l else float(l) + 1.0) for l, h in zip(lo, hi)]
    elif np.ndim(value_range) == 1:
        value_range = [tuple(value_range)] * d
    ha, _ = np.histogramdd(a, bins=bins, range=value_range)
    hb, _ = np.histogramdd(b, bins=bins, range=value_range)
    cells = ha.size

    def smooth(h, n):
        p = h.ravel() / n + 1.0 / (n * cells)
        return p / p.sum()

    p, q = smooth(ha, a.shape[0]), smooth(hb, b.shape[0])
    kl = float(np.sum(p * (np.log(p) - np.log(q))))
    return MetricReport("histogram_kl", max(kl, 0.0),
                        {"bins": bins, "range": [list(r) for r in value_range]},
                        a.shape[0] + b.shape[0])


def linear_probe(train_z, train_y, test_z, test_y, model: str = "logistic", seed: int = 0) -> float:
    """Test accuracy of a classifier fitted on frozen latent features.

    ``model`` is ``logistic`` (multinomial logistic regression) or ``mlp``
    (two hidden layers of 256 units).
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.neural_network import MLPClassifier
    from sklearn.preprocessing import StandardScaler

    train_z = np.array(train_z, dtype=np.float64)
    test_z = np.array(test_z, dtype=np.float64)
    if train_y is None or test_y is None:
        raise ContractError("linear probe needs labels")
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    if np.unique(train_y).size < 2:
        raise ContractError("linear probe needs at least two classes in the training labels")
    scaler = StandardScaler().fit(train_z)
    if model == "logistic":
        clf = LogisticRegression(max_iter=2000)
    elif model == "mlp":
        clf = MLPClassifier(hidden_layer_sizes=(256, 256), max_iter=500, random_state=seed)
    else:
        raise ValueError(f"unknown probe model {model!r}")
    clf.fit(scaler.transform(train_z), train_y)
    return float(np.mean(clf.predict(scaler.transform(test_z)) == test_y))


def _normal_cdf(x):
    return 0.5 * (1.0 + np.vectorize(math.erf)(np.asarray(x) / math.sqrt(2.0)))


def conditional_tv(free_values, weights, means, sigma: float, bins: int = 40, value_range=None) -> MetricReport:
    """TV between a histogram of one free coordinate and its exact conditional mixture.

    ``weights`` is [batch, K] (one posterior per chain, pooled by averaging)
    or [K]; ``means`` holds the K component means of this coordinate.  Bin
    masses of the mixture come from the Gaussian CDF; mass outside the range
    is an extra cell on each side.
    """
    v = np.asarray(free_values, dtype=np.float64).ravel()
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64)).mean(axis=0)
    mu = np.asarray(means, dtype=np.float64).ravel()
    if v.size == 0 or w.shape != mu.shape:
        raise ContractError(f"conditional_tv: {v.size} samples, weights {w.shape}, means {mu.shape}")
    if value_range is None:
        value_range = (float(mu.min() - 4 * sigma), float(mu.max() + 4 * sigma))
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    cdf = (w[:, None] * _normal_cdf((edges[None, :] - mu[:, None]) / sigma)).sum(axis=0)
    exact = np.concatenate([[cdf[0]], np.diff(cdf), [1.0 - cdf[-1]]])
    inner, _ = np.histogram(v, bins=edges)
    empirical = np.concatenate([[np.count_nonzero(v < edges[0])], inner,
                                [np.count_nonzero(v > edges[-1])]]) / v.size
    tv = 0.5 * float(np.abs(empirical - exact).sum())
    return MetricReport("conditional_tv", tv, {"bins": bins, "range": list(value_range)}, v.size)


def label_agreement(x, y, meta: MixtureMeta) -> float:
    """Fraction of generated labels equal to the label of the nearest mode center."""
    if not isinstance(meta, MixtureMeta):
        raise UnsupportedError("label agreement needs a Gaussian mixture")
    idx, _ = nearest_mode(np.asarray(x, dtype=np.float64), meta.centers)
    return float(np.mean(idx == np.asarray(y)))


def probe_steps(total: int, every: int, extra=()) -> list[int]:
    steps = set(range(every, total + 1, every)) if every > 0 else set()
    steps.update(s for s in extra if 1 <= s <= total)
    steps.add(total)
    return sorted(steps)


def long_chain_stability(enc, dec, steps: int, probe_every: int, meta: MixtureMeta, data_x=None, *,
                         batch: int = 2000, seed: int = 0, extra_steps=(), mmd_samples: int = 500,
                         stochastic: bool = True) -> list[MetricReport]:
    """Run one detached batch of unclamped chains for ``steps`` transitions.

    At every probe step records ``mode_coverage`` (and ``mmd_rbf`` against
    ``data_x`` when given).  ``details['step']`` carries the probe step.
    """
    probes = probe_steps(steps, probe_every, extra_steps)
    wanted = set(probes)
    pair, traj = unclamped_chain(enc, dec, 1, batch, seed, stochastic=stochastic)
    state: ChainState = traj[-1]
    states = {1: state} if 1 in wanted else {}
    for s in continue_chain(enc, dec, state, steps - 1, seed, stochastic=stochastic):
        if s.step in wanted:
            states[s.step] = s
    rng = seeding.stream(seed, seeding.EVAL)
    ref = None
    if data_x is not None:
        data_x = np.asarray(data_x)
        ref = data_x[rng.choice(data_x.shape[0], size=min(mmd_samples, data_x.shape[0]), replace=False)]
    reports = []
    for step in probes:
        x = states[step].x.data
        cov = mode_coverage(x, meta)
        cov.details["step"] = step
        cov.seed = seed
        reports.append(cov)
        if ref is not None:
            mmd = mmd_rbf(x[:mmd_samples], ref, seed=seed)
            mmd.details["step"] = step
            reports.append(mmd)
    return reports


def coverage_drift(a: MetricReport, b: MetricReport) -> float:
    """L1 distance between the per-mode fraction vectors of two coverage reports."""
    fa = np.asarray(a.details["fractions"])
    fb = np.asarray(b.details["fractions"])
    return float(np.abs(fa - fb).sum())
