"""Command-line entry point: ``gibbsnet {train,sample,inpaint,oracle,eval}``.

Exit codes: 0 success, 2 configuration or usage error, 3 training divergence,
4 corrupt artifact.  Every invocation writes ``manifest_<command>.json`` into
the output directory, on success and on failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, seeding
from . import diffcore as dc
from .chains import (TabularModel, check_proposition1, clamped_step, continue_chain, inpaint_chain,
                     simulate_tabular_chain, tabular_stationary, tabular_transition, total_variation,
                     unclamped_chain, write_trajectory_csv)
from .checkpoint import file_digest, load_checkpoint
from .data import MixtureMeta
from .errors import (ConfigError, CorruptCheckpointError, DimensionError, FormatError, InvariantError,
                     TrainingDiverged, UnsupportedError)
from .metrics import (MetricReport, coverage_drift, histogram_kl, linear_probe, long_chain_stability,
                      mmd_rbf, mode_coverage, probe_steps, write_jsonl)
from .trainer import TrainConfig, build_dataset, parse_config_text, train

log = logging.getLogger("gibbsnet")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CORRUPT = 0, 2, 3, 4
DEFAULT_OUT = "gibbsnet_out"

CSV_HELP = """\
CSV outputs
  trajectory.csv / inpaint.csv: step, index, x0..x{d-1}, z0..z{k-1}[, y]
      one row per chain and probe step; step counts decoder applications.
  observations CSV (inpaint input): header x0..x{d-1}, one row per chain;
      free columns may hold any number and are ignored.
  coverage.csv (sample, mixture data): step, mode0..mode{K-1}, unassigned
      fraction of chains within 3 sigma of each mode center at each probe step.
  records.jsonl: one TrainRecord per iteration (iteration, disc_loss, gen_loss,
      metrics, wall_time).
  metrics.jsonl: one MetricReport per line (name, value, details, n_samples, seed).
"""


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    version: str = __version__
    config: str = ""
    config_hash: str = ""
    seed: int | None = None
    ali_mode: bool | None = None
    checkpoint: str | None = None
    checkpoint_sha256: str | None = None
    outputs: list = field(default_factory=list)
    status: str = "running"
    exit_code: int | None = None
    message: str = ""

    def record(self, path) -> str:
        path = str(path)
        if path not in self.outputs:
            self.outputs.append(path)
        return path

    def use_config(self, config: TrainConfig) -> None:
        self.config = config.to_text()
        self.config_hash = config.config_hash()
        self.seed = config.seed
        self.ali_mode = config.ali_mode

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"manifest_{self.command}.json"
        self.outputs = [p for p in self.outputs if p != str(path)]
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


# config handling


def load_config(config_path, overrides, seed=None) -> TrainConfig:
    values = {}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"{config_path}: cannot read config file ({exc.strerror})") from None
        values.update(parse_config_text(text, str(config_path)))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if seed is not None:
        values["seed"] = seed
    return TrainConfig.from_mapping(values)


def _load_checkpoint(path, manifest: RunManifest):
    if not Path(path).is_file():
        raise UsageError(f"{path}: checkpoint not found")
    manifest.checkpoint = str(path)
    manifest.checkpoint_sha256 = file_digest(path)
    ckpt = load_checkpoint(path)
    manifest.use_config(ckpt.config)
    return ckpt


def default_probes(steps: int) -> list[int]:
    """Steps 1, 2, 5, 10, 20, 50, ... up to and including ``steps``."""
    out, base = [], 1
    while base <= steps:
        out.extend(s for s in (base, 2 * base, 5 * base) if s <= steps)
        base *= 10
    out.append(steps)
    return sorted(set(out))


def _probe_list(args) -> list[int]:
    if args.steps < 1:
        raise UsageError(f"--steps must be >= 1, got {args.steps}")
    if args.probes:
        extra = [int(s) for s in args.probes.split(",") if s.strip()]
        if any(s < 1 or s > args.steps for s in extra):
            raise UsageError(f"--probes must lie in 1..{args.steps}")
        return sorted(set(extra))
    if args.probe_every:
        return probe_steps(args.steps, args.probe_every)
    return default_probes(args.steps)


def _run_chain(enc, dec, count, steps, probes, seed, stochastic):
    """States of one batch of unclamped chains at each probe step."""
    wanted = set(probes)
    with dc.no_grad():
        _, traj = unclamped_chain(enc, dec, 1, count, seed, stochastic=stochastic)
        state = traj[-1]
        kept = [state] if 1 in wanted else []
        for s in continue_chain(enc, dec, state, steps - 1, seed, stochastic=stochastic):
            if s.step in wanted:
                kept.append(s)
    return kept


# commands


def cmd_train(args, manifest: RunManifest, out: Path) -> int:
    config = load_config(args.config, args.set, args.seed)
    manifest.use_config(config)
    dataset = build_dataset(config)
    records_path = manifest.record(out / "records.jsonl")
    fh = open(records_path, "w")

    def on_record(rec):
        fh.write(rec.to_json() + "\n")
        if args.log_every and (rec.iteration + 1) % args.log_every == 0:
            log.info("iter %d  D %.4f  G %.4f", rec.iteration + 1, rec.disc_loss, rec.gen_loss)

    try:
        result = train(config, dataset, out_dir=out, on_record=on_record)
    except TrainingDiverged as exc:
        if exc.last_checkpoint:
            manifest.record(exc.last_checkpoint)
        raise
    finally:
        fh.close()
    for path in result.checkpoints:
        manifest.record(path)
    final = result.checkpoints[-1]
    manifest.checkpoint = final
    manifest.checkpoint_sha256 = file_digest(final)
    print(final)
    return EXIT_OK


def write_coverage_csv(path, steps, reports) -> None:
    k = len(reports[0].details["fractions"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"mode{i}" for i in range(k)] + ["unassigned"])
        for step, r in zip(steps, reports):
            writer.writerow([step] + [repr(float(f)) for f in r.details["fractions"]]
                            + [repr(float(r.details["unassigned"]))])


def cmd_sample(args, manifest: RunManifest, out: Path) -> int:
    probes = _probe_list(args)
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    ckpt = _load_checkpoint(args.checkpoint, manifest)
    cfg = ckpt.config
    seed = cfg.seed if args.seed is None else args.seed
    manifest.seed = seed
    states = _run_chain(ckpt.nets.encoder, ckpt.nets.decoder, args.count, args.steps, probes,
                        seeding.derive(seed, seeding.EVAL), cfg.decoder_stochastic)
    rows = write_trajectory_csv(manifest.record(out / "trajectory.csv"), states)
    dim_x = ckpt.nets.decoder.dim_x
    if cfg.dataset == "idx":
        from .plotting import write_pgm_grid

        side = int(round(math.sqrt(dim_x)))
        if side * side == dim_x:
            for s in states:
                write_pgm_grid(manifest.record(out / f"samples_step{s.step:06d}.pgm"),
                               s.x.data[:64], side, side)
    else:
        meta = build_dataset(cfg).meta
        covs = None
        if isinstance(meta, MixtureMeta) and dim_x == meta.centers.shape[1]:
            covs = [mode_coverage(s.x.data, meta) for s in states]
            write_coverage_csv(manifest.record(out / "coverage.csv"), [s.step for s in states], covs)
        if dim_x == 2 and not args.no_plots:
            from .plotting import chain_scatter, coverage_series

            chain_scatter(manifest.record(out / "samples.png"), states, meta)
            if covs is not None:
                coverage_series(manifest.record(out / "coverage.png"), [s.step for s in states],
                                [c.details["fractions"] for c in covs], [c.details["unassigned"] for c in covs])
    print(f"{rows} rows")
    return EXIT_OK


def parse_mask(text: str) -> np.ndarray:
    """``"0,1"``, ``"01"`` or ``"F,T"`` style masks; true marks an observed coordinate."""
    tokens = [t for t in (text.split(",") if "," in text else list(text)) if t.strip()]
    truth = {"1": True, "t": True, "true": True, "0": False, "f": False, "false": False}
    try:
        return np.array([truth[t.strip().lower()] for t in tokens], dtype=bool)
    except KeyError as exc:
        raise UsageError(f"--mask: cannot parse entry {exc.args[0]!r}") from None


def read_observations(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UsageError(f"{path}: cannot read observations ({exc.strerror})") from None
    if len(rows) < 2:
        raise UsageError(f"{path}: needs a header row and at least one observation")
    try:
        return np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_inpaint(args, manifest: RunManifest, out: Path) -> int:
    if args.steps < 1:
        raise UsageError(f"--steps must be >= 1, got {args.steps}")
    ckpt = _load_checkpoint(args.checkpoint, manifest)
    obs = read_observations(args.observations)
    mask = parse_mask(args.mask)
    dim_x = ckpt.nets.decoder.dim_x
    if mask.shape[0] != dim_x or obs.shape[1] != dim_x:
        raise DimensionError(f"mask width {mask.shape[0]} / observation width {obs.shape[1]} "
                             f"do not match the model's x width {dim_x}")
    if args.repeat > 1:
        obs = np.repeat(obs, args.repeat, axis=0)
    seed = ckpt.config.seed if args.seed is None else args.seed
    manifest.seed = seed
    traj = inpaint_chain(ckpt.nets.encoder, ckpt.nets.decoder, obs, mask, args.steps,
                         seeding.derive(seed, seeding.EVAL), stochastic=ckpt.config.decoder_stochastic)
    rows = write_trajectory_csv(manifest.record(out / "inpaint.csv"), traj)
    free = np.flatnonzero(~mask)
    if free.size and not args.no_plots and ckpt.config.dataset != "idx":
        from .plotting import inpaint_histogram

        inpaint_histogram(manifest.record(out / "inpaint_free.png"), traj[-1].x.data[:, free[0]])
    print(f"{rows} rows")
    return EXIT_OK


def _tabular_from_json(path) -> TabularModel:
    try:
        spec = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"{path}: cannot read model ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    try:
        return TabularModel(np.array(spec["p_x_given_z"], dtype=float), np.array(spec["q_z_given_x"], dtype=float),
                            np.array(spec["data_dist"], dtype=float))
    except KeyError as exc:
        raise UsageError(f"{path}: missing field {exc.args[0]}") from None


def cmd_oracle(args, manifest: RunManifest, out: Path) -> int:
    seed = 0 if args.seed is None else args.seed
    manifest.seed = seed
    if args.model:
        model = _tabular_from_json(args.model)
    else:
        if args.nx < 1 or args.nz < 1:
            raise UsageError("--nx and --nz must be >= 1")
        model = TabularModel.random(args.nx, args.nz, seed, perturb=args.perturb)
    report = check_proposition1(model)
    if args.simulate:
        counts = simulate_tabular_chain(model, args.simulate, seed)
        pi_t = tabular_stationary(tabular_transition(model, "z_first"))
        report["simulated_steps"] = args.simulate
        report["simulated_tv"] = total_variation(counts / counts.sum(), pi_t)
    text = json.dumps(report, sort_keys=True)
    with open(manifest.record(out / "oracle.json"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    return EXIT_OK


def evaluate(ckpt, dataset, *, seed: int, n_samples: int, chain_steps: int, probe_every: int) -> list:
    """The five evaluation reports for a checkpoint against ``dataset``."""
    nets, cfg = ckpt.nets, ckpt.config
    rng = seeding.stream(seed, seeding.EVAL, 0)
    n = min(n_samples, len(dataset))
    idx = rng.choice(len(dataset), size=n, replace=False)
    ref = dataset.x[idx]
    sample_seed = seeding.derive(seed, seeding.EVAL, 1)
    with dc.no_grad():
        fake, _ = unclamped_chain(nets.encoder, nets.decoder, cfg.n_steps, n, sample_seed,
                                  stochastic=cfg.decoder_stochastic)
    x_gen = fake.x.data
    reports = []
    mmd = mmd_rbf(x_gen, ref, seed=seed)
    reports.append(mmd)
    if isinstance(dataset.meta, MixtureMeta):
        cov = mode_coverage(x_gen, dataset.meta)
    else:
        cov = MetricReport("mode_coverage", float("nan"), {"skipped": "dataset is not a Gaussian mixture"}, n)
    cov.seed = seed
    reports.append(cov)
    if dataset.dim <= 3:
        hk = histogram_kl(ref, x_gen, bins=20)
    else:
        hk = histogram_kl(ref.mean(axis=1), x_gen.mean(axis=1), bins=20)
        hk.details["projection"] = "row mean"
    hk.seed = seed
    reports.append(hk)
    if dataset.y is not None and np.unique(dataset.y).size >= 2 and not cfg.label_modeling:
        half = n // 2
        with dc.no_grad():
            real = clamped_step(nets.encoder, ref, seeding.derive(seed, seeding.EVAL, 2))
        z = real.z.data
        acc = linear_probe(z[:half], dataset.y[idx[:half]], z[half:], dataset.y[idx[half:]], seed=seed)
        reports.append(MetricReport("linear_probe", acc, {"model": "logistic", "train": half,
                                                          "test": n - half}, n, seed))
    else:
        reports.append(MetricReport("linear_probe", float("nan"),
                                    {"skipped": "needs at least two label classes and an unlabeled encoder"},
                                    0, seed))
    if isinstance(dataset.meta, MixtureMeta):
        series = long_chain_stability(nets.encoder, nets.decoder, chain_steps, probe_every, dataset.meta,
                                      dataset.x, batch=n, seed=seeding.derive(seed, seeding.EVAL, 3),
                                      extra_steps=(min(3, chain_steps),), stochastic=cfg.decoder_stochastic)
        covs = [r for r in series if r.name == "mode_coverage"]
        value = coverage_drift(covs[0], covs[-1])
        details = {"first_step": covs[0].details["step"], "last_step": covs[-1].details["step"],
                   "steps": [r.details["step"] for r in covs],
                   "unassigned": [r.details["unassigned"] for r in covs],
                   "mmd": [r.value for r in series if r.name == "mmd_rbf"]}
        reports.append(MetricReport("long_chain_stability", value, details, n, seed))
    else:
        probes = probe_steps(chain_steps, probe_every)
        states = _run_chain(nets.encoder, nets.decoder, n, chain_steps, probes,
                            seeding.derive(seed, seeding.EVAL, 3), cfg.decoder_stochastic)
        mmds = [mmd_rbf(s.x.data, ref).value for s in states]
        reports.append(MetricReport("long_chain_stability", mmds[-1],
                                    {"steps": probes, "mmd": mmds, "value_is": "mmd at last step"}, n, seed))
    return reports


def cmd_eval(args, manifest: RunManifest, out: Path) -> int:
    ckpt = _load_checkpoint(args.checkpoint, manifest)
    if args.config or args.set:
        data_cfg = load_config(args.config, args.set)
    else:
        data_cfg = ckpt.config
    dataset = build_dataset(data_cfg)
    if dataset.dim != ckpt.nets.decoder.dim_x:
        raise DimensionError(f"dataset width {dataset.dim} does not match checkpoint x width "
                             f"{ckpt.nets.decoder.dim_x}")
    seed = ckpt.config.seed if args.seed is None else args.seed
    manifest.seed = seed
    if args.chain_steps < 1:
        raise UsageError("--chain-steps must be >= 1")
    reports = evaluate(ckpt, dataset, seed=seed, n_samples=args.samples, chain_steps=args.chain_steps,
                       probe_every=args.probe_every)
    write_jsonl(manifest.record(out / "metrics.jsonl"), reports)
    for r in reports:
        print(f"{r.name}\t{r.value:.6g}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "inpaint": cmd_inpaint, "oracle": cmd_oracle,
            "eval": cmd_eval}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file ('#' comments)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help=f"output directory (default $GIBBSNET_OUT or ./{DEFAULT_OUT})")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="gibbsnet", description="Train and probe GibbsNet transition operators.",
                     epilog=CSV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("train", parents=[common], help="train a model", epilog=CSV_HELP, formatter_class=fmt)
    p.add_argument("--log-every", type=int, default=0, help="log losses every N iterations")

    for name, helptext in (("sample", "run unclamped chains from a checkpoint"),
                           ("inpaint", "run chains with observed coordinates clamped")):
        p = sub.add_parser(name, parents=[common], help=helptext, epilog=CSV_HELP, formatter_class=fmt)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--steps", type=int, default=20, help="chain length in decoder applications")
        p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
        if name == "sample":
            p.add_argument("--count", type=int, default=2000, help="number of parallel chains")
            p.add_argument("--probe-every", type=int, default=0,
                           help="record every N steps (default 1, 2, 5, 10, 20, ...)")
            p.add_argument("--probes", default="", help="explicit comma-separated probe steps")
        else:
            p.add_argument("--observations", required=True, help="CSV with header x0..x{d-1}")
            p.add_argument("--mask", required=True, help="observed coordinates, e.g. 01 or 0,1")
            p.add_argument("--repeat", type=int, default=1, help="chains per observation row")

    p = sub.add_parser("oracle", parents=[common], help="exact stationarity check on a tabular model")
    p.add_argument("--model", help="JSON with p_x_given_z [z][x], q_z_given_x [x][z], data_dist [x]")
    p.add_argument("--nx", type=int, default=4)
    p.add_argument("--nz", type=int, default=3)
    p.add_argument("--perturb", type=float, default=0.0,
                   help="mix this much uniform noise into the decoder (0 keeps it consistent)")
    p.add_argument("--simulate", type=int, default=0, help="also simulate a chain of this many steps")

    p = sub.add_parser("eval", parents=[common], help="write metric reports for a checkpoint",
                       epilog=CSV_HELP, formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--chain-steps", type=int, default=200)
    p.add_argument("--probe-every", type=int, default=50)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, TrainingDiverged):
        return EXIT_DIVERGED
    if isinstance(exc, (CorruptCheckpointError, FormatError)):
        return EXIT_CORRUPT
    if isinstance(exc, (ConfigError, UsageError, DimensionError, InvariantError, UnsupportedError)):
        return EXIT_USAGE
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "log_every", 0) else logging.WARNING,
                        format="%(message)s")
    out = Path(args.out or os.environ.get("GIBBSNET_OUT") or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, argv)
    code = EXIT_USAGE
    try:
        code = COMMANDS[args.command](args, manifest, out)
        manifest.status = "ok"
    except Exception as exc:
        code = _exit_code(exc)
        manifest.status = "failed"
        manifest.message = str(exc)
        if code is None:  # not part of the exit-code contract: record, then propagate
            code = 1
            raise
        print(f"error: {exc}", file=sys.stderr)
    finally:
        manifest.exit_code = code
        manifest.write(out)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
