import csv
import json
import time

import numpy as np
import pytest

from gibbsnet.checkpoint import save_checkpoint
from gibbsnet.cli import default_probes, main, parse_mask
from gibbsnet.trainer import build_dataset, build_networks, build_optimizers, TrainConfig

TINY = ["--set", "hidden=16", "--set", "depth=2", "--set", "batch_size=32", "--set", "n_data=400"]


def manifest(out, command):
    return json.loads((out / f"manifest_{command}.json").read_text())


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--out", str(out), *TINY, "--set", "iterations=20", "--set", "modes=2"]) == 0
    return out / "final.gbn"


def read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


# train


def test_train_writes_records_checkpoint_and_manifest(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nhidden=16\ndepth=2\nbatch_size=32\nn_data=400\niterations=12\ncheckpoint_every=5\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--seed", "3"]) == 0
    m = manifest(tmp_path, "train")
    assert m["status"] == "ok" and m["exit_code"] == 0 and m["seed"] == 3 and m["ali_mode"] is False
    for path in m["outputs"]:
        assert (tmp_path / path.split("/")[-1]).exists()
    assert {p.split("/")[-1] for p in m["outputs"]} == {
        "records.jsonl", "checkpoint_0000005.gbn", "checkpoint_0000010.gbn", "final.gbn"}
    records = [json.loads(line) for line in (tmp_path / "records.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in records] == list(range(12))


def test_manifest_config_reproduces_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--out", str(a), *TINY, "--set", "iterations=8"]) == 0
    cfg = tmp_path / "from_manifest.cfg"
    cfg.write_text(manifest(a, "train")["config"])
    assert main(["train", "--out", str(b), "--config", str(cfg)]) == 0
    assert manifest(a, "train")["checkpoint_sha256"] == manifest(b, "train")["checkpoint_sha256"]
    assert (a / "final.gbn").read_bytes() == (b / "final.gbn").read_bytes()


def test_single_step_override_sets_ali_flag(tmp_path):
    assert main(["train", "--out", str(tmp_path), *TINY, "--set", "iterations=2", "--set", "n_steps=1"]) == 0
    assert manifest(tmp_path, "train")["ali_mode"] is True


def test_missing_config_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main(["train", "--config", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err
    m = manifest(tmp_path, "train")
    assert m["status"] == "failed" and m["exit_code"] == 2


@pytest.mark.parametrize("bad", [["--set", "n_stepz=3"], ["--set", "lr=fast"], ["--set", "novalue"],
                                 ["--bogus-flag"]])
def test_bad_arguments_exit_2(tmp_path, capsys, bad):
    assert main(["train", "--out", str(tmp_path), *bad]) == 2
    err = capsys.readouterr().err
    if bad[0] == "--set" and "=" in bad[1]:
        assert bad[1].split("=")[0] in err


def test_env_var_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv("GIBBSNET_OUT", str(tmp_path / "envout"))
    assert main(["oracle", "--nx", "2", "--nz", "2"]) == 0
    assert (tmp_path / "envout" / "oracle.json").exists()


def test_smoke_200_iterations_under_a_minute(tmp_path):
    start = time.perf_counter()
    assert main(["train", "--out", str(tmp_path), "--set", "iterations=200"]) == 0
    assert time.perf_counter() - start < 60


def test_divergence_exits_3(tmp_path):
    # weights of order 1e200 overflow the activations to inf within a few iterations
    with np.errstate(over="ignore", invalid="ignore"):
        code = main(["train", "--out", str(tmp_path), *TINY, "--set", "iterations=200", "--set", "lr=1e200",
                     "--set", "checkpoint_every=1"])
    assert code == 3
    m = manifest(tmp_path, "train")
    assert m["status"] == "failed" and "non-finite" in m["message"]


# sample


def test_sample_rows_and_plots(tmp_path, tiny_ckpt):
    assert main(["sample", "--checkpoint", str(tiny_ckpt), "--out", str(tmp_path), "--steps", "10",
                 "--count", "7", "--probes", "1,4,10"]) == 0
    header, rows = read_rows(tmp_path / "trajectory.csv")
    assert header == ["step", "index", "x0", "x1", "z0", "z1"]
    assert len(rows) == 7 * 3
    assert sorted(set(rows[:, 0])) == [1, 4, 10]
    assert (tmp_path / "samples.png").stat().st_size > 0 and (tmp_path / "coverage.png").exists()
    cov_header, cov = read_rows(tmp_path / "coverage.csv")
    assert cov_header == ["step", "mode0", "mode1", "unassigned"]
    assert cov[:, 0].tolist() == [1, 4, 10]
    np.testing.assert_allclose(cov[:, 1:].sum(axis=1), 1.0, atol=1e-12)
    m = manifest(tmp_path, "sample")
    assert m["checkpoint_sha256"] and len(m["outputs"]) == 4


def test_sample_default_probes(tmp_path, tiny_ckpt):
    assert default_probes(20) == [1, 2, 5, 10, 20]
    assert default_probes(7) == [1, 2, 5, 7]
    assert main(["sample", "--checkpoint", str(tiny_ckpt), "--out", str(tmp_path), "--steps", "20",
                 "--count", "5", "--no-plots"]) == 0
    assert len(read_rows(tmp_path / "trajectory.csv")[1]) == 5 * 5
    assert not (tmp_path / "samples.png").exists()


def test_sample_rejects_zero_steps(tmp_path, tiny_ckpt):
    assert main(["sample", "--checkpoint", str(tiny_ckpt), "--out", str(tmp_path), "--steps", "0"]) == 2


def test_corrupt_checkpoint_exits_4(tmp_path, tiny_ckpt):
    bad = tmp_path / "bad.gbn"
    data = bytearray(tiny_ckpt.read_bytes())
    data[len(data) // 2] ^= 0xFF
    bad.write_bytes(bytes(data))
    assert main(["sample", "--checkpoint", str(bad), "--out", str(tmp_path)]) == 4
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path)]) == 4
    assert main(["sample", "--checkpoint", str(tmp_path / "absent.gbn"), "--out", str(tmp_path)]) == 2


# inpaint


def write_obs(path, rows):
    with open(path, "w") as fh:
        fh.write("x0,x1\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")


def test_inpaint_keeps_observed_column(tmp_path, tiny_ckpt):
    obs = np.array([[0.0, 1.2345678901234567], [9.0, -0.1], [0.5, 3.3]])
    write_obs(tmp_path / "obs.csv", obs)
    assert main(["inpaint", "--checkpoint", str(tiny_ckpt), "--observations", str(tmp_path / "obs.csv"),
                 "--mask", "01", "--steps", "6", "--repeat", "2", "--out", str(tmp_path)]) == 0
    _, rows = read_rows(tmp_path / "inpaint.csv")
    assert len(rows) == 3 * 2 * 6
    expected = np.repeat(obs[:, 1], 2)
    for step in range(1, 7):
        at = rows[rows[:, 0] == step]
        assert np.array_equal(at[:, 3], expected)


def test_inpaint_all_observed_rows_constant(tmp_path, tiny_ckpt):
    obs = np.array([[0.25, -1.5], [2.0, 0.125]])
    write_obs(tmp_path / "obs.csv", obs)
    assert main(["inpaint", "--checkpoint", str(tiny_ckpt), "--observations", str(tmp_path / "obs.csv"),
                 "--mask", "1,1", "--steps", "4", "--out", str(tmp_path), "--no-plots"]) == 0
    _, rows = read_rows(tmp_path / "inpaint.csv")
    for step in range(1, 5):
        assert np.array_equal(rows[rows[:, 0] == step][:, 2:4], obs)


def test_inpaint_mask_width_mismatch(tmp_path, tiny_ckpt):
    write_obs(tmp_path / "obs.csv", [[0.0, 1.0]])
    args = ["inpaint", "--checkpoint", str(tiny_ckpt), "--observations", str(tmp_path / "obs.csv"),
            "--out", str(tmp_path)]
    assert main(args + ["--mask", "011"]) == 2
    assert main(args + ["--mask", "0x"]) == 2
    assert parse_mask("T,f").tolist() == [True, False]


# oracle


def run_oracle(tmp_path, capsys, *args):
    code = main(["oracle", "--out", str(tmp_path), *args])
    return code, json.loads(capsys.readouterr().out)


def test_oracle_consistent_12_state_model(tmp_path, capsys):
    code, report = run_oracle(tmp_path, capsys, "--nx", "4", "--nz", "3", "--seed", "5")
    assert code == 0
    for key in ("data_marginal_tv", "odd_pair_tv", "conditional_deviation", "stationary_joint_tv"):
        assert report[key] < 1e-10
    assert json.loads((tmp_path / "oracle.json").read_text()) == report


def test_oracle_perturbed_reports_without_failing(tmp_path, capsys):
    code, report = run_oracle(tmp_path, capsys, "--nx", "4", "--nz", "3", "--perturb", "0.4",
                              "--simulate", "20000")
    assert code == 0
    assert report["conditional_deviation"] > 1e-3 and report["simulated_tv"] < 0.05


def test_oracle_trivial_and_invalid_models(tmp_path, capsys):
    code, report = run_oracle(tmp_path, capsys, "--nx", "1", "--nz", "1")
    assert code == 0 and report["data_marginal_tv"] == 0.0 and report["conditional_deviation"] == 0.0
    model = tmp_path / "m.json"
    model.write_text(json.dumps({"p_x_given_z": [[1.0, 0.0], [0.5, 0.5]], "q_z_given_x": [[0.5, 0.5], [0.5, 0.5]],
                                 "data_dist": [0.5, 0.5]}))
    assert main(["oracle", "--model", str(model), "--out", str(tmp_path)]) == 2


# eval


def test_eval_is_deterministic_and_complete(tmp_path, tiny_ckpt):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["eval", "--checkpoint", str(tiny_ckpt), "--out", str(out), "--samples", "200",
                     "--chain-steps", "20", "--probe-every", "10"]) == 0
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    names = [json.loads(line)["name"] for line in (a / "metrics.jsonl").read_text().splitlines()]
    assert names == ["mmd_rbf", "mode_coverage", "histogram_kl", "linear_probe", "long_chain_stability"]


def test_eval_dimension_mismatch(tmp_path, tiny_ckpt):
    args = ["eval", "--checkpoint", str(tiny_ckpt), "--out", str(tmp_path), "--set", "dataset=idx",
            "--set", f"idx_path={tmp_path / 'img.idx'}"]
    from gibbsnet.data import write_idx_images
    write_idx_images(tmp_path / "img.idx", np.zeros((5, 3, 3), dtype=np.uint8))
    assert main(args) == 2


def test_trained_checkpoint_beats_untrained_on_mmd(tmp_path):
    cfg = TrainConfig(hidden=32, depth=2, iterations=1500, lr=2e-4, modes=4, n_data=2000,
                      generator_loss="non_saturating")
    untrained = tmp_path / "init.gbn"
    ds = build_dataset(cfg)
    nets = build_networks(cfg, ds.dim)
    save_checkpoint(untrained, cfg, nets, build_optimizers(cfg, nets), 0)
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(cfg.to_text())
    assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "t")]) == 0
    values = {}
    for name, ckpt in (("untrained", untrained), ("trained", tmp_path / "t" / "final.gbn")):
        out = tmp_path / name
        assert main(["eval", "--checkpoint", str(ckpt), "--out", str(out), "--samples", "500",
                     "--chain-steps", "10", "--probe-every", "5"]) == 0
        rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        values[name] = rows[0]["value"]
    assert values["trained"] < values["untrained"]
