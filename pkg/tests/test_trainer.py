import json

import numpy as np
import numpy.testing as npt
import pytest

from gibbsnet import diffcore as dc
from gibbsnet import trainer
from gibbsnet.chains import initial_state, transition, unclamped_chain
from gibbsnet.checkpoint import load_checkpoint
from gibbsnet.data import gaussian_mixture
from gibbsnet.errors import ConfigError, TrainingDiverged
from gibbsnet.nets import discriminate, make_decoder, make_discriminator, make_encoder
from gibbsnet.trainer import TrainConfig, ali_train_step, build_dataset, parse_config_text, train, train_step
from gradcheck import TOL

SMALL = dict(hidden=16, depth=2, batch_size=32, n_data=500, modes=4)


def small(**kw):
    return TrainConfig(**{**SMALL, **kw})


def params_of(nets):
    return {(role, name): t.data.copy() for role, net in nets.items() for name, t in net.named_tensors()}


def assert_same_params(a, b):
    assert a.keys() == b.keys()
    for key in a:
        assert np.array_equal(a[key], b[key]), key


# configuration


def test_config_text_round_trip():
    cfg = small(lr=3e-4, label_modeling=True, generator_loss="non_saturating")
    again = TrainConfig.from_mapping(parse_config_text(cfg.to_text()))
    assert again == cfg and again.config_hash() == cfg.config_hash()


def test_config_parsing_comments_and_errors():
    values = parse_config_text("# header\nn_steps = 5  # inline\n\nlr=1e-3\n")
    assert values == {"n_steps": "5", "lr": "1e-3"}
    assert TrainConfig.from_mapping(values).n_steps == 5
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_mapping({"bogus": "1"})
    with pytest.raises(ConfigError, match="n_steps"):
        TrainConfig.from_mapping({"n_steps": "three"})
    with pytest.raises(ConfigError, match="decoder_stochastic"):
        TrainConfig.from_mapping({"decoder_stochastic": "maybe"})
    with pytest.raises(ConfigError):
        parse_config_text("n_steps 3")


def test_config_invariants():
    for bad in (dict(n_steps=0), dict(iterations=0), dict(dim_z=0), dict(dataset="cifar"), dict(dataset="idx")):
        with pytest.raises(ConfigError):
            small(**bad)
    assert small(n_steps=1).ali_mode and not small().ali_mode


# single iteration


def test_one_step_keeps_shapes_and_finiteness():
    cfg = small()
    ds = build_dataset(cfg)
    nets = trainer.build_networks(cfg, ds.dim)
    before = params_of(nets)
    rec = train_step(nets, trainer.build_optimizers(cfg, nets), ds, cfg, 0)
    after = params_of(nets)
    assert np.isfinite(rec.disc_loss) and np.isfinite(rec.gen_loss)
    for key in before:
        assert after[key].shape == before[key].shape and np.all(np.isfinite(after[key]))
    assert any(not np.array_equal(before[k], after[k]) for k in before)
    json.loads(rec.to_json())


def test_zero_learning_rate_changes_nothing():
    cfg = small(lr=0.0, iterations=3)
    ds = build_dataset(cfg)
    init = params_of(trainer.build_networks(cfg, ds.dim))
    assert_same_params(params_of(train(cfg, ds).nets), init)


def test_updates_are_parameter_disjoint(monkeypatch):
    cfg = small(disc_steps=2)
    ds = build_dataset(cfg)
    nets = trainer.build_networks(cfg, ds.dim)
    opts = trainer.build_optimizers(cfg, nets)
    role_of = {id(t): role for role, net in nets.items() for t in net.tensors()}
    calls = []
    real_step = trainer.adam_step

    def spy(params, grads, state):
        calls.append(({role_of[id(p)] for p in params}, params_of(nets)))
        return real_step(params, grads, state)

    monkeypatch.setattr(trainer, "adam_step", spy)
    train_step(nets, opts, ds, cfg, 0)
    assert [roles for roles, _ in calls] == [{"discriminator"}] * 2 + [{"encoder"}, {"decoder"}]
    # nothing outside the discriminator moved during its steps
    after_disc = calls[2][1]
    for key, value in calls[0][1].items():
        if key[0] != "discriminator":
            assert np.array_equal(value, after_disc[key]), key
    # the generator phase left the discriminator untouched
    final = params_of(nets)
    for key, value in after_disc.items():
        if key[0] == "discriminator":
            assert np.array_equal(value, final[key]), key


# ALI reduction


@pytest.mark.parametrize("extra", [{}, dict(label_modeling=True, modes=3, share_batches=False)])
def test_single_step_chain_reproduces_ali_trainer(extra):
    cfg = small(n_steps=1, iterations=100 if not extra else 25, **extra)
    ds = build_dataset(cfg)
    gibbs = train(cfg, ds, step_fn=train_step)
    ali = train(cfg, ds, step_fn=ali_train_step)
    assert_same_params(params_of(gibbs.nets), params_of(ali.nets))
    assert [(r.disc_loss, r.gen_loss) for r in gibbs.records] == [(r.disc_loss, r.gen_loss) for r in ali.records]


def test_longer_chain_differs_from_ali():
    cfg = small(n_steps=3, iterations=5)
    ds = build_dataset(cfg)
    a = params_of(train(cfg, ds).nets)
    b = params_of(train(cfg, ds, step_fn=ali_train_step).nets)
    assert any(not np.array_equal(a[k], b[k]) for k in a)


# gradient support of the unclamped pair


def _chain_nets():
    enc = make_encoder(2, 2, (6,), seed=1, activation="tanh")
    dec = make_decoder(2, 2, (6,), seed=2, activation="tanh")
    disc = make_discriminator(2, 2, (6,), seed=3, activation="tanh")
    return enc, dec, disc


@pytest.mark.parametrize("n", [2, 3, 5])
def test_unclamped_gradient_support_is_final_step(n):
    enc, dec, disc = _chain_nets()
    seed = 17
    with dc.Tape() as tape:
        fake, traj = unclamped_chain(enc, dec, n, 5, seed)
        out = discriminate(disc, fake.x, fake.z)
        loss = dc.reduce_sum(out)
    grads = tape.backward(loss)
    nodes = tape.reachable(loss)
    # one encoder pass, one decoder pass, one discriminator pass
    assert [nd.op for nd in nodes].count("matmul") == 3 * 2
    for net in (enc, dec, disc):
        assert all(grads.reached(p) for p in net.tensors())

    # finite differences of the final transition alone, with x_{N-1} held fixed
    prev = traj[-2]
    trainable = enc.tensors() + dec.tensors()

    def one_step():
        with dc.no_grad():
            s = transition(enc, dec, prev, seed)
            return float(discriminate(disc, s.x, s.z).data.sum())

    numeric = dc.numerical_gradient(one_step, trainable, step=1e-6)
    err = max(dc.max_relative_error(grads[p], g) for p, g in zip(trainable, numeric))
    assert err < TOL

    # differentiating the whole chain would give a different answer
    def whole_chain():
        with dc.no_grad():
            f, _ = unclamped_chain(enc, dec, n, 5, seed)
            return float(discriminate(disc, f.x, f.z).data.sum())

    full = dc.numerical_gradient(whole_chain, trainable, step=1e-6)
    assert max(dc.max_relative_error(grads[p], g) for p, g in zip(trainable, full)) > 0.01


def test_single_step_chain_gradient_skips_encoder():
    enc, dec, disc = _chain_nets()
    with dc.Tape() as tape:
        fake, _ = unclamped_chain(enc, dec, 1, 4, 0)
        loss = dc.reduce_sum(discriminate(disc, fake.x, fake.z))
    grads = tape.backward(loss)
    assert not any(grads.reached(p) for p in enc.tensors())
    assert all(grads.reached(p) for p in dec.tensors())


def test_initial_state_is_step_one():
    _, dec, _ = _chain_nets()
    assert initial_state(dec, 3, 0).step == 1


# determinism, resume, divergence


def test_full_run_is_reproducible():
    cfg = small(iterations=20, eval_every=10)
    ds = build_dataset(cfg)
    a, b = train(cfg, ds), train(cfg, ds)
    assert_same_params(params_of(a.nets), params_of(b.nets))
    assert [r.metrics for r in a.records] == [r.metrics for r in b.records]
    assert "joint_mmd" in a.records[9].metrics
    c = train(cfg.replace(seed=1), ds)
    assert params_of(c.nets)[("decoder", "0.weight")].tolist() != params_of(a.nets)[("decoder", "0.weight")].tolist()


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = small(iterations=30, checkpoint_every=10)
    ds = build_dataset(cfg)
    straight = train(cfg, ds)
    partial = train(cfg, ds, out_dir=tmp_path, stop_at=20)
    assert partial.iteration == 20
    ckpt = load_checkpoint(tmp_path / "checkpoint_0000020.gbn")
    assert ckpt.iteration == 20
    resumed = train(cfg, ds, resume=ckpt)
    assert resumed.iteration == 30
    assert_same_params(params_of(resumed.nets), params_of(straight.nets))
    for role in ("encoder", "decoder", "discriminator"):
        s, r = straight.opts[role], resumed.opts[role]
        assert s.step_count == r.step_count
        for a, b in zip(s.first_moment + s.second_moment, r.first_moment + r.second_moment):
            npt.assert_array_equal(a, b)
    assert [x.gen_loss for x in resumed.records] == [x.gen_loss for x in straight.records[20:]]


def test_linear_schedule_reaches_zero_after_last_iteration():
    cfg = small(iterations=4, lr=2e-4, lr_schedule="linear")
    assert [trainer.scheduled_lr(cfg, i) for i in range(4)] == pytest.approx([2e-4, 1.5e-4, 1e-4, 0.5e-4])
    assert trainer.scheduled_lr(cfg.replace(lr_schedule="constant"), 3) == 2e-4
    with pytest.raises(ConfigError, match="lr_schedule"):
        small(lr_schedule="cosine")


def test_linear_schedule_is_applied_and_resumes_exactly(tmp_path):
    cfg = small(iterations=12, checkpoint_every=6, lr_schedule="linear")
    ds = build_dataset(cfg)
    seen = []

    def spy(nets, opts, dataset, config, it):
        seen.append(opts["decoder"].lr)
        return train_step(nets, opts, dataset, config, it)

    straight = train(cfg, ds, step_fn=spy)
    assert seen == pytest.approx([cfg.lr * (1 - i / 12) for i in range(12)])
    train(cfg, ds, out_dir=tmp_path, stop_at=6)
    resumed = train(cfg, ds, resume=load_checkpoint(tmp_path / "checkpoint_0000006.gbn"))
    assert_same_params(params_of(resumed.nets), params_of(straight.nets))


def test_non_finite_loss_aborts_with_last_checkpoint(tmp_path):
    cfg = small(iterations=10, checkpoint_every=3)
    ds = build_dataset(cfg)

    def poisoned(nets, opts, dataset, config, it):
        if it == 7:
            nets.discriminator.layers[-1][1].data[:] = np.nan
        return train_step(nets, opts, dataset, config, it)

    with pytest.raises(TrainingDiverged) as info:
        train(cfg, ds, out_dir=tmp_path, step_fn=poisoned)
    assert "iteration 7" in str(info.value)
    assert info.value.last_checkpoint.endswith("checkpoint_0000006.gbn")


def test_label_modeling_requires_labels():
    cfg = small(label_modeling=True, dataset="moons")
    ds = gaussian_mixture(2, 50, seed=0, labeled=False)
    with pytest.raises(ConfigError):
        train(cfg, ds)


def test_label_modeling_runs_both_label_losses():
    for loss in ("expected_softmax", "importance_weighted"):
        cfg = small(label_modeling=True, modes=3, label_loss=loss, iterations=3)
        res = train(cfg)
        assert res.nets.decoder.n_labels == 3
        assert all(np.isfinite(r.gen_loss) for r in res.records)
