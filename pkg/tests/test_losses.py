import math

import numpy as np
import numpy.testing as npt
import pytest

from gibbsnet import diffcore as dc
from gibbsnet.diffcore import Tensor
from gibbsnet.errors import ConfigError, ContractError, DimensionError
from gibbsnet.losses import (AdamState, LossConfig, adam_step, disc_loss, encoder_clamped_loss, gen_loss,
                             importance_weighted_label_loss, importance_weights)
from gradcheck import TOL, check_gradients


def test_disc_loss_at_chance_is_two_log_two():
    half = Tensor(np.full((4, 1), 0.5))
    assert disc_loss(half, half).item() == pytest.approx(2 * math.log(2), rel=1e-15)


def test_disc_loss_perfect_discriminator_is_near_zero():
    assert disc_loss(Tensor([[1 - 1e-12]]), Tensor([[1e-12]])).item() < 1e-11


def test_generator_losses_at_boundary():
    half = Tensor(np.full((3, 1), 0.5))
    assert gen_loss(half, "boundary_seeking").item() == 0.0
    assert gen_loss(half, "non_saturating").item() == pytest.approx(math.log(2), rel=1e-15)
    assert encoder_clamped_loss(half, "non_saturating").item() == pytest.approx(math.log(2), rel=1e-15)


def test_boundary_seeking_gradient_points_to_half():
    for value, sign in ((0.3, -1.0), (0.7, 1.0)):
        d = Tensor([[value]], requires_grad=True)
        with dc.Tape() as tape:
            loss = gen_loss(d, "boundary_seeking")
        # descent direction -grad moves D toward 0.5
        assert np.sign(tape.backward(loss)[d][0, 0]) == sign


def test_boundary_seeking_is_nonnegative():
    d = Tensor(np.random.default_rng(0).uniform(0.01, 0.99, size=(50, 1)))
    assert gen_loss(d, "boundary_seeking").item() >= 0.0


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(0.1, 0.9, size=(6, 1)), requires_grad=True)
    b = Tensor(rng.uniform(0.1, 0.9, size=(6, 1)), requires_grad=True)
    assert check_gradients(lambda: disc_loss(a, b), [a, b]) < TOL
    for kind in ("boundary_seeking", "non_saturating"):
        assert check_gradients(lambda: gen_loss(a, kind), [a]) < TOL
        assert check_gradients(lambda: encoder_clamped_loss(b, kind), [b]) < TOL


def test_probability_contract():
    with pytest.raises(ContractError):
        disc_loss(Tensor([[1.5]]), Tensor([[0.5]]))
    with pytest.raises(ContractError):
        gen_loss(Tensor([[np.nan]]))
    with pytest.raises(ConfigError):
        gen_loss(Tensor([[0.5]]), "wasserstein")


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(disc_steps_per_gen_step=0)
    with pytest.raises(ConfigError):
        LossConfig(label_loss="gumbel")


def test_importance_weights():
    npt.assert_allclose(importance_weights(np.full((2, 4), 0.3)), 0.25)
    w = importance_weights(np.random.default_rng(0).uniform(0.01, 0.99, size=(5, 7)))
    npt.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
    # ratio D/(1-D): 0.5 -> 1, 0.8 -> 4
    npt.assert_allclose(importance_weights(np.array([[0.5, 0.8]])), [[0.2, 0.8]])


def test_importance_weighted_loss_limit():
    logits = Tensor(np.array([[0.3, -1.0, 2.0]]), requires_grad=True)
    labels = np.array([[1, 0, 2]])
    d = np.array([[1 - 1e-12, 1e-12, 1e-12]])
    loss = importance_weighted_label_loss(logits, labels, d, 3)
    expected = -dc.log_softmax(logits).data[0, 1]
    assert loss.item() == pytest.approx(expected, rel=1e-9)
    with pytest.raises(ConfigError):
        importance_weighted_label_loss(logits, labels[:, :1], d[:, :1], 1)
    with pytest.raises(DimensionError):
        importance_weighted_label_loss(logits, labels, d[:, :2], 3)


def test_importance_weighted_loss_gradient_reaches_logits_only():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    labels = rng.integers(0, 3, size=(4, 5))
    d = rng.uniform(0.1, 0.9, size=(4, 5))
    assert check_gradients(lambda: importance_weighted_label_loss(logits, labels, d, 5), [logits]) < TOL


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.arange(3.0), requires_grad=True)
    state = AdamState.for_params([p], lr=0.1)
    adam_step([p], [np.zeros(3)], state)
    npt.assert_array_equal(p.data, np.arange(3.0))
    assert state.step_count == 1


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.zeros(4), requires_grad=True)
    state = AdamState.for_params([p], lr=0.01)
    adam_step([p], [np.array([3.0, -0.2, 1e-3, -50.0])], state)
    npt.assert_allclose(p.data, [-0.01, 0.01, -0.01, 0.01], rtol=1e-4)


def test_adam_minimizes_quadratic():
    w = Tensor(np.zeros(1), requires_grad=True)
    state = AdamState.for_params([w], lr=0.05)
    for _ in range(2000):
        adam_step([w], [2.0 * (w.data - 3.0)], state)
    assert abs(w.data[0] - 3.0) < 1e-3


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(DimensionError):
        adam_step([p], [np.zeros(4)], AdamState.for_params([p]))
