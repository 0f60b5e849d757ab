import math

import numpy as np
import pytest

from dmslab import numerics as nm
from dmslab.gates import GateParams, logistic_noise, sample_gate
from dmslab.losses import aux_loss, distill_loss, lm_loss
from dmslab.masks import build_mask, visibility_matrix
from dmslab.numerics import Tape, Tensor, backward
from dmslab.schedule import TrainSchedule, schedule_state
from dmslab.util import rng_for

from util import grad_check


def test_sample_gate_deterministic_values():
    out = sample_gate(Tensor([[-5.0]]), 0.1, deterministic=True)
    assert out.data[0, 0] == pytest.approx(0.0066929, abs=1e-7)
    out = sample_gate(Tensor([[0.0]]), 0.1, deterministic=True)
    assert out.data[0, 0] == 0.5


def test_sample_gate_stochastic_eviction_off_at_init():
    rng = rng_for(0, "test/gate-noise")
    noise = logistic_noise(rng, (100_000,))
    alpha = sample_gate(Tensor(np.full(100_000, -5.0)), 0.1, noise=noise)
    assert np.rint(alpha.data).mean() <= 0.01
    assert (np.rint(alpha.data) == 0).mean() >= 0.99


def test_sample_gate_differentiable_with_frozen_noise():
    rng = rng_for(1, "test/gate-noise")
    noise = logistic_noise(rng, (6,))
    logit = Tensor(np.linspace(-2, 2, 6), requires_grad=True)

    def loss():
        return nm.sum_all(sample_gate(logit, 0.25, noise=noise))

    assert grad_check(loss, {"logit": logit}, [("logit", (i,)) for i in range(6)]) <= 1e-4


def test_sample_gate_requires_noise_or_flag():
    with pytest.raises(ValueError, match="noise"):
        sample_gate(Tensor([0.0]), 0.1)
    with pytest.raises(ValueError, match="temperature"):
        sample_gate(Tensor([0.0]), 0.0, deterministic=True)


def test_build_mask_all_zero_is_pure_causal():
    m = visibility_matrix(np.zeros(5), 2)
    for i in range(5):
        for j in range(5):
            assert m[i, j] == (0.0 if j <= i else -np.inf)


def test_build_mask_binary_first_masked_row():
    dec = np.zeros(6)
    dec[0] = 1.0
    m = visibility_matrix(dec, 4)
    assert all(m[i, 0] == 0.0 for i in range(4))
    assert m[4, 0] == -np.inf and m[5, 0] == -np.inf


def test_build_mask_half_decision_value():
    dec = np.zeros(6)
    dec[0] = 0.5
    m = visibility_matrix(dec, 4)
    assert m[4, 0] == pytest.approx(math.log(0.5), abs=1e-12)
    assert m[4, 0] == pytest.approx(-0.693147, abs=1e-6)


def test_build_mask_clamps_only_when_asked():
    spec = build_mask(np.array([1.0, 0.0]), 1, clamp=True)
    assert spec.decisions.data.max() < 1.0
    spec = build_mask(np.array([1.0, 0.0]), 1, clamp=False)
    assert spec.decisions.data.max() == 1.0
    with pytest.raises(ValueError):
        build_mask(np.array([1.5]), 1)
    with pytest.raises(ValueError):
        build_mask(np.array([0.5]), 0)


def test_mask_entries_nonpositive_property():
    rng = np.random.default_rng(0)
    for _ in range(20):
        dec = rng.uniform(0, 1, size=8)
        m = visibility_matrix(dec, int(rng.integers(1, 5)))
        assert np.all(m[np.isfinite(m)] <= 0.0)


def test_aux_loss_values_and_gradient():
    a = Tensor(np.zeros((4, 1)), requires_grad=True)
    tape = Tape()
    with tape.active():
        loss = aux_loss([a], 0.5, 4)
    assert loss.item() == 2.0
    backward(tape, loss)
    assert np.array_equal(a.grad, -np.ones((4, 1)))  # hinge open: exactly -1 each

    b = Tensor(np.array([[1.0], [1.0], [1.0], [0.0]]), requires_grad=True)
    tape = Tape()
    with tape.active():
        loss = aux_loss([b], 0.5, 4)
    assert loss.item() == 0.0  # hinge closed
    backward(tape, loss)
    assert b.grad is None or np.array_equal(b.grad, np.zeros((4, 1)))


def test_aux_loss_target_matches_cr():
    # final CR 4 corresponds to a target fraction of 1 - 1/4
    assert 1.0 - 1.0 / 4.0 == 0.75
    with pytest.raises(ValueError):
        aux_loss([Tensor(np.zeros((2, 1)))], 1.0, 2)


def test_distill_loss_zero_for_identical():
    logits = Tensor(np.random.default_rng(1).normal(size=(4, 8)))
    assert distill_loss(logits, Tensor(logits.data.copy())).item() == pytest.approx(0.0, abs=1e-15)


def test_distill_loss_clamps_divergence_to_large_finite():
    student = Tensor(np.array([[0.0, -np.inf]]))
    teacher = Tensor(np.array([[0.0, 0.0]]))
    val = distill_loss(student, teacher).item()
    assert np.isfinite(val)
    assert val > 10.0  # half the mass hits the -30 floor


def test_distill_loss_matches_two_loop_oracle():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(4, 8))
    t = rng.normal(size=(4, 8))

    def softmax(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    total = 0.0
    for i in range(4):
        p_t, p_s = softmax(t[i]), softmax(s[i])
        for j in range(8):
            total += p_t[j] * (math.log(p_t[j]) - math.log(p_s[j]))
    expected = total / 4
    assert distill_loss(Tensor(s), Tensor(t)).item() == pytest.approx(expected, abs=1e-12)


def test_distill_loss_gradient():
    rng = np.random.default_rng(3)
    s = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    t = Tensor(rng.normal(size=(3, 5)))
    coords = [("s", (i, j)) for i in range(3) for j in range(5)]
    assert grad_check(lambda: distill_loss(s, t), {"s": s}, coords) <= 1e-4


def test_schedule_examples():
    sched = TrainSchedule(cr_final=8.0, steps_per_cr=100)
    assert schedule_state(0, sched).cr_target == 1.0
    assert schedule_state(0, sched).alpha_star == 0.0
    assert schedule_state(100, sched).cr_target == 2.0
    assert schedule_state(100, sched).alpha_star == 0.5
    assert schedule_state(300, sched).cr_target == 4.0
    assert schedule_state(300, sched).alpha_star == 0.75
    assert schedule_state(700, sched).cr_target == 8.0


def test_schedule_caps_at_final_and_is_monotone():
    sched = TrainSchedule(cr_final=4.0, steps_per_cr=100, neuron_horizon=200)
    assert schedule_state(1000, sched).cr_target == 4.0
    prev_cr, prev_a = 0.0, -1.0
    for t in range(0, 800, 7):
        st = schedule_state(t, sched)
        assert st.cr_target >= prev_cr and st.alpha_star >= prev_a
        prev_cr, prev_a = st.cr_target, st.alpha_star
    assert schedule_state(0, sched).neuron_scale == 1.0
    assert schedule_state(100, sched).neuron_scale == 0.5
    assert schedule_state(400, sched).neuron_scale == 0.0


def test_lm_loss_matches_manual():
    logits = Tensor(np.log(np.array([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1]])))
    targets = np.array([0, 1])
    expected = -(math.log(0.5) + math.log(0.8)) / 2
    assert lm_loss(logits, targets).item() == pytest.approx(expected, abs=1e-12)
