import numpy as np
import pytest

from aacher.networks import (AdcpParseError, AdcpSpec, Ensemble, TrainingBatch, actor_avg,
                             actor_objective_grads, critic_loss_grads,
                             actor_update, critic_avg, critic_l2, critic_target, critic_update,
                             parse_adcp, soft_update)
from aacher.numcore import ContractViolation, MlpParams, mlp_forward
from aacher.rng import Rng

OBS, ACT = 5, 2


def make_ensemble(d=2, p=3, seed=0, hidden=(8, 8), max_action=1.0):
    return Ensemble.create(AdcpSpec(d, p), OBS, ACT, max_action, hidden, Rng(seed))


def random_batch(n=4, seed=1, reward=None):
    rng = Rng(seed)
    r = -rng.integers(0, 2, size=n).astype(float) if reward is None else np.full(n, float(reward))
    return TrainingBatch(sg=rng.normal(size=(n, OBS)), action=rng.uniform(-1, 1, (n, ACT)),
                         reward=r, next_sg=rng.normal(size=(n, OBS)))


def member_q(params: MlpParams, sg, a, max_action):
    out, _ = mlp_forward(params, np.concatenate([sg, a / max_action], axis=-1))
    return out[..., 0]


def member_action(params, sg, max_action):
    return max_action * mlp_forward(params, sg)[0]


def set_output_bias(params, i, value):
    # zero final weights so member i outputs a constant
    params.weights[-1][i] = 0.0
    params.biases[-1][i] = value


# --- ADCP --------------------------------------------------------------------

@pytest.mark.parametrize("text,expected", [("A2C3", (2, 3)), ("A1C1", (1, 1)), ("A10C10", (10, 10)),
                                           ("a4c2", (4, 2))])
def test_parse_adcp(text, expected):
    spec = parse_adcp(text)
    assert (spec.d, spec.p) == expected
    assert str(spec) == f"A{expected[0]}C{expected[1]}"


@pytest.mark.parametrize("bad", ["AXC1", "A0C1", "A2", "C3A2", "", "A2C3x"])
def test_parse_adcp_rejects(bad):
    with pytest.raises(AdcpParseError, match="A<actors>C<critics>|>= 1"):
        parse_adcp(bad)


# --- averaging ---------------------------------------------------------------

def test_targets_start_as_copies():
    ens = make_ensemble()
    for m, t in zip(ens.actors.tensors() + ens.critics.tensors(),
                    ens.target_actors.tensors() + ens.target_critics.tensors()):
        np.testing.assert_array_equal(m, t)
        assert m is not t


def test_members_are_distinct():
    ens = make_ensemble(d=3)
    w = ens.actors.weights[0]
    assert not np.array_equal(w[0], w[1])


def test_actor_avg_single_actor_is_that_actor():
    ens = make_ensemble(d=1)
    sg = Rng(3).normal(size=OBS)
    np.testing.assert_array_equal(actor_avg(ens, sg), member_action(ens.actors.member(0), sg, 1.0))


def test_actor_avg_identical_actors():
    ens = make_ensemble(d=1)
    twin = Ensemble(AdcpSpec(2, 3), MlpParams.stack([ens.actors.member(0)] * 2), ens.critics.copy())
    sg = Rng(3).normal(size=(6, OBS))
    np.testing.assert_allclose(actor_avg(twin, sg), actor_avg(ens, sg), rtol=0, atol=1e-15)


def test_actor_avg_of_constant_actors():
    ens = Ensemble.create(AdcpSpec(2, 1), OBS, 1, 1.0, (8,), Rng(0))
    set_output_bias(ens.actors, 0, np.arctanh(0.2))
    set_output_bias(ens.actors, 1, np.arctanh(-0.6))
    out = actor_avg(ens, np.zeros(OBS))
    assert out[0] == pytest.approx(-0.2, abs=1e-12)


def test_critic_avg_of_constant_critics():
    ens = make_ensemble(p=2)
    set_output_bias(ens.critics, 0, 1.0)
    set_output_bias(ens.critics, 1, 3.0)
    assert critic_avg(ens, np.zeros(OBS), np.zeros(ACT)) == 2.0


def test_critic_avg_single_and_zero():
    ens = make_ensemble(p=1)
    sg, a = Rng(4).normal(size=OBS), np.array([0.3, -0.2])
    assert critic_avg(ens, sg, a) == member_q(ens.critics.member(0), sg, a, 1.0)
    ens.critics = ens.critics.map(np.zeros_like)
    assert critic_avg(ens, sg, a) == 0.0


def test_actor_avg_bounded_by_max_action():
    ens = make_ensemble(d=4, max_action=2.5)
    ens.actors = ens.actors.map(lambda a: a * 50)  # saturate the tanh
    out = actor_avg(ens, Rng(2).normal(size=(100, OBS)) * 10)
    assert np.abs(out).max() <= 2.5


def test_shape_mismatch():
    ens = make_ensemble()
    with pytest.raises(ContractViolation):
        actor_avg(ens, np.zeros(OBS + 1))
    with pytest.raises(ContractViolation):
        critic_avg(ens, np.zeros(OBS), np.zeros(ACT + 1))


def test_permutation_invariance():
    ens = make_ensemble(d=3, p=4, seed=5)
    perm_a, perm_c = [2, 0, 1], [3, 1, 0, 2]
    shuffled = Ensemble(ens.adcp, ens.actors.map(lambda a: a[perm_a]), ens.critics.map(lambda a: a[perm_c]),
                        ens.target_actors.map(lambda a: a[perm_a]), ens.target_critics.map(lambda a: a[perm_c]))
    sg = Rng(6).normal(size=(10, OBS))
    a = actor_avg(ens, sg)
    np.testing.assert_allclose(actor_avg(shuffled, sg), a, rtol=0, atol=1e-12)
    np.testing.assert_allclose(critic_avg(shuffled, sg, a), critic_avg(ens, sg, a), rtol=0, atol=1e-12)
    batch = random_batch(8)
    assert critic_update(shuffled.copy(), batch, 0.98, 1e-3) == pytest.approx(
        critic_update(ens.copy(), batch, 0.98, 1e-3), abs=1e-12)
    assert actor_update(shuffled.copy(), batch, 1e-3) == pytest.approx(
        actor_update(ens.copy(), batch, 1e-3), abs=1e-12)


# --- targets and losses ------------------------------------------------------

def test_critic_target_gamma_zero_is_reward():
    batch = random_batch(6)
    np.testing.assert_array_equal(critic_target(make_ensemble(), batch, 0.0), batch.reward)


def test_critic_target_arithmetic():
    ens = make_ensemble(p=2)
    set_output_bias(ens.target_critics, 0, -8.0)
    set_output_bias(ens.target_critics, 1, -12.0)
    y = critic_target(ens, random_batch(3, reward=-1.0), 0.98)
    np.testing.assert_allclose(y, -10.8, rtol=0, atol=1e-12)


def test_critic_target_success_with_zero_value():
    ens = make_ensemble(p=1)
    set_output_bias(ens.target_critics, 0, 0.0)
    assert critic_target(ens, random_batch(2, reward=0.0), 0.98).tolist() == [0.0, 0.0]


def test_critic_target_clipped_to_return_range():
    ens = make_ensemble(p=1)
    set_output_bias(ens.target_critics, 0, 40.0)
    assert critic_target(ens, random_batch(2, reward=0.0), 0.9).tolist() == [0.0, 0.0]
    set_output_bias(ens.target_critics, 0, -400.0)
    np.testing.assert_allclose(critic_target(ens, random_batch(2, reward=-1.0), 0.9), -10.0)


def straight_line_critic_loss(ens, batch, gamma, l2):
    p, d, m = ens.adcp.p, ens.adcp.d, ens.max_action
    total = 0.0
    for i in range(len(batch)):
        a_next = sum(member_action(ens.target_actors.member(j), batch.next_sg[i], m) for j in range(d)) / d
        q_next = sum(member_q(ens.target_critics.member(j), batch.next_sg[i], a_next, m) for j in range(p)) / p
        y = min(max(batch.reward[i] + gamma * q_next, -1 / (1 - gamma)), 0.0)
        q = sum(member_q(ens.critics.member(j), batch.sg[i], batch.action[i], m) for j in range(p)) / p
        total += (y - q) ** 2
    reg = l2 * sum(float((w ** 2).sum()) for w in ens.critics.weights)
    return total / len(batch) + reg


@pytest.mark.parametrize("d,p,l2", [(1, 1, 0.0), (2, 3, 0.0), (2, 3, 0.01)])
def test_critic_loss_matches_straight_line(d, p, l2):
    ens = make_ensemble(d, p, seed=7, max_action=1.5)
    batch = random_batch(4, seed=8)
    expected = straight_line_critic_loss(ens, batch, 0.98, l2)
    assert critic_update(ens, batch, 0.98, 1e-3, l2) == pytest.approx(expected, abs=1e-10)


def test_critic_update_leaves_actors_and_targets():
    ens = make_ensemble()
    before = ens.copy()
    critic_update(ens, random_batch(), 0.98, 1e-3)
    for a, b in zip(ens.actors.tensors() + ens.target_critics.tensors(),
                    before.actors.tensors() + before.target_critics.tensors()):
        np.testing.assert_array_equal(a, b)
    assert not np.array_equal(ens.critics.weights[0], before.critics.weights[0])


def test_critic_l2():
    ens = make_ensemble(p=1, hidden=())
    ens.critics = ens.critics.map(np.zeros_like)
    assert critic_l2(ens, 0.5) == 0.0
    ens.critics.weights[0][0, 0, 0] = 2.0
    ens.critics.biases[0][0, 0] = 100.0  # biases are not penalized
    assert critic_l2(ens, 0.5) == 2.0
    assert critic_l2(ens, 0.0) == 0.0


def test_single_critic_reduces_to_ddpg_loss():
    ens = make_ensemble(1, 1, seed=3)
    batch = random_batch(8)
    m = ens.max_action
    a_next = member_action(ens.target_actors.member(0), batch.next_sg, m)
    y = np.clip(batch.reward + 0.98 * member_q(ens.target_critics.member(0), batch.next_sg, a_next, m), -50, 0)
    q = member_q(ens.critics.member(0), batch.sg, batch.action, m)
    assert critic_update(ens, batch, 0.98, 1e-3) == np.mean((y - q) ** 2)


def straight_line_actor_objective(ens, batch, beta):
    d, p, m = ens.adcp.d, ens.adcp.p, ens.max_action
    total_q, total_pen = 0.0, 0.0
    for i in range(len(batch)):
        mu = sum(member_action(ens.actors.member(j), batch.sg[i], m) for j in range(d)) / d
        total_q += sum(member_q(ens.critics.member(j), batch.sg[i], mu, m) for j in range(p)) / p
        total_pen += float(np.sum((mu / m) ** 2))
    return -total_q / len(batch) + beta * total_pen / len(batch)


@pytest.mark.parametrize("d,p", [(1, 1), (3, 2)])
def test_actor_objective_matches_straight_line(d, p):
    ens = make_ensemble(d, p, seed=9, max_action=2.0)
    ens.actors = ens.actors.map(lambda a: a * 20)  # move actions away from zero
    batch = random_batch(4, seed=10)
    expected = straight_line_actor_objective(ens, batch, 1.0)
    assert actor_update(ens, batch, 1e-3, 1.0) == pytest.approx(expected, abs=1e-10)


def test_actor_update_leaves_critics():
    ens = make_ensemble()
    before = ens.copy()
    actor_update(ens, random_batch(), 1e-3)
    for a, b in zip(ens.critics.tensors() + ens.target_actors.tensors(),
                    before.critics.tensors() + before.target_actors.tensors()):
        np.testing.assert_array_equal(a, b)


def test_actor_gradient_from_constant_critic_is_penalty_only():
    ens = make_ensemble(2, 2, seed=4)
    for i in range(2):
        set_output_bias(ens.critics, i, -3.0)
    no_penalty = ens.copy()
    actor_update(no_penalty, random_batch(), 1e-3, action_l2=0.0)
    # Adam with an all-zero gradient leaves parameters unchanged
    for a, b in zip(no_penalty.actors.tensors(), ens.actors.tensors()):
        np.testing.assert_array_equal(a, b)


def test_actor_update_matches_numerical_gradient_direction():
    """The actor step must increase the averaged Q when the action penalty is off."""
    ens = make_ensemble(2, 2, seed=12)
    batch = random_batch(16, seed=13)
    before = -straight_line_actor_objective(ens, batch, 0.0)
    for _ in range(5):
        actor_update(ens, batch, 1e-3, action_l2=0.0)
    assert -straight_line_actor_objective(ens, batch, 0.0) > before


def test_symmetry_preserved():
    base = make_ensemble(1, 1, seed=2)
    actors = MlpParams.stack([base.actors.member(0)] * 3)
    critics = MlpParams.stack([base.critics.member(0)] * 2)
    ens = Ensemble(AdcpSpec(3, 2), actors, critics)
    for k in range(5):
        batch = random_batch(8, seed=20 + k)
        critic_update(ens, batch, 0.98, 1e-3, 0.01)
        actor_update(ens, batch, 1e-3)
        soft_update(ens, 0.05)
    for params in (ens.actors, ens.critics, ens.target_actors, ens.target_critics):
        for arr in params.tensors():
            for i in range(1, arr.shape[0]):
                np.testing.assert_array_equal(arr[i], arr[0])


def test_non_finite_loss_is_divergence():
    from aacher.numcore import TrainingDivergence

    ens = make_ensemble()
    batch = random_batch()
    batch.sg[0, 0] = np.nan
    with pytest.raises(TrainingDivergence):
        critic_update(ens, batch, 0.98, 1e-3)


# --- soft update ---------------------------------------------------------------

def test_soft_update_tau_one_copies():
    ens = make_ensemble()
    ens.actors = ens.actors.map(lambda a: a + 1.0)
    soft_update(ens, 1.0)
    for m, t in zip(ens.actors.tensors(), ens.target_actors.tensors()):
        np.testing.assert_array_equal(m, t)


def test_soft_update_one_step():
    ens = make_ensemble()
    ens.actors = ens.actors.map(np.ones_like)
    ens.target_actors = ens.actors.map(np.zeros_like)
    soft_update(ens, 0.01)
    for t in ens.target_actors.tensors():
        assert np.all(t == 0.01)


def test_soft_update_two_steps_geometric():
    ens = make_ensemble()
    ens.critics = ens.critics.map(np.ones_like)
    ens.target_critics = ens.critics.map(np.zeros_like)
    soft_update(ens, 0.1)
    soft_update(ens, 0.1)
    for t in ens.target_critics.tensors():
        np.testing.assert_allclose(t, 1 - 0.9 ** 2, rtol=0, atol=1e-15)


def test_soft_update_rejects_bad_tau():
    with pytest.raises(ContractViolation):
        soft_update(make_ensemble(), 0.0)


# --- gradient routing through the averages ----------------------------------

def _fd_check(params, f, grads, h=1e-6):
    from oracles import central_difference, relative_error

    worst = 0.0
    for arr, g in zip(params.tensors(), grads.tensors()):
        worst = max(worst, relative_error(g, central_difference(f, arr, h), floor=1e-6).max())
    return worst


@pytest.mark.parametrize("d,p,l2", [(1, 1, 0.0), (2, 3, 0.05)])
def test_critic_gradient_matches_finite_differences(d, p, l2):
    ens = make_ensemble(d, p, seed=31, hidden=(6, 6), max_action=1.5)
    batch = random_batch(5, seed=32)
    _, grads = critic_loss_grads(ens, batch, 0.9, l2)
    # keep the TD target fixed: only the main critics are perturbed
    f = lambda: critic_loss_grads(ens, batch, 0.9, l2)[0]  # noqa: E731
    assert _fd_check(ens.critics, f, grads) < 1e-4


@pytest.mark.parametrize("d,p", [(1, 1), (3, 2)])
def test_actor_gradient_matches_finite_differences(d, p):
    ens = make_ensemble(d, p, seed=33, hidden=(6, 6), max_action=2.0)
    ens.actors = ens.actors.map(lambda a: a * 10)
    batch = random_batch(5, seed=34)
    _, grads = actor_objective_grads(ens, batch, 0.5)
    f = lambda: actor_objective_grads(ens, batch, 0.5)[0]  # noqa: E731
    assert _fd_check(ens.actors, f, grads) < 1e-4
