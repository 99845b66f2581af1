# SPDX-License-Identifier: MIT

import hypothesis
import hypothesis.strategies as st
import numpy as np
import pytest

from livemap.agent import (
    STATE_DIM, AgentError, AgentParams, DqnAgent, EpsilonSchedule, InsufficientBufferError, MissingCheckpointError,
    PendingRecord, ReplayBuffer, StateBounds, StateVector, SumTree, Transition, UnknownPendingError, complete_reward,
    select_action, td_target, train_step, update_target,
)
from livemap.neural import DenseNet, OptimizerState


bounds = StateBounds((0.0,) * STATE_DIM, (10.0,) * STATE_DIM)


def make_state(value=5.0, **fields):
    values = dict.fromkeys(StateVector.fields(), value)
    values.update(fields)
    return StateVector(**values)


def make_transition(value=0.0, a=0, r=0.0):
    return Transition(np.full(STATE_DIM, value), a, r, np.full(STATE_DIM, value))


@hypothesis.given(st.lists(st.floats(0, 100), min_size=1, max_size=20))
def test_sum_tree_total(values):
    tree = SumTree(len(values))
    for i, value in enumerate(values):
        tree.update(i, value)
    assert tree.total == pytest.approx(sum(values))
    assert tree.values().tolist() == pytest.approx(values)


def test_sum_tree_find():
    tree = SumTree(3)
    for i, value in enumerate([1.0, 0.0, 3.0]):
        tree.update(i, value)
    assert tree.find([0.0, 0.99, 1.0, 3.99]).tolist() == [0, 0, 2, 2]


def test_sum_tree_rejects_bad_updates():
    tree = SumTree(2)
    with pytest.raises(IndexError):
        tree.update(2, 1.0)
    with pytest.raises(AgentError):
        tree.update(0, -1.0)


def test_sum_tree_find_stays_in_filled_leaves():
    tree = SumTree(8)
    for i in range(3):
        tree.update(i, 1.0)
    assert tree.find([3.0], size=3).tolist() == [2]
    assert tree.find([0.5, 2.5], size=3).tolist() == [0, 2]


def test_sum_tree_restore_matches_updates():
    values = np.random.default_rng(3).uniform(0.0, 2.0, 11)
    incremental = SumTree(11)
    for i, value in enumerate(values.tolist()):
        incremental.update(i, value)
    rebuilt = SumTree(11)
    rebuilt.restore(values)
    assert rebuilt.total == incremental.total
    targets = np.linspace(0.0, incremental.total, 50, endpoint=False)
    assert rebuilt.find(targets).tolist() == incremental.find(targets).tolist()
    with pytest.raises(AgentError):
        rebuilt.restore(values[:5])


def test_normalize_clips():
    state = make_state(5.0, rss_dbm=-20.0, queued_tasks=10.0)
    normalized = bounds.normalize(state)
    assert normalized[0] == -1.0
    assert normalized[-1] == 1.0
    assert normalized[1] == pytest.approx(0.0)


def test_bounds_mapping_round_trip():
    assert StateBounds.from_mapping(bounds.to_mapping()) == bounds
    partial = bounds.to_mapping()
    del partial['rss_dbm']
    with pytest.raises(AgentError):
        StateBounds.from_mapping(partial)


def test_empty_bound_rejected():
    with pytest.raises(AgentError):
        StateBounds((1.0,) * STATE_DIM, (1.0,) * STATE_DIM)


def test_prioritized_sampling_frequencies():
    buffer = ReplayBuffer(16, alpha=0.6)
    priorities = np.random.default_rng(5).uniform(0.1, 5.0, 16)
    for slot, priority in enumerate(priorities.tolist()):
        buffer.add(make_transition(slot))
        buffer.set_priority(slot, priority)
    expected = priorities ** 0.6
    expected /= expected.sum()
    assert buffer.probabilities() == pytest.approx(expected)

    rng = np.random.default_rng(0)
    slots = np.concatenate([buffer.sample_indices(10_000, rng) for _ in range(100)])
    frequencies = np.bincount(slots, minlength=16) / len(slots)
    assert np.allclose(frequencies, expected, rtol=0, atol=0.005)


def test_buffer_is_a_ring():
    buffer = ReplayBuffer(3)
    for i in range(5):
        buffer.add(make_transition(i))
    assert len(buffer) == 3
    assert buffer[0].s[0] == 3.0
    assert buffer[1].s[0] == 4.0
    assert buffer[2].s[0] == 2.0


def test_new_transitions_get_max_weight():
    buffer = ReplayBuffer(4)
    buffer.add(make_transition())
    buffer.update_td([0], [10.0])
    slot = buffer.add(make_transition())
    assert buffer.weight(slot) == pytest.approx(10.0 ** 0.6 + 1e-3)


def test_insufficient_buffer():
    buffer = ReplayBuffer(4)
    buffer.add(make_transition())
    with pytest.raises(InsufficientBufferError):
        buffer.sample_indices(2, np.random.default_rng(0))


class _TopOfRange:
    def random(self, n):
        return np.ones(n)


def test_sampling_never_returns_empty_slots():
    buffer = ReplayBuffer(8)
    for i in range(3):
        buffer.add(make_transition(i + 1.0))
    slots = buffer.sample_indices(3, _TopOfRange())
    assert slots.tolist() == [2, 2, 2]


def test_epsilon_schedule():
    schedule = EpsilonSchedule(0.5, 0.1, 100)
    assert schedule(0) == 0.5
    assert schedule(50) == pytest.approx(0.3)
    assert schedule(100) == 0.1
    assert schedule(10_000) == 0.1


def test_greedy_ties_pick_lowest_action():
    net = DenseNet([2, 3], [np.zeros((2, 3))], [np.array([1.0, 2.0, 2.0])])
    assert select_action(net, np.zeros(2), 0.0, np.random.default_rng(0)) == 1


def test_exploration_is_uniform():
    net = DenseNet([2, 3], [np.zeros((2, 3))], [np.array([0.0, 5.0, 0.0])])
    rng = np.random.default_rng(0)
    counts = np.bincount([select_action(net, np.zeros(2), 1.0, rng) for _ in range(100_000)], minlength=3)
    expected = 100_000 / 3
    chi_square = float(np.sum((counts - expected) ** 2 / expected))
    # 0.1% critical value with two degrees of freedom
    assert chi_square < 13.816
    with pytest.raises(AgentError):
        select_action(net, np.zeros(2), 1.5, rng)


def test_td_target():
    net = DenseNet([2, 2], [np.zeros((2, 2))], [np.array([1.0, 3.0])])
    assert td_target(-2.0, np.zeros(2), net, 0.5) == pytest.approx(-0.5)
    batch = td_target(np.array([0.0, 1.0]), np.zeros((2, 2)), net, 0.9)
    assert batch == pytest.approx([2.7, 3.7])
    with pytest.raises(AgentError):
        td_target(0.0, np.zeros(2), net, 1.0)


def test_update_target_polyak():
    rng = np.random.default_rng(0)
    online = DenseNet.initialize([2, 3, 1], rng)
    target = DenseNet.initialize([2, 3, 1], rng)
    expected = [0.25 * o + 0.75 * t for o, t in zip(online.parameters, target.parameters)]
    update_target(online, target, 0.25)
    for got, want in zip(target.parameters, expected):
        assert np.allclose(got, want)


def test_complete_reward_is_negative_latency():
    pending = PendingRecord(3, np.zeros(STATE_DIM), 2, 100)
    transition = complete_reward(pending, 0.25, np.ones(STATE_DIM))
    assert transition.r == -0.25
    assert transition.a == 2


@pytest.fixture()
def agent():
    params = AgentParams(hidden=(8,), batch_size=4, buffer_capacity=32, epsilon=EpsilonSchedule(0.5, 0.1, 10))
    return DqnAgent.create(params, bounds, 5, np.random.default_rng(0))


def test_agent_pending_cycle(agent):
    state = make_state()
    action = agent.act(state, explore=True)
    assert agent.decisions == 1
    agent.begin(7, 0, state, action, 0)
    transition = agent.complete(7, 0.1, make_state(6.0))
    assert transition.r == -0.1
    assert len(agent.buffer) == 1
    assert agent.pending == {}
    with pytest.raises(UnknownPendingError):
        agent.complete(7, 0.1, state)


def test_greedy_act_does_not_advance_schedule(agent):
    agent.act(make_state(), explore=False)
    assert agent.decisions == 0
    assert agent.epsilon == 0.5


def test_learn_waits_for_a_batch(agent):
    for i in range(3):
        agent.begin(i, 0, make_state(), 0, 0)
        agent.complete(i, 0.1, make_state())
        assert agent.learn() is None
    agent.begin(3, 0, make_state(), 0, 0)
    agent.complete(3, 0.1, make_state())
    assert agent.learn() is not None
    assert agent.train_steps == 1


def test_checkpoint_round_trip(agent, tmp_path):
    agent.act(make_state(), explore=True)
    sidecar = agent.save(tmp_path / 'agent')
    assert sidecar.name == 'agent.toml'
    assert (tmp_path / 'agent.bin').is_file()
    assert (tmp_path / 'agent-target.bin').is_file()
    assert (tmp_path / 'agent-state.npz').is_file()

    loaded = DqnAgent.load(tmp_path / 'agent', np.random.default_rng(1))
    assert loaded.decisions == 1
    assert loaded.params == agent.params
    assert loaded.bounds == bounds
    assert np.array_equal(loaded.q_values(make_state(3.0)), agent.q_values(make_state(3.0)))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingCheckpointError):
        DqnAgent.load(tmp_path / 'agent', np.random.default_rng(0))


def test_resume_matches_uninterrupted_training(tmp_path):
    params = AgentParams(hidden=(8,), batch_size=4, buffer_capacity=16)
    agent = DqnAgent.create(params, bounds, 3, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for i in range(12):
        agent.begin(i, 0, make_state(float(rng.uniform(0, 10))), i % 3, 0)
        agent.complete(i, float(rng.uniform(0.05, 0.5)), make_state(float(rng.uniform(0, 10))))
        agent.learn()
    agent.save(tmp_path / 'agent')

    resumed = DqnAgent.load(tmp_path / 'agent')
    assert resumed.optimizer.step_count == agent.optimizer.step_count == agent.train_steps == 9
    assert len(resumed.buffer) == 12
    assert resumed.learn() == agent.learn()
    for got, want in zip(
        resumed.qnet.parameters + resumed.target_net.parameters,
        agent.qnet.parameters + agent.target_net.parameters,
    ):
        assert np.array_equal(got, want)
    assert np.array_equal(resumed.buffer.probabilities(), agent.buffer.probabilities())


def test_learns_cheaper_action():
    rng = np.random.default_rng(0)
    qnet = DenseNet.initialize([STATE_DIM, 16, 3], rng)
    target = qnet.copy()
    buffer = ReplayBuffer(600)
    for _ in range(600):
        s = rng.uniform(-1, 1, STATE_DIM)
        a = int(rng.integers(3))
        # action 1 is the fastest
        buffer.add(Transition(s, a, -1.0 if a != 1 else -0.1, rng.uniform(-1, 1, STATE_DIM)))
    opt = OptimizerState.for_net(qnet, 1e-2)
    for _ in range(500):
        train_step(qnet, target, buffer, opt, rng, batch_size=32, gamma=0.0)
        update_target(qnet, target, 0.05)
    states = rng.uniform(-1, 1, (50, STATE_DIM))
    assert np.mean(np.argmax(qnet(states), axis=1) == 1) > 0.9


def test_train_step_refreshes_priorities():
    rng = np.random.default_rng(0)
    qnet = DenseNet.initialize([STATE_DIM, 8, 2], rng)
    target = qnet.copy()
    buffer = ReplayBuffer(4, alpha=0.5, floor=1e-3)
    for i in range(4):
        buffer.add(Transition(rng.uniform(-1, 1, STATE_DIM), i % 2, -float(i), rng.uniform(-1, 1, STATE_DIM)))
    before = qnet.copy()
    sample_rng = np.random.default_rng(1)
    slots = buffer.sample_indices(4, np.random.default_rng(1))
    states, actions, rewards, next_states = buffer.batch(slots)
    td = td_target(rewards, next_states, target, 0.9) - before(states)[np.arange(4), actions]

    train_step(qnet, target, buffer, OptimizerState.for_net(qnet), sample_rng, batch_size=4, gamma=0.9)
    for slot, error in zip(slots.tolist(), td.tolist()):
        assert buffer.weight(slot) == pytest.approx(abs(error) ** 0.5 + 1e-3)


def test_update_target_extremes():
    rng = np.random.default_rng(0)
    online = DenseNet.initialize([2, 3, 1], rng)
    target = DenseNet.initialize([2, 3, 1], rng)
    saved = [p.copy() for p in target.parameters]
    update_target(online, target, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(target.parameters, saved))
    update_target(online, target, 1.0)
    assert all(np.allclose(a, b) for a, b in zip(target.parameters, online.parameters))


def chain_oracle(n_states, gamma):
    '''Tabular value iteration; action 0 steps left, action 1 steps right, reaching the end pays 1.'''
    q = np.zeros((n_states, 2))
    for _ in range(1000):
        v = q.max(axis=1)
        for s in range(n_states):
            for a, s_next in enumerate((max(s - 1, 0), min(s + 1, n_states - 1))):
                q[s, a] = float(s_next == n_states - 1) + gamma * v[s_next]
    return q


@pytest.mark.slow
def test_chain_matches_value_iteration():
    n_states, gamma = 5, 0.9
    eye = np.eye(n_states)
    buffer = ReplayBuffer(2 * n_states)
    for s in range(n_states):
        for a, s_next in enumerate((max(s - 1, 0), min(s + 1, n_states - 1))):
            buffer.add(Transition(eye[s], a, float(s_next == n_states - 1), eye[s_next]))

    rng = np.random.default_rng(0)
    qnet = DenseNet.initialize([n_states, 16, 2], rng)
    target = qnet.copy()
    opt = OptimizerState.for_net(qnet, 1e-3)
    for _ in range(50_000):
        train_step(qnet, target, buffer, opt, rng, batch_size=10, gamma=gamma)
        update_target(qnet, target, 0.01)

    oracle = chain_oracle(n_states, gamma)
    q = qnet(eye)
    assert np.argmax(q, axis=1).tolist() == np.argmax(oracle, axis=1).tolist()
    assert np.allclose(q, oracle, rtol=0.05, atol=0)


@pytest.mark.slow
def test_q_stays_finite_over_long_training():
    rng = np.random.default_rng(0)
    qnet = DenseNet.initialize([STATE_DIM, 32, 32, 5], rng)
    target = qnet.copy()
    buffer = ReplayBuffer(1000)
    for _ in range(1000):
        s, s_next = rng.uniform(-1, 1, STATE_DIM), rng.uniform(-1, 1, STATE_DIM)
        buffer.add(Transition(s, int(rng.integers(5)), -float(rng.uniform(0.05, 2.0)), s_next))
    opt = OptimizerState.for_net(qnet, 5e-4)
    states = rng.uniform(-1, 1, (64, STATE_DIM))
    for i in range(100_000):
        loss = train_step(qnet, target, buffer, opt, rng, batch_size=32, gamma=0.9)
        update_target(qnet, target, 0.005)
        if i % 10_000 == 0:
            assert np.isfinite(loss)
            assert np.all(np.isfinite(qnet(states)))
    assert all(np.all(np.isfinite(p)) for p in qnet.parameters)
    # returns are bounded by the worst reward over the discount horizon
    assert np.all(np.abs(qnet(states)) < 1.5 * 2.0 / (1 - 0.9))
