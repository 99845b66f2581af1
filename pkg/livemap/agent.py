# SPDX-License-Identifier: MIT

'''
Deep Q-learning offloading agent: prioritized replay over a sum tree, a Polyak
averaged target network, decaying epsilon-greedy exploration and the pending
table that turns delayed task completions into rewards.
'''

from __future__ import annotations

import dataclasses
import json
import pathlib

from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import toml

from . import LiveMapError
from .neural import ArchitectureMismatchError, DenseNet, OptimizerState, load_net, save_net, step


FloatArray = npt.NDArray[np.float64]


class AgentError(LiveMapError):
    pass


class InsufficientBufferError(AgentError):
    pass


class UnknownPendingError(AgentError):
    pass


class MissingCheckpointError(AgentError):
    pass


@dataclasses.dataclass(frozen=True)
class StateVector:
    '''Raw decision-time observation: vehicle status, server status and workload.'''
    rss_dbm: float
    cpu_count: float
    cpu_freq_ghz: float
    mem_gb: float
    gpu_cores: float
    gpu_freq_ghz: float
    server_capability: float
    wireless_bandwidth_hz: float
    connected_vehicles: float
    queued_tasks: float

    @classmethod
    def fields(cls) -> Tuple[str, ...]:
        return tuple(field.name for field in dataclasses.fields(cls))

    def as_array(self) -> FloatArray:
        values = np.array(dataclasses.astuple(self), dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise AgentError(f'State has non-finite entries: {self}')
        return values


STATE_DIM = len(StateVector.fields())


@dataclasses.dataclass(frozen=True)
class StateBounds:
    '''Per-field ``[low, high]`` used to map a :py:class:`StateVector` onto ``[-1, 1]``.'''
    low: Tuple[float, ...]
    high: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.low) != STATE_DIM or len(self.high) != STATE_DIM:
            raise AgentError(f'State bounds need {STATE_DIM} entries')
        for name, lo, hi in zip(StateVector.fields(), self.low, self.high):
            if not hi > lo:
                raise AgentError(f'State bound for {name} is empty: [{lo}, {hi}]')

    @classmethod
    def from_mapping(cls, bounds: Mapping[str, Sequence[float]]) -> StateBounds:
        missing = set(StateVector.fields()) - set(bounds)
        if missing:
            raise AgentError(f'Missing state bounds: {", ".join(sorted(missing))}')
        return cls(
            tuple(float(bounds[name][0]) for name in StateVector.fields()),
            tuple(float(bounds[name][1]) for name in StateVector.fields()),
        )

    def to_mapping(self) -> Dict[str, List[float]]:
        return {name: [lo, hi] for name, lo, hi in zip(StateVector.fields(), self.low, self.high)}

    def normalize(self, state: StateVector) -> FloatArray:
        low, high = np.array(self.low), np.array(self.high)
        return np.asarray(np.clip(2 * (state.as_array() - low) / (high - low) - 1, -1.0, 1.0))


class Transition(NamedTuple):
    '''Replay record; ``s`` and ``s_next`` are normalized state vectors.'''
    s: FloatArray
    a: int
    r: float
    s_next: FloatArray


class PendingRecord(NamedTuple):
    vehicle_id: int
    s: FloatArray
    a: int
    issue_time: int


class SumTree:
    '''
    Binary prefix-sum tree over ``capacity`` leaves (padded to a power of two).
    Node ``i`` has children ``2i`` and ``2i + 1``; node 1 is the root.
    '''

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise AgentError(f'Capacity must be positive, got {capacity}')
        self.capacity = capacity
        self._leaves = 1 << max(0, (capacity - 1).bit_length())
        self._tree = np.zeros(2 * self._leaves, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self._tree[1])

    def __getitem__(self, index: int) -> float:
        return float(self._tree[self._leaves + index])

    def values(self) -> FloatArray:
        return self._tree[self._leaves:self._leaves + self.capacity].copy()

    def update(self, index: int, value: float) -> None:
        if not 0 <= index < self.capacity:
            raise IndexError(index)
        if value < 0:
            raise AgentError(f'Priority must be non-negative, got {value}')
        node = self._leaves + index
        self._tree[node] = value
        node //= 2
        while node >= 1:
            self._tree[node] = self._tree[2 * node] + self._tree[2 * node + 1]
            node //= 2

    def find(self, targets: npt.ArrayLike, size: Optional[int] = None) -> npt.NDArray[np.int64]:
        '''
        Leaf indices whose prefix-sum interval contains each target in ``[0, total)``,
        limited to the first ``size`` leaves (all of them by default).
        '''
        remaining = np.array(targets, dtype=np.float64, ndmin=1)
        nodes = np.ones(remaining.shape, dtype=np.int64)
        while nodes[0] < self._leaves:
            left = self._tree[2 * nodes]
            go_right = remaining >= left
            remaining = np.where(go_right, remaining - left, remaining)
            nodes = 2 * nodes + go_right
        # floating-point slack can land on an empty leaf past the filled ones
        limit = self.capacity if size is None else size
        return np.minimum(nodes - self._leaves, limit - 1)

    def restore(self, values: npt.ArrayLike) -> None:
        '''Replaces every leaf at once and rebuilds the inner sums bottom-up.'''
        leaves = np.asarray(values, dtype=np.float64)
        if leaves.shape != (self.capacity,) or np.any(leaves < 0):
            raise AgentError(f'Expected {self.capacity} non-negative priorities')
        self._tree[:] = 0.0
        self._tree[self._leaves:self._leaves + self.capacity] = leaves
        level = self._leaves
        while level > 1:
            self._tree[level // 2:level] = self._tree[level:2 * level:2] + self._tree[level + 1:2 * level:2]
            level //= 2


class ReplayBuffer:
    '''
    Fixed-capacity ring of transitions with proportional prioritization.

    The tree stores sampling weights directly: :py:meth:`set_priority` stores
    ``p ** alpha`` and :py:meth:`update_td` stores ``|td| ** alpha + floor``;
    item ``i`` is drawn with probability ``weight_i / sum(weights)``.
    '''

    def __init__(self, capacity: int, state_dim: int = STATE_DIM, *, alpha: float = 0.6, floor: float = 1e-3) -> None:
        self.capacity = capacity
        self.alpha = alpha
        self.floor = floor
        self._tree = SumTree(capacity)
        self._states = np.zeros((capacity, state_dim))
        self._next_states = np.zeros((capacity, state_dim))
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity)
        self._cursor = 0
        self._size = 0
        self._max_weight = 1.0

    def __len__(self) -> int:
        return self._size

    def add(self, transition: Transition) -> int:
        '''Stores ``transition`` with the current maximum weight and returns its slot.'''
        slot = self._cursor
        self._states[slot] = transition.s
        self._next_states[slot] = transition.s_next
        self._actions[slot] = transition.a
        self._rewards[slot] = transition.r
        self._tree.update(slot, self._max_weight)
        self._cursor = (self._cursor + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        return slot

    def __getitem__(self, slot: int) -> Transition:
        if not 0 <= slot < self._size:
            raise IndexError(slot)
        return Transition(
            self._states[slot].copy(), int(self._actions[slot]),
            float(self._rewards[slot]), self._next_states[slot].copy(),
        )

    def weight(self, slot: int) -> float:
        return self._tree[slot]

    def probabilities(self) -> FloatArray:
        weights = self._tree.values()[:self._size]
        return np.asarray(weights / weights.sum())

    def set_priority(self, slot: int, priority: float) -> None:
        self._set_weight(slot, priority ** self.alpha)

    def update_td(self, slots: npt.ArrayLike, td_errors: npt.ArrayLike) -> None:
        for slot, td in zip(np.asarray(slots).tolist(), np.asarray(td_errors).tolist()):
            self._set_weight(slot, abs(td) ** self.alpha + self.floor)

    def _set_weight(self, slot: int, weight: float) -> None:
        self._tree.update(slot, weight)
        self._max_weight = max(self._max_weight, weight)

    def to_arrays(self) -> Dict[str, npt.NDArray[Any]]:
        return {
            'states': self._states,
            'next_states': self._next_states,
            'actions': self._actions,
            'rewards': self._rewards,
            'weights': self._tree.values(),
            'ring': np.array([self._cursor, self._size]),
            'max_weight': np.array([self._max_weight]),
        }

    def restore(self, arrays: Mapping[str, npt.ArrayLike]) -> None:
        '''Inverse of :py:meth:`to_arrays` for a buffer of the same capacity and state size.'''
        states = np.asarray(arrays['states'], dtype=np.float64)
        if states.shape != self._states.shape:
            raise AgentError(f'Stored buffer has shape {states.shape}, expected {self._states.shape}')
        self._states[:] = states
        self._next_states[:] = np.asarray(arrays['next_states'], dtype=np.float64)
        self._actions[:] = np.asarray(arrays['actions'], dtype=np.int64)
        self._rewards[:] = np.asarray(arrays['rewards'], dtype=np.float64)
        self._tree.restore(arrays['weights'])
        self._cursor, self._size = (int(v) for v in np.asarray(arrays['ring']))
        self._max_weight = float(np.asarray(arrays['max_weight'])[0])

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> npt.NDArray[np.int64]:
        if self._size < batch_size or self._size == 0:
            raise InsufficientBufferError(f'Buffer holds {self._size} transitions, {batch_size} requested')
        return self._tree.find(rng.random(batch_size) * self._tree.total, self._size)

    def batch(self, slots: npt.NDArray[np.int64]) -> Tuple[FloatArray, npt.NDArray[np.int64], FloatArray, FloatArray]:
        return self._states[slots], self._actions[slots], self._rewards[slots], self._next_states[slots]


@dataclasses.dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 0.5
    end: float = 0.1
    steps: int = 100_000

    def __call__(self, decision: int) -> float:
        if self.steps <= 0 or decision >= self.steps:
            return self.end
        if decision <= 0:
            return self.start
        return self.start + (self.end - self.start) * decision / self.steps


def select_action(qnet: DenseNet, s: npt.ArrayLike, epsilon: float, rng: np.random.Generator) -> int:
    '''Epsilon-greedy; the greedy branch breaks ties towards the lowest action.'''
    if not 0 <= epsilon <= 1:
        raise AgentError(f'Epsilon must be within [0, 1], got {epsilon}')
    if rng.random() < epsilon:
        return int(rng.integers(qnet.output_dim))
    return int(np.argmax(qnet(s)))


def td_target(r: npt.ArrayLike, s_next: npt.ArrayLike, target_net: DenseNet, gamma: float) -> Union[float, FloatArray]:
    '''``r + gamma * max_a Q'(s_next, a)``; accepts a single transition or a batch.'''
    if not 0 <= gamma < 1:
        raise AgentError(f'Discount must be within [0, 1), got {gamma}')
    q_next = target_net(s_next)
    h = np.asarray(r, dtype=np.float64) + gamma * np.max(q_next, axis=-1)
    return float(h) if np.ndim(h) == 0 else np.asarray(h)


def train_step(
    qnet: DenseNet,
    target_net: DenseNet,
    buffer: ReplayBuffer,
    opt: OptimizerState,
    rng: np.random.Generator,
    *,
    batch_size: int = 512,
    gamma: float = 0.9,
) -> float:
    '''One prioritized minibatch step on the mean-squared Bellman error; returns the loss.'''
    slots = buffer.sample_indices(batch_size, rng)
    states, actions, rewards, next_states = buffer.batch(slots)
    targets = np.asarray(td_target(rewards, next_states, target_net, gamma))

    q, tape = qnet.forward(states)
    rows = np.arange(batch_size)
    td = targets - q[rows, actions]
    loss = float(np.mean(td ** 2))

    dq = np.zeros_like(q)
    dq[rows, actions] = -2.0 * td / batch_size
    step(qnet, qnet.backward(tape, dq), opt)
    buffer.update_td(slots, td)
    return loss


def update_target(qnet: DenseNet, target_net: DenseNet, tau: float) -> None:
    '''Polyak averaging ``target <- tau * online + (1 - tau) * target``.'''
    if not qnet.same_architecture(target_net):
        raise ArchitectureMismatchError(f'{qnet.layer_dims} vs {target_net.layer_dims}')
    for online, target in zip(qnet.parameters, target_net.parameters):
        target *= 1 - tau
        target += tau * online
    target_net.touch()


def complete_reward(pending: PendingRecord, latency_s: float, s_next: npt.ArrayLike) -> Transition:
    return Transition(pending.s, pending.a, -float(latency_s), np.asarray(s_next, dtype=np.float64))


@dataclasses.dataclass(frozen=True)
class AgentParams:
    hidden: Tuple[int, ...] = (256, 256)
    gamma: float = 0.9
    learning_rate: float = 5e-4
    batch_size: int = 512
    buffer_capacity: int = 100_000
    alpha: float = 0.6
    priority_floor: float = 1e-3
    tau: float = 0.005
    # 0 disables the periodic hard copy
    hard_copy_period: int = 0
    epsilon: EpsilonSchedule = EpsilonSchedule()

    def to_mapping(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out['hidden'] = list(self.hidden)
        return out

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> AgentParams:
        values = dict(data)
        values['hidden'] = tuple(values.get('hidden', cls.hidden))
        values['epsilon'] = EpsilonSchedule(**values.get('epsilon', {}))
        return cls(**values)


class DqnAgent:
    '''Q-network, target network, optimizer, replay buffer and the pending table of one run.'''

    def __init__(
        self,
        qnet: DenseNet,
        target_net: DenseNet,
        bounds: StateBounds,
        params: AgentParams,
        rng: np.random.Generator,
    ) -> None:
        if not qnet.same_architecture(target_net):
            raise ArchitectureMismatchError(f'{qnet.layer_dims} vs {target_net.layer_dims}')
        self.qnet = qnet
        self.target_net = target_net
        self.bounds = bounds
        self.params = params
        self.rng = rng
        self.optimizer = OptimizerState.for_net(qnet, params.learning_rate)
        self.buffer = ReplayBuffer(params.buffer_capacity, qnet.input_dim, alpha=params.alpha, floor=params.priority_floor)
        self.pending: Dict[int, PendingRecord] = {}
        self.decisions = 0
        self.train_steps = 0

    @classmethod
    def create(cls, params: AgentParams, bounds: StateBounds, n_actions: int, rng: np.random.Generator) -> DqnAgent:
        qnet = DenseNet.initialize([STATE_DIM, *params.hidden, n_actions], rng)
        return cls(qnet, qnet.copy(), bounds, params, rng)

    @property
    def n_actions(self) -> int:
        return self.qnet.output_dim

    @property
    def epsilon(self) -> float:
        return self.params.epsilon(self.decisions)

    def q_values(self, state: StateVector) -> FloatArray:
        return self.qnet(self.bounds.normalize(state))

    def act(self, state: StateVector, *, explore: bool) -> int:
        epsilon = self.epsilon if explore else 0.0
        action = select_action(self.qnet, self.bounds.normalize(state), epsilon, self.rng)
        if explore:
            self.decisions += 1
        return action

    def begin(self, request_id: int, vehicle_id: int, state: StateVector, action: int, now: int) -> None:
        self.pending[request_id] = PendingRecord(vehicle_id, self.bounds.normalize(state), action, now)

    def complete(self, request_id: int, latency_s: float, next_state: StateVector) -> Transition:
        '''Closes a pending decision and appends the resulting transition to the buffer.'''
        try:
            pending = self.pending.pop(request_id)
        except KeyError:
            raise UnknownPendingError(f'No pending decision for request {request_id}') from None
        transition = complete_reward(pending, latency_s, self.bounds.normalize(next_state))
        self.buffer.add(transition)
        return transition

    def learn(self) -> Optional[float]:
        '''Trains once when the buffer holds a full batch; returns the loss if it did.'''
        if len(self.buffer) < self.params.batch_size:
            return None
        loss = train_step(
            self.qnet, self.target_net, self.buffer, self.optimizer, self.rng,
            batch_size=self.params.batch_size, gamma=self.params.gamma,
        )
        self.train_steps += 1
        period = self.params.hard_copy_period
        update_target(self.qnet, self.target_net, 1.0 if period and self.train_steps % period == 0 else self.params.tau)
        return loss

    def save(self, stem: Union[str, pathlib.Path]) -> pathlib.Path:
        '''
        Writes ``<stem>.bin``, ``<stem>-target.bin``, the ``<stem>.toml`` sidecar and
        ``<stem>-state.npz`` (optimizer moments and replay buffer). Pending decisions
        are not saved; their tasks never complete in a resumed run.
        '''
        stem = pathlib.Path(stem)
        save_net(self.qnet, stem.with_suffix('.bin'))
        target_file = stem.with_name(stem.name + '-target.bin')
        save_net(self.target_net, target_file)
        state_file = stem.with_name(stem.name + '-state.npz')
        arrays = {f'buffer_{name}': array for name, array in self.buffer.to_arrays().items()}
        for i, (m, v) in enumerate(zip(self.optimizer.first_moments, self.optimizer.second_moments)):
            arrays[f'adam_m{i}'] = m
            arrays[f'adam_v{i}'] = v
        with open(state_file, 'wb') as f:
            np.savez(f, **arrays)

        sidecar = stem.with_suffix('.toml')
        with open(sidecar, 'w') as f:
            toml.dump({
                'network': stem.with_suffix('.bin').name,
                'target_network': target_file.name,
                'training_state': state_file.name,
                'decisions': self.decisions,
                'train_steps': self.train_steps,
                'optimizer_steps': self.optimizer.step_count,
                'rng_state': json.dumps(self.rng.bit_generator.state),
                'bounds': self.bounds.to_mapping(),
                'params': self.params.to_mapping(),
            }, f)
        return sidecar

    @classmethod
    def load(cls, stem: Union[str, pathlib.Path], rng: Optional[np.random.Generator] = None) -> DqnAgent:
        '''
        Restores a checkpoint written by :py:meth:`save`. Without ``rng`` the saved
        generator state is restored too, so training resumes exactly where it stopped.
        '''
        stem = pathlib.Path(stem)
        sidecar = stem.with_suffix('.toml')
        if not sidecar.is_file():
            raise MissingCheckpointError(f'Checkpoint sidecar {sidecar} does not exist')
        data = toml.load(sidecar)
        qnet = load_net(sidecar.parent / data['network'])
        target_net = load_net(sidecar.parent / data['target_network'])
        if rng is None:
            rng = np.random.default_rng()
            rng.bit_generator.state = json.loads(data['rng_state'])
        agent = cls(qnet, target_net, StateBounds.from_mapping(data['bounds']), AgentParams.from_mapping(data['params']), rng)
        agent.decisions = int(data['decisions'])
        agent.train_steps = int(data['train_steps'])

        state_file = sidecar.parent / data['training_state']
        if not state_file.is_file():
            raise MissingCheckpointError(f'Checkpoint training state {state_file} does not exist')
        with np.load(state_file) as arrays:
            agent.buffer.restore({
                name[len('buffer_'):]: arrays[name] for name in arrays.files if name.startswith('buffer_')
            })
            agent.optimizer.first_moments = [arrays[f'adam_m{i}'] for i in range(len(qnet.parameters))]
            agent.optimizer.second_moments = [arrays[f'adam_v{i}'] for i in range(len(qnet.parameters))]
        agent.optimizer.step_count = int(data['optimizer_steps'])
        return agent
