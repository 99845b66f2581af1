# SPDX-License-Identifier: MIT

'''
Simulation orchestration: replays scenario frames through the network engine,
the scheduler, an offloading policy and the global map database on the engine
tick, and collects the metric tables the commands export.
'''

from __future__ import annotations

import dataclasses
import math
import warnings

from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
import pandas

from . import LiveMapError
from .agent import DqnAgent, StateVector
from .config import ExperimentConfig
from .geometry import CoverageGrid, GridSpec, WorldPoint, vehicle_coverage, visible
from .mapcore import MapDatabase, Observation
from .neural import VaeModel, train_vae
from .policies import DecisionContext, Policy, RegressionModel, RmSample
from .scenario import SignatureModel, TraceFrame, generate, observe, occluders
from .scheduler import ScheduleState, head_decide
from .simnet import Engine, Stage, Task


# fused locations closer than this to the truth count as a successful detection
DETECTION_RADIUS_M = 1.0

# independent random streams, keyed off the experiment seed
_TASK_STREAM = 1
_OBSERVATION_STREAM = 2
_POLICY_STREAM = 3
_AGENT_STREAM = 4
_VAE_STREAM = 5


class WorldError(LiveMapError):
    pass


class DecisionRecord(NamedTuple):
    t_ms: int
    vehicle_id: int
    rss_dbm: float
    rate_bps: float
    connected: int
    queued: int
    scheduled: int
    action: int


class LatencyRecord(NamedTuple):
    task_id: int
    vehicle_id: int
    action: int
    t_created: int
    t_completed: int
    latency_ms: int
    onboard_ms: int
    uplink_ms: int
    queued_ms: int
    serving_ms: int
    broadcast_ms: int
    n_objects: int
    rate_bps: float
    connected: int


class CurveRecord(NamedTuple):
    step: int
    t_ms: int
    reward: float
    loss: float
    epsilon: float


class _Request(NamedTuple):
    state: StateVector
    rate_bps: float
    connected: int
    observations: Tuple[Observation, ...]
    truth: Dict[int, WorldPoint]


def grid_for(frames: Sequence[TraceFrame], reach_m: float, cell_m: float) -> GridSpec:
    '''Grid enclosing every vehicle position of the trace plus the camera reach.'''
    points = np.array([
        (vehicle.pose.position.x, vehicle.pose.position.y)
        for frame in frames for vehicle in frame.vehicles
    ])
    if points.size == 0:
        raise WorldError('The trace has no vehicles')
    low = points.min(axis=0) - reach_m
    high = points.max(axis=0) + reach_m
    width, height = (int(math.ceil(extent / cell_m)) for extent in (high - low).tolist())
    return GridSpec((float(low[0]), float(low[1])), cell_m, max(width, 1), max(height, 1))


class World():
    '''
    One simulation run. ``explore`` makes agent-backed policies follow the
    epsilon-greedy schedule, ``learn`` feeds completed tasks back to the agent
    as delayed rewards and trains after each of them. With ``data_plane`` off,
    observations are only counted (for payload sizes) and never matched. A
    learning run keeps no engine event history.
    '''

    def __init__(
        self,
        config: ExperimentConfig,
        policy: Policy,
        frames: Sequence[TraceFrame],
        vae: VaeModel,
        *,
        explore: bool = False,
        learn: bool = False,
        data_plane: bool = True,
        progress: Optional[Callable[[World], None]] = None,
    ) -> None:
        if not frames:
            raise WorldError('At least one trace frame is required')
        if learn and policy.agent is None:
            raise WorldError(f'Policy {policy.NAME} has no agent to train')
        self.config = config
        self.policy = policy
        self.frames = list(frames)
        self.vae = vae
        self.explore = explore
        self.learn = learn
        self.data_plane = data_plane
        self.progress = progress

        self.engine = Engine(config.sim, self._served, keep_history=not learn)
        self.db = MapDatabase(config.matching)
        self.schedule = ScheduleState(
            beta=config.scheduler.beta,
            epoch_period_ms=config.scheduler.epoch_period_ms,
            backoff_ms=config.scheduler.backoff_ms,
            recompute_overlap=config.scheduler.recompute_overlap,
        )
        self.intrinsics = config.camera.intrinsics
        self.grid = grid_for(self.frames, self.intrinsics.max_range_m, config.world.grid_cell_m)

        self._task_rng = np.random.default_rng([config.seed, _TASK_STREAM])
        self._observation_rng = np.random.default_rng([config.seed, _OBSERVATION_STREAM])

        self._frame_index = -1
        self._frame = self.frames[0]
        self._wrapped = False
        self._busy: Set[int] = set()
        self._requests: Dict[int, _Request] = {}
        self._last_sync: Dict[int, int] = {}

        self.decisions: List[DecisionRecord] = []
        self.latencies: List[LatencyRecord] = []
        self.curve: List[CurveRecord] = []
        self.detections = 0
        self.detections_correct = 0
        self.rewards = 0

        for vehicle in self._frame.vehicles:
            self.engine.register_vehicle(vehicle.vehicle_id, vehicle.pose.position, vehicle.capability.factor)
            self._last_sync[vehicle.vehicle_id] = -1

    @property
    def now(self) -> int:
        return self.engine.now

    @property
    def agent(self) -> Optional[DqnAgent]:
        return self.policy.agent

    # frames and coverage

    def _advance_frame(self) -> None:
        index = self.now // self.config.scenario.frame_ms
        if index == self._frame_index:
            return
        if index >= len(self.frames) and not self._wrapped:
            warnings.warn(f'The trace holds {len(self.frames)} frames, replaying it from the start')
            self._wrapped = True
        self._frame_index = index
        self._frame = self.frames[index % len(self.frames)]
        for vehicle in self._frame.vehicles:
            self.engine.move_vehicle(vehicle.vehicle_id, vehicle.pose.position)

    def coverage(self) -> Dict[int, CoverageGrid]:
        return {
            vehicle.vehicle_id: vehicle_coverage(
                vehicle.pose, self.intrinsics, occluders(self._frame, vehicle.vehicle_id), self.grid,
            )
            for vehicle in self._frame.vehicles
        }

    def _open_epoch(self) -> None:
        if not self.schedule.needs_schedule(self.now):
            return
        self.schedule.update_coverage(self.coverage())
        if self.policy.SCHEDULES:
            self.schedule.schedule(self.now)
        else:
            self.schedule.accept_all(self.now)
        self.db.evict(self.now)

    # requests

    def state_of(self, vehicle_id: int) -> StateVector:
        capability = self._frame.vehicle(vehicle_id).capability
        return StateVector(
            rss_dbm=self.engine.rss(vehicle_id),
            cpu_count=capability.cpu_count,
            cpu_freq_ghz=capability.cpu_freq_ghz,
            mem_gb=capability.mem_gb,
            gpu_cores=capability.gpu_cores,
            gpu_freq_ghz=capability.gpu_freq_ghz,
            server_capability=self.config.sim.server_speed,
            wireless_bandwidth_hz=self.config.sim.uplink_bw_hz,
            connected_vehicles=self.engine.connected,
            queued_tasks=len(self.engine.queue),
        )

    def _acquire(self, vehicle_id: int) -> Tuple[Tuple[Observation, ...], Dict[int, WorldPoint], int]:
        if self.data_plane:
            seen = observe(
                self._frame, vehicle_id, self.vae, self._observation_rng,
                intrinsics=self.intrinsics, noise=self.config.noise, t_ms=self.now,
            )
            truth = {obj.object_id: obj.position for obj in self._frame.objects}
            return tuple(seen), truth, len(seen)
        if not self._frame.objects:
            return (), {}, 0
        pose = self._frame.vehicle(vehicle_id).pose
        points = np.array([obj.position for obj in self._frame.objects])
        mask = visible(points, pose, self.intrinsics, occluders(self._frame, vehicle_id))
        return (), {}, int(np.count_nonzero(mask))

    def _decide(self, vehicle_id: int, state: StateVector, rate: float) -> Tuple[int, int]:
        if self.policy.SCHEDULES:
            agent = self.policy.agent
            if agent is None:
                raise WorldError(f'Policy {self.policy.NAME} schedules but has no agent')
            return head_decide((vehicle_id, state), self.schedule, agent, self.now, explore=self.explore)
        ctx = DecisionContext(vehicle_id, state, rate, self.engine.connected)
        return 1, self.policy.decide(ctx, explore=self.explore)

    def _request(self, vehicle_id: int) -> None:
        state = self.state_of(vehicle_id)
        rate = self.engine.uplink_rate(vehicle_id)
        x, y = self._decide(vehicle_id, state, rate)
        self.decisions.append(DecisionRecord(
            self.now, vehicle_id, state.rss_dbm, rate, self.engine.connected, len(self.engine.queue), x, y,
        ))
        if x == 0:
            return

        observations, truth, n_objects = self._acquire(vehicle_id)
        task = self.engine.submit(vehicle_id, y, self.config.profiles, self._task_rng, n_objects=n_objects)
        self._busy.add(vehicle_id)
        self._requests[task.task_id] = _Request(state, rate, self.engine.connected, observations, truth)
        agent = self.policy.agent
        if self.learn and agent is not None:
            agent.begin(task.task_id, vehicle_id, state, y, self.now)

        if self.progress is not None and len(self.decisions) % self.config.world.progress_every == 0:
            self.progress(self)

    # data plane

    def _served(self, task: Task, now: int) -> float:
        '''Fuses the task's observations into the map; returns the broadcast size in bits.'''
        request = self._requests[task.task_id]
        bytes_per_record = self.config.profiles.broadcast_bytes_per_record
        if not self.data_plane:
            return 8.0 * bytes_per_record * task.n_objects

        assigned = self.db.integrate(request.observations, now)
        for obs, object_id in zip(request.observations, assigned):
            self.detections += 1
            record = self.db[object_id]
            truth = request.truth.get(obs.truth_id) if obs.truth_id is not None else None
            if truth is None or record.truth_id != obs.truth_id:
                continue
            if math.hypot(record.geo_location.x - truth.x, record.geo_location.y - truth.y) < DETECTION_RADIUS_M:
                self.detections_correct += 1

        # records carry acquisition times, so the sync point is the acquisition of this task
        delta = self.db.delta_since(self._last_sync[task.vehicle_id])
        self._last_sync[task.vehicle_id] = task.t_created
        return 8.0 * bytes_per_record * len(delta)

    # completions

    def _complete(self, task: Task, reward_limit: Optional[int]) -> None:
        request = self._requests.pop(task.task_id)
        self._busy.discard(task.vehicle_id)
        latency = task.latency_ms
        self.latencies.append(LatencyRecord(
            task.task_id, task.vehicle_id, task.decision, task.t_created, self.now, latency,
            task.stage_ms[Stage.ONBOARD], task.stage_ms[Stage.UPLINK], task.stage_ms[Stage.QUEUED],
            task.stage_ms[Stage.SERVING], task.stage_ms[Stage.BROADCAST], task.n_objects,
            request.rate_bps, request.connected,
        ))

        agent = self.policy.agent
        if not self.learn or agent is None or task.task_id not in agent.pending:
            return
        if reward_limit is not None and self.rewards >= reward_limit:
            del agent.pending[task.task_id]
            return
        transition = agent.complete(task.task_id, latency / 1000, self.state_of(task.vehicle_id))
        loss = agent.learn()
        self.rewards += 1
        self.curve.append(CurveRecord(
            self.rewards, self.now, transition.r, math.nan if loss is None else loss, agent.epsilon,
        ))

    # driver

    def step(self, reward_limit: Optional[int] = None) -> List[Task]:
        '''One engine tick with the requests that open it.'''
        self._advance_frame()
        self._open_epoch()
        for vehicle in self._frame.vehicles:
            vehicle_id = vehicle.vehicle_id
            if vehicle_id in self._busy or self.schedule.backing_off(vehicle_id, self.now):
                continue
            self._request(vehicle_id)
        done = self.engine.tick()
        for task in done:
            self._complete(task, reward_limit)
        return done

    def run(self, duration_ms: Optional[int] = None, reward_limit: Optional[int] = None) -> World:
        '''Runs until ``duration_ms`` of simulated time or ``reward_limit`` delayed rewards, whichever is first.'''
        if duration_ms is None and reward_limit is None:
            raise WorldError('Either a duration or a reward limit is required')
        if reward_limit is not None and not self.learn:
            raise WorldError('A reward limit needs a learning run')
        while (duration_ms is None or self.now < duration_ms) and (reward_limit is None or self.rewards < reward_limit):
            self.step(reward_limit)
        return self

    # metrics

    def latency_frame(self) -> pandas.DataFrame:
        return pandas.DataFrame(self.latencies, columns=LatencyRecord._fields)

    def decision_frame(self) -> pandas.DataFrame:
        return pandas.DataFrame(self.decisions, columns=DecisionRecord._fields)

    def coverage_frame(self) -> pandas.DataFrame:
        frame = pandas.DataFrame(self.schedule.epochs, columns=[
            't_ms', 'connected', 'scheduled', 'scheduled_area_m2', 'total_area_m2',
        ])
        frame['coverage_ratio'] = (frame['scheduled_area_m2'] / frame['total_area_m2']).fillna(1.0)
        frame['violation'] = frame['scheduled_area_m2'] + 1e-9 < self.schedule.beta * frame['total_area_m2']
        return frame

    def curve_frame(self) -> pandas.DataFrame:
        return pandas.DataFrame(self.curve, columns=CurveRecord._fields)

    def summary(self) -> Dict[str, Any]:
        latencies = self.latency_frame()['latency_ms']
        decisions = self.decision_frame()
        coverage = self.coverage_frame()
        accepted = decisions[decisions['scheduled'] == 1]

        def stat(value: float) -> float:
            return float(value) if not math.isnan(value) else 0.0

        return {
            'policy': self.policy.NAME,
            'seed': self.config.seed,
            'vehicles': self.engine.connected,
            'beta': self.schedule.beta,
            'duration_ms': self.now,
            'decisions': len(decisions),
            'completed': len(latencies),
            'mean_latency_ms': stat(latencies.mean()),
            'p50_latency_ms': stat(latencies.quantile(0.5)),
            'p95_latency_ms': stat(latencies.quantile(0.95)),
            'p99_latency_ms': stat(latencies.quantile(0.99)),
            'scheduled_ratio': stat((coverage['scheduled'] / coverage['connected']).mean()),
            'coverage_ratio': stat(coverage['coverage_ratio'].mean()),
            'coverage_violations': int(coverage['violation'].sum()),
            'mean_action': stat(accepted['action'].mean()),
            'detections': self.detections,
            'detection_rate': self.detections_correct / self.detections if self.detections else 0.0,
            'map_records': len(self.db),
        }


# assembly helpers


def signature_model(config: ExperimentConfig) -> SignatureModel:
    return SignatureModel.seeded(
        config.seed, config.vae.signature_dim,
        instance_sigma=config.vae.instance_sigma, view_sigma=config.noise.view_sigma,
    )


def make_frames(config: ExperimentConfig) -> List[TraceFrame]:
    return generate(config.scenario, capabilities=config.capabilities, signatures=signature_model(config))


def build_vae(config: ExperimentConfig) -> Tuple[VaeModel, List[float]]:
    '''Feature extractor trained on synthetic views of the configured signature model.'''
    rng = np.random.default_rng([config.seed, _VAE_STREAM])
    model = VaeModel.initialize(
        rng, signature_dim=config.vae.signature_dim, hidden=config.vae.hidden, latent_dim=config.vae.latent_dim,
    )
    history = train_vae(
        model, signature_model(config).training_set(config.vae.train_samples, rng),
        epochs=config.vae.epochs, batch_size=config.vae.batch_size, rng=rng,
        learning_rate=config.vae.learning_rate,
    )
    return model, history


def agent_rng(config: ExperimentConfig) -> np.random.Generator:
    return np.random.default_rng([config.seed, _AGENT_STREAM])


def build_agent(config: ExperimentConfig) -> DqnAgent:
    return DqnAgent.create(config.agent, config.bounds, len(config.profiles.decisions), agent_rng(config))


def make_policy(
    config: ExperimentConfig,
    name: str,
    *,
    agent: Optional[DqnAgent] = None,
    rm_model: Optional[RegressionModel] = None,
) -> Policy:
    return Policy.from_name(
        name, len(config.profiles.decisions),
        rng=np.random.default_rng([config.seed, _POLICY_STREAM]), agent=agent, model=rm_model,
    )


def collect_rm_dataset(
    config: ExperimentConfig,
    vae: VaeModel,
    vehicle_counts: Optional[Sequence[int]] = None,
    duration_ms: Optional[int] = None,
) -> List[RmSample]:
    '''Random offloading under every vehicle count; one ``(rate, vehicles, action, latency)`` row per completed task.'''
    counts = config.run.rm_vehicle_counts if vehicle_counts is None else tuple(vehicle_counts)
    duration = config.run.rm_duration_ms if duration_ms is None else duration_ms
    rows: List[RmSample] = []
    for count in counts:
        scenario = dataclasses.replace(config.scenario, n_vehicles=count, duration_ms=duration)
        run_config = config.replace(scenario=scenario)
        world = World(
            run_config, make_policy(run_config, 'ro'), make_frames(run_config), vae,
            data_plane=config.world.data_plane_in_training,
        ).run(duration)
        rows += [
            RmSample(record.rate_bps, record.connected, record.action, record.latency_ms)
            for record in world.latencies
        ]
    return rows
