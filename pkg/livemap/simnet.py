# SPDX-License-Identifier: MIT

'''
Time-driven network and compute engine.

Every task walks onboard compute, uplink, the server FIFO, server compute and
the broadcast downlink. The clock advances by ``tick_ms``; each tick a task
does the work of its current stage and moves to the next stage once that
stage's remainder is zero (at most one move per tick). Queued tasks are admitted
to free server slots in FIFO order at the end of the tick and start working on
the following one.
'''

from __future__ import annotations

import collections
import dataclasses
import enum
import json
import math
import pathlib

from typing import Callable, Deque, Dict, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from . import LiveMapError
from .geometry import WorldPoint
from .scenario import ProfileTable


SPEED_OF_LIGHT = 299_792_458.0


class SimError(LiveMapError):
    pass


class UnknownDecisionError(SimError):
    pass


class UnknownVehicleError(SimError):
    pass


@dataclasses.dataclass(frozen=True)
class SimConfig:
    tick_ms: int = 1
    uplink_bw_hz: float = 1e6
    downlink_bw_hz: float = 1e6
    carrier_ghz: float = 3.5
    bs_position: WorldPoint = WorldPoint(0.0, 0.0, 0.0)
    bs_height_m: float = 10.0
    ue_height_m: float = 1.5
    tx_power_dbm_range: Tuple[float, float] = (1.0, 22.0)
    # 0 keeps the first draw for the whole run
    tx_redraw_ms: int = 1000
    bs_tx_power_dbm: float = 23.0
    noise_dbm_per_hz: float = -174.0
    server_count: int = 4
    server_speed: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tick_ms <= 0:
            raise SimError(f'Tick must be positive, got {self.tick_ms}')
        if self.uplink_bw_hz <= 0 or self.downlink_bw_hz <= 0:
            raise SimError('Bandwidths must be positive')
        if self.server_count < 1:
            raise SimError(f'At least one server is required, got {self.server_count}')
        if self.server_speed <= 0:
            raise SimError(f'Server speed must be positive, got {self.server_speed}')
        low, high = self.tx_power_dbm_range
        if low > high:
            raise SimError(f'Invalid transmit power range {self.tx_power_dbm_range}')


class Stage(enum.IntEnum):
    ONBOARD = 0
    UPLINK = 1
    QUEUED = 2
    SERVING = 3
    BROADCAST = 4
    DONE = 5


@dataclasses.dataclass(eq=False)
class Task:
    task_id: int
    vehicle_id: int
    decision: int
    remaining_onboard_ms: float
    uplink_bits_remaining: float
    server_ms_remaining: float
    broadcast_bits_remaining: float
    t_created: int
    capability_factor: float = 1.0
    n_objects: int = 0
    t_completed: Optional[int] = None
    stage: Stage = Stage.ONBOARD
    stage_ms: Dict[Stage, int] = dataclasses.field(default_factory=lambda: collections.Counter())

    @property
    def latency_ms(self) -> int:
        if self.t_completed is None:
            raise SimError(f'Task {self.task_id} has not completed')
        return self.t_completed - self.t_created

    def remainder(self) -> float:
        return {
            Stage.ONBOARD: self.remaining_onboard_ms,
            Stage.UPLINK: self.uplink_bits_remaining,
            Stage.QUEUED: 0.0,
            Stage.SERVING: self.server_ms_remaining,
            Stage.BROADCAST: self.broadcast_bits_remaining,
            Stage.DONE: 0.0,
        }[self.stage]


class Event(NamedTuple):
    t_ms: int
    task_id: int
    vehicle_id: int
    stage: str


@dataclasses.dataclass
class VehicleLink:
    vehicle_id: int
    position: WorldPoint
    capability_factor: float = 1.0
    tx_dbm: float = 20.0
    next_redraw: int = 0


class ServerQueue:
    '''Single FIFO feeding ``slots`` parallel servers.'''

    def __init__(self, slots: int, *, keep_history: bool = True) -> None:
        self.slots = slots
        self.keep_history = keep_history
        self.waiting: Deque[Task] = collections.deque()
        self.serving: List[Task] = []
        self.started: List[int] = []

    def __len__(self) -> int:
        return len(self.waiting)

    def enqueue(self, task: Task) -> None:
        self.waiting.append(task)

    def release(self, task: Task) -> None:
        self.serving.remove(task)

    def admit(self) -> List[Task]:
        admitted = []
        while self.waiting and len(self.serving) < self.slots:
            task = self.waiting.popleft()
            self.serving.append(task)
            if self.keep_history:
                self.started.append(task.task_id)
            admitted.append(task)
        return admitted


def breakpoint_m(cfg: SimConfig) -> float:
    '''Effective line-of-sight breakpoint distance with 1 m effective environment height.'''
    return 4 * (cfg.bs_height_m - 1) * (cfg.ue_height_m - 1) * cfg.carrier_ghz * 1e9 / SPEED_OF_LIGHT


def path_loss_db(d2d_m: float, cfg: SimConfig) -> float:
    '''Urban micro street-canyon line-of-sight path loss.'''
    d2d = max(d2d_m, 1.0)
    dh = cfg.bs_height_m - cfg.ue_height_m
    d3d = math.hypot(d2d, dh)
    freq = 20 * math.log10(cfg.carrier_ghz)
    bp = breakpoint_m(cfg)
    if d2d <= bp:
        return 32.4 + 21 * math.log10(d3d) + freq
    return 32.4 + 40 * math.log10(d3d) + freq - 9.5 * math.log10(bp ** 2 + dh ** 2)


def data_rate_bps(tx_dbm: float, pl_db: float, share_hz: float, cfg: SimConfig) -> float:
    '''Shannon rate over an equal bandwidth share.'''
    if share_hz <= 0:
        raise SimError(f'Bandwidth share must be positive, got {share_hz}')
    snr_db = tx_dbm - pl_db - (cfg.noise_dbm_per_hz + 10 * math.log10(share_hz))
    return share_hz * math.log2(1 + 10 ** (snr_db / 10))


def rss_dbm(vehicle: VehicleLink, cfg: SimConfig) -> float:
    d2d = math.hypot(vehicle.position.x - cfg.bs_position.x, vehicle.position.y - cfg.bs_position.y)
    return vehicle.tx_dbm - path_loss_db(d2d, cfg)


ServedHook = Callable[[Task, int], float]


class Engine:
    '''
    Single-run simulation state. ``on_served(task, now)`` runs when a task
    leaves the server and returns the task's broadcast size in bits. With
    ``keep_history`` off, completed tasks and stage events are not retained.
    '''

    def __init__(self, cfg: SimConfig, on_served: Optional[ServedHook] = None, *, keep_history: bool = True) -> None:
        self.cfg = cfg
        self.on_served = on_served
        self.keep_history = keep_history
        self.now = 0
        self.rng = np.random.default_rng(cfg.seed)
        self.vehicles: Dict[int, VehicleLink] = {}
        self.queue = ServerQueue(cfg.server_count, keep_history=keep_history)
        self.in_flight: Dict[int, Task] = {}
        self.completed: List[Task] = []
        self.events: List[Event] = []
        self.submitted = 0

    # vehicles

    def register_vehicle(self, vehicle_id: int, position: WorldPoint, capability_factor: float = 1.0) -> VehicleLink:
        link = VehicleLink(vehicle_id, position, capability_factor)
        self._redraw(link)
        self.vehicles[vehicle_id] = link
        return link

    def move_vehicle(self, vehicle_id: int, position: WorldPoint) -> None:
        self._vehicle(vehicle_id).position = position

    def _vehicle(self, vehicle_id: int) -> VehicleLink:
        try:
            return self.vehicles[vehicle_id]
        except KeyError:
            raise UnknownVehicleError(f'Vehicle {vehicle_id} is not registered') from None

    def _redraw(self, link: VehicleLink) -> None:
        low, high = self.cfg.tx_power_dbm_range
        link.tx_dbm = float(self.rng.uniform(low, high))
        link.next_redraw = self.now + self.cfg.tx_redraw_ms if self.cfg.tx_redraw_ms else -1

    def rss(self, vehicle_id: int) -> float:
        return rss_dbm(self._vehicle(vehicle_id), self.cfg)

    def uplink_rate(self, vehicle_id: int) -> float:
        '''Rate ``vehicle_id`` would get if it started transmitting now.'''
        link = self._vehicle(vehicle_id)
        sending = {
            task.vehicle_id for task in self.in_flight.values()
            if task.stage is Stage.UPLINK and task.vehicle_id != vehicle_id
        }
        share = self.cfg.uplink_bw_hz / (len(sending) + 1)
        return data_rate_bps(link.tx_dbm, self._path_loss(link), share, self.cfg)

    def busy(self, vehicle_id: int) -> bool:
        return any(task.vehicle_id == vehicle_id for task in self.in_flight.values())

    @property
    def connected(self) -> int:
        return len(self.vehicles)

    @property
    def queued(self) -> int:
        return len(self.queue)

    # tasks

    def submit(
        self,
        vehicle_id: int,
        y: int,
        profiles: ProfileTable,
        rng: np.random.Generator,
        *,
        n_objects: int = 0,
    ) -> Task:
        '''Creates a task at acquisition time, sampling its demand from the profile of decision ``y``.'''
        if y not in profiles.decisions:
            raise UnknownDecisionError(f'Decision {y} is not in the profile table ({profiles.decisions})')
        link = self._vehicle(vehicle_id)
        demand = profiles.sample(y, n_objects, rng)
        task = Task(
            task_id=self.submitted,
            vehicle_id=vehicle_id,
            decision=y,
            remaining_onboard_ms=demand.onboard_ms,
            uplink_bits_remaining=8.0 * demand.uplink_bytes,
            server_ms_remaining=demand.server_ms,
            broadcast_bits_remaining=0.0,
            t_created=self.now,
            capability_factor=link.capability_factor,
            n_objects=n_objects,
        )
        self.submitted += 1
        self.in_flight[task.task_id] = task
        self._log(task)
        return task

    def _log(self, task: Task) -> None:
        if self.keep_history:
            self.events.append(Event(self.now, task.task_id, task.vehicle_id, task.stage.name.lower()))

    def _shares(self, stage: Stage, bandwidth: float) -> Dict[int, float]:
        '''Per-task bandwidth: equal split across vehicles, then across that vehicle's tasks.'''
        per_vehicle: Dict[int, List[int]] = collections.defaultdict(list)
        for task in self.in_flight.values():
            if task.stage is stage and task.remainder() > 0:
                per_vehicle[task.vehicle_id].append(task.task_id)
        shares = {}
        for tasks in per_vehicle.values():
            for task_id in tasks:
                shares[task_id] = bandwidth / len(per_vehicle) / len(tasks)
        return shares

    def _work(self, task: Task, uplink: Dict[int, float], downlink: Dict[int, float]) -> None:
        tick = self.cfg.tick_ms
        seconds = tick / 1000
        task.stage_ms[task.stage] += tick
        if task.stage is Stage.ONBOARD:
            task.remaining_onboard_ms = max(0.0, task.remaining_onboard_ms - tick * task.capability_factor)
        elif task.stage is Stage.UPLINK and task.task_id in uplink:
            link = self.vehicles[task.vehicle_id]
            rate = data_rate_bps(link.tx_dbm, self._path_loss(link), uplink[task.task_id], self.cfg)
            task.uplink_bits_remaining = max(0.0, task.uplink_bits_remaining - rate * seconds)
        elif task.stage is Stage.SERVING:
            task.server_ms_remaining = max(0.0, task.server_ms_remaining - tick * self.cfg.server_speed)
        elif task.stage is Stage.BROADCAST and task.task_id in downlink:
            link = self.vehicles[task.vehicle_id]
            rate = data_rate_bps(self.cfg.bs_tx_power_dbm, self._path_loss(link), downlink[task.task_id], self.cfg)
            task.broadcast_bits_remaining = max(0.0, task.broadcast_bits_remaining - rate * seconds)

    def _path_loss(self, link: VehicleLink) -> float:
        return path_loss_db(
            math.hypot(link.position.x - self.cfg.bs_position.x, link.position.y - self.cfg.bs_position.y),
            self.cfg,
        )

    def tick(self) -> List[Task]:
        '''Advances the clock by one tick; returns the tasks that completed during it.'''
        for link in self.vehicles.values():
            if link.next_redraw >= 0 and self.now >= link.next_redraw:
                self._redraw(link)

        uplink = self._shares(Stage.UPLINK, self.cfg.uplink_bw_hz)
        downlink = self._shares(Stage.BROADCAST, self.cfg.downlink_bw_hz)
        tasks = [self.in_flight[key] for key in sorted(self.in_flight)]
        for task in tasks:
            if task.stage is not Stage.QUEUED:
                self._work(task, uplink, downlink)
            else:
                task.stage_ms[task.stage] += self.cfg.tick_ms

        self.now += self.cfg.tick_ms
        done = []
        for task in tasks:
            if task.stage is Stage.QUEUED or task.remainder() > 0:
                continue
            if task.stage is Stage.SERVING:
                self.queue.release(task)
                if self.on_served is not None:
                    task.broadcast_bits_remaining = float(self.on_served(task, self.now))
            task.stage = Stage(task.stage + 1)
            if task.stage is Stage.QUEUED:
                self.queue.enqueue(task)
            elif task.stage is Stage.DONE:
                task.t_completed = self.now
                del self.in_flight[task.task_id]
                if self.keep_history:
                    self.completed.append(task)
                done.append(task)
            self._log(task)

        for task in self.queue.admit():
            task.stage = Stage.SERVING
            self._log(task)
        return done

    def run_until(self, t_ms: int) -> List[Task]:
        done = []
        while self.now < t_ms:
            done += self.tick()
        return done

    def iter_events(self) -> Iterator[Dict[str, Union[int, str]]]:
        for event in self.events:
            yield event._asdict()

    def write_event_log(self, path: Union[str, pathlib.Path]) -> None:
        with open(path, 'w') as f:
            for event in self.iter_events():
                f.write(json.dumps(event) + '\n')
