# SPDX-License-Identifier: MIT

'''
Coverage-constrained vehicle scheduling (upper layer) and the per-request
offloading decision (lower layer).
'''

from __future__ import annotations

import dataclasses

from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from . import LiveMapError
from .agent import StateVector
from .geometry import CoverageGrid, IncompatibleGridsError, union_all


class SchedulerError(LiveMapError):
    pass


def _stack(coverage: Mapping[int, CoverageGrid], vehicles: Sequence[int]) -> npt.NDArray[np.bool_]:
    '''``(len(vehicles), cells)`` occupancy, cropped to the bounding box of the union.'''
    spec = coverage[vehicles[0]].spec
    for vehicle in vehicles:
        if coverage[vehicle].spec != spec:
            raise IncompatibleGridsError(f'Vehicle {vehicle} uses a different grid')
    union = np.zeros((spec.height, spec.width), dtype=np.bool_)
    for vehicle in vehicles:
        union |= coverage[vehicle].occupancy
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    if rows.size == 0:
        return np.zeros((len(vehicles), 0), dtype=np.bool_)
    window = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
    return np.stack([coverage[v].occupancy[window].ravel() for v in vehicles])


def overlap_ratio(ci: CoverageGrid, cj: CoverageGrid) -> float:
    '''Jaccard index of two footprints; 0 when both are empty.'''
    union = (ci | cj).count
    if union == 0:
        return 0.0
    return (ci & cj).count / union


class OverlapGraph:
    '''Pairwise overlap ratios between vehicles, vertices sorted by id.'''

    def __init__(self, vertices: Sequence[int], ratios: npt.ArrayLike) -> None:
        self.vertices = tuple(vertices)
        self.ratios = np.asarray(ratios, dtype=np.float64)
        if self.ratios.shape != (len(self.vertices),) * 2:
            raise SchedulerError(f'Overlap matrix shape {self.ratios.shape} does not match {len(self.vertices)} vertices')
        self._index = {vertex: i for i, vertex in enumerate(self.vertices)}

    @classmethod
    def build(cls, coverage: Mapping[int, CoverageGrid]) -> OverlapGraph:
        vertices = sorted(coverage)
        if not vertices:
            return cls([], np.zeros((0, 0)))
        bits = _stack(coverage, vertices).astype(np.float32)
        inter = np.rint(bits @ bits.T).astype(np.int64)
        sizes = np.diag(inter)
        union = sizes[:, None] + sizes[None, :] - inter
        ratios = np.divide(inter, union, out=np.zeros(inter.shape), where=union > 0)
        np.fill_diagonal(ratios, 0.0)
        return cls(vertices, ratios)

    def ratio(self, i: int, j: int) -> float:
        return float(self.ratios[self._index[i], self._index[j]])


def avg_overlap(i: int, graph: OverlapGraph, active: Iterable[int]) -> float:
    members = set(active)
    if i not in members:
        raise SchedulerError(f'Vehicle {i} is not active')
    others = sorted(j for j in members if j != i)
    if not others:
        return 0.0
    return sum(graph.ratio(i, j) for j in others) / len(others)


class EpochRecord(NamedTuple):
    t_ms: int
    connected: int
    scheduled: int
    scheduled_area_m2: float
    total_area_m2: float


@dataclasses.dataclass
class ScheduleState:
    '''
    ``scheduled`` and ``coverage`` are keyed by connected vehicle. ``backoff_until``
    holds the time each rejected vehicle may request again.
    '''
    beta: float = 0.8
    epoch_period_ms: int = 1000
    backoff_ms: int = 500
    recompute_overlap: bool = True
    scheduled: Dict[int, int] = dataclasses.field(default_factory=dict)
    coverage: Dict[int, CoverageGrid] = dataclasses.field(default_factory=dict)
    backoff_until: Dict[int, int] = dataclasses.field(default_factory=dict)
    last_epoch: Optional[int] = None
    epochs: List[EpochRecord] = dataclasses.field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 <= self.beta <= 1:
            raise SchedulerError(f'Coverage requirement must be within [0, 1], got {self.beta}')
        if self.epoch_period_ms <= 0:
            raise SchedulerError(f'Epoch period must be positive, got {self.epoch_period_ms}')

    def needs_schedule(self, now: int) -> bool:
        return self.last_epoch != now // self.epoch_period_ms

    def update_coverage(self, coverage: Mapping[int, CoverageGrid]) -> None:
        self.coverage = dict(coverage)
        self.scheduled = {vid: self.scheduled.get(vid, 1) for vid in sorted(self.coverage)}

    def backing_off(self, vehicle_id: int, now: int) -> bool:
        return now < self.backoff_until.get(vehicle_id, now)

    def schedule(self, now: int) -> Dict[int, int]:
        self.scheduled = greedy_prune(self)
        return self._close_epoch(now)

    def accept_all(self, now: int) -> Dict[int, int]:
        '''Epoch bookkeeping for policies that schedule every request.'''
        self.scheduled = {vid: 1 for vid in sorted(self.coverage)}
        return self._close_epoch(now)

    def _close_epoch(self, now: int) -> Dict[int, int]:
        self.last_epoch = now // self.epoch_period_ms
        total = kept = 0.0
        if self.coverage:
            spec = next(iter(self.coverage.values())).spec
            total = union_all(self.coverage.values(), spec).area
            kept = union_all((self.coverage[v] for v, x in self.scheduled.items() if x), spec).area
        self.epochs.append(EpochRecord(now, len(self.scheduled), sum(self.scheduled.values()), kept, total))
        return self.scheduled


def greedy_prune(state: ScheduleState) -> Dict[int, int]:
    '''
    Starting from every connected vehicle, repeatedly unschedules the active
    vehicle with the largest average overlap (lowest id on ties). Stops and
    restores the last removal once the scheduled union drops to ``beta`` times
    the union of all vehicles or below.
    '''
    vehicles = sorted(state.coverage)
    if not vehicles:
        return {}
    graph = OverlapGraph.build(state.coverage)
    bits = _stack(state.coverage, vehicles)
    row = {v: i for i, v in enumerate(vehicles)}
    total = int(np.count_nonzero(bits.any(axis=0)))
    active = list(vehicles)
    static = {v: avg_overlap(v, graph, vehicles) for v in vehicles}

    while len(active) > 1:
        if state.recompute_overlap:
            scores = [avg_overlap(v, graph, active) for v in active]
        else:
            scores = [static[v] for v in active]
        victim = active[int(np.argmax(scores))]
        remaining = [v for v in active if v != victim]
        kept = int(np.count_nonzero(bits[[row[v] for v in remaining]].any(axis=0)))
        if kept <= state.beta * total:
            break
        active = remaining

    survivors = set(active)
    return {v: int(v in survivors) for v in vehicles}


class Decider(Protocol):
    def act(self, state: StateVector, *, explore: bool) -> int: ...


def head_decide(
    request: Tuple[int, StateVector],
    state: ScheduleState,
    agent: Decider,
    now_ms: int,
    *,
    explore: bool = False,
) -> Tuple[int, int]:
    '''
    Returns ``(x, y)``: ``(1, action)`` for a scheduled vehicle, ``(0, -1)``
    otherwise, in which case the vehicle backs off. Runs the pruning first when
    ``now_ms`` opens a new scheduling epoch. Vehicles that connected after the
    last epoch are accepted until the next one.
    '''
    vehicle_id, vector = request
    if state.needs_schedule(now_ms):
        state.schedule(now_ms)
    if state.scheduled.get(vehicle_id, 1) == 1:
        return 1, agent.act(vector, explore=explore)
    state.backoff_until[vehicle_id] = now_ms + state.backoff_ms
    return 0, -1
