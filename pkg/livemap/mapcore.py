# SPDX-License-Identifier: MIT

'''
Global object database: location-aware matching, confidence-weighted fusion,
mobility prediction, eviction and broadcast deltas.
'''

from __future__ import annotations

import collections
import dataclasses
import enum
import json
import math
import pathlib

from typing import Deque, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from . import LiveMapError
from .geometry import WorldPoint


LatentVector = npt.NDArray[np.float64]

NEW = -1
'''Returned by :py:func:`match` when no record is close enough.'''


class MapError(LiveMapError):
    pass


class InvalidRecordError(MapError):
    pass


class DegenerateWeightsError(MapError):
    pass


class ObjectClass(str, enum.Enum):
    PERSON = 'person'
    BICYCLE = 'bicycle'
    CAR = 'car'
    MOTORCYCLE = 'motorcycle'
    BUS = 'bus'
    TRUCK = 'truck'
    TRAFFIC_LIGHT = 'traffic_light'
    OTHER = 'other'


VEHICLE_CLASSES = frozenset({ObjectClass.CAR, ObjectClass.MOTORCYCLE, ObjectClass.BUS, ObjectClass.TRUCK})


@dataclasses.dataclass(frozen=True)
class MatchConfig:
    threshold: float = 5.0
    location_weight: float = 0.5
    vehicle_radius_m: float = 100.0
    person_radius_m: float = 10.0
    default_radius_m: float = 30.0
    latent_cap: int = 16
    history_length: int = 3
    ttl_ms: int = 3_600_000
    latent_dim: int = 25

    def radius(self, object_class: ObjectClass) -> float:
        if object_class in VEHICLE_CLASSES:
            return self.vehicle_radius_m
        if object_class is ObjectClass.PERSON:
            return self.person_radius_m
        return self.default_radius_m


@dataclasses.dataclass(frozen=True, eq=False)
class Observation:
    object_class: ObjectClass
    confidence: float
    location: WorldPoint
    latent: LatentVector
    source_vehicle: int
    timestamp: int
    # ground truth, never read by matching or fusion
    truth_id: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0 <= self.confidence <= 1:
            raise MapError(f'Confidence must be within [0, 1], got {self.confidence}')
        latent = np.array(self.latent, dtype=np.float64)
        if latent.ndim != 1 or not np.all(np.isfinite(latent)):
            raise MapError('Latent must be a finite vector')
        latent.setflags(write=False)
        object.__setattr__(self, 'latent', latent)


@dataclasses.dataclass(eq=False)
class ObjectRecord:
    object_id: int
    object_class: ObjectClass
    geo_location: WorldPoint
    confidence: float
    update_time: int
    latents: Deque[LatentVector]
    history: Deque[Tuple[int, WorldPoint]]
    speed: float = 0.0
    direction: Tuple[float, float] = (0.0, 0.0)
    truth_id: Optional[int] = None


def predict_location(rec: ObjectRecord, t: int) -> WorldPoint:
    '''
    Constant-velocity extrapolation from the least-squares velocity fitted over
    the record history.
    '''
    if not rec.history:
        raise InvalidRecordError(f'Record {rec.object_id} has no history')
    if len(rec.history) == 1:
        return rec.history[0][1]
    times = np.array([entry[0] for entry in rec.history], dtype=np.float64)
    points = np.array([entry[1] for entry in rec.history], dtype=np.float64)
    t_mean = times.mean()
    p_mean = points.mean(axis=0)
    spread = float(np.sum((times - t_mean) ** 2))
    if spread == 0:
        return WorldPoint(*map(float, p_mean))
    velocity = ((times - t_mean) @ (points - p_mean)) / spread
    predicted = p_mean + velocity * (t - t_mean)
    return WorldPoint(*map(float, predicted))


def _squared(a: Sequence[float], b: Sequence[float]) -> float:
    return float(sum((x - y) ** 2 for x, y in zip(a, b)))


def distance(obs: Observation, rec: ObjectRecord, t: int, w: float) -> float:
    '''Minimum multi-view latent distance plus the weighted squared geo distance.'''
    if not rec.latents:
        raise InvalidRecordError(f'Record {rec.object_id} has no latents')
    latents = np.stack(list(rec.latents))
    feature = float(np.min(np.sum((latents - obs.latent) ** 2, axis=1)))
    return feature + w * _squared(obs.location, predict_location(rec, t))


def combine(group: Sequence[Observation], rec: ObjectRecord, config: MatchConfig = MatchConfig()) -> ObjectRecord:
    '''
    Fuses a group of observations matched to ``rec`` into it, in place. The
    location becomes the confidence-weighted mean of the group and the
    confidence the group maximum.
    '''
    if not group:
        raise MapError('Cannot combine an empty group')
    weights = np.array([obs.confidence for obs in group], dtype=np.float64)
    total = float(weights.sum())
    if total <= 0:
        raise DegenerateWeightsError(f'All {len(group)} observations have zero confidence')
    locations = np.array([obs.location for obs in group], dtype=np.float64)
    fused = WorldPoint(*map(float, weights @ locations / total))
    t = max(obs.timestamp for obs in group)

    rec.geo_location = fused
    rec.confidence = float(weights.max())
    for obs in group:
        rec.latents.append(obs.latent)

    previous = rec.history[-1] if rec.history else None
    rec.history.append((t, fused))
    if previous is not None and t > previous[0]:
        dx, dy = fused.x - previous[1].x, fused.y - previous[1].y
        step = math.hypot(dx, dy)
        rec.speed = step / ((t - previous[0]) / 1000)
        rec.direction = (dx / step, dy / step) if step > 0 else (0.0, 0.0)
    rec.update_time = max(rec.update_time, t)
    return rec


class MapDatabase:
    '''
    Single-writer object database keyed by ``object_id``.

    Records iterate in ascending id order, which is also the tie-break order of
    :py:meth:`match`.
    '''

    def __init__(self, config: MatchConfig = MatchConfig()) -> None:
        self._config = config
        self._records: Dict[int, ObjectRecord] = {}
        self._next_id = 0

    @property
    def config(self) -> MatchConfig:
        return self._config

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[ObjectRecord]:
        return iter(self._records[key] for key in sorted(self._records))

    def __contains__(self, object_id: object) -> bool:
        return object_id in self._records

    def __getitem__(self, object_id: int) -> ObjectRecord:
        return self._records[object_id]

    def candidates(self, obs: Observation, t: int) -> List[ObjectRecord]:
        '''Same-class records whose predicted location lies within the class radius.'''
        if obs.latent.shape != (self._config.latent_dim,):
            raise MapError(f'Latent has {obs.latent.shape[0]} values, expected {self._config.latent_dim}')
        radius_sq = self._config.radius(obs.object_class) ** 2
        return [
            rec for rec in self
            if rec.object_class == obs.object_class
            and _squared(obs.location, predict_location(rec, t)) <= radius_sq
        ]

    def match(self, obs: Observation, t: int, w: Optional[float] = None, threshold: Optional[float] = None) -> int:
        w = self._config.location_weight if w is None else w
        threshold = self._config.threshold if threshold is None else threshold
        best_id, best = NEW, math.inf
        for rec in self.candidates(obs, t):
            d = distance(obs, rec, t, w)
            if d < best:
                best_id, best = rec.object_id, d
        return best_id if best <= threshold else NEW

    def create(self, obs: Observation) -> ObjectRecord:
        rec = ObjectRecord(
            object_id=self._next_id,
            object_class=obs.object_class,
            geo_location=obs.location,
            confidence=obs.confidence,
            update_time=obs.timestamp,
            latents=collections.deque(maxlen=self._config.latent_cap),
            history=collections.deque(maxlen=self._config.history_length),
            truth_id=obs.truth_id,
        )
        self._next_id += 1
        self._records[rec.object_id] = rec
        return combine([obs], rec, self._config)

    def combine(self, group: Sequence[Observation], object_id: int) -> ObjectRecord:
        return combine(group, self._records[object_id], self._config)

    def integrate(self, observations: Sequence[Observation], t: int) -> List[int]:
        '''
        Matches one batch against the database, fuses every group sharing an id
        and inserts the unmatched observations as new records.

        Returns the record id assigned to each observation, in input order.
        '''
        matched = [self.match(obs, t) for obs in observations]
        groups: Dict[int, List[Observation]] = collections.defaultdict(list)
        for obs, object_id in zip(observations, matched):
            if object_id != NEW:
                groups[object_id].append(obs)
        for object_id in sorted(groups):
            self.combine(groups[object_id], object_id)

        assigned = []
        for obs, object_id in zip(observations, matched):
            assigned.append(self.create(obs).object_id if object_id == NEW else object_id)
        return assigned

    def evict(self, now: int, ttl: Optional[int] = None) -> int:
        ttl = self._config.ttl_ms if ttl is None else ttl
        stale = [key for key, rec in self._records.items() if now - rec.update_time > ttl]
        for key in stale:
            del self._records[key]
        return len(stale)

    def delta_since(self, t: int) -> List[ObjectRecord]:
        return [rec for rec in self if rec.update_time > t]

    def write_snapshot(self, path: Union[str, pathlib.Path]) -> None:
        with open(path, 'w') as f:
            for rec in self:
                f.write(json.dumps(snapshot_line(rec)) + '\n')


def snapshot_line(rec: ObjectRecord) -> Mapping[str, object]:
    return {
        'id': rec.object_id,
        'class': rec.object_class.value,
        'x': rec.geo_location.x,
        'y': rec.geo_location.y,
        'z': rec.geo_location.z,
        'confidence': rec.confidence,
        'update_time': rec.update_time,
        'latents': len(rec.latents),
    }


def read_snapshot(path: Union[str, pathlib.Path]) -> List[Mapping[str, object]]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# module-level aliases matching the database operations

def match(obs: Observation, db: MapDatabase, t: int, w: Optional[float] = None, threshold: Optional[float] = None) -> int:
    return db.match(obs, t, w, threshold)


def evict(db: MapDatabase, now: int, ttl: Optional[int] = None) -> int:
    return db.evict(now, ttl)


def delta_since(db: MapDatabase, t: int) -> List[ObjectRecord]:
    return db.delta_since(t)
