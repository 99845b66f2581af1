# SPDX-License-Identifier: MIT

'''
Synthetic traces: vehicle trajectories, ground-truth objects with signatures,
noisy observations, and the per-decision profile table that sizes tasks.
'''

from __future__ import annotations

import dataclasses
import enum
import json
import math
import pathlib
import warnings

from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import toml

from . import LiveMapError
from .geometry import CameraIntrinsics, Occluder, Pose, WorldPoint, visible
from .mapcore import ObjectClass, Observation
from .neural import VaeModel, extract_feature


FloatArray = npt.NDArray[np.float64]

PROFILES_PATH = pathlib.Path(__file__).resolve().parent.parent / 'config' / 'profiles' / 'default.toml'

TRACE_FORMAT = 1


class ScenarioError(LiveMapError):
    pass


class ProfileError(ScenarioError):
    pass


class TraceFormatError(ScenarioError):
    pass


class ScenarioKind(str, enum.Enum):
    INTERSECTION = 'intersection'
    HIGHWAY = 'highway'
    CIRCLE = 'circle'


@dataclasses.dataclass(frozen=True)
class Scenario:
    kind: ScenarioKind = ScenarioKind.INTERSECTION
    n_vehicles: int = 20
    n_objects: int = 30
    duration_ms: int = 60_000
    seed: int = 0
    frame_ms: int = 100
    camera_height_m: float = 1.5

    def __post_init__(self) -> None:
        object.__setattr__(self, 'kind', ScenarioKind(self.kind))
        if self.n_vehicles < 1:
            raise ScenarioError(f'A scenario needs at least one vehicle, got {self.n_vehicles}')
        if self.n_objects < 0:
            raise ScenarioError(f'Object count must be non-negative, got {self.n_objects}')
        if self.duration_ms <= 0 or self.frame_ms <= 0:
            raise ScenarioError('Duration and frame period must be positive')

    @property
    def frame_count(self) -> int:
        return max(1, self.duration_ms // self.frame_ms)

    def to_mapping(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out['kind'] = self.kind.value
        return out


DEFAULT_INTRINSICS = CameraIntrinsics.from_fov(741, 540, 54.04, 50.0)


@dataclasses.dataclass(frozen=True)
class VehicleCapability:
    name: str
    cpu_count: int
    cpu_freq_ghz: float
    mem_gb: float
    gpu_cores: int
    gpu_freq_ghz: float
    # onboard compute speed relative to the profile reference
    factor: float = 1.0


DEFAULT_CAPABILITIES = (
    VehicleCapability('nano', 4, 1.43, 4.0, 128, 0.92, 0.5),
    VehicleCapability('nx', 6, 1.9, 8.0, 384, 1.1, 1.0),
    VehicleCapability('agx', 8, 2.26, 32.0, 512, 1.37, 2.0),
)


class TraceObject(NamedTuple):
    object_id: int
    object_class: ObjectClass
    position: WorldPoint
    signature: Tuple[float, ...]
    height_m: float
    radius_m: float


class TraceVehicle(NamedTuple):
    vehicle_id: int
    pose: Pose
    capability: VehicleCapability


class TraceFrame(NamedTuple):
    t_ms: int
    vehicles: Tuple[TraceVehicle, ...]
    objects: Tuple[TraceObject, ...]

    def vehicle(self, vehicle_id: int) -> TraceVehicle:
        for vehicle in self.vehicles:
            if vehicle.vehicle_id == vehicle_id:
                return vehicle
        raise ScenarioError(f'Vehicle {vehicle_id} is not in the frame at {self.t_ms} ms')


# (height, radius) of the cylinder standing in for each class
_SHAPES = {
    ObjectClass.PERSON: (1.7, 0.4),
    ObjectClass.BICYCLE: (1.6, 0.6),
    ObjectClass.CAR: (1.5, 1.0),
    ObjectClass.MOTORCYCLE: (1.4, 0.6),
    ObjectClass.BUS: (3.2, 1.5),
    ObjectClass.TRUCK: (3.5, 1.5),
    ObjectClass.TRAFFIC_LIGHT: (4.0, 0.2),
    ObjectClass.OTHER: (1.0, 0.5),
}

# connected vehicles shadow like cars
_VEHICLE_SHAPE = _SHAPES[ObjectClass.CAR]


@dataclasses.dataclass(frozen=True)
class SignatureModel:
    '''Class prototype + per-instance offset + per-view noise.'''
    prototypes: Mapping[ObjectClass, Tuple[float, ...]]
    instance_sigma: float = 0.3
    view_sigma: float = 0.05

    @classmethod
    def seeded(cls, seed: int, dim: int = 64, **kwargs: float) -> SignatureModel:
        rng = np.random.default_rng([seed, 0x516])
        prototypes = {klass: tuple(rng.standard_normal(dim).tolist()) for klass in ObjectClass}
        return cls(prototypes, **kwargs)

    @property
    def dim(self) -> int:
        return len(next(iter(self.prototypes.values())))

    def instance(self, object_class: ObjectClass, rng: np.random.Generator) -> Tuple[float, ...]:
        base = np.array(self.prototypes[object_class])
        return tuple((base + rng.normal(0.0, self.instance_sigma, self.dim)).tolist())

    def view(self, signatures: npt.ArrayLike, rng: np.random.Generator) -> FloatArray:
        data = np.asarray(signatures, dtype=np.float64)
        return data + rng.normal(0.0, self.view_sigma, data.shape)

    def training_set(self, n: int, rng: np.random.Generator) -> FloatArray:
        '''``n`` single views of fresh instances, classes drawn uniformly.'''
        classes = list(ObjectClass)
        picks = rng.integers(len(classes), size=n)
        instances = np.array([self.instance(classes[i], rng) for i in picks.tolist()])
        return self.view(instances, rng)


# trajectories


class _Path(NamedTuple):
    '''
    ``line``: moves along ``heading`` through ``(cx, cy)``, wrapping over ``length``.
    ``loop``: circles the origin at radius ``cx`` starting from angle ``cy``.
    ``static``: stays at ``(cx, cy)``.
    '''
    kind: str
    cx: float
    cy: float
    heading: float
    speed: float
    offset: float = 0.0
    length: float = 200.0

    def at(self, t_s: float) -> Tuple[float, float, float]:
        if self.kind == 'static':
            return self.cx, self.cy, self.heading
        if self.kind == 'line':
            s = (self.offset + self.speed * t_s) % self.length - self.length / 2
            return self.cx + s * math.cos(self.heading), self.cy + s * math.sin(self.heading), self.heading
        # loops run counter-clockwise for positive speed
        theta = self.cy + self.speed * t_s / self.cx
        yaw = theta + math.copysign(math.pi / 2, self.speed)
        return self.cx * math.cos(theta), self.cx * math.sin(theta), yaw


_CLASS_MIX = {
    ScenarioKind.INTERSECTION: {
        ObjectClass.PERSON: 0.35, ObjectClass.CAR: 0.25, ObjectClass.BICYCLE: 0.1, ObjectClass.BUS: 0.05,
        ObjectClass.TRUCK: 0.05, ObjectClass.MOTORCYCLE: 0.05, ObjectClass.TRAFFIC_LIGHT: 0.1, ObjectClass.OTHER: 0.05,
    },
    ScenarioKind.HIGHWAY: {
        ObjectClass.CAR: 0.5, ObjectClass.TRUCK: 0.2, ObjectClass.BUS: 0.1, ObjectClass.MOTORCYCLE: 0.1,
        ObjectClass.OTHER: 0.1,
    },
    ScenarioKind.CIRCLE: {
        ObjectClass.PERSON: 0.3, ObjectClass.CAR: 0.3, ObjectClass.BICYCLE: 0.15, ObjectClass.TRAFFIC_LIGHT: 0.1,
        ObjectClass.OTHER: 0.15,
    },
}

_STATIC_CLASSES = frozenset({ObjectClass.TRAFFIC_LIGHT, ObjectClass.OTHER})


def _vehicle_path(kind: ScenarioKind, index: int, rng: np.random.Generator) -> _Path:
    speed = float(rng.uniform(8.0, 14.0))
    if kind is ScenarioKind.INTERSECTION:
        # eastbound, westbound, northbound, southbound
        cx, cy, heading = [(0.0, -2.0, 0.0), (0.0, 2.0, math.pi), (2.0, 0.0, math.pi / 2), (-2.0, 0.0, -math.pi / 2)][index % 4]
        return _Path('line', cx, cy, heading, speed, float(rng.uniform(0, 200)), 200.0)
    if kind is ScenarioKind.HIGHWAY:
        lane = [-2.0, 2.0, -6.0, 6.0][index % 4]
        heading = 0.0 if lane < 0 else math.pi
        return _Path('line', 0.0, lane, heading, speed * 2, float(rng.uniform(0, 400)), 400.0)
    radius = [20.0, 24.0, 28.0][index % 3]
    direction = 1.0 if (index // 3) % 2 == 0 else -1.0
    return _Path('loop', radius, float(rng.uniform(0, 2 * math.pi)), 0.0, direction * speed)


def _object_path(kind: ScenarioKind, klass: ObjectClass, rng: np.random.Generator) -> _Path:
    if klass in _STATIC_CLASSES:
        if kind is ScenarioKind.INTERSECTION:
            sx, sy = rng.choice([-1.0, 1.0], size=2)
            return _Path('static', float(sx * rng.uniform(7, 30)), float(sy * rng.uniform(7, 30)), 0.0, 0.0)
        if kind is ScenarioKind.HIGHWAY:
            return _Path('static', float(rng.uniform(-150, 150)), float(rng.choice([-10.0, 10.0])), 0.0, 0.0)
        angle = float(rng.uniform(0, 2 * math.pi))
        radius = float(rng.choice([10.0, 34.0]))
        return _Path('static', radius * math.cos(angle), radius * math.sin(angle), 0.0, 0.0)

    if klass is ObjectClass.PERSON:
        speed = float(rng.uniform(1.0, 1.6)) * float(rng.choice([-1.0, 1.0]))
        if kind is ScenarioKind.CIRCLE:
            return _Path('loop', float(rng.choice([14.0, 34.0])), float(rng.uniform(0, 2 * math.pi)), 0.0, speed)
        side = float(rng.choice([-8.0, 8.0]))
        if rng.random() < 0.5:
            return _Path('line', 0.0, side, 0.0, speed, float(rng.uniform(0, 80)), 80.0)
        return _Path('line', side, 0.0, math.pi / 2, speed, float(rng.uniform(0, 80)), 80.0)

    return _vehicle_path(kind, int(rng.integers(12)), rng)._replace(speed=float(rng.uniform(3.0, 10.0)))


def generate(
    scenario: Scenario,
    *,
    capabilities: Sequence[VehicleCapability] = DEFAULT_CAPABILITIES,
    signatures: Optional[SignatureModel] = None,
) -> List[TraceFrame]:
    '''Deterministic trace of ``scenario.frame_count`` frames, ``frame_ms`` apart.'''
    rng = np.random.default_rng([scenario.seed, 0x7ace])
    signatures = signatures or SignatureModel.seeded(scenario.seed)
    if not capabilities:
        raise ScenarioError('At least one vehicle capability is required')

    vehicle_paths = [_vehicle_path(scenario.kind, i, rng) for i in range(scenario.n_vehicles)]
    fleet = [capabilities[int(rng.integers(len(capabilities)))] for _ in range(scenario.n_vehicles)]

    mix = _CLASS_MIX[scenario.kind]
    classes = list(mix)
    weights = np.array([mix[klass] for klass in classes])
    object_classes = [classes[i] for i in rng.choice(len(classes), size=scenario.n_objects, p=weights / weights.sum())]
    object_paths = [_object_path(scenario.kind, klass, rng) for klass in object_classes]
    object_signatures = [signatures.instance(klass, rng) for klass in object_classes]

    frames = []
    for index in range(scenario.frame_count):
        t_ms = index * scenario.frame_ms
        t_s = t_ms / 1000
        vehicles = []
        for vehicle_id, (path, capability) in enumerate(zip(vehicle_paths, fleet)):
            x, y, yaw = path.at(t_s)
            vehicles.append(TraceVehicle(vehicle_id, Pose.from_ground(x, y, yaw, scenario.camera_height_m), capability))
        objects = []
        for object_id, (klass, path, signature) in enumerate(zip(object_classes, object_paths, object_signatures)):
            x, y, _ = path.at(t_s)
            height, radius = _SHAPES[klass]
            objects.append(TraceObject(object_id, klass, WorldPoint(x, y, 0.0), signature, height, radius))
        frames.append(TraceFrame(t_ms, tuple(vehicles), tuple(objects)))
    return frames


# observations


@dataclasses.dataclass(frozen=True)
class ObservationNoise:
    sigma_loc_m: float = 0.2
    confidence_mean: float = 0.8
    confidence_sigma: float = 0.1
    # keeps every observation usable as a fusion weight
    confidence_floor: float = 0.05
    view_sigma: float = 0.05


def occluders(frame: TraceFrame, vehicle_id: int) -> List[Occluder]:
    '''Every object plus every other connected vehicle.'''
    out = [Occluder(obj.position, obj.height_m, obj.radius_m) for obj in frame.objects]
    for vehicle in frame.vehicles:
        if vehicle.vehicle_id != vehicle_id:
            ground = vehicle.pose.position
            out.append(Occluder(WorldPoint(ground.x, ground.y, 0.0), *_VEHICLE_SHAPE))
    return out


def observe(
    frame: TraceFrame,
    vehicle_id: int,
    vae: VaeModel,
    rng: np.random.Generator,
    *,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    noise: ObservationNoise = ObservationNoise(),
    t_ms: Optional[int] = None,
) -> List[Observation]:
    '''
    Observations of the ground-truth objects visible to ``vehicle_id``, in
    object-id order. Each carries its ground-truth id for scoring and is
    stamped ``t_ms`` (the frame time by default).
    '''
    pose = frame.vehicle(vehicle_id).pose
    if not frame.objects:
        return []
    points = np.array([obj.position for obj in frame.objects])
    mask = visible(points, pose, intrinsics, occluders(frame, vehicle_id))
    seen = [obj for obj, flag in zip(frame.objects, mask.tolist()) if flag]
    if not seen:
        return []

    raw = np.array([obj.signature for obj in seen])
    views = raw + rng.normal(0.0, noise.view_sigma, raw.shape)
    latents = extract_feature(vae, views)
    offsets = rng.normal(0.0, noise.sigma_loc_m, (len(seen), 2)) if noise.sigma_loc_m > 0 else np.zeros((len(seen), 2))
    confidences = np.clip(
        rng.normal(noise.confidence_mean, noise.confidence_sigma, len(seen)),
        noise.confidence_floor, 1.0,
    )

    stamp = frame.t_ms if t_ms is None else t_ms
    out = []
    for obj, latent, (dx, dy), confidence in zip(seen, latents, offsets, confidences.tolist()):
        location = WorldPoint(obj.position.x + float(dx), obj.position.y + float(dy), obj.position.z)
        out.append(Observation(obj.object_class, confidence, location, latent, vehicle_id, stamp, obj.object_id))
    return out


# profile table


class TaskDemand(NamedTuple):
    onboard_ms: float
    uplink_bytes: float
    server_ms: float


@dataclasses.dataclass(frozen=True)
class DecisionProfile:
    onboard_ms: Tuple[float, float]
    uplink_base_bytes: float
    uplink_per_object_bytes: float
    server_ms: Tuple[float, float]

    def uplink_bytes(self, n_objects: int) -> float:
        return self.uplink_base_bytes + self.uplink_per_object_bytes * n_objects


@dataclasses.dataclass(frozen=True)
class ProfileTable:
    '''
    Synthetic-calibrated task demand per offloading decision. Times are
    ``(mean, stdev)`` in milliseconds for the reference vehicle and server.
    '''
    profiles: Mapping[int, DecisionProfile]
    broadcast_bytes_per_record: float = 256.0

    def __post_init__(self) -> None:
        if not self.profiles:
            raise ProfileError('The profile table is empty')
        for y, profile in self.profiles.items():
            if profile.onboard_ms[0] < 0 or profile.server_ms[0] < 0 or profile.uplink_base_bytes < 0 \
                    or profile.uplink_per_object_bytes < 0 or min(profile.onboard_ms[1], profile.server_ms[1]) < 0:
                raise ProfileError(f'Decision {y} has negative entries')
        first = self.profiles[self.decisions[0]]
        if any(p.onboard_ms[0] < first.onboard_ms[0] for p in self.profiles.values()):
            raise ProfileError('The first decision must have the smallest onboard time')
        if self.broadcast_bytes_per_record < 0:
            raise ProfileError('Broadcast size must be non-negative')

    @property
    def decisions(self) -> Tuple[int, ...]:
        return tuple(sorted(self.profiles))

    def __getitem__(self, y: int) -> DecisionProfile:
        return self.profiles[y]

    def check_uplink(self, max_objects: int = 64) -> None:
        '''Warns at the first object count for which uplink sizes grow with the decision.'''
        for n in range(max_objects + 1):
            sizes = [self.profiles[y].uplink_bytes(n) for y in self.decisions]
            if any(later > earlier for earlier, later in zip(sizes, sizes[1:])):
                warnings.warn(f'Uplink sizes are not non-increasing in the decision for {n} objects')
                return

    def sample(self, y: int, n_objects: int, rng: np.random.Generator) -> TaskDemand:
        profile = self.profiles[y]
        onboard = max(0.0, float(rng.normal(*profile.onboard_ms)))
        server = max(0.0, float(rng.normal(*profile.server_ms)))
        return TaskDemand(onboard, profile.uplink_bytes(n_objects), server)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> ProfileTable:
        try:
            profiles = {
                int(y): DecisionProfile(
                    onboard_ms=(float(entry['onboard_ms'][0]), float(entry['onboard_ms'][1])),
                    uplink_base_bytes=float(entry['uplink_base_bytes']),
                    uplink_per_object_bytes=float(entry['uplink_per_object_bytes']),
                    server_ms=(float(entry['server_ms'][0]), float(entry['server_ms'][1])),
                )
                for y, entry in data['decisions'].items()
            }
            return cls(profiles, float(data['broadcast_bytes_per_record']))
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise ProfileError(f'Malformed profile table: {e!r}') from e


def load_profiles(path: Union[str, pathlib.Path]) -> ProfileTable:
    table = ProfileTable.from_mapping(toml.load(path))
    table.check_uplink()
    return table


def default_profiles() -> ProfileTable:
    return load_profiles(PROFILES_PATH)


# trace files


def _capability_mapping(capability: VehicleCapability) -> Dict[str, Any]:
    return dataclasses.asdict(capability)


def write_trace(
    path: Union[str, pathlib.Path],
    scenario: Scenario,
    frames: Sequence[TraceFrame],
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
) -> None:
    '''Header line (scenario, intrinsics, capabilities, objects) then one line per frame.'''
    capabilities: Dict[str, VehicleCapability] = {}
    objects: Dict[int, TraceObject] = {}
    for frame in frames:
        for vehicle in frame.vehicles:
            capabilities.setdefault(vehicle.capability.name, vehicle.capability)
        for obj in frame.objects:
            objects.setdefault(obj.object_id, obj)
    header = {
        'format': TRACE_FORMAT,
        'scenario': scenario.to_mapping(),
        'intrinsics': dataclasses.asdict(intrinsics),
        'capabilities': [_capability_mapping(c) for c in capabilities.values()],
        'objects': [
            {
                'id': obj.object_id, 'class': obj.object_class.value, 'height': obj.height_m,
                'radius': obj.radius_m, 'signature': list(obj.signature),
            }
            for obj in sorted(objects.values(), key=lambda o: o.object_id)
        ],
    }
    with open(path, 'w') as f:
        f.write(json.dumps(header) + '\n')
        for frame in frames:
            f.write(json.dumps({
                't': frame.t_ms,
                'vehicles': [
                    [v.vehicle_id, v.capability.name, v.pose.cam_to_world.ravel().tolist()]
                    for v in frame.vehicles
                ],
                'objects': [[o.object_id, *o.position] for o in frame.objects],
            }) + '\n')


def read_trace(path: Union[str, pathlib.Path]) -> Tuple[Scenario, CameraIntrinsics, List[TraceFrame]]:
    with open(path) as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise TraceFormatError(f'{path} is empty')
    try:
        header = json.loads(lines[0])
        if header.get('format') != TRACE_FORMAT:
            raise TraceFormatError(f'{path}: unsupported trace format {header.get("format")}')
        scenario = Scenario(**header['scenario'])
        intrinsics = CameraIntrinsics(**header['intrinsics'])
        capabilities = {c['name']: VehicleCapability(**c) for c in header['capabilities']}
        meta = {entry['id']: entry for entry in header['objects']}

        frames = []
        for line in lines[1:]:
            record = json.loads(line)
            vehicles = tuple(
                TraceVehicle(vid, Pose(np.array(matrix).reshape(4, 4)), capabilities[name])
                for vid, name, matrix in record['vehicles']
            )
            objects = tuple(
                TraceObject(
                    oid, ObjectClass(meta[oid]['class']), WorldPoint(x, y, z),
                    tuple(meta[oid]['signature']), meta[oid]['height'], meta[oid]['radius'],
                )
                for oid, x, y, z in record['objects']
            )
            frames.append(TraceFrame(record['t'], vehicles, objects))
    except (KeyError, TypeError, ValueError) as e:
        raise TraceFormatError(f'{path}: malformed trace ({e!r})') from e
    if any(b.t_ms <= a.t_ms for a, b in zip(frames, frames[1:])):
        raise TraceFormatError(f'{path}: frame times are not strictly increasing')
    return scenario, intrinsics, frames
