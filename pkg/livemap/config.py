# SPDX-License-Identifier: MIT

'''
Layered experiment configuration.

``config/base.toml`` holds every default; ``config/scenarios/<kind>.toml``
overrides it for one scenario kind; an optional user file and the command line
come last. Tables are merged key by key and the result is checked against the
typed sections below.
'''

from __future__ import annotations

import dataclasses
import enum
import pathlib

from typing import Any, Dict, Mapping, MutableMapping, Optional, Tuple, Type, TypeVar, Union

import toml

from . import LiveMapError
from .agent import AgentParams, EpsilonSchedule, StateBounds
from .geometry import CameraIntrinsics, WorldPoint
from .mapcore import MatchConfig
from .scenario import ObservationNoise, ProfileTable, Scenario, ScenarioKind, VehicleCapability, load_profiles
from .simnet import SimConfig


CONFIG_DIR = pathlib.Path(__file__).resolve().parent.parent / 'config'

T = TypeVar('T')


class ConfigError(LiveMapError):
    pass


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    '''Recursively merges tables; values from ``override`` win.'''
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclasses.dataclass(frozen=True)
class CameraSection:
    width_px: int = 741
    height_px: int = 540
    fov_deg: float = 54.04
    max_range_m: float = 50.0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width_px, self.height_px, self.fov_deg, self.max_range_m)


@dataclasses.dataclass(frozen=True)
class SchedulerSection:
    beta: float = 0.8
    epoch_period_ms: int = 1000
    backoff_ms: int = 500
    recompute_overlap: bool = True


@dataclasses.dataclass(frozen=True)
class VaeSection:
    signature_dim: int = 64
    hidden: Tuple[int, ...] = (128,)
    latent_dim: int = 25
    instance_sigma: float = 0.3
    train_samples: int = 256
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3


@dataclasses.dataclass(frozen=True)
class WorldSection:
    grid_cell_m: float = 0.5
    # data plane (observation, matching, fusion) while training the agent
    data_plane_in_training: bool = True
    progress_every: int = 1000


@dataclasses.dataclass(frozen=True)
class RunSection:
    policy: str = 'head'
    train_steps: int = 100_000
    eval_duration_ms: int = 60_000
    profiles: str = 'profiles/default.toml'
    checkpoint: str = ''
    rm_coefficients: str = ''
    rm_vehicle_counts: Tuple[int, ...] = (5, 10, 20, 35, 50)
    rm_duration_ms: int = 20_000
    out: str = 'out'


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    scenario: Scenario
    camera: CameraSection
    noise: ObservationNoise
    capabilities: Tuple[VehicleCapability, ...]
    sim: SimConfig
    scheduler: SchedulerSection
    agent: AgentParams
    bounds: StateBounds
    matching: MatchConfig
    vae: VaeSection
    world: WorldSection
    run: RunSection
    profiles: ProfileTable
    # directory relative paths in ``run`` are resolved against
    root: pathlib.Path = CONFIG_DIR

    def replace(self, **sections: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **sections)

    def resolve(self, relative: str) -> pathlib.Path:
        path = pathlib.Path(relative)
        return path if path.is_absolute() else self.root / path

    def to_mapping(self) -> Dict[str, Any]:
        '''The fully resolved configuration as TOML-ready tables.'''
        agent = self.agent.to_mapping()
        agent['bounds'] = self.bounds.to_mapping()
        scenario = self.scenario.to_mapping()
        del scenario['seed']
        sim = _plain(self.sim)
        del sim['seed']
        matching = _plain(self.matching)
        del matching['latent_dim']
        return {
            'seed': self.seed,
            'scenario': scenario,
            'camera': _plain(self.camera),
            'noise': _plain(self.noise),
            'capabilities': [_plain(c) for c in self.capabilities],
            'sim': sim,
            'scheduler': _plain(self.scheduler),
            'agent': _plain(agent),
            'matching': matching,
            'vae': _plain(self.vae),
            'world': _plain(self.world),
            'run': _plain(self.run),
        }

    def write_echo(self, directory: Union[str, pathlib.Path]) -> pathlib.Path:
        path = pathlib.Path(directory) / 'config.toml'
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            toml.dump(self.to_mapping(), f)
        return path


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {field.name: _plain(getattr(value, field.name)) for field in dataclasses.fields(value)}
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _check_type(section: str, key: str, value: Any, default: Any) -> Any:
    '''Coerces ``value`` to the type of ``default``, raising on mismatches.'''
    where = f'{section}.{key}'
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f'`{where}` must be a boolean, got {value!r}')
        return value
    if isinstance(default, enum.Enum):
        try:
            return type(default)(value)
        except ValueError:
            choices = ', '.join(member.value for member in type(default))
            raise ConfigError(f'`{where}` must be one of: {choices} (got {value!r})') from None
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'`{where}` must be an integer, got {value!r}')
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'`{where}` must be a number, got {value!r}')
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f'`{where}` must be a string, got {value!r}')
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f'`{where}` must be an array, got {value!r}')
        if not default:
            return tuple(value)
        return tuple(_check_type(section, f'{key}[{i}]', item, default[0]) for i, item in enumerate(value))
    return value


def _section(cls: Type[T], name: str, table: Mapping[str, Any], **extra: Any) -> T:
    if not isinstance(table, Mapping):
        raise ConfigError(f'`{name}` must be a table')
    defaults = cls()  # type: ignore[call-arg]
    known = {field.name for field in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f'Unknown keys in `{name}`: {", ".join(sorted(unknown))}')
    values = {key: _check_type(name, key, value, getattr(defaults, key)) for key, value in table.items()}
    values.update(extra)
    try:
        return cls(**values)
    except (LiveMapError, ValueError, TypeError) as e:
        raise ConfigError(f'Invalid `{name}`: {e}') from e


def _capability(index: int, table: Mapping[str, Any]) -> VehicleCapability:
    try:
        return VehicleCapability(
            name=str(table['name']),
            cpu_count=int(table['cpu_count']),
            cpu_freq_ghz=float(table['cpu_freq_ghz']),
            mem_gb=float(table['mem_gb']),
            gpu_cores=int(table['gpu_cores']),
            gpu_freq_ghz=float(table['gpu_freq_ghz']),
            factor=float(table.get('factor', 1.0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f'Invalid `capabilities[{index}]`: {e!r}') from e


def from_mapping(data: Mapping[str, Any], root: pathlib.Path = CONFIG_DIR) -> ExperimentConfig:
    '''Validates a merged mapping and builds the typed configuration.'''
    tables = dict(data)
    known = {
        'seed', 'scenario', 'camera', 'noise', 'capabilities', 'sim', 'scheduler',
        'agent', 'matching', 'vae', 'world', 'run',
    }
    unknown = set(tables) - known
    if unknown:
        raise ConfigError(f'Unknown configuration tables: {", ".join(sorted(unknown))}')

    seed = tables.get('seed', 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f'`seed` must be a non-negative integer, got {seed!r}')

    sim_table = dict(tables.get('sim', {}))
    if 'bs_position' in sim_table:
        position = sim_table.pop('bs_position')
        if not isinstance(position, list) or len(position) != 3:
            raise ConfigError('`sim.bs_position` must be an array of three numbers')
        sim_extra: Dict[str, Any] = {'bs_position': WorldPoint(*map(float, position))}
    else:
        sim_extra = {}
    if 'seed' in sim_table:
        raise ConfigError('`sim.seed` is derived from the top-level `seed`')
    sim = _section(SimConfig, 'sim', sim_table, seed=seed, **sim_extra)

    scenario_table = dict(tables.get('scenario', {}))
    if 'seed' in scenario_table:
        raise ConfigError('`scenario.seed` is derived from the top-level `seed`')
    scenario = _section(Scenario, 'scenario', scenario_table, seed=seed)

    agent_table = dict(tables.get('agent', {}))
    bounds_table = agent_table.pop('bounds', None)
    epsilon_table = agent_table.pop('epsilon', {})
    epsilon = _section(EpsilonSchedule, 'agent.epsilon', epsilon_table)
    agent = _section(AgentParams, 'agent', agent_table, epsilon=epsilon)
    if bounds_table is None:
        raise ConfigError('`agent.bounds` is required')
    try:
        bounds = StateBounds.from_mapping(bounds_table)
    except (LiveMapError, TypeError, IndexError, ValueError) as e:
        raise ConfigError(f'Invalid `agent.bounds`: {e}') from e

    vae = _section(VaeSection, 'vae', tables.get('vae', {}))
    matching_table = dict(tables.get('matching', {}))
    if 'latent_dim' in matching_table:
        raise ConfigError('`matching.latent_dim` is derived from `vae.latent_dim`')
    matching = _section(MatchConfig, 'matching', matching_table, latent_dim=vae.latent_dim)

    capabilities = tables.get('capabilities', [])
    if not isinstance(capabilities, list) or not capabilities:
        raise ConfigError('`capabilities` must be a non-empty array of tables')

    run = _section(RunSection, 'run', tables.get('run', {}))
    profiles_path = pathlib.Path(run.profiles)
    if not profiles_path.is_absolute():
        profiles_path = root / profiles_path
    if not profiles_path.is_file():
        raise ConfigError(f'Profile table not found: {profiles_path}')
    try:
        profiles = load_profiles(profiles_path)
    except LiveMapError as e:
        raise ConfigError(str(e)) from e

    return ExperimentConfig(
        seed=seed,
        scenario=scenario,
        camera=_section(CameraSection, 'camera', tables.get('camera', {})),
        noise=_section(ObservationNoise, 'noise', tables.get('noise', {})),
        capabilities=tuple(_capability(i, table) for i, table in enumerate(capabilities)),
        sim=sim,
        scheduler=_section(SchedulerSection, 'scheduler', tables.get('scheduler', {})),
        agent=agent,
        bounds=bounds,
        matching=matching,
        vae=vae,
        world=_section(WorldSection, 'world', tables.get('world', {})),
        run=run,
        profiles=profiles,
        root=root,
    )


def _load(path: pathlib.Path) -> MutableMapping[str, Any]:
    if not path.is_file():
        raise ConfigError(f'Config not found: {path}')
    try:
        return toml.load(path)
    except toml.TomlDecodeError as e:
        raise ConfigError(f'Failed to parse {path}: {e}') from e


def load_config(
    scenario_kind: Optional[str] = None,
    path: Optional[Union[str, pathlib.Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    *,
    root: pathlib.Path = CONFIG_DIR,
) -> ExperimentConfig:
    '''
    Merges ``base.toml``, the scenario layer, the user file at ``path`` and
    ``overrides``, in that order. The scenario kind is taken from
    ``scenario_kind``, else from ``overrides``, the user file and the base.
    '''
    base = _load(root / 'base.toml')
    user = _load(pathlib.Path(path)) if path is not None else {}
    overrides = overrides or {}

    kind = scenario_kind
    for layer in (overrides, user, base):
        if kind is None:
            kind = layer.get('scenario', {}).get('kind')
    try:
        kind = ScenarioKind(kind).value
    except ValueError:
        raise ConfigError(f'Unknown scenario kind: {kind!r}') from None

    merged = deep_merge(base, _load(root / 'scenarios' / f'{kind}.toml'))
    merged = deep_merge(merged, user)
    merged = deep_merge(merged, overrides)
    merged = deep_merge(merged, {'scenario': {'kind': kind}})
    return from_mapping(merged, root)
