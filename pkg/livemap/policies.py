# SPDX-License-Identifier: MIT

'''
Offloading policies: the fixed baselines (every-offload, local processing,
random, regression model) and the learned agent with or without vehicle
scheduling. Policies are looked up by name through :py:meth:`Policy.class_from_name`.
'''

from __future__ import annotations

import dataclasses
import pathlib
import warnings

from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Type, Union

import numpy as np
import numpy.typing as npt
import toml

from . import LiveMapError
from .agent import DqnAgent, StateVector


FloatArray = npt.NDArray[np.float64]


class PolicyError(LiveMapError):
    pass


class UnknownPolicyError(PolicyError):
    pass


class DegenerateFitError(PolicyError):
    pass


def eo(s: Optional[StateVector] = None) -> int:
    '''Ships the raw frame.'''
    return 0


def lp(s: Optional[StateVector] = None, n_actions: int = 5) -> int:
    '''Runs the whole data plane onboard.'''
    return n_actions - 1


def ro(s: Optional[StateVector], rng: np.random.Generator, n_actions: int = 5) -> int:
    return int(rng.integers(n_actions))


def polynomial_features(rate: npt.ArrayLike, n_vehicles: npt.ArrayLike, degree: int = 2) -> FloatArray:
    '''Monomials ``r^i n^j`` with ``i + j <= degree``, by total degree then descending power of ``r``.'''
    r = np.atleast_1d(np.asarray(rate, dtype=np.float64))
    n = np.atleast_1d(np.asarray(n_vehicles, dtype=np.float64))
    columns = [r ** i * n ** (total - i) for total in range(degree + 1) for i in range(total, -1, -1)]
    return np.stack(columns, axis=-1)


@dataclasses.dataclass(frozen=True)
class RegressionModel:
    '''Latency polynomial of ``(data rate, connected vehicles)`` for every action.'''
    coefficients: Dict[int, Tuple[float, ...]]
    degree: int = 2

    def predict(self, rate: float, n_vehicles: float) -> Dict[int, float]:
        features = polynomial_features(rate, n_vehicles, self.degree)[0]
        return {a: float(features @ np.array(c)) for a, c in sorted(self.coefficients.items())}

    def to_mapping(self) -> Dict[str, Any]:
        return {
            'degree': self.degree,
            'coefficients': {str(a): list(c) for a, c in sorted(self.coefficients.items())},
        }

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> RegressionModel:
        try:
            return cls(
                {int(a): tuple(float(v) for v in c) for a, c in data['coefficients'].items()},
                int(data.get('degree', 2)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise PolicyError(f'Malformed regression model: {e!r}') from e


class RmSample(NamedTuple):
    rate: float
    n_vehicles: float
    action: int
    latency: float


def rm_fit(dataset: Sequence[Tuple[float, float, int, float]], *, degree: int = 2, n_actions: int = 5) -> RegressionModel:
    '''Per-action least squares over the polynomial features (columns scaled before solving).'''
    data = np.asarray(dataset, dtype=np.float64).reshape(-1, 4)
    n_features = (degree + 1) * (degree + 2) // 2
    coefficients = {}
    for action in range(n_actions):
        rows = data[data[:, 2] == action]
        if len(rows) < n_features:
            raise DegenerateFitError(f'Action {action} has {len(rows)} samples, at least {n_features} are needed')
        if len(rows) < 2 * n_features:
            warnings.warn(f'Fitting action {action} from only {len(rows)} samples')
        design = polynomial_features(rows[:, 0], rows[:, 1], degree)
        scale = np.linalg.norm(design, axis=0)
        scale[scale == 0] = 1.0
        scaled = design / scale
        if np.linalg.matrix_rank(scaled) < n_features:
            raise DegenerateFitError(f'Design matrix for action {action} is rank deficient')
        solution, *_ = np.linalg.lstsq(scaled, rows[:, 3], rcond=None)
        coefficients[action] = tuple((solution / scale).tolist())
    return RegressionModel(coefficients, degree)


def rm_decide(model: RegressionModel, rate: float, n_vehicles: float) -> int:
    '''Action with the lowest predicted latency, lowest action on ties.'''
    predictions = model.predict(rate, n_vehicles)
    best = min(predictions.values())
    return min(a for a, value in predictions.items() if value == best)


def save_rm(model: RegressionModel, path: Union[str, pathlib.Path]) -> None:
    with open(path, 'w') as f:
        toml.dump(model.to_mapping(), f)


def load_rm(path: Union[str, pathlib.Path]) -> RegressionModel:
    if not pathlib.Path(path).is_file():
        raise PolicyError(f'Regression model {path} does not exist')
    return RegressionModel.from_mapping(toml.load(path))


class DecisionContext(NamedTuple):
    '''What a policy may look at when a scheduled vehicle requests service.'''
    vehicle_id: int
    state: StateVector
    rate_bps: float
    connected: int


class Policy():
    NAME: Optional[str] = None
    # whether requests go through the coverage-constrained scheduler first
    SCHEDULES = False

    def __init__(self, n_actions: int = 5, **kwargs: Any) -> None:
        if not self.NAME:
            raise ValueError(f"Policy doesn't have a name: {self.__class__.__name__}")
        self.n_actions = n_actions

    @classmethod
    def from_name(cls, name: str, *args: Any, **kwargs: Any) -> Policy:
        return cls.class_from_name(name)(*args, **kwargs)

    @classmethod
    def class_from_name(cls, name: str) -> Type[Policy]:
        for subclass in cls.__subclasses__():
            if subclass.NAME == name:
                return subclass
        raise UnknownPolicyError(f'Could not find policy: {name} (available: {", ".join(cls.names())})')

    @classmethod
    def names(cls) -> List[str]:
        return [subclass.NAME for subclass in cls.__subclasses__() if subclass.NAME]

    @property
    def agent(self) -> Optional[DqnAgent]:
        return None

    def decide(self, ctx: DecisionContext, *, explore: bool = False) -> int:
        raise NotImplementedError


class EveryOffloadPolicy(Policy):
    NAME = 'eo'

    def decide(self, ctx: DecisionContext, *, explore: bool = False) -> int:
        return eo(ctx.state)


class LocalProcessingPolicy(Policy):
    NAME = 'lp'

    def decide(self, ctx: DecisionContext, *, explore: bool = False) -> int:
        return lp(ctx.state, self.n_actions)


class RandomPolicy(Policy):
    NAME = 'ro'

    def __init__(self, n_actions: int = 5, *, rng: Optional[np.random.Generator] = None, **kwargs: Any) -> None:
        super().__init__(n_actions)
        self._rng = rng or np.random.default_rng(0)

    def decide(self, ctx: DecisionContext, *, explore: bool = False) -> int:
        return ro(ctx.state, self._rng, self.n_actions)


class RegressionPolicy(Policy):
    NAME = 'rm'

    def __init__(self, n_actions: int = 5, *, model: Optional[RegressionModel] = None, **kwargs: Any) -> None:
        super().__init__(n_actions)
        if model is None:
            raise PolicyError('The regression policy needs a fitted model')
        self.model = model

    def decide(self, ctx: DecisionContext, *, explore: bool = False) -> int:
        return rm_decide(self.model, ctx.rate_bps, ctx.connected)


class HeadPolicy(Policy):
    '''Learned offloading behind the coverage-constrained scheduler.'''
    NAME = 'head'
    SCHEDULES = True

    def __init__(self, n_actions: int = 5, *, agent: Optional[DqnAgent] = None, **kwargs: Any) -> None:
        super().__init__(n_actions)
        if agent is None:
            raise PolicyError(f'Policy {self.NAME} needs an agent')
        if agent.n_actions != n_actions:
            raise PolicyError(f'Agent has {agent.n_actions} actions, expected {n_actions}')
        self._agent = agent

    @property
    def agent(self) -> DqnAgent:
        return self._agent

    def decide(self, ctx: DecisionContext, *, explore: bool = False) -> int:
        return self._agent.act(ctx.state, explore=explore)


class HeadLitePolicy(Policy):
    '''Learned offloading with every request scheduled.'''
    NAME = 'head-lite'

    def __init__(self, n_actions: int = 5, *, agent: Optional[DqnAgent] = None, **kwargs: Any) -> None:
        super().__init__(n_actions)
        if agent is None:
            raise PolicyError(f'Policy {self.NAME} needs an agent')
        self._agent = agent

    @property
    def agent(self) -> DqnAgent:
        return self._agent

    def decide(self, ctx: DecisionContext, *, explore: bool = False) -> int:
        return self._agent.act(ctx.state, explore=explore)
