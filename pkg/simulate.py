#!/usr/bin/env python3
# SPDX-License-Identifier: MIT

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import os
import pathlib
import sys
import traceback
import warnings

from typing import Any, Dict, Iterable, List, Mapping, NoReturn, Optional, Sequence, TextIO, Tuple, Type, Union


_MIN_PYTHON_VERSION = (3, 9)


# disable colors if we're not in a TTY
if sys.stdout.isatty():
    _RESET = '\33[0m'
    _DIM = '\33[2m'
    _RED = '\33[91m'
    _CYAN = '\33[96m'
else:
    _RESET = ''
    _DIM = ''
    _RED = ''
    _CYAN = ''


def _error(msg: str, code: int = 1) -> NoReturn:
    '''
    Prints an error message and exit with code
    '''
    print(f'{_RED}ERROR{_RESET} {msg}')
    sys.exit(code)


if sys.version_info < _MIN_PYTHON_VERSION:
    _error(
        f'Unsupported Python version: {".".join(map(str, sys.version_info[:3]))}... '
        f'You need at least Python {".".join(map(str, _MIN_PYTHON_VERSION))}.'
    )


# external imports with nice error messages for better UX

try:
    import toml
except ImportError:
    _error(
        'Missing toml dependency!\n'
        'You can install it with: pip install toml'
    )

try:
    import numpy  # noqa: F401
except ImportError:
    _error(
        'Missing numpy dependency!\n'
        'You can install it with: pip install numpy'
    )

try:
    import pandas
except ImportError:
    _error(
        'Missing pandas dependency!\n'
        'You can install it with: pip install pandas'
    )
else:
    import livemap
    import livemap.agent
    import livemap.config
    import livemap.policies
    import livemap.scenario
    import livemap.world


# overide default warning handler for a nice CLI

def _showwarning(
    message: Union[Warning, str],
    category: Type[Warning],
    filename: str,
    lineno: int,
    file: Optional[TextIO] = None,
    line: Optional[str] = None,
) -> None:
    '''
    Show warning to the console

    We override warnings.showwarning with this to match our CLI
    '''
    prefix = 'WARNING'
    if sys.stdout.isatty():
        prefix = '\33[93m' + prefix + '\33[0m'
    print('{} {}'.format(prefix, str(message)))


warnings.showwarning = _showwarning


TRACE_FILE = 'trace.jsonl'
CURVE_FILE = 'curve.csv'
SUMMARY_FILE = 'summary.toml'
SUMMARY_TABLE = 'summary.csv'
RM_FILE = 'rm.toml'
CHECKPOINT_STEM = 'agent'


class RunError(livemap.LiveMapError):
    pass


def print_summary(title: str, values: Mapping[str, Any]) -> None:
    print(f'livemap {_CYAN}{livemap.__version__}{_RESET} {title}', end='\n\n')
    for name, value in values.items():
        if isinstance(value, float):
            value = f'{value:.4g}'
        print('{:>24}: {}'.format(name, value))
    print()


def _progress(world: livemap.world.World) -> None:
    agent = world.agent
    line = f'{_DIM}{world.now:>10} ms{_RESET} decisions {len(world.decisions)}, completed {len(world.latencies)}'
    if world.learn and agent is not None:
        line += f', rewards {world.rewards}, epsilon {agent.epsilon:.3f}'
    print(line)


# configuration


def _overrides(
    seed: Optional[int] = None,
    beta: Optional[float] = None,
    vehicles: Optional[int] = None,
    policy: Optional[str] = None,
    out: Optional[str] = None,
) -> Dict[str, Any]:
    data: Dict[str, Any] = {}
    if seed is not None:
        data['seed'] = seed
    if beta is not None:
        data.setdefault('scheduler', {})['beta'] = beta
    if vehicles is not None:
        data.setdefault('scenario', {})['n_vehicles'] = vehicles
    if policy is not None:
        data.setdefault('run', {})['policy'] = policy
    if out is not None:
        data.setdefault('run', {})['out'] = out
    return data


def load(
    scenario: Optional[str] = None,
    config: Optional[str] = None,
    **overrides: Any,
) -> livemap.config.ExperimentConfig:
    return livemap.config.load_config(scenario, config, _overrides(**overrides))


def _frames(
    config: livemap.config.ExperimentConfig,
    trace: Optional[str],
) -> List[livemap.scenario.TraceFrame]:
    if trace is None:
        return livemap.world.make_frames(config)
    if not os.path.isfile(trace):
        raise RunError(f'Trace not found: {trace}')
    scenario, _, frames = livemap.scenario.read_trace(trace)
    if scenario.frame_ms != config.scenario.frame_ms:
        raise RunError(f'Trace frames are {scenario.frame_ms} ms apart, the configuration expects {config.scenario.frame_ms} ms')
    return frames


def _write_frame(frame: pandas.DataFrame, path: pathlib.Path) -> None:
    frame.to_csv(path, index=False, float_format='%.6g')


# commands


def cmd_gen_traces(config: livemap.config.ExperimentConfig) -> pathlib.Path:
    out = pathlib.Path(config.run.out)
    out.mkdir(parents=True, exist_ok=True)
    config.write_echo(out)
    frames = livemap.world.make_frames(config)
    path = out / TRACE_FILE
    livemap.scenario.write_trace(path, config.scenario, frames, config.camera.intrinsics)
    print_summary('trace', {
        'scenario': config.scenario.kind.value,
        'seed': config.seed,
        'vehicles': config.scenario.n_vehicles,
        'objects': config.scenario.n_objects,
        'frames': len(frames),
        'file': path,
    })
    return path


def _load_agent(
    config: livemap.config.ExperimentConfig,
    checkpoint: Optional[str],
    *,
    resume: bool = False,
) -> livemap.agent.DqnAgent:
    stem = checkpoint or config.run.checkpoint
    if not stem:
        raise livemap.agent.MissingCheckpointError('No checkpoint configured, set `run.checkpoint` or pass --checkpoint')
    if resume:
        return livemap.agent.DqnAgent.load(stem)
    return livemap.agent.DqnAgent.load(stem, livemap.world.agent_rng(config))


def cmd_train(
    config: livemap.config.ExperimentConfig,
    *,
    trace: Optional[str] = None,
    steps: Optional[int] = None,
    checkpoint: Optional[str] = None,
) -> pathlib.Path:
    '''Online training of the agent behind the scheduler; writes the checkpoint and the reward/loss curve.'''
    out = pathlib.Path(config.run.out)
    out.mkdir(parents=True, exist_ok=True)
    config.write_echo(out)
    steps = config.run.train_steps if steps is None else steps

    vae, vae_history = livemap.world.build_vae(config)
    agent = _load_agent(config, checkpoint, resume=True) if checkpoint else livemap.world.build_agent(config)
    policy_name = config.run.policy if config.run.policy in ('head', 'head-lite') else 'head'
    policy = livemap.world.make_policy(config, policy_name, agent=agent)
    world = livemap.world.World(
        config, policy, _frames(config, trace), vae,
        explore=True, learn=True, data_plane=config.world.data_plane_in_training, progress=_progress,
    ).run(reward_limit=steps)

    sidecar = agent.save(out / CHECKPOINT_STEM)
    curve = world.curve_frame()
    _write_frame(curve, out / CURVE_FILE)
    rewards = curve['reward']
    window = max(1, len(rewards) // 10)
    print_summary('training', {
        'policy': policy_name,
        'rewards': len(rewards),
        'train steps': agent.train_steps,
        'epsilon': agent.epsilon,
        'first mean reward': float(rewards.head(window).mean()) if len(rewards) else 0.0,
        'last mean reward': float(rewards.tail(window).mean()) if len(rewards) else 0.0,
        'vae loss': vae_history[-1] if vae_history else 0.0,
        'simulated': f'{world.now} ms',
        'checkpoint': sidecar,
    })
    return sidecar


def cmd_fit_rm(config: livemap.config.ExperimentConfig) -> pathlib.Path:
    '''Random offloading under several loads, then a per-action latency regression.'''
    out = pathlib.Path(config.run.out)
    out.mkdir(parents=True, exist_ok=True)
    config.write_echo(out)
    vae, _ = livemap.world.build_vae(config)
    rows = livemap.world.collect_rm_dataset(config, vae)
    _write_frame(pandas.DataFrame(rows, columns=livemap.policies.RmSample._fields), out / 'rm-dataset.csv')
    model = livemap.policies.rm_fit(rows, n_actions=len(config.profiles.decisions))
    path = out / RM_FILE
    livemap.policies.save_rm(model, path)
    print_summary('regression model', {
        'samples': len(rows),
        'vehicle counts': ' '.join(map(str, config.run.rm_vehicle_counts)),
        'degree': model.degree,
        'file': path,
    })
    return path


@dataclasses.dataclass(frozen=True)
class EvalJob:
    scenario: Optional[str]
    config: Optional[str]
    seed: Optional[int]
    beta: Optional[float]
    vehicles: Optional[int]
    policies: Tuple[str, ...]
    out: pathlib.Path
    trace: Optional[str] = None
    checkpoint: Optional[str] = None
    progress: bool = False

    @property
    def label(self) -> str:
        parts = [
            f'seed{self.seed}' if self.seed is not None else None,
            f'beta{self.beta:g}' if self.beta is not None else None,
            f'v{self.vehicles}' if self.vehicles is not None else None,
        ]
        return '-'.join(filter(None, parts)) or 'run'


def _regression_model(config: livemap.config.ExperimentConfig, vae: Any) -> livemap.policies.RegressionModel:
    if config.run.rm_coefficients:
        return livemap.policies.load_rm(config.resolve(config.run.rm_coefficients))
    print(f'{_DIM}fitting the regression model, no coefficients configured{_RESET}')
    rows = livemap.world.collect_rm_dataset(config, vae)
    return livemap.policies.rm_fit(rows, n_actions=len(config.profiles.decisions))


def run_eval_job(job: EvalJob) -> List[Dict[str, Any]]:
    '''One (seed, beta, vehicle count) combination for every policy; returns their summaries.'''
    config = load(job.scenario, job.config, seed=job.seed, beta=job.beta, vehicles=job.vehicles)
    out = job.out / job.label
    out.mkdir(parents=True, exist_ok=True)
    config.write_echo(out)

    frames = _frames(config, job.trace)
    vae, _ = livemap.world.build_vae(config)
    summaries = []
    for name in job.policies:
        cls = livemap.policies.Policy.class_from_name(name)
        agent = _load_agent(config, job.checkpoint) if cls in (livemap.policies.HeadPolicy, livemap.policies.HeadLitePolicy) else None
        model = _regression_model(config, vae) if cls is livemap.policies.RegressionPolicy else None
        policy = livemap.world.make_policy(config, name, agent=agent, rm_model=model)
        world = livemap.world.World(
            config, policy, frames, vae, progress=_progress if job.progress else None,
        ).run(config.run.eval_duration_ms)

        _write_frame(world.latency_frame(), out / f'latency-{name}.csv')
        _write_frame(world.decision_frame(), out / f'decisions-{name}.csv')
        _write_frame(world.coverage_frame(), out / f'coverage-{name}.csv')
        world.engine.write_event_log(out / f'events-{name}.jsonl')
        summary = world.summary()
        summary['run'] = job.label
        summaries.append(summary)

    with open(out / SUMMARY_FILE, 'w') as f:
        toml.dump({summary['policy']: summary for summary in summaries}, f)
    return summaries


def _sweep(values: Optional[Sequence[Any]]) -> Sequence[Optional[Any]]:
    return list(values) if values else [None]


def cmd_eval(
    *,
    scenario: Optional[str] = None,
    config: Optional[str] = None,
    seeds: Optional[Sequence[int]] = None,
    betas: Optional[Sequence[float]] = None,
    vehicles: Optional[Sequence[int]] = None,
    policies: Optional[Sequence[str]] = None,
    out: Optional[str] = None,
    trace: Optional[str] = None,
    checkpoint: Optional[str] = None,
    jobs: int = 1,
) -> pandas.DataFrame:
    '''Runs every policy on every combination of the sweeps; returns one summary row per run.'''
    base = load(scenario, config, out=out)
    names = tuple(policies) if policies else (base.run.policy,)
    for name in names:
        livemap.policies.Policy.class_from_name(name)
    root = pathlib.Path(base.run.out)
    root.mkdir(parents=True, exist_ok=True)

    work = [
        EvalJob(scenario, config, seed, beta, count, names, root, trace, checkpoint, progress=jobs == 1)
        for seed in _sweep(seeds)
        for beta in _sweep(betas)
        for count in _sweep(vehicles)
    ]
    if jobs > 1 and len(work) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(run_eval_job, work))
    else:
        results = [run_eval_job(job) for job in work]

    table = pandas.DataFrame([summary for summaries in results for summary in summaries])
    table = table.sort_values(['seed', 'beta', 'vehicles', 'policy'], kind='stable').reset_index(drop=True)
    _write_frame(table, root / SUMMARY_TABLE)
    for row in table.to_dict('records'):
        print_summary(f'{row["policy"]} ({row["run"]})', {
            'mean latency': f'{row["mean_latency_ms"]:.1f} ms',
            'p95 latency': f'{row["p95_latency_ms"]:.1f} ms',
            'completed': row['completed'],
            'scheduled ratio': row['scheduled_ratio'],
            'coverage ratio': row['coverage_ratio'],
            'coverage violations': row['coverage_violations'],
            'detection rate': row['detection_rate'],
            'mean action': row['mean_action'],
        })
    return table


def _latency_files(directory: pathlib.Path) -> Iterable[pathlib.Path]:
    return sorted(directory.rglob('latency-*.csv'))


def cmd_compare(runs: Sequence[str], *, baseline: Optional[str] = None, out: Optional[str] = None) -> pandas.DataFrame:
    '''
    Latency statistics per run directory and policy, and the relative mean
    latency reduction of each against ``baseline`` (the first policy found by
    default).
    '''
    rows = []
    for run in runs:
        directory = pathlib.Path(run)
        if not directory.is_dir():
            raise RunError(f'Run directory not found: {directory}')
        files = list(_latency_files(directory))
        if not files:
            raise RunError(f'No latency tables in {directory}')
        for policy in sorted({path.stem[len('latency-'):] for path in files}):
            latency = pandas.concat([
                pandas.read_csv(path)['latency_ms'] for path in files if path.stem == f'latency-{policy}'
            ], ignore_index=True)
            rows.append({
                'run': str(directory),
                'policy': policy,
                'completed': len(latency),
                'mean_latency_ms': float(latency.mean()) if len(latency) else 0.0,
                'p50_latency_ms': float(latency.quantile(0.5)) if len(latency) else 0.0,
                'p95_latency_ms': float(latency.quantile(0.95)) if len(latency) else 0.0,
                'p99_latency_ms': float(latency.quantile(0.99)) if len(latency) else 0.0,
            })

    table = pandas.DataFrame(rows)
    reference = baseline or table['policy'].iloc[0]
    if reference not in set(table['policy']):
        raise RunError(f'Baseline policy {reference} is not in the compared runs')
    reference_mean = table.loc[table['policy'] == reference, 'mean_latency_ms'].mean()
    if reference_mean > 0:
        table['reduction'] = (reference_mean - table['mean_latency_ms']) / reference_mean
    else:
        table['reduction'] = 0.0

    if out is not None:
        pathlib.Path(out).mkdir(parents=True, exist_ok=True)
        _write_frame(table, pathlib.Path(out) / 'comparison.csv')
    for row in table.to_dict('records'):
        print_summary(f'{row["policy"]} ({row["run"]})', {
            'completed': row['completed'],
            'mean latency': f'{row["mean_latency_ms"]:.1f} ms',
            'p99 latency': f'{row["p99_latency_ms"]:.1f} ms',
            f'reduction vs {reference}': f'{100 * row["reduction"]:.1f}%',
        })
    return table


# command line


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage()
        _error(message, 1)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        '--config',
        '-c',
        type=str,
        help='user configuration file, merged over the defaults',
    )
    parser.add_argument(
        '--scenario',
        '-s',
        type=str,
        choices=[kind.value for kind in livemap.scenario.ScenarioKind],
        help='scenario layer',
    )
    parser.add_argument(
        '--out',
        '-o',
        type=str,
        help='output directory',
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog='simulate.py')
    subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
    subparsers.required = True

    gen = subparsers.add_parser('gen-traces', help='generate a scenario trace')
    _add_common(gen)
    gen.add_argument('--seed', type=int, help='experiment seed')
    gen.add_argument('--vehicles', type=int, help='number of vehicles')

    train = subparsers.add_parser('train', help='train the offloading agent online')
    _add_common(train)
    train.add_argument('--seed', type=int, help='experiment seed')
    train.add_argument('--vehicles', type=int, help='number of vehicles')
    train.add_argument('--beta', type=float, help='coverage requirement')
    train.add_argument('--policy', type=str, choices=['head', 'head-lite'], help='policy the agent acts for')
    train.add_argument('--trace', type=str, help='trace file to replay')
    train.add_argument('--steps', type=int, help='number of delayed rewards to train on')
    train.add_argument('--checkpoint', type=str, help='checkpoint to resume from')

    fit = subparsers.add_parser('fit-rm', help='fit the regression-model baseline')
    _add_common(fit)
    fit.add_argument('--seed', type=int, help='experiment seed')

    evaluate = subparsers.add_parser('eval', help='evaluate policies')
    _add_common(evaluate)
    evaluate.add_argument('--seed', type=int, nargs='+', help='experiment seeds')
    evaluate.add_argument('--vehicles', type=int, nargs='+', help='vehicle counts to sweep')
    evaluate.add_argument('--beta', type=float, nargs='+', help='coverage requirements to sweep')
    evaluate.add_argument(
        '--policy',
        type=str,
        nargs='+',
        choices=livemap.policies.Policy.names(),
        help='policies to evaluate',
    )
    evaluate.add_argument('--trace', type=str, help='trace file to replay')
    evaluate.add_argument('--checkpoint', type=str, help='agent checkpoint')
    evaluate.add_argument('--jobs', '-j', type=int, default=1, help='worker processes')

    compare = subparsers.add_parser('compare', help='compare evaluation runs')
    compare.add_argument('runs', nargs='+', help='run directories')
    compare.add_argument('--baseline', type=str, help='reference policy')
    compare.add_argument('--out', '-o', type=str, help='output directory')
    return parser


def run(args: argparse.Namespace) -> None:
    if args.command == 'gen-traces':
        cmd_gen_traces(load(args.scenario, args.config, seed=args.seed, vehicles=args.vehicles, out=args.out))
    elif args.command == 'train':
        config = load(
            args.scenario, args.config, seed=args.seed, vehicles=args.vehicles, beta=args.beta,
            policy=args.policy, out=args.out,
        )
        cmd_train(config, trace=args.trace, steps=args.steps, checkpoint=args.checkpoint)
    elif args.command == 'fit-rm':
        cmd_fit_rm(load(args.scenario, args.config, seed=args.seed, out=args.out))
    elif args.command == 'eval':
        if args.jobs < 1:
            raise livemap.config.ConfigError(f'--jobs must be positive, got {args.jobs}')
        cmd_eval(
            scenario=args.scenario, config=args.config, seeds=args.seed, betas=args.beta, vehicles=args.vehicles,
            policies=args.policy, out=args.out, trace=args.trace, checkpoint=args.checkpoint, jobs=args.jobs,
        )
    elif args.command == 'compare':
        cmd_compare(args.runs, baseline=args.baseline, out=args.out)


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except livemap.config.ConfigError as e:
        _error(str(e), 1)
    except Exception as e:
        print()
        print(_DIM + traceback.format_exc() + _RESET)
        _error(str(e), 2)


if __name__ == '__main__':
    main()
