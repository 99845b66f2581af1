# SPDX-License-Identifier: MIT

import contextlib
import importlib.util
import os
import os.path
import sys

import numpy as np
import pytest

import livemap.config
import livemap.world


root_dir = os.path.abspath(os.path.join(__file__, '..', '..'))


@contextlib.contextmanager
def cd(*path_paths):
    old_cwd = os.getcwd()
    os.chdir(os.path.join(*path_paths))
    try:
        yield
    finally:
        os.chdir(old_cwd)


def import_file(name, path):
    spec = importlib.util.spec_from_file_location(name, path)
    if not spec.loader:
        raise ImportError(f'Unable to import `{path}`: no loader')
    module = importlib.util.module_from_spec(spec)
    sys.modules[name] = module
    spec.loader.exec_module(module)  # type: ignore
    return module


def small_overrides(out):
    return {
        'scenario': {'n_vehicles': 4, 'n_objects': 10, 'duration_ms': 2000},
        'agent': {
            'hidden': [16, 16],
            'batch_size': 8,
            'buffer_capacity': 256,
            'epsilon': {'steps': 100},
        },
        'vae': {'hidden': [32], 'train_samples': 64, 'epochs': 3, 'batch_size': 16},
        'world': {'progress_every': 100000},
        'run': {
            'out': str(out),
            'train_steps': 20,
            'eval_duration_ms': 2000,
            'rm_vehicle_counts': [2, 4, 6],
            'rm_duration_ms': 4000,
        },
    }


@pytest.fixture()
def simulate():
    with cd(root_dir):
        return import_file('simulate', 'simulate.py')


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture()
def small_config(tmp_path):
    return livemap.config.load_config('intersection', overrides=small_overrides(tmp_path / 'out'))


@pytest.fixture()
def small_vae(small_config):
    vae, _ = livemap.world.build_vae(small_config)
    return vae
