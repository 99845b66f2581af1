# SPDX-License-Identifier: MIT

import json
import math

import numpy as np
import pytest

from livemap.geometry import WorldPoint
from livemap.scenario import DecisionProfile, ProfileTable
from livemap.simnet import (
    Engine, SimConfig, SimError, Stage, UnknownDecisionError, UnknownVehicleError, breakpoint_m, data_rate_bps,
    path_loss_db,
)


cfg = SimConfig(tx_power_dbm_range=(20.0, 20.0), server_count=1)


def table(onboard=0.0, uplink=0.0, server=0.0, per_object=0.0):
    return ProfileTable({
        0: DecisionProfile((onboard, 0.0), uplink, per_object, (server, 0.0)),
        1: DecisionProfile((onboard + 5.0, 0.0), 0.0, 0.0, (server, 0.0)),
    })


def engine(config=cfg, on_served=None, vehicles=((0, 50.0),)):
    eng = Engine(config, on_served)
    for vehicle_id, x in vehicles:
        eng.register_vehicle(vehicle_id, WorldPoint(x, 0.0, 0.0))
    return eng


rng = np.random.default_rng(0)


def test_zero_work_takes_one_tick_per_stage():
    eng = engine()
    task = eng.submit(0, 0, table(), rng)
    done = eng.run_until(100)
    assert done == [task]
    assert task.latency_ms == 4
    assert [event.stage for event in eng.events] == ['onboard', 'uplink', 'queued', 'serving', 'broadcast', 'done']


@pytest.mark.parametrize('capability', [1.0, 2.0])
def test_onboard_time_scales_with_capability(capability):
    eng = Engine(cfg)
    eng.register_vehicle(0, WorldPoint(50.0, 0.0, 0.0), capability)
    task = eng.submit(0, 0, table(onboard=10.0), rng)
    eng.run_until(100)
    assert task.stage_ms[Stage.ONBOARD] == 10 / capability
    assert task.latency_ms == 10 / capability + 3


def test_server_fifo():
    eng = engine(vehicles=((0, 50.0), (1, 60.0)))
    first = eng.submit(0, 0, table(server=10.0), rng)
    second = eng.submit(1, 0, table(server=10.0), rng)
    eng.run_until(100)
    assert eng.queue.started == [0, 1]
    assert first.latency_ms == 13
    assert second.latency_ms == 23
    assert second.stage_ms[Stage.QUEUED] == 10


def test_parallel_servers():
    eng = engine(SimConfig(tx_power_dbm_range=(20.0, 20.0), server_count=2), vehicles=((0, 50.0), (1, 60.0)))
    tasks = [eng.submit(v, 0, table(server=10.0), rng) for v in (0, 1)]
    eng.run_until(100)
    assert [task.latency_ms for task in tasks] == [13, 13]


def test_server_speed():
    eng = engine(SimConfig(tx_power_dbm_range=(20.0, 20.0), server_speed=2.0))
    task = eng.submit(0, 0, table(server=10.0), rng)
    eng.run_until(100)
    assert task.stage_ms[Stage.SERVING] == 5


def test_uplink_time_follows_rate():
    eng = engine()
    task = eng.submit(0, 0, table(uplink=100_000.0), rng)
    expected_rate = data_rate_bps(20.0, path_loss_db(50.0, cfg), cfg.uplink_bw_hz, cfg)
    assert eng.uplink_rate(0) == pytest.approx(expected_rate)
    eng.run_until(10_000)
    ticks = 8 * 100_000 / (expected_rate / 1000)
    assert abs(task.stage_ms[Stage.UPLINK] - math.ceil(ticks)) <= 1


def test_uplink_bandwidth_is_shared():
    alone = engine()
    solo = alone.submit(0, 0, table(uplink=100_000.0), rng)
    alone.run_until(10_000)

    shared = engine(vehicles=((0, 50.0), (1, 50.0)))
    pair = [shared.submit(v, 0, table(uplink=100_000.0), rng) for v in (0, 1)]
    shared.tick()
    assert shared.uplink_rate(0) == pytest.approx(
        data_rate_bps(20.0, path_loss_db(50.0, cfg), cfg.uplink_bw_hz / 2, cfg)
    )
    shared.run_until(10_000)
    assert all(task.stage_ms[Stage.UPLINK] > solo.stage_ms[Stage.UPLINK] for task in pair)


def test_stage_times_add_up():
    local = np.random.default_rng(1)
    profiles = ProfileTable({
        0: DecisionProfile((5.0, 1.0), 2000.0, 0.0, (20.0, 5.0)),
        1: DecisionProfile((30.0, 5.0), 0.0, 300.0, (10.0, 2.0)),
    })
    eng = engine(SimConfig(server_count=2), on_served=lambda task, now: 8 * 256.0, vehicles=((0, 20.0), (1, 80.0)))
    for t in range(0, 500, 25):
        eng.run_until(t)
        for vehicle_id in (0, 1):
            eng.submit(vehicle_id, (t // 25 + vehicle_id) % 2, profiles, local, n_objects=3)
    eng.run_until(20_000)
    assert len(eng.completed) == eng.submitted == 40
    assert eng.in_flight == {}
    for task in eng.completed:
        assert sum(task.stage_ms.values()) == task.latency_ms


def test_deterministic():
    def run():
        eng = engine(SimConfig(seed=3), vehicles=((0, 10.0), (1, 100.0)))
        local = np.random.default_rng(4)
        profiles = ProfileTable({0: DecisionProfile((5.0, 1.0), 5000.0, 0.0, (20.0, 5.0))})
        for vehicle_id in (0, 1, 0):
            eng.submit(vehicle_id, 0, profiles, local)
        eng.run_until(5000)
        return list(eng.events), [v.tx_dbm for v in eng.vehicles.values()]

    assert run() == run()


def test_served_hook_sets_broadcast():
    calls = []

    def served(task, now):
        calls.append((task.task_id, now))
        return 0.0

    eng = engine(on_served=served)
    eng.submit(0, 0, table(server=3.0), rng)
    eng.run_until(100)
    assert calls == [(0, 5)]


def test_broadcast_time():
    eng = engine(on_served=lambda task, now: 1e6)
    task = eng.submit(0, 0, table(), rng)
    eng.run_until(10_000)
    assert task.stage_ms[Stage.BROADCAST] > 1


def test_unknown_decision():
    with pytest.raises(UnknownDecisionError):
        engine().submit(0, 9, table(), rng)


def test_unknown_vehicle():
    eng = engine()
    with pytest.raises(UnknownVehicleError):
        eng.submit(7, 0, table(), rng)
    with pytest.raises(UnknownVehicleError):
        eng.rss(7)


def test_busy_and_counters():
    eng = engine(vehicles=((0, 50.0), (1, 60.0)))
    assert eng.connected == 2
    eng.submit(0, 0, table(onboard=5.0), rng)
    assert eng.busy(0)
    assert not eng.busy(1)
    eng.run_until(100)
    assert not eng.busy(0)
    assert eng.queued == 0


def test_incomplete_task_has_no_latency():
    task = engine().submit(0, 0, table(onboard=5.0), rng)
    with pytest.raises(SimError):
        task.latency_ms


def test_transmit_power_redraw():
    eng = engine(SimConfig(tx_power_dbm_range=(1.0, 22.0), tx_redraw_ms=10))
    draws = set()
    for _ in range(10):
        eng.run_until(eng.now + 10)
        draws.add(eng.vehicles[0].tx_dbm)
    assert all(1.0 <= tx <= 22.0 for tx in draws)
    assert len(draws) > 1

    fixed = engine(SimConfig(tx_power_dbm_range=(1.0, 22.0), tx_redraw_ms=0))
    first = fixed.vehicles[0].tx_dbm
    fixed.run_until(100)
    assert fixed.vehicles[0].tx_dbm == first


def test_rss_drops_with_distance():
    eng = engine(vehicles=((0, 10.0), (1, 300.0)))
    assert eng.rss(0) > eng.rss(1)
    eng.move_vehicle(1, WorldPoint(10.0, 0.0, 0.0))
    assert eng.rss(1) == pytest.approx(eng.rss(0))


def test_path_loss_continuous_at_breakpoint():
    bp = breakpoint_m(cfg)
    assert bp == pytest.approx(4 * 9 * 0.5 * 3.5e9 / 299_792_458.0)
    assert path_loss_db(bp - 1e-9, cfg) == pytest.approx(path_loss_db(bp + 1e-9, cfg))
    assert path_loss_db(2 * bp, cfg) > path_loss_db(bp, cfg)


def test_shannon_rate_at_unit_snr():
    noise_dbm = cfg.noise_dbm_per_hz + 10 * math.log10(1e6)
    assert data_rate_bps(0.0, -noise_dbm, 1e6, cfg) == pytest.approx(1e6)
    with pytest.raises(SimError):
        data_rate_bps(0.0, 100.0, 0.0, cfg)


def test_event_log(tmp_path):
    eng = engine()
    eng.submit(0, 0, table(), rng)
    eng.run_until(10)
    path = tmp_path / 'events.jsonl'
    eng.write_event_log(path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert lines[0] == {'t_ms': 0, 'task_id': 0, 'vehicle_id': 0, 'stage': 'onboard'}
    assert lines[-1]['stage'] == 'done'


def test_history_can_be_dropped():
    eng = Engine(cfg, keep_history=False)
    for vehicle_id, x in ((0, 50.0), (1, 60.0)):
        eng.register_vehicle(vehicle_id, WorldPoint(x, 0.0, 0.0))
    tasks = [eng.submit(i, 0, table(server=5.0), rng) for i in range(2)]
    done = eng.run_until(100)
    assert done == tasks
    assert all(task.latency_ms > 0 for task in tasks)
    assert eng.events == []
    assert eng.completed == []
    assert eng.queue.started == []


@pytest.mark.parametrize('kwargs', [
    {'tick_ms': 0},
    {'uplink_bw_hz': 0.0},
    {'server_count': 0},
    {'server_speed': 0.0},
    {'tx_power_dbm_range': (10.0, 1.0)},
])
def test_invalid_config(kwargs):
    with pytest.raises(SimError):
        SimConfig(**kwargs)
