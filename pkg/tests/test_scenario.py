# SPDX-License-Identifier: MIT

import json
import warnings

import numpy as np
import pytest

from livemap.geometry import Pose, WorldPoint
from livemap.mapcore import ObjectClass
from livemap.neural import VaeModel
from livemap.scenario import (
    DEFAULT_CAPABILITIES, DecisionProfile, ObservationNoise, ProfileError, ProfileTable, Scenario, ScenarioError,
    ScenarioKind, SignatureModel, TraceFormatError, TraceFrame, TraceObject, TraceVehicle, default_profiles, generate,
    observe, occluders, read_trace, write_trace,
)


small = Scenario(n_vehicles=4, n_objects=10, duration_ms=1000)


@pytest.mark.parametrize('kind', list(ScenarioKind))
def test_generate_frames(kind):
    frames = generate(Scenario(kind, n_vehicles=5, n_objects=12, duration_ms=1000))
    assert [frame.t_ms for frame in frames] == list(range(0, 1000, 100))
    for frame in frames:
        assert [v.vehicle_id for v in frame.vehicles] == list(range(5))
        assert [o.object_id for o in frame.objects] == list(range(12))
    first, last = frames[0].vehicles[0].pose.position, frames[-1].vehicles[0].pose.position
    assert (first.x, first.y) != pytest.approx((last.x, last.y))


def test_generate_is_deterministic():
    assert generate(small) == generate(small)
    assert generate(small) != generate(Scenario(n_vehicles=4, n_objects=10, duration_ms=1000, seed=1))


def test_objects_keep_class_and_signature():
    frames = generate(small)
    for obj in frames[0].objects:
        later = frames[-1].objects[obj.object_id]
        assert later.object_class is obj.object_class
        assert later.signature == obj.signature


def test_capabilities_come_from_the_fleet():
    frames = generate(small)
    assert all(v.capability in DEFAULT_CAPABILITIES for v in frames[0].vehicles)
    with pytest.raises(ScenarioError):
        generate(small, capabilities=())


@pytest.mark.parametrize('kwargs', [{'n_vehicles': 0}, {'n_objects': -1}, {'duration_ms': 0}, {'kind': 'roundabout'}])
def test_invalid_scenario(kwargs):
    with pytest.raises((ScenarioError, ValueError)):
        Scenario(**kwargs)


def test_frame_lookup():
    frame = generate(small)[0]
    assert frame.vehicle(2).vehicle_id == 2
    with pytest.raises(ScenarioError):
        frame.vehicle(9)


def test_signature_model():
    model = SignatureModel.seeded(3)
    assert model == SignatureModel.seeded(3)
    assert model.dim == 64
    rng = np.random.default_rng(0)
    assert model.training_set(10, rng).shape == (10, 64)
    a = np.array(model.instance(ObjectClass.CAR, rng))
    b = np.array(model.instance(ObjectClass.CAR, rng))
    person = np.array(model.instance(ObjectClass.PERSON, rng))
    assert np.linalg.norm(a - b) < np.linalg.norm(a - person)


def test_trace_round_trip(tmp_path):
    frames = generate(small)
    path = tmp_path / 'trace.jsonl'
    write_trace(path, small, frames)
    scenario, intrinsics, loaded = read_trace(path)
    assert scenario == small
    assert intrinsics.fov_deg == pytest.approx(54.04)
    assert loaded == frames


def test_trace_errors(tmp_path):
    path = tmp_path / 'trace.jsonl'
    path.write_text('')
    with pytest.raises(TraceFormatError):
        read_trace(path)

    write_trace(path, small, generate(small))
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header['format'] = 99
    path.write_text('\n'.join([json.dumps(header), *lines[1:]]))
    with pytest.raises(TraceFormatError):
        read_trace(path)

    path.write_text('\n'.join([lines[0], lines[2], lines[1]]))
    with pytest.raises(TraceFormatError):
        read_trace(path)

    path.write_text('\n'.join([lines[0], '{"t": 0}']))
    with pytest.raises(TraceFormatError):
        read_trace(path)


capability = DEFAULT_CAPABILITIES[1]


def make_frame(*objects, others=()):
    vehicles = [TraceVehicle(0, Pose.from_ground(0.0, 0.0, 0.0, 1.5), capability)]
    for i, (x, y) in enumerate(others, start=1):
        vehicles.append(TraceVehicle(i, Pose.from_ground(x, y, 0.0, 1.5), capability))
    return TraceFrame(500, tuple(vehicles), tuple(
        TraceObject(i, klass, WorldPoint(x, y, 0.0), (float(i),) * 4, 1.5, 1.0)
        for i, (klass, x, y) in enumerate(objects)
    ))


@pytest.fixture()
def vae():
    return VaeModel.initialize(np.random.default_rng(0), signature_dim=4, hidden=(8,), latent_dim=3)


def test_observe_visible_objects(vae):
    frame = make_frame((ObjectClass.CAR, 10.0, 0.0), (ObjectClass.PERSON, -10.0, 0.0), (ObjectClass.BUS, 20.0, 5.0))
    observations = observe(frame, 0, vae, np.random.default_rng(0), noise=ObservationNoise(sigma_loc_m=0.0))
    assert [obs.truth_id for obs in observations] == [0, 2]
    assert observations[0].object_class is ObjectClass.CAR
    assert observations[0].location == WorldPoint(10.0, 0.0, 0.0)
    assert observations[0].latent.shape == (3,)
    assert all(obs.source_vehicle == 0 and obs.timestamp == 500 for obs in observations)
    assert all(0.05 <= obs.confidence <= 1.0 for obs in observations)


def test_observe_stamp_override(vae):
    frame = make_frame((ObjectClass.CAR, 10.0, 0.0))
    observations = observe(frame, 0, vae, np.random.default_rng(0), t_ms=1234)
    assert observations[0].timestamp == 1234


def test_observe_location_noise(vae):
    frame = make_frame((ObjectClass.CAR, 10.0, 0.0))
    rng = np.random.default_rng(0)
    errors = [observe(frame, 0, vae, rng)[0].location.x - 10.0 for _ in range(500)]
    assert np.std(errors) == pytest.approx(0.2, rel=0.15)


def test_other_vehicles_occlude(vae):
    frame = make_frame((ObjectClass.CAR, 20.0, 0.0), others=[(10.0, 0.0)])
    assert observe(frame, 0, vae, np.random.default_rng(0)) == []
    assert len(occluders(frame, 0)) == 2
    assert len(occluders(frame, 1)) == 2


def test_observe_empty_frame(vae):
    assert observe(make_frame(), 0, vae, np.random.default_rng(0)) == []


def test_default_profiles():
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        table = default_profiles()
    assert table.decisions == (0, 1, 2, 3, 4)
    assert table[0].uplink_bytes(10) == table[0].uplink_base_bytes
    assert table[1].uplink_bytes(10) == pytest.approx(10 * table[1].uplink_per_object_bytes)
    assert table.broadcast_bytes_per_record > 0


def deterministic_table():
    return ProfileTable({
        0: DecisionProfile((5.0, 0.0), 1000.0, 0.0, (50.0, 0.0)),
        1: DecisionProfile((20.0, 0.0), 0.0, 100.0, (10.0, 0.0)),
    })


def test_profile_sampling():
    table = deterministic_table()
    demand = table.sample(1, 4, np.random.default_rng(0))
    assert demand == (20.0, 400.0, 10.0)

    noisy = ProfileTable({0: DecisionProfile((1.0, 5.0), 0.0, 0.0, (1.0, 5.0))})
    rng = np.random.default_rng(0)
    assert all(min(noisy.sample(0, 0, rng)) >= 0.0 for _ in range(200))


def test_uplink_growth_warns():
    table = deterministic_table()
    with pytest.warns(UserWarning):
        table.check_uplink(max_objects=20)


@pytest.mark.parametrize('profiles', [
    {},
    {0: DecisionProfile((-1.0, 0.0), 0.0, 0.0, (1.0, 0.0))},
    {0: DecisionProfile((10.0, 0.0), 0.0, 0.0, (1.0, 0.0)), 1: DecisionProfile((5.0, 0.0), 0.0, 0.0, (1.0, 0.0))},
])
def test_invalid_profiles(profiles):
    with pytest.raises(ProfileError):
        ProfileTable(profiles)


def test_malformed_profile_mapping():
    with pytest.raises(ProfileError):
        ProfileTable.from_mapping({'decisions': {'0': {'onboard_ms': [1.0]}}, 'broadcast_bytes_per_record': 1})
