# SPDX-License-Identifier: MIT

import hypothesis
import hypothesis.strategies as st
import numpy as np
import pytest

from livemap.geometry import WorldPoint
from livemap.mapcore import (
    NEW, DegenerateWeightsError, InvalidRecordError, MapDatabase, MapError, MatchConfig, ObjectClass, Observation,
    combine, delta_since, distance, evict, match, predict_location, read_snapshot,
)


config = MatchConfig(latent_dim=4)


def make_obs(x, y=0.0, *, cls=ObjectClass.CAR, conf=0.8, latent=None, t=0, vehicle=0, truth=None):
    if latent is None:
        latent = np.zeros(4)
    return Observation(cls, conf, WorldPoint(x, y, 0.0), latent, vehicle, t, truth)


@pytest.fixture()
def db():
    return MapDatabase(config)


def test_empty_database_matches_nothing(db):
    assert match(make_obs(0.0), db, 0) == NEW


def test_integrate_creates_records(db):
    assigned = db.integrate([make_obs(0.0), make_obs(50.0, cls=ObjectClass.PERSON)], 0)
    assert assigned == [0, 1]
    assert len(db) == 2
    assert [rec.object_id for rec in db] == [0, 1]
    assert db[1].object_class is ObjectClass.PERSON


def test_integrate_matches_existing(db):
    db.integrate([make_obs(0.0, truth=7)], 0)
    assigned = db.integrate([make_obs(1.0, t=100)], 100)
    assert assigned == [0]
    assert len(db) == 1
    assert db[0].truth_id == 7
    assert db[0].geo_location == pytest.approx(WorldPoint(1.0, 0.0, 0.0))
    assert db[0].update_time == 100


@pytest.mark.parametrize(('offset', 'expected'), [(3.0, 0), (4.0, NEW)])
def test_location_weight_threshold(db, offset, expected):
    db.integrate([make_obs(0.0)], 0)
    # 0.5 * 9 = 4.5 is within the threshold of 5, 0.5 * 16 = 8 is not
    assert db.match(make_obs(offset), 0) == expected


def test_match_overrides(db):
    db.integrate([make_obs(0.0)], 0)
    assert db.match(make_obs(4.0), 0, w=0.1) == 0
    assert db.match(make_obs(1.0), 0, threshold=0.1) == NEW


def test_latent_distance_dominates(db):
    db.integrate([make_obs(0.0)], 0)
    assert db.match(make_obs(0.0, latent=np.full(4, 2.0)), 0) == NEW


def test_class_gate(db):
    db.integrate([make_obs(0.0)], 0)
    assert db.match(make_obs(0.0, cls=ObjectClass.BUS), 0) == NEW


def test_radius_gate(db):
    db.integrate([make_obs(0.0, cls=ObjectClass.PERSON)], 0)
    far = make_obs(11.0, cls=ObjectClass.PERSON)
    assert db.candidates(far, 0) == []
    assert db.match(far, 0, w=0.0, threshold=1e9) == NEW


def test_ties_go_to_lowest_id(db):
    db.create(make_obs(0.0))
    db.create(make_obs(0.0))
    assert db.match(make_obs(0.0), 0) == 0


def test_multi_view_distance(db):
    rec = db.create(make_obs(0.0, latent=np.zeros(4)))
    db.combine([make_obs(0.0, latent=np.ones(4), t=10)], rec.object_id)
    assert distance(make_obs(0.0, latent=np.ones(4)), rec, 10, 0.5) == pytest.approx(0.0)


def test_latent_dimension_checked(db):
    with pytest.raises(MapError):
        db.match(make_obs(0.0, latent=np.zeros(3)), 0)


def test_confidence_weighted_fusion(db):
    rec = db.create(make_obs(10.0))
    combine([make_obs(0.0, conf=0.2, t=5), make_obs(4.0, conf=0.6, t=5)], rec, config)
    assert rec.geo_location.x == pytest.approx(3.0)
    # the group alone decides the fused confidence
    assert rec.confidence == pytest.approx(0.6)
    assert len(rec.latents) == 3


def test_fusion_hand_evaluated(db):
    rec = db.create(make_obs(10.0, conf=1.0))
    combine([make_obs(0.0, conf=0.9), make_obs(3.0, 3.0, conf=0.6)], rec, config)
    assert rec.geo_location == pytest.approx(WorldPoint(1.2, 1.2, 0.0))
    assert rec.confidence == pytest.approx(0.9)


def test_zero_confidence_group(db):
    rec = db.create(make_obs(0.0))
    with pytest.raises(DegenerateWeightsError):
        combine([make_obs(0.0, conf=0.0), make_obs(1.0, conf=0.0)], rec, config)


def test_mobility_prediction(db):
    rec = db.create(make_obs(0.0, t=0))
    db.combine([make_obs(10.0, t=1000)], rec.object_id)
    assert rec.speed == pytest.approx(10.0)
    assert rec.direction == pytest.approx((1.0, 0.0))
    assert predict_location(rec, 2000) == pytest.approx(WorldPoint(20.0, 0.0, 0.0))
    # a moving object is still matched where it is expected to be
    assert db.match(make_obs(20.0, t=2000), 2000) == rec.object_id


def test_prediction_without_history(db):
    rec = db.create(make_obs(0.0))
    rec.history.clear()
    with pytest.raises(InvalidRecordError):
        predict_location(rec, 0)


def test_bounded_latents_and_history(db):
    rec = db.create(make_obs(0.0))
    for t in range(1, 21):
        db.combine([make_obs(0.0, t=t)], rec.object_id)
    assert len(rec.latents) == config.latent_cap
    assert len(rec.history) == config.history_length


def test_eviction(db):
    db.integrate([make_obs(0.0, t=0)], 0)
    db.integrate([make_obs(100.0, t=5000)], 5000)
    assert evict(db, 6000, ttl=2000) == 1
    assert [rec.object_id for rec in db] == [1]
    assert db.evict(6000) == 0


def test_delta_since(db):
    db.integrate([make_obs(0.0, t=0)], 0)
    db.integrate([make_obs(100.0, t=200)], 200)
    assert [rec.object_id for rec in delta_since(db, -1)] == [0, 1]
    assert [rec.object_id for rec in delta_since(db, 0)] == [1]
    assert delta_since(db, 200) == []


def test_snapshot(db, tmp_path):
    db.integrate([make_obs(0.0), make_obs(30.0, cls=ObjectClass.TRUCK)], 0)
    path = tmp_path / 'snapshot.jsonl'
    db.write_snapshot(path)
    lines = read_snapshot(path)
    assert [line['id'] for line in lines] == [0, 1]
    assert lines[1]['class'] == 'truck'
    assert lines[1]['x'] == pytest.approx(30.0)


def test_observation_validation():
    with pytest.raises(MapError):
        make_obs(0.0, conf=1.5)
    with pytest.raises(MapError):
        make_obs(0.0, latent=[np.nan, 0.0, 0.0, 0.0])


@hypothesis.given(st.lists(
    st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 1.0)),
    min_size=1, max_size=8,
))
def test_fused_location_within_group_hull(points):
    rec = MapDatabase(config).create(make_obs(0.0))
    group = [make_obs(x, y, conf=c, t=1) for x, y, c in points]
    combine(group, rec, config)
    xs, ys = [p[0] for p in points], [p[1] for p in points]
    assert min(xs) - 1e-9 <= rec.geo_location.x <= max(xs) + 1e-9
    assert min(ys) - 1e-9 <= rec.geo_location.y <= max(ys) + 1e-9
