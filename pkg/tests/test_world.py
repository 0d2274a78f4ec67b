import dataclasses

import numpy as np
import pytest
from faker import Faker

from arfm.world import ConditionToken
from arfm.world import InvalidWorldSpec
from arfm.world import OracleTracks
from arfm.world import UnknownPoint
from arfm.world import WorldSpec
from arfm.world import gen_episode
from arfm.world import online_track_next
from arfm.world import oracle_tracks
from arfm.world import reflect


fake = Faker()
small_spec = WorldSpec(num_points=128, length=20)


def test_same_seed_gives_identical_episode():
    seed = fake.random_int(0, 10 ** 6)
    first, second = gen_episode(seed, small_spec), gen_episode(seed, small_spec)
    assert first.positions.tobytes() == second.positions.tobytes()
    assert first.condition_token == second.condition_token
    assert first == second


def test_different_seeds_give_different_episodes():
    assert not np.array_equal(gen_episode(1, small_spec).positions, gen_episode(2, small_spec).positions)
    assert gen_episode(1, small_spec) != gen_episode(2, small_spec)


def test_episode_identity_includes_the_world():
    seed = fake.random_int(0, 1000)
    other_spec = dataclasses.replace(small_spec, num_points=64)
    assert gen_episode(seed, small_spec) != gen_episode(seed, other_spec)
    assert len({gen_episode(seed, small_spec), gen_episode(seed, small_spec)}) == 1
    assert gen_episode(seed, small_spec) != seed


def test_positions_are_float32_with_visibility():
    episode = gen_episode(fake.random_int(0, 1000), small_spec)
    assert episode.positions.shape == (128, 20, 2)
    assert episode.positions.dtype == np.float32
    assert episode.visibility.shape == (128, 20)


def test_static_world_never_moves():
    episode = gen_episode(fake.random_int(0, 1000), dataclasses.replace(small_spec, speed=(0.0, 0.0)))
    assert np.array_equal(episode.positions, np.repeat(episode.positions[:, :1], 20, axis=1))


def test_camera_pan_shifts_every_point():
    seed = fake.random_int(0, 1000)
    still = gen_episode(seed, small_spec)
    panned = gen_episode(seed, dataclasses.replace(small_spec, camera_pan=(1.5, -0.5)))
    expected = still.positions + np.arange(20)[None, :, None] * np.array([1.5, -0.5], dtype=np.float32)
    assert np.allclose(panned.positions, expected, atol=1e-3)


def test_reflection_keeps_entities_on_canvas():
    spec = dataclasses.replace(small_spec, speed=(3.0, 3.0), length=300)
    episode = gen_episode(fake.random_int(0, 1000), spec)
    for entity in episode.moving_entities():
        path = episode.anchor_path(entity.entity_id)
        assert (path >= entity.radius - 1e-9).all()
        assert (path <= spec.canvas - entity.radius + 1e-9).all()


def test_pass_through_marks_points_outside_invisible():
    spec = dataclasses.replace(small_spec, speed=(3.0, 3.0), length=300, reflect_walls=False)
    episode = gen_episode(fake.random_int(0, 1000), spec)
    inside = ((episode.positions >= 0) & (episode.positions < spec.canvas)).all(axis=-1)
    assert np.array_equal(episode.visibility, inside)
    assert not episode.visibility.all()


def test_reflect_folds_into_range():
    values = np.array([5.0, 12.0, -3.0, 27.0])
    assert np.allclose(reflect(values, 0.0, 10.0), [5.0, 8.0, 3.0, 7.0])


def test_branch_sides_share_the_past_and_split_after():
    seed = fake.random_int(0, 1000)
    left = gen_episode(seed, dataclasses.replace(small_spec, forced_token="LEFT"))
    right = gen_episode(seed, dataclasses.replace(small_spec, forced_token="RIGHT"))
    assert left.side == ConditionToken.LEFT and right.side == ConditionToken.RIGHT
    entity = left.entities[1]
    branch = entity.branch_frame
    assert np.array_equal(left.anchor_path(1)[:branch + 2], right.anchor_path(1)[:branch + 2])
    assert not np.allclose(left.anchor_path(1)[branch + 2:], right.anchor_path(1)[branch + 2:])
    assert np.array_equal(left.velocities[:, 0], right.velocities[:, 0])


def test_entities_move_rigidly():
    spec = dataclasses.replace(small_spec, canvas=128, entity_radius=(8.0, 16.0), num_entities=3, speed=(2.0, 3.0),
                               length=40)
    episode = gen_episode(fake.random_int(0, 1000), spec)
    positions = episode.positions.astype(np.float64)
    for entity in episode.moving_entities():
        members = positions[episode.point_entity == entity.entity_id]
        distances = np.linalg.norm(members[:, None] - members[None, :], axis=-1)
        assert np.allclose(distances, distances[:, :, :1], rtol=0.0, atol=1e-4)


def test_branch_sides_split_evenly_over_seeds():
    spec = WorldSpec(num_points=8, length=2, condition_rate=0.0)
    draws = 10_000
    left = sum(gen_episode(seed, spec).side == ConditionToken.LEFT for seed in range(draws))
    assert abs(left - draws / 2) <= 3 * np.sqrt(draws * 0.25)


def test_left_turns_by_minus_branch_angle():
    episode = gen_episode(fake.random_int(0, 1000), dataclasses.replace(small_spec, forced_token="LEFT"))
    entity = episode.entities[1]
    before, after = entity.velocities[0], entity.velocities[entity.branch_frame + 1]
    cosine = before @ after / (np.linalg.norm(before) * np.linalg.norm(after))
    assert cosine == pytest.approx(np.cos(np.deg2rad(60.0)))
    assert before[0] * after[1] - before[1] * after[0] < 0


def test_condition_rate_zero_hides_the_side():
    spec = dataclasses.replace(small_spec, condition_rate=0.0)
    assert all(gen_episode(seed, spec).condition_token == ConditionToken.NONE for seed in range(20))


def test_condition_rate_one_reveals_the_side():
    spec = dataclasses.replace(small_spec, condition_rate=1.0)
    for seed in range(20):
        episode = gen_episode(seed, spec)
        assert episode.condition_token == episode.side


def test_lower_frame_rate_moves_further_per_frame():
    seed = fake.random_int(0, 1000)
    fast = gen_episode(seed, dataclasses.replace(small_spec, frame_rates=(25.0,)))
    slow = gen_episode(seed, dataclasses.replace(small_spec, frame_rates=(12.5,)))
    ratio = np.linalg.norm(slow.entities[1].velocities[0]) / np.linalg.norm(fast.entities[1].velocities[0])
    assert ratio == pytest.approx(2.0)
    assert slow.frame_rate == 12.5


def test_oracle_tracks_agree_with_episode_points():
    episode = gen_episode(fake.random_int(0, 1000), small_spec)
    entity = episode.entities[1]
    center = episode.anchor_path(1)[1]
    outside = np.linalg.norm(episode.positions[:, 0] - center, axis=-1) > entity.radius + 1e-3
    ids = np.flatnonzero((episode.point_entity == 1) | ((episode.point_entity == 0) & outside))
    ids = ids[(episode.positions[ids, 0] >= 0).all(axis=-1) & (episode.positions[ids, 0] < 256).all(axis=-1)]
    tracks = oracle_tracks(episode, episode.positions[ids, 0])
    assert isinstance(tracks, OracleTracks)
    assert np.allclose(tracks.points, episode.positions[ids], atol=1e-3)


def test_oracle_tracks_from_a_later_frame():
    episode = gen_episode(fake.random_int(0, 1000), small_spec)
    tracks = oracle_tracks(episode, np.array([[10.0, 20.0], [100.0, 100.0]]), start_frame=5)
    assert tracks.points.shape == (2, 15, 2)
    assert tracks.start_frame == 5
    assert np.allclose(tracks.points[:, 0], [[10.0, 20.0], [100.0, 100.0]])


def test_oracle_tracks_reject_points_off_canvas():
    episode = gen_episode(0, small_spec)
    with pytest.raises(ValueError):
        oracle_tracks(episode, np.array([[-1.0, 5.0]]))


def test_online_tracker_reports_positions():
    episode = gen_episode(fake.random_int(0, 1000), small_spec)
    ids = np.array([0, 5, 127])
    assert np.array_equal(online_track_next(episode, ids, 7), episode.positions[ids, 7])
    with pytest.raises(UnknownPoint):
        online_track_next(episode, 128, 0)
    with pytest.raises(ValueError):
        online_track_next(episode, 0, 20)


def test_invalid_specs_are_rejected():
    with pytest.raises(InvalidWorldSpec):
        gen_episode(0, dataclasses.replace(small_spec, entity_radius=(200.0, 300.0)))
    with pytest.raises(InvalidWorldSpec):
        gen_episode(0, dataclasses.replace(small_spec, forced_token="UP"))
    with pytest.raises(InvalidWorldSpec):
        WorldSpec.from_dict({"colour": "red"})


def test_spec_dict_round_trip():
    spec = dataclasses.replace(small_spec, frame_rates=(12.5, 25.0))
    assert WorldSpec.from_dict(spec.to_dict()) == spec
    assert spec.digest() != small_spec.digest()
