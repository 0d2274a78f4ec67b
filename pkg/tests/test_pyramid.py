import dataclasses

import numpy as np
from faker import Faker

from arfm.pyramid import cell_index
from arfm.pyramid import identity_codes
from arfm.pyramid import render_pyramid
from arfm.world import ConditionToken
from arfm.world import Entity
from arfm.world import Episode
from arfm.world import WorldSpec
from arfm.world import gen_episode


fake = Faker()
small_spec = WorldSpec(num_points=256, length=12)


def test_cell_index_floors_positions():
    cells, outside = cell_index(np.array([[5.0, 9.0]]), stride=4, extent=64)
    assert cells.tolist() == [[1, 2]]
    assert not outside.any()


def test_cell_index_clamps_to_the_border():
    cells, outside = cell_index(np.array([[-3.0, 400.0]]), stride=16, extent=16)
    assert cells.tolist() == [[0, 15]]
    assert outside.all()


def test_level_extents_and_channels():
    pyramid = render_pyramid(gen_episode(fake.random_int(0, 1000), small_spec), 0)
    assert [level.shape for level in pyramid.local_levels] == [(64, 64, 8), (32, 32, 8), (16, 16, 8)]
    assert pyramid.global_level.shape == (8, 8, 16)
    assert pyramid.global_tokens.shape == (64, 16)
    assert pyramid.local_channels == 24


def test_occupancy_counts_visible_points_only():
    spec = dataclasses.replace(small_spec, reflect_walls=False, speed=(3.0, 3.0), length=120)
    episode = gen_episode(fake.random_int(0, 1000), spec)
    frame = 119
    pyramid = render_pyramid(episode, frame)
    visible = int(episode.visibility[:, frame].sum())
    for level in pyramid.local_levels + [pyramid.global_level]:
        assert level[..., 0].sum() == visible


def test_static_world_has_zero_velocity_channels():
    episode = gen_episode(fake.random_int(0, 1000), dataclasses.replace(small_spec, speed=(0.0, 0.0)))
    pyramid = render_pyramid(episode, 3)
    assert not pyramid.global_level[..., 1:3].any()
    assert all(not level[..., 1:3].any() for level in pyramid.local_levels)


def test_local_features_report_clamped_lookups():
    pyramid = render_pyramid(gen_episode(0, small_spec), 0)
    features, clamped = pyramid.local_features_at(np.array([[10.0, 10.0], [-10.0, 300.0]]))
    assert features.shape == (2, 24)
    assert clamped == 3


def test_pyramids_are_cached_per_episode():
    episode = gen_episode(fake.random_int(0, 1000), small_spec)
    assert render_pyramid(episode, 2) is render_pyramid(episode, 2)
    assert render_pyramid(episode, 2, use_cache=False) is not render_pyramid(episode, 2)


def test_identity_codes_are_fixed():
    assert np.array_equal(identity_codes(3, 5), identity_codes(3, 5))
    assert not np.array_equal(identity_codes(3, 5)[1], identity_codes(3, 5)[2])


def test_global_level_broadcasts_the_condition_token():
    seed = fake.random_int(0, 1000)
    hidden = render_pyramid(gen_episode(seed, dataclasses.replace(small_spec, condition_rate=0.0)), 0)
    shown_episode = gen_episode(seed, dataclasses.replace(small_spec, condition_rate=1.0))
    shown = render_pyramid(shown_episode, 0)
    assert not np.array_equal(hidden.global_level, shown.global_level)
    assert np.array_equal(hidden.global_level[..., :-3], shown.global_level[..., :-3])
    assert (hidden.global_level[..., -3:] == [1.0, 0.0, 0.0]).all()
    expected = np.eye(3, dtype=np.float32)[int(shown_episode.condition_token)]
    assert (shown.global_level[..., -3:] == expected).all()


def test_local_levels_do_not_carry_the_condition_token():
    seed = fake.random_int(0, 1000)
    hidden = render_pyramid(gen_episode(seed, dataclasses.replace(small_spec, condition_rate=0.0)), 0)
    shown = render_pyramid(gen_episode(seed, dataclasses.replace(small_spec, condition_rate=1.0)), 0)
    assert all(np.array_equal(a, b) for a, b in zip(hidden.local_levels, shown.local_levels))


def test_point_moving_right_has_velocity_two_zero():
    spec = WorldSpec(num_points=1, length=5, num_entities=2, entity_share=1.0, reflect_walls=False)
    mover = Entity(entity_id=1, radius=16.0, anchor=np.array([101.0, 101.0]),
                   velocities=np.tile([2.0, 0.0], (5, 1)))
    background = Entity(entity_id=0, radius=0.0, anchor=np.zeros(2), velocities=np.zeros((5, 2)))
    episode = Episode(seed=0, spec=spec, entities=[background, mover], offsets=np.zeros((1, 2)),
                      point_entity=np.array([1]), condition_token=ConditionToken.NONE, side=ConditionToken.LEFT,
                      frame_rate=25.0)
    frame = 2
    x, y = episode.positions[0, frame]
    pyramid = render_pyramid(episode, frame)
    for level, stride in zip(pyramid.local_levels, pyramid.local_strides):
        cell = level[int(y // stride), int(x // stride)]
        assert cell[0] == 1.0
        assert cell[1:3].tolist() == [2.0, 0.0]
        assert level[..., 0].sum() == 1.0
