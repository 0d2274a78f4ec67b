import dataclasses

import numpy as np
import pytest
import torch
from faker import Faker

from arfm.engine import horizon_edit_distance
from arfm.engine import init_horizon
from arfm.engine import resample_horizon
from arfm.engine import rollout
from arfm.engine import rollout_samples
from arfm.engine import update_horizon
from arfm.layers import CacheError
from arfm.world import WorldSpec
from arfm.world import gen_episode


fake = Faker()
spec = WorldSpec(num_points=64, length=12)
point_ids = np.array([0, 5, 17, 40])


def noisy_model(tiny_model, objective: str = "flow"):
    model = tiny_model(objective)
    torch.nn.init.normal_(model.flow.head.weight, std=0.5)
    return model


def test_rollout_shapes_and_observed_prefix(tiny_model):
    episode = gen_episode(fake.random_int(0, 1000), spec)
    samples = rollout_samples(noisy_model(tiny_model), episode, point_ids, conditioning_frames=3, horizon=5,
                              sample_steps=2, num_samples=3)
    assert samples.shape == (3, 4, 8, 2)
    assert samples.dtype == np.float32
    for sample in samples:
        assert np.array_equal(sample[:, :3], episode.positions[point_ids, :3])


def test_zero_horizon_returns_the_prefix(tiny_model):
    episode = gen_episode(fake.random_int(0, 1000), spec)
    samples = rollout_samples(tiny_model(), episode, point_ids, conditioning_frames=2, horizon=0)
    assert np.array_equal(samples[0], episode.positions[point_ids, :2])


def test_rollouts_are_seeded(tiny_model):
    model = noisy_model(tiny_model)
    episode = gen_episode(fake.random_int(0, 1000), spec)
    first = rollout(model, episode, point_ids, horizon=4, seed=7, sample_steps=2)
    second = rollout(model, episode, point_ids, horizon=4, seed=7, sample_steps=2)
    other = rollout(model, episode, point_ids, horizon=4, seed=8, sample_steps=2)
    assert np.array_equal(first.points, second.points)
    assert not np.array_equal(first.points, other.points)


def test_zero_head_regression_keeps_points_in_place(tiny_model):
    episode = gen_episode(fake.random_int(0, 1000), spec)
    tracks = rollout(tiny_model("regression"), episode, point_ids, conditioning_frames=2, horizon=6)
    assert tracks.length == 8
    assert np.array_equal(tracks.points[:, 2:], np.repeat(tracks.points[:, 1:2], 6, axis=1))


def test_query_positions_use_oracle_tracks(tiny_model):
    episode = gen_episode(fake.random_int(0, 1000), spec)
    queries = episode.positions[point_ids, 0].astype(np.float64)
    samples = rollout_samples(tiny_model(), episode, queries, conditioning_frames=2, horizon=1)
    assert samples.shape == (1, 4, 3, 2)
    assert np.allclose(samples[0, :, 0], queries, atol=1e-4)


def test_rollout_past_the_time_slots_fails(tiny_model):
    episode = gen_episode(0, spec)
    with pytest.raises(ValueError):
        rollout(tiny_model(), episode, point_ids, horizon=30)


def test_initial_horizon_starts_at_the_last_observed_frame(tiny_model):
    episode = gen_episode(fake.random_int(0, 1000), spec)
    state = init_horizon(noisy_model(tiny_model), episode, point_ids, conditioning_frames=2, horizon_length=5,
                         sample_steps=2)
    assert state.horizon.shape == (1, 4, 5, 2)
    assert state.horizon_length == 5
    assert state.observed_frames == 2
    assert torch.equal(state.horizon[0, :, 0], torch.from_numpy(episode.positions[point_ids, 1]))
    assert state.cache.seen_steps == 2


def test_update_at_the_end_of_the_path_keeps_the_tail(tiny_model):
    model = noisy_model(tiny_model)
    episode = gen_episode(fake.random_int(0, 1000), spec)
    state = init_horizon(model, episode, point_ids, horizon_length=6, sample_steps=2)
    updated = update_horizon(model, state, t_e=1.0, edit_steps=0, sample_steps=2)
    assert torch.equal(updated.horizon_shifts[:, :, :4], state.horizon_shifts[:, :, 1:])
    assert not torch.equal(updated.horizon_shifts[:, :, 4], torch.zeros(1, 4, 2))
    assert torch.equal(updated.fixed[0, :, -1], torch.from_numpy(episode.positions[point_ids, 1]))


def test_update_leaves_the_previous_state_untouched(tiny_model):
    model = noisy_model(tiny_model)
    episode = gen_episode(fake.random_int(0, 1000), spec)
    state = init_horizon(model, episode, point_ids, horizon_length=4, sample_steps=2)
    shifts = state.horizon_shifts.clone()
    updated = update_horizon(model, state, sample_steps=2)
    assert state.cache.seen_steps == 1
    assert state.observed_frames == 1
    assert torch.equal(state.horizon_shifts, shifts)
    assert updated.cache.seen_steps == 2
    assert updated.observed_frames == 2
    assert updated.horizon_length == 4


def test_update_needs_edit_steps_below_the_end_of_the_path(tiny_model):
    model = tiny_model()
    state = init_horizon(model, gen_episode(0, spec), point_ids, horizon_length=3, sample_steps=2)
    with pytest.raises(ValueError):
        update_horizon(model, state, t_e=0.5, edit_steps=0)


def test_update_past_the_last_frame_fails(tiny_model):
    model = tiny_model("regression")
    state = init_horizon(model, gen_episode(0, dataclasses.replace(spec, length=3)), point_ids, horizon_length=2)
    state = update_horizon(model, update_horizon(model, state))
    with pytest.raises(ValueError):
        update_horizon(model, state)


def test_update_with_a_foreign_cache_fails(tiny_model):
    model = tiny_model()
    state = init_horizon(model, gen_episode(0, spec), point_ids, horizon_length=3, sample_steps=2)
    with pytest.raises(CacheError):
        update_horizon(model, dataclasses.replace(state, cache=model.fusion.new_cache()))


def test_static_scene_horizons_do_not_move(tiny_model):
    model = tiny_model("regression")
    episode = gen_episode(fake.random_int(0, 1000), dataclasses.replace(spec, speed=(0.0, 0.0)))
    state = init_horizon(model, episode, point_ids, horizon_length=4)
    updated = resample_horizon(model, state)
    assert horizon_edit_distance(state, updated) == 0.0
