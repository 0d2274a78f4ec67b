"""
Training-based scenarios on the branching world. Run with --runslow.
"""
import dataclasses

import numpy as np
import pandas as pd
import pytest

from arfm.cli import EXIT_OK
from arfm.cli import main
from arfm.config import RunConfig
from arfm.config import load_config
from arfm.engine import init_horizon
from arfm.engine import horizon_edit_distance
from arfm.engine import resample_horizon
from arfm.engine import rollout_samples
from arfm.engine import update_horizon
from arfm.evaluation import ArfmPredictor
from arfm.evaluation import BaselinePredictor
from arfm.evaluation import EvalFilterSpec
from arfm.evaluation import eval_run
from arfm.model import ArfmModel
from arfm.training import train_arfm
from arfm.workspace import Workspace
from arfm.world import ConditionToken
from arfm.world import gen_episode

pytestmark = pytest.mark.slow

scenario = [
    "world.num_points=256", "world.length=24", "world.speed=[2.0, 2.0]", "world.branch_frame=[6, 6]",
    "world.reflect_walls=false", "world.condition_rate=0.5",
    "fusion.width=64", "fusion.layers=4", "fusion.max_points=32", "fusion.max_timesteps=24",
    "flow.width=64", "flow.layers=2",
    "train.steps=1500", "train.batch_size=16", "train.num_points=32", "train.window=24", "train.lr=3e-4",
    "train.ema_decay=0.999", "train.ema_interval=1", "train.progress=false", "train.log_every=250",
]
conditioning_frames = 2
horizon = 22
eval_filter = EvalFilterSpec(candidates=256, top_k=32, movement_threshold=0.0)


def scenario_config(*extra) -> RunConfig:
    return load_config(overrides=scenario + list(extra))


def train(config: RunConfig, objective: str) -> ArfmModel:
    episodes = [gen_episode(seed, config.world) for seed in range(300)]
    model = ArfmModel(config.model_config(objective))
    result = train_arfm(model, episodes, config.train)
    result.ema.copy_to(model)
    return model.eval()


@pytest.fixture(scope="module")
def config():
    return scenario_config()


@pytest.fixture(scope="module")
def flow_model(config):
    return train(config, "flow")


@pytest.fixture(scope="module")
def regression_model(config):
    return train(config, "regression")


def held_out(config, count: int, **changes) -> list:
    spec = dataclasses.replace(config.world, **changes)
    return [gen_episode(seed, spec) for seed in range(10_000, 10_000 + count)]


def branch_sides(model, episode, condition, num_samples: int) -> np.ndarray:
    """
    Side taken by the moving entity in every sample: LEFT, RIGHT, or NONE
    when the sample does not leave the straight path by half a turn.
    """
    ids = np.flatnonzero(episode.point_entity == 1)[:16]
    samples = rollout_samples(model, episode, ids, conditioning_frames, horizon, seed=episode.seed,
                              sample_steps=16, num_samples=num_samples, condition=condition)
    velocity = (episode.positions[ids, 1] - episode.positions[ids, 0]).mean(axis=0)
    straight = samples[:, :, 1].mean(axis=1) + velocity * (samples.shape[2] - 2)
    deviation = samples[:, :, -1].mean(axis=1) - straight
    cross = (velocity[0] * deviation[:, 1] - velocity[1] * deviation[:, 0]) / np.linalg.norm(velocity)
    turn = 2.0 * (episode.length - 2 - episode.entities[1].branch_frame) * np.sin(np.deg2rad(60))
    return np.where(cross < -turn / 2, int(ConditionToken.LEFT),
                    np.where(cross > turn / 2, int(ConditionToken.RIGHT), int(ConditionToken.NONE)))


def test_flow_matching_covers_both_branches(flow_model, regression_model, config):
    episodes = held_out(config, 5, condition_rate=0.0)
    flow = np.concatenate([branch_sides(flow_model, episode, ConditionToken.NONE, 40) for episode in episodes])
    regression = np.concatenate([branch_sides(regression_model, episode, ConditionToken.NONE, 40)
                                 for episode in episodes])
    for side in (ConditionToken.LEFT, ConditionToken.RIGHT):
        assert (flow == side).mean() >= 0.2
        assert (regression == side).mean() <= 0.05


def test_flow_matching_beats_regression(flow_model, regression_model, config):
    episodes = held_out(config, 50, condition_rate=0.0)
    flow, _ = eval_run(ArfmPredictor(flow_model), episodes, eval_filter, conditioning_frames, horizon)
    regression, _ = eval_run(ArfmPredictor(regression_model), episodes, eval_filter, conditioning_frames, horizon)
    assert flow.deltas[16] - regression.deltas[16] >= 0.15


def test_model_beats_standing_still(flow_model, config):
    episodes = held_out(config, 200)
    model, _ = eval_run(ArfmPredictor(flow_model), episodes, eval_filter, conditioning_frames, horizon)
    still, _ = eval_run(BaselinePredictor("no_movement"), episodes, eval_filter, conditioning_frames, horizon)
    assert model.delta_avg > still.delta_avg
    assert model.ade < still.ade


def test_static_scenes_stay_put(flow_model, config):
    episodes = held_out(config, 20, speed=(0.0, 0.0))
    model, _ = eval_run(ArfmPredictor(flow_model), episodes, eval_filter, conditioning_frames, horizon)
    still, _ = eval_run(BaselinePredictor("no_movement"), episodes, eval_filter, conditioning_frames, horizon)
    assert model.ade <= still.ade + 1.0


def test_condition_tokens_pick_the_branch(flow_model, config):
    episodes = held_out(config, 5)
    for token in (ConditionToken.LEFT, ConditionToken.RIGHT):
        sides = np.concatenate([branch_sides(flow_model, episode, token, 20) for episode in episodes])
        assert (sides == token).mean() >= 0.95
    sides = np.concatenate([branch_sides(flow_model, episode, ConditionToken.NONE, 20) for episode in episodes])
    assert max((sides == ConditionToken.LEFT).mean(), (sides == ConditionToken.RIGHT).mean()) <= 0.8


def test_partial_renoising_keeps_horizons_consistent(flow_model, config):
    states = []
    for episode in held_out(config, 10, condition_rate=0.0):
        ids = np.flatnonzero(episode.point_entity == 1)[:16]
        states.append(init_horizon(flow_model, episode, ids, conditioning_frames, 8, seed=episode.seed))
    distances = {}
    for t_e in (0.0, 0.5, 0.8, 1.0):
        distances[t_e] = np.mean([
            horizon_edit_distance(state, update_horizon(flow_model, state, t_e, 4 if t_e < 1.0 else 0,
                                                        seed=state.episode.seed + 1))
            for state in states])
    resampled = np.mean([horizon_edit_distance(state, resample_horizon(flow_model, state,
                                                                       seed=state.episode.seed + 1))
                         for state in states])
    assert distances[0.8] < resampled
    assert distances[0.0] >= distances[0.5] >= distances[0.8] >= distances[1.0]


def test_tracks_help_downstream_prediction(tmp_path):
    overrides = scenario + ["data.train_episodes=300", "data.eval_episodes=100", "world.condition_rate=0.0",
                            "encoder.track_length=21", "encoder.steps=1000", f"paths.workdir={tmp_path}"]
    arguments = [value for override in overrides for value in ("--set", override)]
    for command in ("gen-data", "train", "train-downstream"):
        assert main(arguments + [command]) == EXIT_OK
    report = pd.read_csv(Workspace(tmp_path).report_dir / "downstream.csv").set_index("condition")
    accuracy = report["side_accuracy"]
    assert accuracy["none"] < accuracy["predicted"] < accuracy["ground_truth"]
    assert accuracy["ground_truth"] >= 0.95
    assert accuracy["none"] <= 0.55
