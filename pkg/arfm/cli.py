"""
Command-line entry point: `arfm [--config FILE] [--set section.key=value ...] <command>`.
"""
from __future__ import annotations

import argparse
import functools
import logging
import sys
import typing

import numpy as np
import pandas as pd
import torch

from arfm.checkpoint import CheckpointError
from arfm.checkpoint import module_arrays
from arfm.config import ConfigError
from arfm.config import RunConfig
from arfm.config import load_config
from arfm.dataset import TRACKS_SUFFIX
from arfm.dataset import encode_track_file
from arfm.engine import horizon_edit_distance
from arfm.engine import init_horizon
from arfm.engine import render_pyramids
from arfm.engine import resample_horizon
from arfm.engine import rollout
from arfm.engine import rollout_samples
from arfm.engine import update_horizon
from arfm.evaluation import ArfmPredictor
from arfm.evaluation import BaselinePredictor
from arfm.evaluation import eval_run
from arfm.model import ArfmModel
from arfm.query import QueryPredictorModel
from arfm.query import propose_queries
from arfm.track_encoder import DownstreamModel
from arfm.track_encoder import downstream_predict
from arfm.tracks import TrackSet
from arfm.training import downstream_examples
from arfm.training import train_arfm
from arfm.training import train_downstream
from arfm.training import train_query
from arfm.workspace import ArtifactMissing
from arfm.workspace import Workspace
from arfm.workspace import map_episodes
from arfm.world import ConditionToken
from arfm.world import Episode
from arfm.world import gen_episode

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _train_model(config: RunConfig, workspace: Workspace, episodes: list[Episode], objective: str,
                 name: str) -> ArfmModel:
    model_config = config.model_config(objective)
    torch.manual_seed(config.train.seed)
    model = ArfmModel(model_config)
    logger.info("Training %r on %d episodes", model, len(episodes))
    result = train_arfm(model, episodes, config.train)
    arrays = module_arrays(model, "")
    arrays.update(result.ema.state_dict("ema."))
    workspace.add_checkpoint(name, arrays, model_config.to_dict(),
                             extras={"objective": objective, "shift_scale": model_config.flow.shift_scale,
                                     "steps": config.train.steps,
                                     "rejected_steps": result.optimizer.rejected_steps})
    return model


def _load_model(config: RunConfig, workspace: Workspace, name: str, objective: typing.Optional[str] = None,
                use_ema: bool = True) -> ArfmModel:
    model_config = config.model_config(objective)
    checkpoint = workspace.get_checkpoint_by_name(name, expected_config=model_config.to_dict())
    model = ArfmModel(model_config)
    checkpoint.load_into(model, "", use_ema=use_ema)
    return model.eval()


def _pick_points(episode: Episode, count: int, seed: int) -> np.ndarray:
    return np.sort(np.random.default_rng(seed).choice(episode.num_points, size=count, replace=False))


def cmd_gen_data(config: RunConfig, workspace: Workspace, args: argparse.Namespace) -> list:
    splits = ["train", "eval"] if args.split == "both" else [args.split]
    artifacts = []
    for split in splits:
        if split == "train":
            first, count = config.data.train_seed, config.data.train_episodes
        else:
            first, count = config.data.eval_seed, config.data.eval_episodes
        episodes = map_episodes(functools.partial(gen_episode, spec=config.world), range(first, first + count))
        artifacts.append(workspace.add_dataset(f"{split}{args.suffix}", config.world, episodes).path)
    return artifacts


def cmd_train(config: RunConfig, workspace: Workspace, args: argparse.Namespace) -> list:
    episodes = workspace.get_dataset_by_name(args.dataset).episodes()
    _train_model(config, workspace, episodes, config.train.objective, args.name)
    return [workspace.checkpoint_path(args.name)]


def cmd_train_query(config: RunConfig, workspace: Workspace, args: argparse.Namespace) -> list:
    episodes = workspace.get_dataset_by_name(args.dataset).episodes()
    fusion = config.model_config().fusion
    torch.manual_seed(config.train.seed)
    model = QueryPredictorModel(fusion.local_features, config.query.hidden)
    train_query(model, episodes, fusion, config.query, config.train)
    workspace.add_checkpoint(args.name, module_arrays(model, "query."), _query_config(config))
    return [workspace.checkpoint_path(args.name)]


def _query_config(config: RunConfig) -> dict:
    return {"query": config.to_dict()["query"], "local_features": config.model_config().fusion.local_features}


def _load_query_model(config: RunConfig, workspace: Workspace, name: str) -> QueryPredictorModel:
    checkpoint = workspace.get_checkpoint_by_name(name, expected_config=_query_config(config))
    model = QueryPredictorModel(config.model_config().fusion.local_features, config.query.hidden)
    return checkpoint.load_into(model, "query.").eval()


def cmd_train_downstream(config: RunConfig, workspace: Workspace, args: argparse.Namespace) -> list:
    fusion = config.model_config().fusion
    encoder = config.encoder
    train = workspace.get_dataset_by_name(args.dataset).episodes()
    test = workspace.get_dataset_by_name(args.eval_dataset).episodes()
    model = _load_model(config, workspace, args.checkpoint)
    horizon = encoder.track_length - 1

    def ground_truth(episode: Episode) -> np.ndarray:
        return episode.positions[_pick_points(episode, encoder.num_points, episode.seed), :encoder.track_length]

    def predicted(episode: Episode) -> np.ndarray:
        return rollout(model, episode, _pick_points(episode, encoder.num_points, episode.seed), 1, horizon,
                       seed=episode.seed, sample_steps=config.sampling.sample_steps, condition=episode.side).points

    scene_size = fusion.scene_size
    torch.manual_seed(config.train.seed)
    with_tracks = DownstreamModel(encoder, scene_size, use_tracks=True)
    train_downstream(with_tracks, downstream_examples(train, fusion, encoder, ground_truth), encoder, config.train)
    without_tracks = DownstreamModel(encoder, scene_size, use_tracks=False)
    train_downstream(without_tracks, downstream_examples(train, fusion, encoder), encoder, config.train)

    rows = []
    for condition, net, tracks_fn in (("none", without_tracks, None), ("predicted", with_tracks, predicted),
                                      ("ground_truth", with_tracks, ground_truth)):
        examples = downstream_examples(test, fusion, encoder, tracks_fn)
        sides, velocities = downstream_predict(net, examples.scene, examples.tracks)
        truth = np.where(examples.side.numpy() > 0.5, int(ConditionToken.LEFT), int(ConditionToken.RIGHT))
        rows.append({"condition": condition, "side_accuracy": float((sides == truth).mean()),
                     "velocity_mse": float(((velocities - examples.velocity.numpy()) ** 2).mean()),
                     "episodes": len(test)})
        logger.info("Downstream %s: side accuracy %.3f", condition, rows[-1]["side_accuracy"])

    config_dict = {"encoder": config.to_dict()["encoder"], "scene_features": scene_size}
    return [workspace.add_checkpoint(args.name, with_tracks.checkpoint_arrays(), config_dict).path,
            workspace.add_checkpoint(f"{args.name}_none", without_tracks.checkpoint_arrays(), config_dict).path,
            workspace.write_report("downstream", pd.DataFrame(rows))]


def cmd_rollout(config: RunConfig, workspace: Workspace, args: argparse.Namespace) -> list:
    episode = workspace.get_dataset_by_name(args.dataset).episode(args.episode)
    model = _load_model(config, workspace, args.checkpoint)
    if args.queries == "predicted":
        query_model = _load_query_model(config, workspace, args.query_checkpoint)
        pyramid = render_pyramids(model, episode, [0])[0]
        queries = propose_queries(query_model, pyramid, args.num_points, config.query.temperature,
                                  seed=config.sampling.seed, num_candidates=config.query.candidates,
                                  canvas=config.world.canvas)
    else:
        queries = _pick_points(episode, args.num_points, config.sampling.seed)
    samples = rollout_samples(model, episode, queries, config.eval.conditioning_frames, config.eval.horizon,
                              seed=config.sampling.seed, sample_steps=config.sampling.sample_steps,
                              num_samples=config.sampling.num_samples)
    metadata = {"episode_seed": episode.seed, "seed": config.sampling.seed, "queries": args.queries,
                "sample_steps": config.sampling.sample_steps, "conditioning_frames": config.eval.conditioning_frames,
                "horizon": config.eval.horizon}
    path = workspace.rollout_dir / f"rollout_{episode.seed}{TRACKS_SUFFIX}"
    tracks = [TrackSet(points, frame_rate=episode.frame_rate) for points in samples]
    return [workspace.write_bytes(path, encode_track_file(tracks, metadata, seed=episode.seed))]


def cmd_update_demo(config: RunConfig, workspace: Workspace, args: argparse.Namespace) -> list:
    episode = workspace.get_dataset_by_name(args.dataset).episode(args.episode)
    model = _load_model(config, workspace, args.checkpoint)
    sampling = config.sampling
    ids = _pick_points(episode, args.num_points, sampling.seed)
    state = init_horizon(model, episode, ids, config.eval.conditioning_frames, sampling.horizon, sampling.seed,
                         sampling.sample_steps)
    rows = []
    for update in range(args.updates):
        frame = state.observed_frames
        if frame >= episode.length or frame + sampling.horizon - 1 > model.config.fusion.max_timesteps:
            break
        seed = sampling.seed + update + 1
        edited = update_horizon(model, state, sampling.edit_t, sampling.edit_steps, seed, sampling.sample_steps)
        resampled = resample_horizon(model, state, seed, sampling.sample_steps)
        rows.append({"update": update, "frame": frame, "edit_distance": horizon_edit_distance(state, edited),
                     "resample_distance": horizon_edit_distance(state, resampled)})
        state = edited
    horizon = TrackSet(state.horizon[0].numpy(), frame_rate=episode.frame_rate)
    path = workspace.rollout_dir / f"horizon_{episode.seed}{TRACKS_SUFFIX}"
    return [workspace.write_report("update_demo", pd.DataFrame(rows, columns=["update", "frame", "edit_distance",
                                                                              "resample_distance"])),
            workspace.write_bytes(path, encode_track_file([horizon], {"episode_seed": episode.seed,
                                                                  "observed_frames": state.observed_frames,
                                                                  "t_e": sampling.edit_t,
                                                                  "edit_steps": sampling.edit_steps,
                                                                  "sample_steps": sampling.sample_steps,
                                                                  "seed": sampling.seed}))]


def _evaluate(config: RunConfig, workspace: Workspace, predictors: list, dataset: str, prefix: str) -> list:
    episodes = workspace.get_dataset_by_name(dataset).episodes()
    artifacts, summary = [], []
    for predictor in predictors:
        report, frame = eval_run(predictor, episodes, config.eval.filter_spec(), config.eval.conditioning_frames,
                                 config.eval.horizon, config.eval.num_samples, progress=config.train.progress)
        artifacts.append(workspace.write_report(f"{prefix}_{predictor.name}", frame))
        artifacts.append(workspace.write_report(f"{prefix}_{predictor.name}_plot", report.plot_data()))
        summary.append({"predictor": predictor.name, **report.as_row()})
    artifacts.append(workspace.write_report(f"{prefix}_summary", pd.DataFrame(summary)))
    return artifacts


def cmd_eval(config: RunConfig, workspace: Workspace, args: argparse.Namespace) -> list:
    predictors = []
    if not args.baselines_only:
        model = _load_model(config, workspace, args.checkpoint)
        predictors.append(ArfmPredictor(model, config.sampling.sample_steps, name=args.checkpoint))
    predictors += [BaselinePredictor(mode, config.eval.ar_order) for mode in config.eval.baselines]
    return _evaluate(config, workspace, predictors, args.dataset, f"eval_{args.dataset}")


def cmd_ablate_objective(config: RunConfig, workspace: Workspace, args: argparse.Namespace) -> list:
    episodes = workspace.get_dataset_by_name(args.train_dataset).episodes()
    predictors, artifacts = [], []
    for objective in ("flow", "regression"):
        name = f"arfm_{objective}"
        _train_model(config, workspace, episodes, objective, name)
        artifacts.append(workspace.checkpoint_path(name))
        predictors.append(ArfmPredictor(_load_model(config, workspace, name, objective),
                                        config.sampling.sample_steps, name=name))
    return artifacts + _evaluate(config, workspace, predictors, args.dataset, f"ablate_{args.dataset}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-query": cmd_train_query,
    "train-downstream": cmd_train_downstream,
    "rollout": cmd_rollout,
    "update-demo": cmd_update_demo,
    "eval": cmd_eval,
    "ablate-objective": cmd_ablate_objective,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arfm", description="Probabilistic point-track prediction.")
    parser.add_argument("--config", help="TOML run config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    gen_data = commands.add_parser("gen-data", help="generate train/eval datasets")
    gen_data.add_argument("--split", choices=["train", "eval", "both"], default="both")
    gen_data.add_argument("--suffix", default="", help="appended to the dataset names")

    for name in ("train", "train-query"):
        sub = commands.add_parser(name, help=f"{name.replace('-', ' ')} model")
        sub.add_argument("--dataset", default="train")
        sub.add_argument("--name", default="arfm" if name == "train" else "query")

    downstream = commands.add_parser("train-downstream", help="train and compare downstream models")
    downstream.add_argument("--dataset", default="train")
    downstream.add_argument("--eval-dataset", default="eval")
    downstream.add_argument("--checkpoint", default="arfm")
    downstream.add_argument("--name", default="downstream")

    for name in ("rollout", "update-demo"):
        sub = commands.add_parser(name, help=f"{name.replace('-', ' ')} on one eval episode")
        sub.add_argument("--dataset", default="eval")
        sub.add_argument("--episode", type=int, default=0, help="episode index in the dataset")
        sub.add_argument("--checkpoint", default="arfm")
        sub.add_argument("--num-points", type=int, default=32)
        if name == "rollout":
            sub.add_argument("--queries", choices=["sampled", "predicted"], default="sampled")
            sub.add_argument("--query-checkpoint", default="query")
        else:
            sub.add_argument("--updates", type=int, default=8)

    evaluate = commands.add_parser("eval", help="evaluate the model and the baselines")
    evaluate.add_argument("--dataset", default="eval")
    evaluate.add_argument("--checkpoint", default="arfm")
    evaluate.add_argument("--baselines-only", action="store_true")

    ablate = commands.add_parser("ablate-objective", help="train and compare flow matching against regression")
    ablate.add_argument("--train-dataset", default="train")
    ablate.add_argument("--dataset", default="eval")
    return parser


def main(argv: typing.Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        config = load_config(args.config, args.overrides)
        torch.set_num_threads(config.train.threads)
        workspace = Workspace(config.paths.workdir)
        artifacts = COMMANDS[args.command](config, workspace, args)
        manifest_name = args.command + getattr(args, "suffix", "")
        workspace.write_manifest(manifest_name, config.to_toml(), config.train.seed, artifacts)
    except (ConfigError, ArtifactMissing, CheckpointError) as error:
        print(f"arfm {args.command}: {error}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as error:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(f"arfm {args.command}: {type(error).__name__}: {error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
