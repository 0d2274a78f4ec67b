"""
Best-of-K point-accuracy metrics, evaluation-sample selection and the
per-episode evaluation loop shared by the model and the baselines.
"""
from __future__ import annotations

import logging
import typing
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

from arfm.baselines import baseline_predict
from arfm.engine import rollout_samples
from arfm.world import Episode

if typing.TYPE_CHECKING:
    from arfm.model import ArfmModel

logger = logging.getLogger(__name__)

THRESHOLDS = (4, 8, 16, 32, 64)


class UndefinedMetric(ValueError):
    pass


@dataclass
class EvalFilterSpec:
    candidates: int = 1000
    top_k: int = 100
    movement_threshold: float = 50.0

    def __post_init__(self) -> None:
        assert 1 <= self.top_k <= self.candidates, "top_k must be in [1, candidates]"


@dataclass
class EvalSelection:
    keep: bool
    point_ids: np.ndarray
    mean_movement: float


@dataclass
class MetricsReport:
    deltas: dict
    delta_avg: float
    ade: float
    episodes: int
    failed: int = 0
    dropped: int = 0
    samples: int = 5
    conditioning_frames: int = 1
    horizon: int = 50

    def __repr__(self) -> str:
        return f"<MetricsReport (delta_avg: {self.delta_avg:.4f}, ade: {self.ade:.3f}, episodes: {self.episodes})>"

    def as_row(self) -> dict:
        row = {f"delta_{threshold}": value for threshold, value in self.deltas.items()}
        row.update({"delta_avg": self.delta_avg, "ade": self.ade, "episodes": self.episodes, "failed": self.failed,
                    "dropped": self.dropped})
        return row

    def plot_data(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": list(self.deltas), "delta": list(self.deltas.values())})


def _visible_distances(predictions: np.ndarray, ground_truth: np.ndarray, visibility: np.ndarray) -> np.ndarray:
    """ (S, K) distances over the K visible (track, frame) pairs. """
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.ndim == 3:
        predictions = predictions[None]
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    if predictions.shape[1:] != ground_truth.shape or ground_truth.shape[:2] != visibility.shape:
        raise ValueError(f"predictions {predictions.shape}, ground truth {ground_truth.shape} and "
                         f"visibility {visibility.shape} disagree")
    if not visibility.any():
        raise UndefinedMetric("no visible ground-truth point to evaluate")
    return np.linalg.norm(predictions - ground_truth[None], axis=-1)[:, visibility]


def delta_metrics(predictions: np.ndarray, ground_truth: np.ndarray, visibility: np.ndarray,
                  thresholds: tuple = THRESHOLDS) -> dict:
    """
    Fraction of visible points within each pixel threshold, best over the samples.
    :param predictions: (S, N, H, 2) or (N, H, 2)
    """
    distances = _visible_distances(predictions, ground_truth, visibility)
    return {threshold: float((distances < threshold).mean(axis=1).max()) for threshold in thresholds}


def ade(predictions: np.ndarray, ground_truth: np.ndarray, visibility: np.ndarray) -> float:
    """ Average distance over samples and visible points. """
    return float(_visible_distances(predictions, ground_truth, visibility).mean())


def filter_eval_samples(points: np.ndarray, spec: EvalFilterSpec, seed: int) -> EvalSelection:
    """
    Pick a random candidate subset, keep its fastest tracks and accept the
    episode if their mean summed movement is strictly above the threshold.
    :param points: ground-truth tracks (M, L, 2)
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < spec.candidates:
        raise ValueError(f"need {spec.candidates} candidate tracks, episode has {points.shape[0]}")
    candidates = np.random.default_rng(seed).permutation(points.shape[0])[:spec.candidates]
    movement = np.linalg.norm(np.diff(points[candidates], axis=1), axis=-1).sum(axis=1)
    order = np.argsort(-movement, kind="stable")[:spec.top_k]
    mean_movement = float(movement[order].mean())
    return EvalSelection(keep=mean_movement > spec.movement_threshold, point_ids=candidates[order],
                         mean_movement=mean_movement)


class ArfmPredictor(object):
    def __init__(self, model: ArfmModel, sample_steps: int = 16, name: str = "arfm") -> None:
        self.model = model
        self.sample_steps = sample_steps
        self.name = name

    def __repr__(self) -> str:
        return f"<ArfmPredictor (name: {self.name}, steps: {self.sample_steps})>"

    def predict(self, episode: Episode, point_ids: np.ndarray, conditioning_frames: int, horizon: int,
                num_samples: int, seed: int) -> np.ndarray:
        return rollout_samples(self.model, episode, point_ids, conditioning_frames, horizon, seed,
                               self.sample_steps, num_samples)


class BaselinePredictor(object):
    def __init__(self, mode: str, order: int = 4) -> None:
        self.mode = mode
        self.order = order
        self.name = mode

    def __repr__(self) -> str:
        return f"<BaselinePredictor (mode: {self.mode})>"

    def predict(self, episode: Episode, point_ids: np.ndarray, conditioning_frames: int, horizon: int,
                num_samples: int, seed: int) -> np.ndarray:
        past = episode.positions[point_ids, :conditioning_frames]
        future = baseline_predict(self.mode, past, horizon, self.order).tracks
        return np.concatenate([past, future], axis=1)[None].astype(np.float32)


def eval_episode(predictor, episode: Episode, spec: EvalFilterSpec, conditioning_frames: int, horizon: int,
                 num_samples: int) -> typing.Optional[dict]:
    """ Metrics of one episode, or None when its selection is dropped. """
    selection = filter_eval_samples(episode.positions, spec, seed=episode.seed)
    if not selection.keep:
        return None
    end = conditioning_frames + horizon
    if end > episode.length:
        raise ValueError(f"{conditioning_frames} + {horizon} frames exceed the episode length {episode.length}")
    samples = predictor.predict(episode, selection.point_ids, conditioning_frames, horizon, num_samples,
                                seed=episode.seed)
    ground_truth = episode.positions[selection.point_ids, conditioning_frames:end]
    visibility = episode.visibility[selection.point_ids, conditioning_frames:end]
    predictions = samples[:, :, conditioning_frames:end]
    deltas = delta_metrics(predictions, ground_truth, visibility)
    row = {"episode": episode.seed}
    row.update({f"delta_{threshold}": value for threshold, value in deltas.items()})
    row.update({"delta_avg": float(np.mean(list(deltas.values()))), "ade": ade(predictions, ground_truth, visibility),
                "mean_movement": selection.mean_movement})
    return row


def eval_run(predictor, episodes: typing.Iterable[Episode], spec: typing.Optional[EvalFilterSpec] = None,
             conditioning_frames: int = 1, horizon: int = 50, num_samples: int = 5,
             progress: bool = False) -> tuple[MetricsReport, pd.DataFrame]:
    """
    Evaluate a predictor on every kept episode. Episodes whose prediction fails
    are logged, counted and left out of the averages.
    :return: the aggregated report and a frame with one row per episode plus a summary row
    """
    spec = spec or EvalFilterSpec()
    rows, failed, dropped, total = [], 0, 0, 0
    for episode in tqdm(episodes, desc=f"eval {predictor.name}", disable=not progress):
        total += 1
        try:
            row = eval_episode(predictor, episode, spec, conditioning_frames, horizon, num_samples)
        except Exception as error:
            logger.warning("Evaluation of episode %s with %s failed: %s", episode.seed, predictor.name, error)
            failed += 1
            continue
        if row is None:
            dropped += 1
            continue
        rows.append(row)
    columns = ["episode"] + [f"delta_{threshold}" for threshold in THRESHOLDS] + ["delta_avg", "ade",
                                                                                 "mean_movement"]
    frame = pd.DataFrame(rows, columns=columns)
    if frame.empty:
        raise UndefinedMetric(f"no episode left to evaluate ({dropped} dropped, {failed} failed of {total})")
    report = MetricsReport(deltas={threshold: float(frame[f"delta_{threshold}"].mean()) for threshold in THRESHOLDS},
                           delta_avg=float(frame["delta_avg"].mean()), ade=float(frame["ade"].mean()),
                           episodes=len(frame), failed=failed, dropped=dropped, samples=num_samples,
                           conditioning_frames=conditioning_frames, horizon=horizon)
    summary = {"episode": "summary", **{key: value for key, value in report.as_row().items() if key in columns},
               "mean_movement": float(frame["mean_movement"].mean())}
    frame = pd.concat([frame, pd.DataFrame([summary], columns=columns)], ignore_index=True)
    logger.info("Evaluated %s on %d episodes (%d dropped, %d failed): delta_avg %.4f, ADE %.3f", predictor.name,
                report.episodes, dropped, failed, report.delta_avg, report.ade)
    return report, frame
