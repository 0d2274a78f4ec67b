from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

BASELINE_MODES = ("no_movement", "const_velocity", "ar_ls")
AR_ORDER = 4


@dataclass
class BaselinePrediction:
    tracks: np.ndarray
    mode: str
    fallback: bool = False


def fit_ar_coefficients(series: np.ndarray, order: int) -> np.ndarray:
    """
    Least-squares autoregression s_t = sum_i c_i * s_(t-i) without intercept.
    :param series: 1-D series with more than `order` values
    :return: coefficients c_1..c_order, most recent lag first
    """
    series = np.asarray(series, dtype=np.float64)
    rows = series.shape[0] - order
    if order < 1 or rows < 1:
        raise ValueError(f"need more than {order} values for an order-{order} fit, got {series.shape[0]}")
    design = np.stack([series[order - lag:order - lag + rows] for lag in range(1, order + 1)], axis=-1)
    coefficients, *_ = np.linalg.lstsq(design, series[order:], rcond=None)
    return coefficients


def _ar_rollout(shifts: np.ndarray, coefficients: np.ndarray, horizon: int) -> np.ndarray:
    history = list(shifts)
    order = coefficients.shape[0]
    for _ in range(horizon):
        history.append(float(np.dot(coefficients, history[-1:-order - 1:-1])))
    return np.asarray(history[len(shifts):])


def baseline_predict(mode: str, past: np.ndarray, horizon: int, order: int = AR_ORDER) -> BaselinePrediction:
    """
    Extrapolate tracks from their observed prefix.
    Too short a prefix degrades ar_ls to const_velocity and const_velocity to no_movement, flagged as fallback.
    :param past: observed positions of shape (N, P, 2)
    :return: predicted positions of shape (N, horizon, 2) for the frames after the prefix
    """
    assert mode in BASELINE_MODES, f"mode must be one of {BASELINE_MODES}"
    past = np.asarray(past, dtype=np.float64)
    if past.ndim != 3 or past.shape[1] < 1:
        raise ValueError(f"past must have shape (N, P >= 1, 2), got {past.shape}")
    frames = past.shape[1]
    used, fallback = mode, False
    if used == "ar_ls" and frames < 3:
        used, fallback = "const_velocity", True
    if used == "const_velocity" and frames < 2:
        used, fallback = "no_movement", True
    if fallback:
        logger.debug("Baseline %s falls back to %s with %d observed frames", mode, used, frames)

    last = past[:, -1:]
    if used == "no_movement":
        tracks = np.repeat(last, horizon, axis=1)
    elif used == "const_velocity":
        velocity = past[:, -1] - past[:, -2]
        tracks = last + np.arange(1, horizon + 1)[None, :, None] * velocity[:, None, :]
    else:
        shifts = np.diff(past, axis=1)
        lags = min(order, shifts.shape[1] - 1)
        future = np.empty((past.shape[0], horizon, 2))
        for track in range(past.shape[0]):
            for axis in range(2):
                coefficients = fit_ar_coefficients(shifts[track, :, axis], lags)
                future[track, :, axis] = _ar_rollout(shifts[track, :, axis], coefficients, horizon)
        tracks = last + np.cumsum(future, axis=1)
    return BaselinePrediction(tracks=tracks, mode=used, fallback=fallback)
