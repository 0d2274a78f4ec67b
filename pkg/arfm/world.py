"""
Procedural 2-D world: rigid discs carrying tracked points over a static
background, with an optional left/right branch of every moving entity and
a condition token that may reveal the branch side.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import typing
from dataclasses import dataclass

import numpy as np

from arfm.base import ArfmBase
from arfm.tracks import TrackSet

logger = logging.getLogger(__name__)


class ConditionToken(enum.IntEnum):
    NONE = 0
    LEFT = 1
    RIGHT = 2


class InvalidWorldSpec(ValueError):
    pass


class UnknownPoint(KeyError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    canvas: int = 256
    length: int = 51
    num_points: int = 1024
    num_entities: int = 2
    entity_share: float = 0.5
    entity_radius: tuple = (16.0, 28.0)
    speed: tuple = (1.0, 3.0)
    branch_frame: tuple = (4, 12)
    branch_angle: float = 60.0
    branch_prob: float = 0.5
    condition_rate: float = 0.5
    forced_token: typing.Optional[str] = None
    camera_pan: tuple = (0.0, 0.0)
    reflect_walls: bool = True
    frame_rates: tuple = (25.0,)
    reference_frame_rate: float = 25.0

    def validate(self) -> WorldSpec:
        if self.canvas < 1 or self.length < 2 or self.num_points < 1:
            raise InvalidWorldSpec("canvas, length and num_points must be positive (length >= 2)")
        if self.num_entities < 1:
            raise InvalidWorldSpec("num_entities counts the static background and must be >= 1")
        if not 0.0 <= self.entity_share <= 1.0:
            raise InvalidWorldSpec(f"entity_share must be in [0, 1], got {self.entity_share}")
        low, high = self.entity_radius
        if not 0 < low <= high or 2 * high >= self.canvas:
            raise InvalidWorldSpec(f"entity_radius {self.entity_radius} does not fit a canvas of {self.canvas}")
        if not 0 <= self.speed[0] <= self.speed[1]:
            raise InvalidWorldSpec(f"speed range {self.speed} is invalid")
        if not 1 <= self.branch_frame[0] <= self.branch_frame[1]:
            raise InvalidWorldSpec("branch frames must be ordered and >= 1")
        if not 0.0 <= self.branch_prob <= 1.0 or not 0.0 <= self.condition_rate <= 1.0:
            raise InvalidWorldSpec("branch_prob and condition_rate must be probabilities")
        if self.forced_token is not None and self.forced_token not in ConditionToken.__members__:
            raise InvalidWorldSpec(f"forced_token must be one of {list(ConditionToken.__members__)}")
        if not self.frame_rates or any(rate <= 0 for rate in self.frame_rates) or self.reference_frame_rate <= 0:
            raise InvalidWorldSpec("frame rates must be positive")
        return self

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        return {key: list(value) if isinstance(value, tuple) else value for key, value in data.items()}

    @classmethod
    def from_dict(cls, data: dict) -> WorldSpec:
        unknown = set(data) - {field.name for field in dataclasses.fields(cls)}
        if unknown:
            raise InvalidWorldSpec(f"unknown world settings: {sorted(unknown)}")
        return cls(**{key: tuple(value) if isinstance(value, list) else value for key, value in data.items()})

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def rotate(vector: np.ndarray, degrees: float) -> np.ndarray:
    angle = np.deg2rad(degrees)
    cos, sin = np.cos(angle), np.sin(angle)
    return np.array([cos * vector[0] - sin * vector[1], sin * vector[0] + cos * vector[1]])


def reflect(values: np.ndarray, low: float, high: float) -> np.ndarray:
    """ Fold unbounded coordinates into [low, high] as a ball bouncing off both walls would travel. """
    span = high - low
    if span <= 0:
        return np.full_like(values, low)
    folded = np.mod(values - low, 2.0 * span)
    return low + np.where(folded > span, 2.0 * span - folded, folded)


@dataclass
class Entity:
    entity_id: int
    radius: float
    anchor: np.ndarray
    velocities: np.ndarray
    branch_frame: typing.Optional[int] = None

    @property
    def is_static(self) -> bool:
        return not np.any(self.velocities)


class Episode(ArfmBase):
    def __init__(self, seed: int, spec: WorldSpec, entities: list[Entity], offsets: np.ndarray,
                 point_entity: np.ndarray, condition_token: ConditionToken, side: ConditionToken,
                 frame_rate: float) -> None:
        """
        One generated episode. Positions are computed on first access.
        :param offsets: per point offset from its entity anchor (absolute position for the background)
        :param point_entity: entity id of every point
        :param side: branch side actually taken by the moving entities
        """
        super().__init__()
        self.id = seed
        self.seed = seed
        self.spec = spec
        self.entities = entities
        self.offsets = offsets
        self.point_entity = point_entity
        self.condition_token = condition_token
        self.side = side
        self.frame_rate = frame_rate
        self.pyramid_cache: dict = {}
        self.__anchors = {}
        self.__positions = None
        self.__velocities = None

    def __repr__(self) -> str:
        return f"<Episode (seed: {self.seed}, token: {self.condition_token.name}, side: {self.side.name})>"

    def identity(self) -> tuple:
        return self.spec.digest(), self.seed

    def __getstate__(self) -> dict:
        state = self.__dict__.copy()
        state["pyramid_cache"] = {}
        return state

    @property
    def length(self) -> int:
        return self.spec.length

    @property
    def num_points(self) -> int:
        return self.offsets.shape[0]

    def anchor_path(self, entity_id: int) -> np.ndarray:
        """
        Observed anchor of an entity for frames -1..L-1, camera pan included.
        :return: float64 array of shape (L + 1, 2)
        """
        if entity_id not in self.__anchors:
            entity = self.entities[entity_id]
            frames = np.arange(-1, self.length)
            if entity.is_static:
                path = np.repeat(entity.anchor[None, :], self.length + 1, axis=0)
            else:
                unfolded = entity.anchor - entity.velocities[0] + np.concatenate(
                    [np.zeros((1, 2)), np.cumsum(entity.velocities, axis=0)], axis=0)
                if self.spec.reflect_walls:
                    path = reflect(unfolded, entity.radius, self.spec.canvas - entity.radius)
                else:
                    path = unfolded
            self.__anchors[entity_id] = path + frames[:, None] * np.asarray(self.spec.camera_pan, dtype=np.float64)
        return self.__anchors[entity_id]

    def __compute(self) -> None:
        world = np.empty((self.num_points, self.length + 1, 2), dtype=np.float64)
        for entity in self.entities:
            members = self.point_entity == entity.entity_id
            world[members] = self.anchor_path(entity.entity_id)[None, :, :] + self.offsets[members][:, None, :]
        self.__positions = world[:, 1:].astype(np.float32)
        self.__velocities = np.diff(world, axis=1).astype(np.float32)

    @property
    def positions(self) -> np.ndarray:
        """ (M, L, 2) float32 observed point positions. """
        if self.__positions is None:
            self.__compute()
        return self.__positions

    @property
    def velocities(self) -> np.ndarray:
        """ (M, L, 2) float32 displacement into each frame, frame 0 measured from the virtual frame -1. """
        if self.__velocities is None:
            self.__compute()
        return self.__velocities

    @property
    def visibility(self) -> np.ndarray:
        positions = self.positions
        return ((positions >= 0) & (positions < self.spec.canvas)).all(axis=-1)

    def tracks(self, point_ids: typing.Optional[np.ndarray] = None) -> TrackSet:
        point_ids = np.arange(self.num_points) if point_ids is None else np.asarray(point_ids)
        return TrackSet(self.positions[point_ids], self.visibility[point_ids], self.frame_rate, point_ids)

    def moving_entities(self) -> list[Entity]:
        return [entity for entity in self.entities if entity.entity_id != 0]


class OracleTracks(TrackSet):
    def __init__(self, points: np.ndarray, visibility: np.ndarray, frame_rate: float, start_frame: int,
                 entity_ids: np.ndarray) -> None:
        super().__init__(points, visibility, frame_rate)
        self.start_frame = start_frame
        self.entity_ids = entity_ids


def gen_episode(seed: int, spec: WorldSpec) -> Episode:
    """
    Generate the episode for `seed`. Identical (seed, spec) pairs give identical episodes.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    frame_rate = float(spec.frame_rates[rng.integers(len(spec.frame_rates))])
    speed_scale = spec.reference_frame_rate / frame_rate

    side = ConditionToken.LEFT if rng.random() < spec.branch_prob else ConditionToken.RIGHT
    token = side if rng.random() < spec.condition_rate else ConditionToken.NONE
    if spec.forced_token is not None:
        token = ConditionToken[spec.forced_token]
        if token != ConditionToken.NONE:
            side = token

    moving = spec.num_entities - 1
    on_entities = int(round(spec.num_points * spec.entity_share)) if moving else 0
    background = spec.num_points - on_entities
    split = np.array_split(np.arange(on_entities), moving) if moving else []

    offsets = np.empty((spec.num_points, 2), dtype=np.float64)
    point_entity = np.zeros(spec.num_points, dtype=np.int64)
    offsets[:background] = rng.uniform(0.0, spec.canvas, size=(background, 2))
    entities = [Entity(entity_id=0, radius=0.0, anchor=np.zeros(2), velocities=np.zeros((spec.length, 2)))]

    turn = -spec.branch_angle if side == ConditionToken.LEFT else spec.branch_angle
    for entity_id, members in enumerate(split, start=1):
        radius = rng.uniform(*spec.entity_radius)
        anchor = rng.uniform(radius, spec.canvas - radius, size=2)
        speed = rng.uniform(*spec.speed) * speed_scale
        heading = rng.uniform(0.0, 2.0 * np.pi)
        branch_frame = int(rng.integers(spec.branch_frame[0], spec.branch_frame[1] + 1))
        initial = speed * np.array([np.cos(heading), np.sin(heading)])
        velocities = np.repeat(initial[None, :], spec.length, axis=0)
        if branch_frame < spec.length - 1:
            velocities[branch_frame + 1:] = rotate(initial, turn)
        distance = radius * np.sqrt(rng.uniform(0.0, 1.0, size=members.size))
        angle = rng.uniform(0.0, 2.0 * np.pi, size=members.size)
        rows = background + members
        offsets[rows] = np.stack([distance * np.cos(angle), distance * np.sin(angle)], axis=-1)
        point_entity[rows] = entity_id
        entities.append(Entity(entity_id=entity_id, radius=radius, anchor=anchor, velocities=velocities,
                               branch_frame=branch_frame))

    return Episode(seed=seed, spec=spec, entities=entities, offsets=offsets, point_entity=point_entity,
                   condition_token=token, side=side, frame_rate=frame_rate)


def oracle_tracks(episode: Episode, query_points: np.ndarray, start_frame: int = 0) -> OracleTracks:
    """
    Ground-truth tracks of arbitrary query points from `start_frame` to the end of the episode.
    A query belongs to the topmost entity whose disc contains it at `start_frame`, else to the background.
    """
    queries = np.asarray(query_points, dtype=np.float64).reshape(-1, 2)
    canvas = episode.spec.canvas
    if not 0 <= start_frame < episode.length:
        raise ValueError(f"start_frame must be in [0, {episode.length}), got {start_frame}")
    if ((queries < 0) | (queries >= canvas)).any():
        raise ValueError(f"query points must lie inside the {canvas}x{canvas} canvas")

    owner = np.zeros(queries.shape[0], dtype=np.int64)
    for entity in episode.moving_entities():
        center = episode.anchor_path(entity.entity_id)[start_frame + 1]
        owner[np.linalg.norm(queries - center, axis=-1) <= entity.radius] = entity.entity_id

    frames = slice(start_frame + 1, episode.length + 1)
    points = np.empty((queries.shape[0], episode.length - start_frame, 2), dtype=np.float64)
    for entity_id in np.unique(owner):
        path = episode.anchor_path(int(entity_id))[frames]
        rows = owner == entity_id
        points[rows] = queries[rows][:, None, :] + (path - path[0])[None, :, :]
    points = points.astype(np.float32)
    visibility = ((points >= 0) & (points < canvas)).all(axis=-1)
    return OracleTracks(points, visibility, episode.frame_rate, start_frame, owner)


def online_track_next(episode: Episode, point_ids: typing.Union[int, np.ndarray], frame: int) -> np.ndarray:
    """
    Position of tracked points at `frame`, as an online tracker would report it.
    :raises UnknownPoint: for ids that are not points of the episode
    """
    ids = np.asarray(point_ids)
    if ids.size == 0 or not np.issubdtype(ids.dtype, np.integer) or (ids < 0).any() or \
            (ids >= episode.num_points).any():
        raise UnknownPoint(f"unknown point id(s) {point_ids} for an episode with {episode.num_points} points")
    if not 0 <= frame < episode.length:
        raise ValueError(f"frame must be in [0, {episode.length}), got {frame}")
    return episode.positions[ids, frame].copy()
