"""
Binary dataset and track files.

Dataset file: magic b"ARFMDS1\\0", uint32 spec length, world spec JSON,
32-byte sha256 of the spec JSON, uint64 episode count, 32-byte sha256 of
the record payload, then one record per episode. A record is uint64 seed,
uint8 condition token, float32 frame rate, uint32 M, uint32 L, M*L*2
float32 positions and M*L uint8 visibility flags. Everything little-endian.
Track files use the same records behind the magic b"ARFMTS1\\0" and a JSON
metadata block instead of the spec.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from arfm.base import ArfmBase
from arfm.tracks import TrackSet
from arfm.world import ConditionToken
from arfm.world import Episode
from arfm.world import WorldSpec
from arfm.world import gen_episode

if typing.TYPE_CHECKING:
    from arfm.workspace import Workspace

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"ARFMDS1\x00"
TRACKS_MAGIC = b"ARFMTS1\x00"
DATASET_SUFFIX = ".arfmds"
TRACKS_SUFFIX = ".arfmts"
RECORD_HEADER = struct.Struct("<QBfII")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int = 0, missing: int = 0) -> None:
        super().__init__(message)
        self.offset = offset
        self.missing = missing


@dataclass
class EpisodeRecord:
    seed: int
    condition_token: ConditionToken
    tracks: TrackSet

    @property
    def frame_rate(self) -> float:
        return self.tracks.frame_rate


class _Reader(object):
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        available = len(self.data) - self.offset
        if available < size:
            raise DatasetFormatError(f"truncated {what} at offset {self.offset}: missing {size - available} bytes",
                                     offset=self.offset, missing=size - available)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout: str, what: str) -> tuple:
        return struct.unpack(layout, self.take(struct.calcsize(layout), what))


def pack_record(seed: int, condition_token: int, tracks: TrackSet) -> bytes:
    num_points, length = tracks.points.shape[:2]
    return RECORD_HEADER.pack(seed, int(condition_token), tracks.frame_rate, num_points, length) \
        + tracks.points.astype("<f4").tobytes() + tracks.visibility.astype(np.uint8).tobytes()


def unpack_record(reader: _Reader) -> EpisodeRecord:
    seed, token, frame_rate, num_points, length = reader.unpack(RECORD_HEADER.format, "record header")
    points = np.frombuffer(reader.take(num_points * length * 8, "record positions"), dtype="<f4")
    visibility = np.frombuffer(reader.take(num_points * length, "record visibility"), dtype=np.uint8)
    tracks = TrackSet(points.astype(np.float32).reshape(num_points, length, 2),
                      visibility.reshape(num_points, length).astype(bool), float(frame_rate))
    return EpisodeRecord(seed=seed, condition_token=ConditionToken(token), tracks=tracks)


def encode_dataset(spec: WorldSpec, records: list[EpisodeRecord]) -> bytes:
    spec_json = json.dumps(spec.to_dict(), sort_keys=True).encode("utf-8")
    payload = b"".join(pack_record(record.seed, record.condition_token, record.tracks) for record in records)
    return DATASET_MAGIC + struct.pack("<I", len(spec_json)) + spec_json + hashlib.sha256(spec_json).digest() \
        + struct.pack("<Q", len(records)) + hashlib.sha256(payload).digest() + payload


def decode_dataset(data: bytes) -> tuple[WorldSpec, list[EpisodeRecord]]:
    reader = _Reader(data)
    if reader.take(len(DATASET_MAGIC), "magic") != DATASET_MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    (spec_length,) = reader.unpack("<I", "spec length")
    spec_json = reader.take(spec_length, "world spec")
    if reader.take(32, "spec digest") != hashlib.sha256(spec_json).digest():
        raise DatasetFormatError("world spec digest mismatch", offset=reader.offset)
    (count,) = reader.unpack("<Q", "episode count")
    payload_digest = reader.take(32, "payload digest")
    start = reader.offset
    records = [unpack_record(reader) for _ in range(count)]
    if hashlib.sha256(data[start:reader.offset]).digest() != payload_digest:
        raise DatasetFormatError("payload digest mismatch", offset=start)
    if reader.offset != len(data):
        raise DatasetFormatError(f"{len(data) - reader.offset} trailing bytes after {count} records",
                                 offset=reader.offset)
    return WorldSpec.from_dict(json.loads(spec_json.decode("utf-8"))), records


class Dataset(ArfmBase):
    def __init__(self, spec: WorldSpec, records: list[EpisodeRecord], path: typing.Optional[Path] = None,
                 workspace: typing.Optional[Workspace] = None) -> None:
        """ Episodes stored by seed, with their ground-truth tracks. """
        super().__init__()
        self.spec = spec
        self.records = records
        self.path = path
        self.workspace = workspace
        self.name = path.name[:-len(DATASET_SUFFIX)] if path is not None and path.name.endswith(DATASET_SUFFIX) \
            else (path.name if path is not None else "")
        self.id = (spec.digest(), tuple(record.seed for record in records))

    def __repr__(self) -> str:
        return f"<Dataset (name: {self.name}, episodes: {len(self.records)})>"

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> typing.Iterator[EpisodeRecord]:
        return iter(self.records)

    @classmethod
    def from_bytes(cls, data: bytes, path: typing.Optional[Path] = None,
                   workspace: typing.Optional[Workspace] = None) -> Dataset:
        spec, records = decode_dataset(data)
        return cls(spec, records, path=path, workspace=workspace)

    @classmethod
    def from_episodes(cls, spec: WorldSpec, episodes: list[Episode]) -> Dataset:
        records = [EpisodeRecord(seed=episode.seed, condition_token=episode.condition_token, tracks=episode.tracks())
                   for episode in episodes]
        return cls(spec, records)

    @classmethod
    def from_list(cls, workspace: Workspace, paths: list[Path]) -> list[Dataset]:
        return [cls.from_bytes(workspace.fetch_bytes(path), path=path, workspace=workspace) for path in paths]

    def to_bytes(self) -> bytes:
        return encode_dataset(self.spec, self.records)

    def episode(self, index: int, verify: bool = True) -> Episode:
        """
        Regenerate the full episode of a record from its seed.
        :param verify: check the regenerated tracks against the stored ones
        """
        record = self.records[index]
        episode = gen_episode(record.seed, self.spec)
        if verify and not np.array_equal(episode.positions, record.tracks.points):
            raise DatasetFormatError(f"episode {record.seed} does not regenerate to the stored tracks")
        return episode

    def episodes(self, verify: bool = True) -> list[Episode]:
        return [self.episode(index, verify=verify) for index in range(len(self.records))]

    def delete(self) -> None:
        if self.workspace is not None and self.path is not None:
            self.workspace.delete(self.path)


def write_dataset(episodes: list[Episode], path: typing.Union[str, Path],
                  spec: typing.Optional[WorldSpec] = None) -> Path:
    if not episodes and spec is None:
        raise ValueError("an empty dataset needs an explicit world spec")
    spec = spec or episodes[0].spec
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(Dataset.from_episodes(spec, episodes).to_bytes())
    logger.info("Wrote %d episodes to %s", len(episodes), path)
    return path


def read_dataset(path: typing.Union[str, Path]) -> Dataset:
    path = Path(path)
    return Dataset.from_bytes(path.read_bytes(), path=path)


def encode_track_file(track_sets: list[TrackSet], metadata: typing.Optional[dict] = None, seed: int = 0) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    payload = b"".join(pack_record(seed, ConditionToken.NONE, tracks) for tracks in track_sets)
    return TRACKS_MAGIC + struct.pack("<I", len(meta)) + meta + struct.pack("<Q", len(track_sets)) + payload


def decode_track_file(data: bytes) -> tuple[dict, list[TrackSet]]:
    reader = _Reader(data)
    if reader.take(len(TRACKS_MAGIC), "magic") != TRACKS_MAGIC:
        raise DatasetFormatError("not a track file (bad magic)")
    (meta_length,) = reader.unpack("<I", "metadata length")
    metadata = json.loads(reader.take(meta_length, "metadata").decode("utf-8"))
    (count,) = reader.unpack("<Q", "track set count")
    return metadata, [unpack_record(reader).tracks for _ in range(count)]


def write_tracks(track_sets: list[TrackSet], path: typing.Union[str, Path],
                 metadata: typing.Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_track_file(track_sets, metadata))
    return path


def read_tracks(path: typing.Union[str, Path]) -> tuple[dict, list[TrackSet]]:
    return decode_track_file(Path(path).read_bytes())
