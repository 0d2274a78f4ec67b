from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import typing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import pandas as pd
import torch

from arfm.checkpoint import CHECKPOINT_SUFFIX
from arfm.checkpoint import Checkpoint
from arfm.checkpoint import encode_checkpoint
from arfm.dataset import DATASET_SUFFIX
from arfm.dataset import Dataset
from arfm.world import Episode
from arfm.world import WorldSpec

logger = logging.getLogger(__name__)

WORKERS_ENV = "ARFM_WORKERS"


class ArtifactAlreadyExists(Exception):
    pass


class ArtifactMissing(Exception):
    pass


def worker_count() -> int:
    value = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        logger.warning("Ignoring %s=%r, expected an integer", WORKERS_ENV, value)
        return 1


def map_episodes(fn: typing.Callable, items: typing.Iterable, workers: typing.Optional[int] = None) -> list:
    """ Ordered map over a process pool of `workers` (ARFM_WORKERS by default) processes. """
    workers = worker_count() if workers is None else workers
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class Workspace(object):
    def __init__(self, base_dir: typing.Union[str, Path]) -> None:
        """ Artifact directory of one run: datasets, checkpoints, reports, rollouts and manifests. """
        self.base_dir = Path(base_dir)

    def __repr__(self) -> str:
        return f"<Workspace (base_dir: {self.base_dir})>"

    @property
    def data_dir(self) -> Path:
        return self.base_dir / "data"

    @property
    def checkpoint_dir(self) -> Path:
        return self.base_dir / "checkpoints"

    @property
    def report_dir(self) -> Path:
        return self.base_dir / "reports"

    @property
    def rollout_dir(self) -> Path:
        return self.base_dir / "rollouts"

    @property
    def manifest_dir(self) -> Path:
        return self.base_dir / "manifests"

    @staticmethod
    def content_digest(data: bytes) -> str:
        return hashlib.sha256(data).hexdigest()

    def fetch_bytes(self, path: typing.Union[str, Path]) -> bytes:
        """
        Read an artifact.
        :raises ArtifactMissing: if the file does not exist or cannot be read
        """
        try:
            return Path(path).read_bytes()
        except OSError as error:
            raise ArtifactMissing(f"artifact {path} is not available: {error.strerror}")

    def write_bytes(self, path: typing.Union[str, Path], data: bytes, overwrite: bool = True) -> Path:
        path = Path(path)
        if path.exists() and not overwrite:
            raise ArtifactAlreadyExists(f"artifact {path} already exists")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        logger.debug("Wrote %d bytes to %s", len(data), path)
        return path

    def delete(self, path: typing.Union[str, Path]) -> None:
        try:
            Path(path).unlink()
        except FileNotFoundError:
            raise ArtifactMissing(f"artifact {path} does not exist")

    def list_datasets(self, regex_filter='.*') -> list[Dataset]:
        """
        List all (matching) datasets
        :return: list of datasets
        """
        paths = sorted(self.data_dir.glob(f"*{DATASET_SUFFIX}"))
        paths = [path for path in paths if re.search(regex_filter, path.name[:-len(DATASET_SUFFIX)])]
        return Dataset.from_list(self, paths)

    def list_checkpoints(self, regex_filter='.*') -> list[Checkpoint]:
        """
        List all (matching) checkpoints
        :return: list of checkpoints
        """
        paths = sorted(self.checkpoint_dir.glob(f"*{CHECKPOINT_SUFFIX}"))
        paths = [path for path in paths if re.search(regex_filter, path.name[:-len(CHECKPOINT_SUFFIX)])]
        return Checkpoint.from_list(self, paths)

    def dataset_path(self, name: str) -> Path:
        return self.data_dir / f"{name}{DATASET_SUFFIX}"

    def checkpoint_path(self, name: str) -> Path:
        return self.checkpoint_dir / f"{name}{CHECKPOINT_SUFFIX}"

    def get_dataset_by_name(self, name: str) -> Dataset:
        path = self.dataset_path(name)
        return Dataset.from_bytes(self.fetch_bytes(path), path=path, workspace=self)

    def get_checkpoint_by_name(self, name: str, expected_config: typing.Optional[dict] = None) -> Checkpoint:
        path = self.checkpoint_path(name)
        return Checkpoint(path=path, data=self.fetch_bytes(path), expected_config=expected_config, workspace=self)

    def add_dataset(self, name: str, spec: WorldSpec, episodes: list[Episode], overwrite: bool = True) -> Dataset:
        """
        Store the ground-truth tracks of `episodes` as dataset `name`.
        :return: the new dataset
        """
        path = self.write_bytes(self.dataset_path(name), Dataset.from_episodes(spec, episodes).to_bytes(),
                                overwrite=overwrite)
        logger.info("Added dataset %s with %d episodes", name, len(episodes))
        return self.get_dataset_by_name(name)

    def add_checkpoint(self, name: str, arrays: dict[str, torch.Tensor], config: dict,
                       extras: typing.Optional[dict] = None, overwrite: bool = True) -> Checkpoint:
        self.write_bytes(self.checkpoint_path(name), encode_checkpoint(arrays, config, extras), overwrite=overwrite)
        logger.info("Added checkpoint %s with %d arrays", name, len(arrays))
        return self.get_checkpoint_by_name(name)

    def write_report(self, name: str, frame: pd.DataFrame) -> Path:
        return self.write_bytes(self.report_dir / f"{name}.csv", frame.to_csv(index=False).encode("utf-8"))

    def write_manifest(self, command: str, config_toml: str, seed: int, artifacts: list[Path]) -> Path:
        """
        Record what a command produced: config snapshot, seed and the sha256 of every artifact.
        """
        entries = [{"path": str(Path(path).relative_to(self.base_dir)) if Path(path).is_relative_to(self.base_dir)
                    else str(path), "sha256": self.content_digest(self.fetch_bytes(path))} for path in artifacts]
        digest = self.content_digest("".join(sorted(entry["sha256"] for entry in entries)).encode("ascii"))
        manifest = {"command": command, "seed": seed, "config": config_toml, "artifacts": entries, "digest": digest}
        path = self.manifest_dir / f"{command}.json"
        return self.write_bytes(path, json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
