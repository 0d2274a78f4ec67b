import json

import pandas as pd
import pytest
import torch
from faker import Faker

from arfm.workspace import WORKERS_ENV
from arfm.workspace import ArtifactAlreadyExists
from arfm.workspace import ArtifactMissing
from arfm.workspace import Workspace
from arfm.workspace import map_episodes
from arfm.workspace import worker_count
from arfm.world import WorldSpec
from arfm.world import gen_episode


fake = Faker()
spec = WorldSpec(num_points=16, length=5)


def test_datasets_are_listed_by_name(tmp_path):
    workspace = Workspace(tmp_path)
    workspace.add_dataset("train", spec, [gen_episode(seed, spec) for seed in range(2)])
    workspace.add_dataset("eval", spec, [gen_episode(seed, spec) for seed in range(10, 13)])
    assert [dataset.name for dataset in workspace.list_datasets()] == ["eval", "train"]
    assert [len(dataset) for dataset in workspace.list_datasets("^tr")] == [2]
    assert workspace.get_dataset_by_name("eval").workspace is workspace


def test_missing_artifacts_raise(tmp_path):
    workspace = Workspace(tmp_path)
    with pytest.raises(ArtifactMissing):
        workspace.get_dataset_by_name(fake.word())
    with pytest.raises(ArtifactMissing):
        workspace.delete(tmp_path / "nothing.ckpt")


def test_existing_artifacts_are_kept_on_request(tmp_path):
    workspace = Workspace(tmp_path)
    path = workspace.write_bytes(tmp_path / "a.bin", b"first")
    with pytest.raises(ArtifactAlreadyExists):
        workspace.write_bytes(path, b"second", overwrite=False)
    assert workspace.fetch_bytes(path) == b"first"


def test_checkpoints_can_be_added_and_deleted(tmp_path):
    workspace = Workspace(tmp_path)
    checkpoint = workspace.add_checkpoint("arfm", {"w": torch.ones(3)}, {"width": 4}, {"shift_scale": 8.0})
    assert [item.name for item in workspace.list_checkpoints()] == ["arfm"]
    checkpoint.delete()
    assert workspace.list_checkpoints() == []


def test_reports_are_csv(tmp_path):
    workspace = Workspace(tmp_path)
    frame = pd.DataFrame({"episode": [1, 2], "ade": [0.5, 1.5]})
    path = workspace.write_report("eval_arfm", frame)
    assert path.parent == workspace.report_dir
    assert pd.read_csv(path).equals(frame)


def test_manifests_are_reproducible(tmp_path):
    workspace = Workspace(tmp_path)
    artifact = workspace.write_bytes(workspace.rollout_dir / "r.arfmts", b"tracks")
    first = workspace.fetch_bytes(workspace.write_manifest("rollout", "[train]\n", 3, [artifact]))
    second = workspace.fetch_bytes(workspace.write_manifest("rollout", "[train]\n", 3, [artifact]))
    assert first == second
    manifest = json.loads(first)
    assert manifest["artifacts"] == [{"path": "rollouts/r.arfmts", "sha256": Workspace.content_digest(b"tracks")}]
    workspace.write_bytes(artifact, b"other tracks")
    changed = json.loads(workspace.fetch_bytes(workspace.write_manifest("rollout", "[train]\n", 3, [artifact])))
    assert changed["digest"] != manifest["digest"]


def test_worker_count_reads_the_environment(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert worker_count() == 3
    monkeypatch.setenv(WORKERS_ENV, "many")
    assert worker_count() == 1


def test_map_keeps_the_order():
    assert map_episodes(abs, [-3, 1, -2], workers=1) == [3, 1, 2]
