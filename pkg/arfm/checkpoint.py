"""
Checkpoint files: the magic b"ARFM1", a little-endian uint32 header length,
a JSON header (config, config digest, array table, extras) and the raw
little-endian float32 payload of every array in table order.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import typing
from pathlib import Path

import numpy as np
import torch
from torch import nn

from arfm.base import ArfmBase

if typing.TYPE_CHECKING:
    from arfm.workspace import Workspace

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ARFM1"
CHECKPOINT_SUFFIX = ".ckpt"
EMA_PREFIX = "ema."


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


def config_digest(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def encode_checkpoint(arrays: dict[str, torch.Tensor], config: dict, extras: typing.Optional[dict] = None) -> bytes:
    """
    Serialize named float32 arrays together with the config that produced them.
    :param arrays: name -> tensor; order is kept
    :return: the checkpoint file content
    """
    table, chunks, offset = [], [], 0
    for name, tensor in arrays.items():
        data = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()
        table.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"version": 1, "config": config, "config_digest": config_digest(config),
                         "arrays": table, "extras": extras or {}}, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    """
    :return: header dict and name -> tensor
    """
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    start = len(CHECKPOINT_MAGIC)
    if len(data) < start + 4:
        raise CheckpointError("truncated checkpoint header length")
    (header_length,) = struct.unpack_from("<I", data, start)
    start += 4
    if len(data) < start + header_length:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[start:start + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"malformed checkpoint header: {error}") from error
    if not isinstance(header, dict) or not {"arrays", "config", "config_digest"} <= set(header):
        raise CheckpointError("checkpoint header misses arrays, config or config_digest")
    payload = memoryview(data)[start + header_length:]
    arrays = {}
    for entry in header["arrays"]:
        if entry["offset"] + entry["nbytes"] > len(payload):
            raise CheckpointError(f"truncated payload for array {entry['name']}")
        values = np.frombuffer(payload, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"])
        arrays[entry["name"]] = torch.from_numpy(values.astype(np.float32).reshape(entry["shape"]))
    return header, arrays


class Checkpoint(ArfmBase):
    def __init__(self, path: typing.Union[str, Path], data: bytes,
                 expected_config: typing.Optional[dict] = None,
                 workspace: typing.Optional[Workspace] = None) -> None:
        """ Parsed checkpoint file. """
        super().__init__()
        self.path = Path(path)
        self.workspace = workspace
        self.__header, self.arrays = decode_checkpoint(data)
        self.config = self.__header["config"]
        self.id = self.__header["config_digest"]
        self.extras = self.__header.get("extras", {})
        self.name = self.path.name[:-len(CHECKPOINT_SUFFIX)] if self.path.name.endswith(CHECKPOINT_SUFFIX) \
            else self.path.name
        if expected_config is not None and config_digest(expected_config) != self.id:
            raise CheckpointMismatch(f"checkpoint {self.path} was written for another config "
                                     f"(digest {self.id[:12]} != {config_digest(expected_config)[:12]})")

    def __repr__(self) -> str:
        return f"<Checkpoint (name: {self.name}, arrays: {len(self.arrays)}, digest: {self.id[:12]})>"

    def identity(self) -> tuple:
        return self.id, str(self.path)

    @classmethod
    def from_path(cls, path: typing.Union[str, Path], expected_config: typing.Optional[dict] = None) -> Checkpoint:
        return cls(path=path, data=Path(path).read_bytes(), expected_config=expected_config)

    @classmethod
    def from_list(cls, workspace: Workspace, paths: list[Path]) -> list[Checkpoint]:
        return [cls(path=path, data=workspace.fetch_bytes(path), workspace=workspace) for path in paths]

    def has_prefix(self, prefix: str) -> bool:
        return any(name.startswith(prefix) for name in self.arrays)

    def state_dict(self, prefix: str, use_ema: bool = True) -> dict[str, torch.Tensor]:
        """
        Arrays below `prefix` with the prefix stripped. EMA copies win when present.
        """
        source = prefix
        if use_ema and self.has_prefix(EMA_PREFIX + prefix):
            source = EMA_PREFIX + prefix
        state = {name[len(source):]: value for name, value in self.arrays.items()
                 if name.startswith(source) and (source.startswith(EMA_PREFIX) or not name.startswith(EMA_PREFIX))}
        if not state:
            raise CheckpointMismatch(f"checkpoint {self.name} has no arrays below '{prefix}'")
        return state

    def load_into(self, module: nn.Module, prefix: str, use_ema: bool = True) -> nn.Module:
        try:
            module.load_state_dict(self.state_dict(prefix, use_ema=use_ema), strict=True)
        except RuntimeError as error:
            raise CheckpointMismatch(f"checkpoint {self.name} does not fit {type(module).__name__}: {error}")
        return module

    def delete(self) -> None:
        if self.workspace is not None:
            self.workspace.delete(self.path)
        else:
            self.path.unlink()


def save_checkpoint(path: typing.Union[str, Path], arrays: dict[str, torch.Tensor], config: dict,
                    extras: typing.Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(arrays, config, extras))
    logger.info("Wrote checkpoint %s with %d arrays", path, len(arrays))
    return path


def load_checkpoint(path: typing.Union[str, Path], expected_config: typing.Optional[dict] = None) -> Checkpoint:
    return Checkpoint.from_path(path, expected_config=expected_config)


def module_arrays(module: nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}{name}": value for name, value in module.state_dict().items()}
