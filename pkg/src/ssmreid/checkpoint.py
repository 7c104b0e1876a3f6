"""Checkpoint archive: a plain-text manifest followed by raw tensor blobs.

Layout of a checkpoint file::

    ssmreid-checkpoint 1
    config <key> = <value>          # one line per model-config field
    tensor <name> <d0xd1x...> <offset>
    ...
    end
    <blob bytes>

Blobs are little-endian 32-bit floats, concatenated in manifest order;
offsets are bytes from the start of the blob section.  Offsets must equal
the cumulative sizes implied by the shapes and the blob section must match
the total byte count exactly, so a corrupted manifest is rejected rather
than silently misloaded.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .mgfe import ReidModel

FORMAT_VERSION = 1
_MAGIC = "ssmreid-checkpoint"


class CheckpointError(Exception):
    """Base class for malformed or mismatched checkpoint archives."""


class VersionMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: dict[str, str]
    tensors: dict[str, np.ndarray]  # float32, manifest order


def _config_lines(model: ReidModel) -> dict[str, str]:
    values = {
        f.name: repr(getattr(model.config, f.name))
        for f in dataclasses.fields(ModelConfig)
    }
    values["num_classes"] = repr(model.num_classes)
    return values


def checkpoint_from_model(model: ReidModel) -> Checkpoint:
    tensors = {
        name: tensor.detach().cpu().to(torch.float32).numpy()
        for name, tensor in model.state_dict().items()
    }
    return Checkpoint(version=FORMAT_VERSION, config=_config_lines(model), tensors=tensors)


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    manifest = io.StringIO()
    manifest.write(f"{_MAGIC} {ckpt.version}\n")
    for key, value in ckpt.config.items():
        manifest.write(f"config {key} = {value}\n")
    offset = 0
    blobs = []
    for name, array in ckpt.tensors.items():
        blob = np.ascontiguousarray(array, dtype="<f4").tobytes()
        shape = "x".join(str(d) for d in array.shape) or "scalar"
        manifest.write(f"tensor {name} {shape} {offset}\n")
        blobs.append(blob)
        offset += len(blob)
    manifest.write("end\n")
    with Path(path).open("wb") as fh:
        fh.write(manifest.getvalue().encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def save_checkpoint(model: ReidModel, path: str | Path) -> None:
    """Serialize all parameters and running statistics of a model."""
    write_checkpoint(checkpoint_from_model(model), path)


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "scalar":
        return ()
    try:
        return tuple(int(d) for d in text.split("x"))
    except ValueError as exc:
        raise ShapeMismatchError(f"unparseable shape {text!r}") from exc


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Parse and validate an archive; offsets and sizes must be consistent."""
    raw = Path(path).read_bytes()
    header_end = raw.find(b"\nend\n")
    if header_end < 0:
        raise TruncatedBlobError("missing manifest terminator")
    manifest = raw[: header_end + 1].decode("utf-8").splitlines()
    blob = raw[header_end + len(b"\nend\n") :]

    first = manifest[0].split()
    if len(first) != 2 or first[0] != _MAGIC:
        raise VersionMismatchError(f"not a checkpoint manifest: {manifest[0]!r}")
    if first[1] != str(FORMAT_VERSION):
        raise VersionMismatchError(
            f"unsupported format version {first[1]} (expected {FORMAT_VERSION})"
        )

    config: dict[str, str] = {}
    entries: list[tuple[str, tuple[int, ...], int]] = []
    for line in manifest[1:]:
        if line.startswith("config "):
            key, _, value = line[len("config ") :].partition(" = ")
            config[key] = value
        elif line.startswith("tensor "):
            parts = line.split()
            if len(parts) != 4:
                raise ShapeMismatchError(f"malformed tensor line: {line!r}")
            entries.append((parts[1], _parse_shape(parts[2]), int(parts[3])))
        else:
            raise CheckpointError(f"unrecognized manifest line: {line!r}")

    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for name, shape, offset in entries:
        if offset != expected_offset:
            raise ShapeMismatchError(
                f"tensor {name}: offset {offset} disagrees with cumulative "
                f"size {expected_offset}"
            )
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if offset + nbytes > len(blob):
            raise TruncatedBlobError(
                f"tensor {name}: blob section ends before offset {offset + nbytes}"
            )
        tensors[name] = np.frombuffer(
            blob, dtype="<f4", count=nbytes // 4, offset=offset
        ).reshape(shape)
        expected_offset = offset + nbytes
    if expected_offset != len(blob):
        raise TruncatedBlobError(
            f"blob section has {len(blob)} bytes, manifest accounts for "
            f"{expected_offset}"
        )
    return Checkpoint(version=FORMAT_VERSION, config=config, tensors=tensors)


def load_into_model(model: ReidModel, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into a model, validating shapes first.

    Rejects with the first mismatching tensor name, before touching any
    parameter.
    """
    state = model.state_dict()
    for name, param in state.items():
        if name not in ckpt.tensors:
            raise ShapeMismatchError(f"tensor {name} missing from checkpoint")
        if tuple(ckpt.tensors[name].shape) != tuple(param.shape):
            raise ShapeMismatchError(
                f"tensor {name}: checkpoint shape {ckpt.tensors[name].shape} "
                f"!= model shape {tuple(param.shape)}"
            )
    for name in ckpt.tensors:
        if name not in state:
            raise ShapeMismatchError(f"checkpoint tensor {name} unknown to model")
    new_state = {
        name: torch.from_numpy(ckpt.tensors[name].copy()).to(state[name].dtype)
        for name in state
    }
    model.load_state_dict(new_state)


def model_from_checkpoint(
    ckpt: Checkpoint, dtype: torch.dtype = torch.float64
) -> ReidModel:
    """Rebuild a model from the config echo and load the stored tensors."""
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name not in ckpt.config:
            raise CheckpointError(f"config key {f.name} missing from checkpoint")
        raw = ckpt.config[f.name]
        target = {"int": int, "float": float, "str": str, "bool": bool}[f.type]
        kwargs[f.name] = raw.strip("'\"") if target is str else target(raw)
    if "num_classes" not in ckpt.config:
        raise CheckpointError("config key num_classes missing from checkpoint")
    model = ReidModel(ModelConfig(**kwargs), int(ckpt.config["num_classes"]), dtype=dtype)
    load_into_model(model, ckpt)
    return model


def describe_checkpoint(ckpt: Checkpoint) -> str:
    """Human-readable manifest summary for the CLI."""
    lines = [f"format version {ckpt.version}"]
    lines += [f"  {k} = {v}" for k, v in ckpt.config.items()]
    total = 0
    for name, arr in ckpt.tensors.items():
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"  tensor {name} shape={shape} bytes={arr.nbytes}")
        total += arr.nbytes
    lines.append(f"{len(ckpt.tensors)} tensors, {total} blob bytes")
    return "\n".join(lines)
