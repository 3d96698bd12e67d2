"""Checkpoint serialization.

Model files are a one-line JSON header (format tag, config, parameter
manifest) followed by the concatenated little-endian float32 parameter
values in manifest order. Run directories hold the resolved config, one
encoder blob per bank member, mixing parameters, and the training history.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .encoders import EncoderConfig, TextEncoder, build_encoder

ENCODER_FORMAT = "msda-encoder-v1"
PARAMS_FORMAT = "msda-params-v1"


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def _write_blob(path: Path, header: dict, tensors: list[tuple[str, torch.Tensor]]) -> None:
    manifest = [{"name": name, "shape": list(t.shape)} for name, t in tensors]
    header = dict(header, params=manifest)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for _name, t in tensors:
            f.write(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    os.replace(tmp, path)


def _read_blob(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    with Path(path).open("rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"{path}: bad header: {err}") from err
        blob = f.read()
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header.get("params", []):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = 4 * count
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated blob at parameter {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return header, arrays


def save_encoder(encoder: TextEncoder, path: str | Path) -> None:
    tensors = sorted(encoder.named_parameters())
    _write_blob(Path(path), {"format": ENCODER_FORMAT, "config": encoder.config.to_dict()}, tensors)


def load_encoder(path: str | Path) -> TextEncoder:
    header, arrays = _read_blob(Path(path))
    if header.get("format") != ENCODER_FORMAT:
        raise CheckpointError(f"{path}: not an encoder checkpoint")
    encoder = build_encoder(EncoderConfig(**header["config"]))
    named = dict(encoder.named_parameters())
    if set(named) != set(arrays):
        raise CheckpointError(f"{path}: parameter manifest does not match the architecture")
    with torch.no_grad():
        for name, arr in arrays.items():
            named[name].copy_(torch.from_numpy(arr))
    return encoder


def save_params(tensors: dict[str, torch.Tensor], path: str | Path, extra: dict | None = None) -> None:
    header = {"format": PARAMS_FORMAT}
    if extra:
        header["extra"] = extra
    _write_blob(Path(path), header, sorted(tensors.items()))


def load_params(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    header, arrays = _read_blob(Path(path))
    if header.get("format") != PARAMS_FORMAT:
        raise CheckpointError(f"{path}: not a parameter bundle")
    tensors = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    return tensors, header.get("extra", {})
