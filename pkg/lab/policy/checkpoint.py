"""
Checkpoint Format

    [8 bytes]  header length N, little-endian unsigned
    [N bytes]  canonical JSON header: format_version, model_config, train_config,
               norm_stats, param_index [{name, shape, offset}], body_sha256
    [rest]     parameters as contiguous little-endian float32, in param_index order

Offsets are relative to the start of the body. Saving a loaded checkpoint
reproduces the file byte for byte.
"""
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .exceptions import CheckpointError
from .fileio import atomic_write_bytes, dump_json
from .tokenizer import NormStats
from .transformer import ModelConfig

FORMAT_VERSION = 1
HEADER_PREFIX = 8
BODY_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: dict
    norm_stats: NormStats
    param_index: List[dict]
    tensors: Dict[str, torch.Tensor]
    path: Optional[Path] = None

    @property
    def total_parameters(self) -> int:
        return sum(int(np.prod(entry["shape"], dtype=np.int64)) for entry in self.param_index)

    def build_model(self):
        from .model import DiffusionTransformerPolicy

        model = DiffusionTransformerPolicy(self.model_config)
        try:
            model.load_state_dict(self.tensors, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"parameters do not fit the stored model config: {exc}", path=self.path) from exc
        model.eval()
        return model


def encode_checkpoint(tensors: Dict[str, torch.Tensor], model_config: dict, train_config: dict,
                      norm_stats: NormStats) -> bytes:
    index, chunks, offset = [], [], 0
    for name, tensor in tensors.items():
        array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=BODY_DTYPE)
        index.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes())
        offset += array.nbytes
    body = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model_config,
        "train_config": train_config,
        "norm_stats": norm_stats.to_json(),
        "param_index": index,
        "body_sha256": hashlib.sha256(body).hexdigest(),
    }
    header_bytes = dump_json(header).encode("utf-8")
    return struct.pack("<Q", len(header_bytes)) + header_bytes + body


def save_checkpoint(path, model, train_config: dict, norm_stats: NormStats) -> Path:
    data = encode_checkpoint(model.state_dict(), model.config.to_dict(), train_config, norm_stats)
    try:
        return atomic_write_bytes(path, data)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}", path=path) from exc


def save_loaded(path, ckpt: Checkpoint) -> Path:
    data = encode_checkpoint(ckpt.tensors, ckpt.model_config.to_dict(), ckpt.train_config, ckpt.norm_stats)
    return atomic_write_bytes(path, data)


def decode_checkpoint(data: bytes, path=None) -> Checkpoint:
    if len(data) < HEADER_PREFIX:
        raise CheckpointError(f"{path}: file is {len(data)} bytes, too short for a header", path=path, offset=0)
    (header_len,) = struct.unpack("<Q", data[:HEADER_PREFIX])
    body_start = HEADER_PREFIX + header_len
    if body_start > len(data):
        raise CheckpointError(
            f"{path}: header declares {header_len} bytes but only {len(data) - HEADER_PREFIX} follow",
            path=path, offset=HEADER_PREFIX,
        )
    try:
        header = json.loads(data[HEADER_PREFIX:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON ({exc})", path=path, offset=HEADER_PREFIX) from exc

    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')!r}",
                              path=path, offset=HEADER_PREFIX)
    try:
        model_config = ModelConfig.from_dict(header["model_config"])
        norm_stats = NormStats.from_json(header["norm_stats"])
        index = header["param_index"]
        train_config = header["train_config"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})", path=path, offset=HEADER_PREFIX) from exc

    body = data[body_start:]
    expected = 0
    for entry in index:
        if entry["offset"] != expected:
            raise CheckpointError(
                f"{path}: parameter {entry['name']} starts at body offset {entry['offset']}, expected {expected}",
                path=path, offset=body_start + expected,
            )
        expected += int(np.prod(entry["shape"], dtype=np.int64)) * BODY_DTYPE.itemsize
    if len(body) != expected:
        raise CheckpointError(
            f"{path}: body is {len(body)} bytes but the header declares {expected}",
            path=path, offset=body_start + min(len(body), expected),
        )
    if hashlib.sha256(body).hexdigest() != header.get("body_sha256"):
        raise CheckpointError(f"{path}: body checksum mismatch", path=path, offset=body_start)

    tensors = {}
    for entry in index:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(body, dtype=BODY_DTYPE, count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(np.float32).reshape(entry["shape"]))
    return Checkpoint(model_config=model_config, train_config=train_config, norm_stats=norm_stats,
                      param_index=index, tensors=tensors, path=Path(path) if path else None)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}", path=path) from exc
    return decode_checkpoint(data, path)


def load_policy(path):
    """(model, checkpoint) ready for evaluation."""
    ckpt = load_checkpoint(path)
    return ckpt.build_model(), ckpt
