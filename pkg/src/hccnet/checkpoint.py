"""``LSCK`` checkpoint files.

Layout (little-endian)::

    b"LSCK" | u32 version | u64 manifest length | manifest JSON | f32 payload

The manifest's ``tensors`` list gives ``name``, ``shape`` and ``offset``
(bytes from the payload start) for every stored tensor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"LSCK"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")
STAGES = ("backbone-pretrain", "encoder-pretrain", "finetune", "baseline")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


class ShapeConflictError(CheckpointError):
    pass


@dataclass
class CheckpointManifest:
    variant: str
    stage: str
    step: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    tensors: list = field(default_factory=list)
    format_version: int = VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CheckpointManifest":
        return cls(**d)


def _as_tensors(store: Union[nn.Module, Mapping[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    if isinstance(store, nn.Module):
        store = store.state_dict()
    return {k: v.detach() for k, v in store.items()}


def save_checkpoint(store, manifest: CheckpointManifest, path) -> Path:
    tensors = _as_tensors(store)
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].to(torch.float32).cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest.tensors = index
    meta = json.dumps(manifest.to_dict(), sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, manifest.format_version, len(meta)))
        fh.write(meta)
        for raw in chunks:
            fh.write(raw)
    return path


def read_manifest(path) -> CheckpointManifest:
    return load_checkpoint(path)[1]


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], CheckpointManifest]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise CheckpointFormatError("file too short for a checkpoint header")
    magic, version, mlen = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    start = _HEAD.size + mlen
    if start > len(buf):
        raise CheckpointFormatError("manifest extends past end of file")
    try:
        meta = json.loads(buf[_HEAD.size : start])
        manifest = CheckpointManifest.from_dict(meta)
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from exc
    payload = memoryview(buf)[start:]
    spans = []
    tensors = {}
    for entry in manifest.tensors:
        shape = tuple(int(s) for s in entry["shape"])
        off = int(entry["offset"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + nbytes > len(payload):
            raise MissingTensorError(f"{entry['name']}: offset {off} outside payload")
        spans.append((off, off + nbytes, entry["name"]))
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(shape))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1 and b1 > b0:
            raise MissingTensorError(f"tensors {an} and {bn} overlap in the payload")
    return tensors, manifest


def select_prefix(tensors: Mapping[str, torch.Tensor], prefixes: Iterable[str]) -> dict:
    prefixes = tuple(prefixes)
    return {k: v for k, v in tensors.items() if k.startswith(prefixes)}


def apply_tensors(
    model: nn.Module,
    tensors: Mapping[str, torch.Tensor],
    prefixes: Optional[Iterable[str]] = None,
    exclude: Iterable[str] = (),
    adapt=None,
) -> list[str]:
    """Copy checkpoint tensors into ``model`` for every state entry under ``prefixes``.

    Everything is validated before the first write, so a failing call leaves
    the model untouched.  ``adapt(name, tensor, target_shape)`` may reshape
    tensors whose shapes legitimately differ (e.g. stem input channels).
    """
    state = model.state_dict()
    exclude = tuple(exclude)
    names = [
        n for n in state
        if (prefixes is None or n.startswith(tuple(prefixes))) and not (exclude and n.startswith(exclude))
    ]
    staged = {}
    for name in names:
        if name not in tensors:
            raise MissingTensorError(f"checkpoint lacks tensor {name}")
        src = tensors[name]
        if adapt is not None and tuple(src.shape) != tuple(state[name].shape):
            src = adapt(name, src, tuple(state[name].shape))
        if tuple(src.shape) != tuple(state[name].shape):
            raise ShapeConflictError(f"{name}: checkpoint {tuple(src.shape)} vs model {tuple(state[name].shape)}")
        staged[name] = src
    with torch.no_grad():
        for name, src in staged.items():
            state[name].copy_(src.to(state[name].dtype))
    return names
