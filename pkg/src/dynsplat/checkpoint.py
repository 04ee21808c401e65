"""Versioned chunked binary model snapshots.

Layout: magic b"VSGS", u32 version, then chunks of [4-byte tag][u64 length]
[payload], little-endian throughout. "JSON" carries structural metadata,
"ARRY" chunks carry named arrays (f32 numeric payloads, i64 ids), "END\\0"
terminates. Writes are atomic (temp file + rename) and load(save(x)) == x
bit-exactly.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import torch

from .coarse import CoarseSegmentation
from .deform import DeformField, FieldConfig
from .fine import AffinityConfig, AffinityField
from .scene import GaussianSet

MAGIC = b"VSGS"
VERSION = 1

_DTYPES = {0: np.float32, 1: np.int64, 2: np.uint8, 3: np.float64}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    gaussians: GaussianSet
    field: DeformField | None = None
    coarse: CoarseSegmentation | None = None
    affinity: dict[str, AffinityField] = dataclass_field(default_factory=dict)
    meta: dict = dataclass_field(default_factory=dict)
    version: int = VERSION


def affinity_key(label: int, t: float) -> str:
    return f"{label}@{t:.6f}"


def _write_chunk(fh, tag: bytes, payload: bytes):
    fh.write(tag)
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _array_payload(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported array dtype {arr.dtype} for {name!r}")
    name_b = name.encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<H", len(name_b)))
    buf.write(name_b)
    buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return buf.getvalue()


def _parse_array(payload: bytes) -> tuple[str, np.ndarray]:
    view = memoryview(payload)
    (name_len,) = struct.unpack_from("<H", view, 0)
    off = 2
    name = bytes(view[off : off + name_len]).decode()
    off += name_len
    code, ndim = struct.unpack_from("<BB", view, off)
    off += 2
    shape = struct.unpack_from(f"<{ndim}Q", view, off)
    off += 8 * ndim
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    arr = np.frombuffer(view, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=off)
    return name, arr.reshape(shape).astype(_DTYPES[code])


def _module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    gs = ckpt.gaussians
    arrays: dict[str, np.ndarray] = {
        "gs/means": gs.means.detach().cpu().numpy().astype(np.float32),
        "gs/rotations": gs.rotations.detach().cpu().numpy().astype(np.float32),
        "gs/log_scales": gs.log_scales.detach().cpu().numpy().astype(np.float32),
        "gs/sh": gs.sh.detach().cpu().numpy().astype(np.float32),
        "gs/opacity_logits": gs.opacity_logits.detach().cpu().numpy().astype(np.float32),
        "gs/ids": gs.ids.cpu().numpy().astype(np.int64),
        "gs/aabb": gs.aabb.detach().cpu().numpy().astype(np.float32),
    }
    meta = {
        "meta": ckpt.meta,
        "sh_coeffs": int(gs.sh.shape[-1]),
        "field": None,
        "coarse": None,
        "affinity": {},
    }
    if ckpt.field is not None:
        meta["field"] = ckpt.field.config.to_dict()
        arrays.update(_module_arrays("field", ckpt.field))
    if ckpt.coarse is not None:
        meta["coarse"] = {"k": ckpt.coarse.k, "params": ckpt.coarse.params}
        arrays["coarse/labels"] = ckpt.coarse.labels.astype(np.int64)
        arrays["coarse/gaussian_ids"] = ckpt.coarse.gaussian_ids.astype(np.int64)
        arrays["coarse/centroids"] = np.asarray(ckpt.coarse.centroids, dtype=np.float64)
    for key, afield in ckpt.affinity.items():
        meta["affinity"][key] = afield.config.to_dict()
        arrays.update(_module_arrays(f"aff/{key}", afield))

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        _write_chunk(fh, b"JSON", json.dumps(meta).encode())
        for name in sorted(arrays):
            _write_chunk(fh, b"ARRY", _array_payload(name, arrays[name]))
        _write_chunk(fh, b"END\0", b"")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version}, this reader supports {VERSION}")
        meta = None
        arrays: dict[str, np.ndarray] = {}
        while True:
            tag = _read_exact(fh, 4)
            (length,) = struct.unpack("<Q", _read_exact(fh, 8))
            payload = _read_exact(fh, length)
            if tag == b"END\0":
                break
            elif tag == b"JSON":
                meta = json.loads(payload.decode())
            elif tag == b"ARRY":
                name, arr = _parse_array(payload)
                arrays[name] = arr
            else:
                raise CheckpointError(f"unknown chunk tag {tag!r}")
    if meta is None:
        raise CheckpointError("checkpoint has no metadata chunk")

    def tensor(name, dtype=torch.float32):
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing array {name!r}")
        return torch.from_numpy(np.ascontiguousarray(arrays[name])).to(dtype)

    gaussians = GaussianSet(
        means=tensor("gs/means"),
        rotations=tensor("gs/rotations"),
        log_scales=tensor("gs/log_scales"),
        sh=tensor("gs/sh"),
        opacity_logits=tensor("gs/opacity_logits"),
        ids=tensor("gs/ids", torch.int64),
        aabb=tensor("gs/aabb"),
    )

    def load_module(prefix: str, module: torch.nn.Module):
        state = {}
        for key in module.state_dict():
            state[key] = torch.from_numpy(np.ascontiguousarray(arrays[f"{prefix}/{key}"]))
        module.load_state_dict(state)
        return module

    field = None
    if meta.get("field"):
        config = FieldConfig(**meta["field"])
        field = load_module("field", DeformField(config, gaussians.aabb))

    coarse = None
    if meta.get("coarse"):
        coarse = CoarseSegmentation(
            labels=arrays["coarse/labels"],
            gaussian_ids=arrays["coarse/gaussian_ids"],
            centroids=arrays["coarse/centroids"],
            k=int(meta["coarse"]["k"]),
            params=meta["coarse"]["params"],
        )

    affinity = {}
    for key, cfg in meta.get("affinity", {}).items():
        affinity[key] = load_module(f"aff/{key}", AffinityField(AffinityConfig(**cfg), gaussians.aabb))

    return Checkpoint(
        gaussians=gaussians,
        field=field,
        coarse=coarse,
        affinity=affinity,
        meta=meta.get("meta", {}),
        version=version,
    )
