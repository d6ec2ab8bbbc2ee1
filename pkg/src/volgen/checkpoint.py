"""Checkpoint directory format.

A checkpoint is a directory::

    manifest.json              format version, step, config snapshot, blob index
    <network>.params.bin       parameters and normalization buffers
    <network>.adam.bin         Adam moments and step counts

Every ``.bin`` blob is a sequence of named little-endian float32 arrays::

    b"VGB1"  u32 n_records
    repeat:  u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], f32 data[prod(dims)]

The manifest records the byte length and sha256 of each blob. Directories
are written under a temporary name and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
from pathlib import Path

import numpy as np
import torch

from .config import config_to_dict, configs_from_dict

FORMAT_VERSION = 1
MAGIC = b"VGB1"


class CheckpointError(RuntimeError):
    pass


def encode_blob(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_blob(data: bytes, label: str = "blob") -> dict[str, np.ndarray]:
    try:
        if data[:4] != MAGIC:
            raise CheckpointError(f"{label}: bad magic")
        (count,) = struct.unpack_from("<I", data, 4)
        pos = 8
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(data):
                raise CheckpointError(f"{label}: truncated record {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            pos += size
    except struct.error:
        raise CheckpointError(f"{label}: truncated") from None
    if pos != len(data):
        raise CheckpointError(f"{label}: trailing bytes")
    return out


def _module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _optimizer_arrays(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{idx}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return out


def _load_module(module: torch.nn.Module, arrays: dict[str, np.ndarray], label: str) -> None:
    current = module.state_dict()
    if set(current) != set(arrays):
        raise CheckpointError(f"{label}: parameter names do not match the configured network")
    restored = {}
    for k, ref in current.items():
        arr = arrays[k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{label}: shape mismatch for {k}")
        restored[k] = torch.from_numpy(arr.copy()).to(ref.dtype)
    module.load_state_dict(restored)


def _load_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict[str, torch.Tensor]] = {}
    for name, arr in arrays.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    sd["state"] = state
    opt.load_state_dict(sd)


def _write_bytes(path: Path, data: bytes) -> dict:
    path.write_bytes(data)
    return {"bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}


def save_checkpoint(state, path: str | os.PathLike) -> Path:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    blobs = {}
    for name, net in state.model.nets().items():
        blobs[f"{name}.params.bin"] = _write_bytes(tmp / f"{name}.params.bin",
                                                   encode_blob(_module_arrays(net)))
        blobs[f"{name}.adam.bin"] = _write_bytes(tmp / f"{name}.adam.bin",
                                                 encode_blob(_optimizer_arrays(state.optimizers[name])))
    manifest = {
        "format_version": FORMAT_VERSION,
        "global_step": state.global_step,
        "update_counts": dict(state.update_counts),
        "config": config_to_dict(state.train_config, state.model_config),
        "blobs": blobs,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike):
    from .trainer import new_state

    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint manifest in {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('format_version')!r} "
            f"(expected {FORMAT_VERSION})")
    # the snapshot is authoritative; do not let VOLGEN_SEED rewrite it
    tc, mc = configs_from_dict(manifest["config"], env={})
    state = new_state(tc, mc, initialize=False)

    for name in state.model.NAMES:
        for kind in ("params", "adam"):
            fname = f"{name}.{kind}.bin"
            meta = manifest["blobs"].get(fname)
            if meta is None or not (path / fname).is_file():
                raise CheckpointError(f"missing blob {fname}")
            data = (path / fname).read_bytes()
            if len(data) != meta["bytes"] or hashlib.sha256(data).hexdigest() != meta["sha256"]:
                raise CheckpointError(f"checksum mismatch in blob {fname}")
            arrays = decode_blob(data, fname)
            if kind == "params":
                _load_module(getattr(state.model, name), arrays, fname)
            else:
                _load_optimizer(state.optimizers[name], arrays)
    state.global_step = int(manifest["global_step"])
    state.update_counts = {k: int(v) for k, v in manifest.get("update_counts", {}).items()}
    return state
