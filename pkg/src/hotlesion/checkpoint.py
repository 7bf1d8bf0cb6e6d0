"""Checkpoint directory format.

A checkpoint is a directory holding:
  meta          key-value text: model config, taxonomy digest, thresholds,
                format version
  taxonomy.tsv  the taxonomy document the model was trained against
  *.tnsr        one file per named parameter: magic ``HOTTNSR1``, u32 rank,
                rank x u64 dims, then row-major little-endian float32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from . import taxonomy as tx
from .configio import read_kv, write_kv
from .errors import CheckpointError

MAGIC = b"HOTTNSR1"
FORMAT_VERSION = "1"


def write_tensor(path: Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        data = fh.read()
    n = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(data, dtype="<f4", count=n)
    return arr.reshape(dims).copy()


def save_checkpoint(
    ckpt_dir: str | Path,
    model: torch.nn.Module,
    config_items: dict[str, str],
    taxonomy: tx.Taxonomy,
    thresholds: dict[str, float] | None = None,
    extra: dict[str, str] | None = None,
) -> Path:
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, param in model.named_parameters():
        write_tensor(out / f"{name}.tnsr", param.detach().cpu().numpy())
    (out / "taxonomy.tsv").write_text(taxonomy.to_document(), encoding="utf-8")
    meta = {"format_version": FORMAT_VERSION}
    meta.update(config_items)
    meta["taxonomy.digest"] = taxonomy.digest()
    if thresholds:
        for k, v in thresholds.items():
            meta[f"thresholds.{k}"] = repr(float(v))
    if extra:
        meta.update(extra)
    write_kv(out / "meta", meta)
    return out


def update_meta(ckpt_dir: str | Path, updates: dict[str, str]) -> None:
    path = Path(ckpt_dir) / "meta"
    meta = read_kv(path)
    meta.update(updates)
    write_kv(path, meta)


def load_meta(ckpt_dir: str | Path) -> dict[str, str]:
    path = Path(ckpt_dir) / "meta"
    if not path.exists():
        raise CheckpointError(f"{ckpt_dir}: no meta file; not a checkpoint directory")
    meta = read_kv(path)
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{ckpt_dir}: unsupported format version {meta.get('format_version')!r}")
    return meta


def load_taxonomy(ckpt_dir: str | Path) -> tx.Taxonomy:
    doc = (Path(ckpt_dir) / "taxonomy.tsv").read_text(encoding="utf-8")
    taxonomy = tx.load_taxonomy(doc)
    meta = load_meta(ckpt_dir)
    if "id_names" in meta:
        names = meta["id_names"].split("\t")
        id_set = {taxonomy.level3_names.index(n) for n in names}
        taxonomy = taxonomy.with_id_split(id_set)
    digest = meta.get("taxonomy.digest")
    if digest and digest != taxonomy.digest():
        raise CheckpointError(f"{ckpt_dir}: taxonomy digest mismatch")
    return taxonomy


def load_state(ckpt_dir: str | Path, model: torch.nn.Module) -> None:
    out = Path(ckpt_dir)
    state = {}
    for name, param in model.named_parameters():
        path = out / f"{name}.tnsr"
        if not path.exists():
            raise CheckpointError(f"{ckpt_dir}: missing tensor file for parameter {name!r}")
        arr = read_tensor(path)
        if tuple(arr.shape) != tuple(param.shape):
            raise CheckpointError(
                f"{ckpt_dir}: parameter {name!r} has shape {arr.shape}, expected {tuple(param.shape)}"
            )
        state[name] = torch.from_numpy(arr)
    model.load_state_dict(state, strict=False)


def load_thresholds(meta: dict[str, str]) -> dict[str, float]:
    out = {}
    for key, value in meta.items():
        if key.startswith("thresholds."):
            out[key.removeprefix("thresholds.")] = float(value)
    return out
