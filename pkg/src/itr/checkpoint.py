"""Deterministic binary checkpoints.

Layout::

    b"ITRCKPT1"                      8-byte magic
    uint32 little-endian             length H of the header
    H bytes                          UTF-8 JSON header, sorted keys, no spaces
    array payloads                   raw little-endian bytes, in header order

The header holds the format version, the training config, the epoch and
optimiser counters, the generator state, the loss history and an ``arrays``
list of ``{name, dtype, shape, offset, nbytes}`` records (offsets relative to
the start of the payload). Nothing time- or path-dependent is written, so
equal models give equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .embed import OptimizerState
from .errors import CheckpointError
from .ssl import PseudoLabels
from .trainer import TrainConfig, TrainedModel

MAGIC = b"ITRCKPT1"
FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "i1": "<i1"}


def _collect(model: TrainedModel) -> list[tuple[str, np.ndarray]]:
    arrays = [("U", model.U), ("I", model.I)]
    if model.G is not None:
        arrays += [("G", model.G), ("group_radius", model.group_radius), ("group_density", model.group_density)]
    for name in sorted(model.opt.m):
        arrays += [(f"adam_m/{name}", model.opt.m[name]), (f"adam_v/{name}", model.opt.v[name])]
    if model.labels is not None:
        arrays += [("labels/D", model.labels.D), ("labels/A_prime", model.labels.A_prime)]
        if model.labels.Q_prime is not None:
            arrays.append(("labels/Q_prime", model.labels.Q_prime))
    return arrays


def to_bytes(model: TrainedModel) -> bytes:
    records, chunks, offset = [], [], 0
    for name, arr in _collect(model):
        code = "i1" if name == "labels/A_prime" else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        records.append({"name": name, "dtype": code, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "epoch": model.epoch,
        "optimizer": {"lr": model.opt.lr, "beta1": model.opt.beta1, "beta2": model.opt.beta2,
                      "eps": model.opt.eps, "step": model.opt.step},
        "rng": model.rng.bit_generator.state,
        "threshold": None if model.labels is None else model.labels.threshold,
        "history": model.history,
        "arrays": records,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks)


def save_checkpoint(model: TrainedModel, path) -> Path:
    """Write atomically (temporary file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    os.replace(tmp, path)
    return path


def _read_header(blob: bytes, source) -> tuple[dict, int]:
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise CheckpointError(f"{source}: not an ITR checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen > len(blob):
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {header.get('format_version')}")
    return header, 12 + hlen


def inspect_checkpoint(path) -> dict:
    """Header summary: config, epoch, k', array shapes, history length."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, _ = _read_header(blob, path)
    shapes = {r["name"]: r["shape"] for r in header["arrays"]}
    return {
        "path": str(path),
        "format_version": header["format_version"],
        "epoch": header["epoch"],
        "optimizer_step": header["optimizer"]["step"],
        "k_prime": shapes.get("G", [0])[0],
        "n_users": shapes["U"][0],
        "n_items": shapes["I"][0],
        "d": shapes["U"][1],
        "arrays": shapes,
        "history_rows": len(header["history"]),
        "config": header["config"],
        "size_bytes": len(blob),
    }


def from_bytes(blob: bytes, source="<bytes>") -> TrainedModel:
    header, start = _read_header(blob, source)
    arrays = {}
    for r in header["arrays"]:
        lo = start + r["offset"]
        hi = lo + r["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{source}: truncated payload for {r['name']}")
        arrays[r["name"]] = np.frombuffer(blob[lo:hi], dtype=_DTYPES[r["dtype"]]).reshape(r["shape"]).copy()
    if start + sum(r["nbytes"] for r in header["arrays"]) != len(blob):
        raise CheckpointError(f"{source}: trailing bytes after payload")
    cfg_dict = dict(header["config"])
    cfg_dict["q_grid"] = tuple(cfg_dict["q_grid"])
    cfg = TrainConfig.from_dict(cfg_dict)
    o = header["optimizer"]
    opt = OptimizerState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
    for name in list(arrays):
        if name.startswith("adam_m/"):
            key = name.split("/", 1)[1]
            opt.m[key] = arrays[name]
            opt.v[key] = arrays[f"adam_v/{key}"]
    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = header["rng"]
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{source}: bad generator state: {exc}") from exc
    labels = None
    if "labels/D" in arrays:
        labels = PseudoLabels(arrays["labels/D"], arrays["labels/A_prime"], header["threshold"],
                              arrays.get("labels/Q_prime"))
    return TrainedModel(config=cfg, U=arrays["U"], I=arrays["I"], opt=opt, rng=rng, epoch=header["epoch"],
                        G=arrays.get("G"), group_radius=arrays.get("group_radius"),
                        group_density=arrays.get("group_density"), labels=labels,
                        history=header["history"])


def load_checkpoint(path) -> TrainedModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob, path)
