"""Checkpoint file layout.

    8 bytes   magic b"MSEGCKPT"
    8 bytes   little-endian u64: length L of the JSON header
    L bytes   UTF-8 JSON header (sorted keys)
    ...       raw little-endian array blobs, each at the offset the header names

The header holds the format version, the run config, and one entry per array
({"name", "dtype", "shape", "offset", "nbytes"}). Parameters are stored under
"param/<name>"; the frozen memory bank under "bank/M" and "bank/initialized",
with its momentum in the header. Saving the same state twice gives identical bytes.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .memory import MemoryBank
from .model import SegModel

MAGIC = b"MSEGCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def dumps(model: SegModel, config: RunConfig | None = None, extra: dict | None = None) -> bytes:
    arrays = [(f"param/{k}", v) for k, v in model.state_dict().items()]
    bank = None
    if model.bank is not None:
        arrays += [("bank/M", model.bank.M), ("bank/initialized", model.bank.initialized)]
        bank = {"momentum": model.bank.momentum}
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        arr = _le(arr)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model": config.to_dict()["model"] if config else _plain(model.cfg),
        "ablation": config.to_dict()["ablation"] if config else _plain(model.ablation),
        "config": config.to_dict() if config else None,
        "seed": model.seed,
        "bank": bank,
        "arrays": entries,
        "extra": extra or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(hdr)) + hdr + b"".join(blobs)


def _plain(section) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(section)))


def save(path, model: SegModel, config: RunConfig | None = None, extra: dict | None = None):
    Path(path).write_bytes(dumps(model, config, extra))


def read_header(buf: bytes) -> tuple[dict, int]:
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:8]!r}")
    if len(buf) < 16:
        raise CheckpointError("truncated header length")
    (n,) = struct.unpack("<Q", buf[8:16])
    if 16 + n > len(buf):
        raise CheckpointError(f"header claims {n} bytes, only {len(buf) - 16} present")
    header = json.loads(buf[16:16 + n].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    return header, 16 + n


def loads(buf: bytes) -> tuple[SegModel, dict]:
    header, base = read_header(buf)
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(buf):
            raise CheckpointError(f"array {e['name']} truncated: expected {e['nbytes']} bytes")
        dt = np.dtype(e["dtype"])
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt, count=e["nbytes"] // max(dt.itemsize, 1),
                                          offset=start).reshape(e["shape"]).copy()
    doc = RunConfig.from_dict({"model": header["model"], "ablation": header["ablation"]})
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    dtype = next(iter(params.values())).dtype if params else np.float64
    model = SegModel(doc.model, doc.ablation, seed=header["seed"], dtype=np.dtype(dtype).newbyteorder("="))
    model.load_state_dict(params)
    if header["bank"] is not None:
        model.bank = MemoryBank(arrays["bank/M"], arrays["bank/initialized"].astype(bool),
                                header["bank"]["momentum"])
    return model, header


def load(path) -> tuple[SegModel, dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return loads(buf)
