"""Binary array container.

Layout: the 8-byte magic ``EMBDYN1\\0``, a little-endian ``uint32`` manifest
length, a UTF-8 JSON manifest, then every array as raw little-endian float64
in manifest order.  The manifest lists ``name``, ``shape`` and ``dtype`` of
each array plus a free-form ``meta`` object.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import MlpSpec, SiameseState

MAGIC = b"EMBDYN1\x00"


class CheckpointError(ValueError):
    pass


def encode_arrays(arrays: dict, meta: dict | None = None) -> bytes:
    entries = []
    blobs = []
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "dtype": "<f8"})
        blobs.append(a.tobytes())
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(blobs)


def decode_arrays(raw: bytes) -> tuple[dict, dict]:
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not an EMBDYN1 container")
    off = len(MAGIC)
    if len(raw) < off + 4:
        raise CheckpointError("truncated manifest length")
    (mlen,) = struct.unpack("<I", raw[off : off + 4])
    off += 4
    try:
        manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad manifest: {exc}") from None
    off += mlen
    arrays = {}
    for entry in manifest["arrays"]:
        if entry["dtype"] != "<f8":
            raise CheckpointError(f"unsupported dtype {entry['dtype']}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 8 * count
        if len(raw) < off + nbytes:
            raise CheckpointError(f"truncated data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(entry["shape"]).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError("trailing bytes after last array")
    return arrays, manifest.get("meta", {})


def save_arrays(path, arrays: dict, meta: dict | None = None):
    Path(path).write_bytes(encode_arrays(arrays, meta))


def load_arrays(path) -> tuple[dict, dict]:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return decode_arrays(p.read_bytes())


_GROUPS = ("theta", "xi", "theta_buffers", "xi_buffers", "xi_raw")


def state_to_arrays(state: SiameseState) -> tuple[dict, dict]:
    arrays = {}
    for group in _GROUPS:
        for k, v in getattr(state, group).items():
            arrays[f"{group}/{k}"] = v
    spec = asdict(state.spec)
    spec["backbone_widths"] = list(spec["backbone_widths"])
    meta = {
        "spec": spec,
        "tau_base": state.tau_base,
        "total_steps": state.total_steps,
        "bias_correction": state.bias_correction,
        "step": state.step,
        "ema_mass": state.ema_mass,
    }
    return arrays, meta


def state_from_arrays(arrays: dict, meta: dict) -> SiameseState:
    try:
        spec_d = dict(meta["spec"])
        spec_d["backbone_widths"] = tuple(spec_d["backbone_widths"])
        spec = MlpSpec(**spec_d)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint has no usable model spec: {exc}") from None
    groups: dict[str, dict] = {g: {} for g in _GROUPS}
    for name, arr in arrays.items():
        group, _, key = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"unexpected array {name}")
        groups[group][key] = arr
    return SiameseState(
        spec=spec,
        theta=groups["theta"],
        xi=groups["xi"],
        theta_buffers=groups["theta_buffers"],
        xi_buffers=groups["xi_buffers"],
        xi_raw=groups["xi_raw"],
        tau_base=meta["tau_base"],
        total_steps=meta["total_steps"],
        bias_correction=meta["bias_correction"],
        step=meta["step"],
        ema_mass=meta["ema_mass"],
    )


def save_state(path, state: SiameseState):
    arrays, meta = state_to_arrays(state)
    save_arrays(path, arrays, meta)


def load_state(path) -> SiameseState:
    return state_from_arrays(*load_arrays(path))
