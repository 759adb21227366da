"""Bit-exact adapter checkpoint format and hot-swap loading.

File layout (little-endian throughout):

    bytes 0..3   magic 0x53 0x4C 0x52 0x41 ("SLRA")
    byte  4      format version (0x01)
    bytes 5..8   header length, unsigned 32-bit
    ...          UTF-8 JSON header (canonical: sorted keys, no spaces)
    ...          payload: the header-listed matrices, row-major IEEE-754
                 binary64
    last 8 bytes FNV-1a 64-bit checksum of the payload

The header carries the adapter kind, per-adapter shapes and
hyperparameters, any extra task-owned trainable matrices (the classifier
head travels with its task), the RNG algorithm id, free-form metadata,
and a fingerprint of the frozen base weights. Loading onto a base whose
fingerprint differs is a hard error: adapters are meaningless on a
different base. Because FNV-1a chains injective per-byte updates, any
single corrupted payload byte changes the checksum.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .adapters import LoraAdapter, SymLoraAdapter
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    FingerprintMismatchError,
    NoAdaptersError,
)
from .rng import RNG_ALGORITHM

MAGIC = b"SLRA"
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a over a byte string (optionally chained via h)."""
    prime = _FNV_PRIME
    mask = _U64
    for byte in data:
        h = ((h ^ byte) * prime) & mask
    return h


def fingerprint_items(items: list[tuple[str, np.ndarray]]) -> int:
    """FNV-1a fingerprint of named arrays in canonical form.

    Arrays are visited sorted by name; each contributes its name, shape,
    and row-major little-endian float64 bytes.
    """
    h = _FNV_OFFSET
    for name, arr in sorted(items, key=lambda kv: kv[0]):
        h = fnv1a64(name.encode("utf-8") + b"\x00", h)
        h = fnv1a64(struct.pack("<qq", arr.shape[0], arr.shape[1]), h)
        h = fnv1a64(np.ascontiguousarray(arr, dtype="<f8").tobytes(), h)
    return h


def _array_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


@dataclass
class Checkpoint:
    """Parsed checkpoint: header dict plus payload arrays keyed by
    (adapter name, param name) for adapters and by name for extras."""

    header: dict
    adapter_arrays: dict[str, dict[str, np.ndarray]]
    extra_arrays: dict[str, np.ndarray]

    @property
    def kind(self) -> str:
        return self.header["kind"]

    @property
    def base_fingerprint(self) -> int:
        return int(self.header["base_fingerprint"], 16)

    @property
    def metadata(self) -> dict:
        return self.header.get("metadata", {})


def save_adapter(model, path, metadata: dict | None = None) -> None:
    """Write the model's adapter set (plus task-owned extras) to path.

    Output bytes are a pure function of parameter values and metadata,
    so identical states produce identical files.
    """
    adapted = model.adapted_layers()
    if not adapted:
        raise NoAdaptersError("model has no adapters to save")
    kinds = {lay.adapter.kind for _, _, lay in adapted}
    if len(kinds) != 1:
        raise ConfigError(f"mixed adapter kinds in one checkpoint: {sorted(kinds)}")

    records = []
    payload_arrays: list[np.ndarray] = []
    for layer_idx, name, lay in adapted:
        ad = lay.adapter
        params = []
        for local, arr in ad.param_items():
            params.append([local, list(arr.shape)])
            payload_arrays.append(arr)
        records.append({
            "name": name,
            "layer": layer_idx,
            "n": ad.n,
            "m": ad.m,
            "r": ad.r,
            "alpha": ad.alpha,
            "init_std": ad.init_std,
            "dropout": ad.dropout,
            "params": params,
        })

    extras = []
    for key, arr in model.extra_trainable_items():
        extras.append([key, list(arr.shape)])
        payload_arrays.append(arr)

    tie_lambda = bool(model.policy.tie_lambda) if model.policy is not None else False
    header = {
        "kind": kinds.pop(),
        "rng_algorithm": RNG_ALGORITHM,
        "base_fingerprint": f"{model.frozen_fingerprint():016x}",
        "tie_lambda": tie_lambda,
        "adapters": records,
        "extras": extras,
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(_array_bytes(a) for a in payload_arrays)
    checksum = fnv1a64(payload)

    blob = b"".join([
        MAGIC,
        bytes([FORMAT_VERSION]),
        struct.pack("<I", len(header_bytes)),
        header_bytes,
        payload,
        struct.pack("<Q", checksum),
    ])
    with open(path, "wb") as fh:
        fh.write(blob)


def read_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9:
        raise CorruptCheckpointError("file too short for magic and header length")
    if blob[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic bytes {blob[:4]!r}")
    if blob[4] != FORMAT_VERSION:
        raise CorruptCheckpointError(f"unsupported format version {blob[4]}")
    header_len = struct.unpack("<I", blob[5:9])[0]
    if 9 + header_len > len(blob):
        raise CorruptCheckpointError("header truncated")
    try:
        header = json.loads(blob[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"header JSON unreadable: {exc}") from exc

    sections: list[tuple[str, str, tuple[int, int]]] = []
    for record in header.get("adapters", []):
        for local, shape in record["params"]:
            sections.append((record["name"], local, (int(shape[0]), int(shape[1]))))
    for key, shape in header.get("extras", []):
        sections.append(("extras", key, (int(shape[0]), int(shape[1]))))

    if len(blob) < 9 + header_len + 8:
        raise CorruptCheckpointError("checksum missing")
    payload = blob[9 + header_len:-8]
    expected = sum(8 * s[0] * s[1] for _, _, s in sections)
    if len(payload) != expected:
        # Name the first section the truncation falls inside.
        offset = 0
        culprit = sections[-1] if sections else ("payload", "?", (0, 0))
        for owner, local, shape in sections:
            size = 8 * shape[0] * shape[1]
            if len(payload) < offset + size:
                culprit = (owner, local, shape)
                break
            offset += size
        raise CorruptCheckpointError(
            f"payload truncated in section {culprit[0]}/{culprit[1]}: "
            f"have {len(payload)} bytes, need {expected}")
    checksum = struct.unpack("<Q", blob[-8:])[0]
    if fnv1a64(payload) != checksum:
        raise CorruptCheckpointError("payload checksum mismatch")

    adapter_arrays: dict[str, dict[str, np.ndarray]] = {}
    extra_arrays: dict[str, np.ndarray] = {}
    offset = 0
    for owner, local, shape in sections:
        size = 8 * shape[0] * shape[1]
        arr = np.frombuffer(payload[offset:offset + size], dtype="<f8").reshape(shape).copy()
        offset += size
        if owner == "extras":
            extra_arrays[local] = arr
        else:
            adapter_arrays.setdefault(owner, {})[local] = arr
    return Checkpoint(header=header, adapter_arrays=adapter_arrays,
                      extra_arrays=extra_arrays)


def load_adapter(model, path):
    """Copy of model with the checkpoint's adapters (and extras) attached.

    Any adapters already on the model are replaced, which is the
    task-swap operation: one frozen base, one small file per task.
    """
    ckpt = read_checkpoint(path)
    if ckpt.base_fingerprint != model.frozen_fingerprint():
        raise FingerprintMismatchError(
            f"checkpoint base fingerprint {ckpt.base_fingerprint:016x} does not "
            f"match model {model.frozen_fingerprint():016x}")

    out = model.clone()
    targets = out.attachable_targets()
    for lin in targets.values():
        lin.detach()

    by_layer: dict[int, list[SymLoraAdapter]] = {}
    for record in ckpt.header["adapters"]:
        name = record["name"]
        if name not in targets:
            raise CorruptCheckpointError(f"checkpoint names unknown target {name!r}")
        arrays = ckpt.adapter_arrays[name]
        if ckpt.kind == "lora":
            adapter = LoraAdapter(arrays["B"], arrays["A"], record["r"],
                                  record["alpha"], record["init_std"],
                                  record.get("dropout", 0.0))
        else:
            adapter = SymLoraAdapter(arrays["Q"], arrays["Lambda"],
                                     arrays["lambda_scale"], record["r"],
                                     record["alpha"], record["init_std"],
                                     record.get("dropout", 0.0))
            by_layer.setdefault(int(record["layer"]), []).append(adapter)
        targets[name].attach(adapter)

    if ckpt.header.get("tie_lambda"):
        for group in by_layer.values():
            for extra in group[1:]:
                extra.tie_lambda_to(group[0])

    extra_items = dict(out.extra_trainable_items())
    for key, arr in ckpt.extra_arrays.items():
        if key not in extra_items:
            raise CorruptCheckpointError(f"checkpoint names unknown extra {key!r}")
        if extra_items[key].shape != arr.shape:
            raise CorruptCheckpointError(
                f"extra {key!r} shape {arr.shape} != model {extra_items[key].shape}")
        extra_items[key][...] = arr
    return out
