"""BSCAN1 radargram files and their JSON annotation sidecars.

Layout: one ASCII header line ``BSCN1 <T> <X> <dt_ns> <dx_m> <t0_ns>\\n``
followed by T*X little-endian float32 samples, time-major.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import BScanFormatError
from .wavefield import BScan, TargetAnnotation

MAGIC = "BSCN1"
_MAX_HEADER = 256


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_bscan(b: BScan) -> bytes:
    samples = np.asarray(b.samples, dtype=np.float32)
    if not np.all(np.isfinite(samples)):
        raise BScanFormatError("refusing to write non-finite samples")
    n_t, n_x = samples.shape
    header = f"{MAGIC} {n_t} {n_x} {float(b.dt)!r} {float(b.dx)!r} {float(b.t0)!r}\n"
    return header.encode("ascii") + samples.astype("<f4").tobytes(order="C")


def decode_bscan(data: bytes) -> BScan:
    nl = data.find(b"\n", 0, _MAX_HEADER)
    if nl < 0:
        raise BScanFormatError("missing BSCAN1 header line")
    try:
        fields = data[:nl].decode("ascii").split(" ")
    except UnicodeDecodeError:
        raise BScanFormatError("header is not ASCII") from None
    if fields[0] != MAGIC:
        raise BScanFormatError(f"bad magic {fields[0]!r}, expected {MAGIC!r}")
    if len(fields) != 6:
        raise BScanFormatError(f"header needs 6 fields, got {len(fields)}")
    try:
        n_t, n_x = int(fields[1]), int(fields[2])
        dt, dx, t0 = (float(v) for v in fields[3:])
    except ValueError as exc:
        raise BScanFormatError(f"malformed header: {exc}") from None
    if n_t < 1 or n_x < 1:
        raise BScanFormatError(f"invalid dimensions {n_t}x{n_x}")
    payload = data[nl + 1:]
    expected = 4 * n_t * n_x
    if len(payload) != expected:
        raise BScanFormatError(f"payload holds {len(payload)} bytes, expected {expected} for {n_t}x{n_x}")
    samples = np.frombuffer(payload, dtype="<f4").reshape(n_t, n_x).astype(np.float32)
    try:
        return BScan(samples, dt, dx, t0)
    except ValueError as exc:
        raise BScanFormatError(str(exc)) from None


def bscan_write(b: BScan, annotations: Sequence[TargetAnnotation], path) -> None:
    """Write the scan and its sidecar atomically; byte-deterministic."""
    path = Path(path)
    blob = encode_bscan(b)
    side = json.dumps({"targets": [a.to_dict() for a in annotations]}, indent=2, sort_keys=True) + "\n"
    _atomic_write(path, blob)
    _atomic_write(sidecar_path(path), side.encode("utf-8"))


def read_annotations(path) -> List[TargetAnnotation]:
    side = sidecar_path(path)
    if not side.exists():
        return []
    try:
        doc = json.loads(side.read_text(encoding="utf-8"))
        return [TargetAnnotation.from_dict(t) for t in doc["targets"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise BScanFormatError(f"malformed sidecar {side}: {exc}") from None


def bscan_read(path) -> Tuple[BScan, List[TargetAnnotation]]:
    data = Path(path).read_bytes()
    return decode_bscan(data), read_annotations(path)
