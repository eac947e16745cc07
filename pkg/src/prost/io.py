"""File formats: volumes, key=value configs, images, checkpoints.

Every writer goes through :func:`atomic_write` (temp file + rename), so an
interrupted run never leaves a half-written file behind.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    HeaderValidationError,
    TruncatedFileError,
)
from .grid import Intrinsics
from .sampler import Volume

VOLUME_MAGIC = "PROSTVOL1"
CHECKPOINT_MAGIC = "PROSTCKPT1"
MAX_VOXELS = 1 << 31
MAX_HEADER_BYTES = 4096


def atomic_write(path, data) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- volumes ---------------------------------------------------------------

def save_volume(path, vol: Volume) -> None:
    """Text header followed by little-endian float32 voxels, first axis (depth) slowest."""
    D, W, H = vol.data.shape
    header = (
        f"{VOLUME_MAGIC}\n"
        f"dims {D} {W} {H}\n"
        f"spacing {' '.join(repr(s) for s in vol.spacing)}\n"
        "type float32\n"
        "endian little\n"
        "end\n"
    )
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    atomic_write(path, header.encode("ascii") + payload)


def _parse_volume_header(raw: bytes):
    end = raw.find(b"end\n")
    if not raw.startswith(VOLUME_MAGIC.encode() + b"\n"):
        raise BadMagicError("not a PROSTVOL1 file")
    if end < 0 or end > MAX_HEADER_BYTES:
        raise TruncatedFileError("volume header is incomplete")
    fields = {}
    for line in raw[:end].decode("ascii", errors="replace").splitlines()[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()
    try:
        dims = tuple(int(v) for v in fields["dims"])
        spacing = tuple(float(v) for v in fields["spacing"])
    except (KeyError, ValueError) as exc:
        raise HeaderValidationError(f"bad volume header: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3:
        raise HeaderValidationError("dims and spacing need 3 values each")
    if min(dims) < 2:
        raise HeaderValidationError(f"invalid dims {dims}")
    if dims[0] * dims[1] * dims[2] > MAX_VOXELS:
        raise HeaderValidationError(f"dims {dims} exceed the voxel limit")
    if min(spacing) <= 0 or not all(np.isfinite(spacing)):
        raise HeaderValidationError(f"invalid spacing {spacing}")
    if fields.get("type", ["float32"]) != ["float32"] or fields.get("endian", ["little"]) != ["little"]:
        raise HeaderValidationError("only little-endian float32 payloads are supported")
    return dims, spacing, end + len(b"end\n")


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    dims, spacing, offset = _parse_volume_header(raw)
    n = dims[0] * dims[1] * dims[2]
    payload = raw[offset:]
    if len(payload) < 4 * n:
        raise TruncatedFileError(f"payload has {len(payload)} bytes, expected {4 * n}")
    if len(payload) > 4 * n:
        raise HeaderValidationError("trailing bytes after volume payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Volume(data.astype(float), spacing)


# -- key=value configs -----------------------------------------------------

def read_kv(path) -> dict:
    """Flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_intrinsics(path) -> tuple[Intrinsics, int | None]:
    """Geometry from keys det_rows, det_cols, pixel_pitch_mm, sdd_mm, iso_offset_mm and optional K."""
    kv = read_kv(path)
    try:
        intr = Intrinsics(
            det_rows=int(kv["det_rows"]),
            det_cols=int(kv["det_cols"]),
            pixel_pitch=float(kv["pixel_pitch_mm"]),
            sdd=float(kv["sdd_mm"]),
            iso_offset=float(kv["iso_offset_mm"]),
        )
        K = int(kv["K"]) if "K" in kv else None
    except KeyError as exc:
        raise ConfigError(f"missing intrinsics key {exc.args[0]}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad intrinsics value: {exc}") from exc
    return intr, K


def save_intrinsics(path, intr: Intrinsics, K: int | None = None) -> None:
    lines = [
        f"det_rows={intr.det_rows}",
        f"det_cols={intr.det_cols}",
        f"pixel_pitch_mm={intr.pixel_pitch!r}",
        f"sdd_mm={intr.sdd!r}",
        f"iso_offset_mm={intr.iso_offset!r}",
    ]
    if K is not None:
        lines.append(f"K={K}")
    atomic_write(path, "\n".join(lines) + "\n")


def coerce_dataclass(cls, kv: dict):
    """Build dataclass ``cls`` from string values, converting by field default type."""
    obj = cls()
    for key, text in kv.items():
        if key not in cls.__dataclass_fields__:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(obj, key)
        try:
            if isinstance(current, bool):
                if text.lower() not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(text)
                value = text.lower() in ("1", "true", "yes")
            elif isinstance(current, int) or (current is None and text.lstrip("-").isdigit()):
                value = int(text)
            elif isinstance(current, float):
                value = float(text)
            elif isinstance(current, tuple):
                value = tuple(float(v) for v in text.split(","))
            elif current is None and text.lower() in ("", "none"):
                value = None
            else:
                value = text
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r}") from exc
        setattr(obj, key, value)
    return obj


def format_kv(d: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "1" if v else "0"
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, (tuple, list)):
            return ",".join(fmt(x) for x in v)
        return "none" if v is None else str(v)

    return "".join(f"{k}={fmt(v)}\n" for k, v in d.items())


# -- images ----------------------------------------------------------------

def image_to_pgm(img) -> bytes:
    """16-bit binary PGM, intensities rescaled to the full range."""
    img = np.asarray(img, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    q = np.round(scaled * 65535.0).astype(">u2")
    rows, cols = img.shape
    return f"P5\n{cols} {rows}\n65535\n".encode("ascii") + q.tobytes()


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise BadMagicError("not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(parts[3], dtype=dtype, count=rows * cols).reshape(rows, cols).astype(float)


def image_to_csv(img) -> str:
    img = np.asarray(img, dtype=float)
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in img)


def read_image_csv(path) -> np.ndarray:
    try:
        rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
        return np.array([[float(v) for v in r.split(",")] for r in rows])
    except ValueError as exc:
        raise ConfigError(f"malformed image CSV {path}") from exc


# -- checkpoints -----------------------------------------------------------

def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Versioned text container: one ``array <name> <shape...>`` header line per array."""
    lines = [CHECKPOINT_MAGIC]
    for k, v in (meta or {}).items():
        lines.append(f"meta {k} {v}")
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        lines.append(f"array {name} " + " ".join(str(s) for s in arr.shape))
        lines.append(" ".join(repr(float(x)) for x in arr.ravel()))
    atomic_write(path, "\n".join(lines) + "\n")


def load_arrays(path) -> tuple[dict, dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise BadMagicError("not a checkpoint file")
    arrays, meta = {}, {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if parts and parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
            i += 1
        elif parts and parts[0] == "array":
            if i + 1 >= len(lines):
                raise TruncatedFileError(f"array {parts[1]} has no values")
            shape = tuple(int(s) for s in parts[2:])
            vals = np.array([float(x) for x in lines[i + 1].split()])
            if vals.size != int(np.prod(shape)):
                raise TruncatedFileError(f"array {parts[1]} has {vals.size} values, expected shape {shape}")
            arrays[parts[1]] = vals.reshape(shape)
            i += 2
        else:
            raise HeaderValidationError(f"unexpected checkpoint line {i + 1}")
    return arrays, meta
