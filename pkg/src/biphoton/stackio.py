"""Binary stack files (``.bphs``) with a JSON sidecar.

Layout, little-endian::

    0   4s   magic "BPHS"
    4   u32  version (1)
    8   u32  width
    12  u32  height
    16  u32  n_frames
    20  u8   dtype (0 = uint16, 1 = float32)
    21  u8   plane (0 = image, 1 = pupil)
    22  6x   zero padding
    28  f64  pixel pitch in meters
    36  ...  frames, row-major, frame-major

The sidecar ``<path>.meta.json`` carries the experiment configuration,
ground truth and seed.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .core import CalibrationConfig, Frame, Plane, Stack

MAGIC = b"BPHS"
VERSION = 1
HEADER = struct.Struct("<4sIIIIBB6xd")
DTYPES = {0: np.dtype("<u2"), 1: np.dtype("<f4")}
_PLANES = {0: Plane.IMAGE, 1: Plane.PUPIL}


class StackFormatError(ValueError):
    pass


class BadMagicError(StackFormatError):
    pass


class VersionError(StackFormatError):
    pass


class TruncatedError(StackFormatError):
    pass


class DtypeError(StackFormatError):
    pass


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def choose_dtype(stack: Stack) -> int:
    """uint16 when every value is an integer in range, otherwise float32."""
    for frame in stack:
        v = frame.values
        if v.min() < 0 or v.max() > 65535 or not np.array_equal(v, np.rint(v)):
            return 1
    return 0


def write_stack(stack: Stack, path, dtype: int | None = None, meta: dict | None = None) -> Path:
    """Write ``stack`` to ``path``; ``dtype`` defaults to :func:`choose_dtype`."""
    path = Path(path)
    if dtype is None:
        dtype = choose_dtype(stack)
    if dtype not in DTYPES:
        raise DtypeError(f"unsupported dtype code {dtype}")
    np_dtype = DTYPES[dtype]
    h, w = stack.shape
    plane_code = 0 if stack.plane is Plane.IMAGE else 1
    header = HEADER.pack(MAGIC, VERSION, w, h, len(stack), dtype, plane_code, stack.pixel_pitch)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for frame in stack:
            fh.write(np.ascontiguousarray(frame.values, dtype=np_dtype).tobytes())
    os.replace(tmp, path)
    sidecar = dict(stack.metadata)
    sidecar.setdefault("calibration", _calibration_dict(stack.calibration))
    if meta:
        sidecar.update(meta)
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def _calibration_dict(cal: CalibrationConfig) -> dict:
    return {k: getattr(cal, k) for k in cal.__dataclass_fields__}


def read_header(path):
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < HEADER.size:
        raise TruncatedError(f"{path}: header truncated ({len(raw)} of {HEADER.size} bytes)")
    magic, version, w, h, n, dtype, plane, pitch = HEADER.unpack(raw)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}, expected {VERSION}")
    if dtype not in DTYPES:
        raise DtypeError(f"{path}: dtype code {dtype} out of range")
    if plane not in _PLANES:
        raise StackFormatError(f"{path}: plane code {plane} out of range")
    return dict(width=w, height=h, n_frames=n, dtype=dtype, plane=_PLANES[plane], pixel_pitch=pitch)


class _MappedFrames:
    def __init__(self, data: np.memmap, plane: Plane):
        self._data = data
        self._plane = plane

    def __len__(self):
        return self._data.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return Frame(np.asarray(self._data[i], dtype=np.float64), self._plane)


def read_stack(path, mmap: bool = False) -> Stack:
    """Read a stack. With ``mmap=True`` frames are loaded lazily from disk."""
    path = Path(path)
    hdr = read_header(path)
    np_dtype = DTYPES[hdr["dtype"]]
    shape = (hdr["n_frames"], hdr["height"], hdr["width"])
    expected = HEADER.size + int(np.prod(shape)) * np_dtype.itemsize
    actual = path.stat().st_size
    if actual < expected:
        raise TruncatedError(f"{path}: payload truncated ({actual} of {expected} bytes)")
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    cal = CalibrationConfig(**meta["calibration"]) if "calibration" in meta else CalibrationConfig(pixel_pitch=hdr["pixel_pitch"])
    data = np.memmap(path, dtype=np_dtype, mode="r", offset=HEADER.size, shape=shape)
    if mmap:
        frames = _MappedFrames(data, hdr["plane"])
    else:
        frames = [Frame(np.array(f, dtype=np.float64), hdr["plane"]) for f in data]
        del data
    return Stack(frames, cal, pixel_pitch=hdr["pixel_pitch"], metadata=meta, check=False)
