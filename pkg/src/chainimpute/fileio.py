"""Binary recording files (MTSR v1) and CSV import.

MTSR v1 layout, little-endian::

    offset 0   4s   magic b"MTSR"
           4   u16  version (1)
           6   u32  V
          10   u32  T
          14   u8   flags (bit 0: truth block present)
          15   f32  coords[V, 3]
               f64  values[V, T]   NaN = missing
               u8   mask[V, T]
               f64  truth[V, T]    only when flags & 1
"""

from __future__ import annotations

import csv
import re
import struct
from pathlib import Path

import numpy as np

from .data import MaskedRecording, Recording
from .errors import FormatError

MTSR_MAGIC = b"MTSR"
MTSR_VERSION = 1
_HEADER = struct.Struct("<4sHIIB")
FLAG_TRUTH = 0x01
# 2**31 elements of f64 is already 16 GiB; anything above is a corrupt header
MAX_ELEMENTS = 2 ** 31

_NAME_RE = re.compile(r"^(?P<subject>.+)_w(?P<window>\d+)$")


class Reader:
    """Cursor over a bytes buffer that reports the failing offset on truncation."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated payload reading {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, shape: tuple, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        raw = self.take(count * dt.itemsize, what)
        return np.frombuffer(raw, dtype=dt).reshape(shape).copy()

    def unpack(self, st: struct.Struct, what: str) -> tuple:
        return st.unpack(self.take(st.size, what))

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def check_dims(reader_pos: int, *dims: int) -> None:
    total = 1
    for d in dims:
        total *= d
    if total > MAX_ELEMENTS:
        raise FormatError(f"dimension overflow: {dims} gives {total} elements", reader_pos)


def encode_recording(rec) -> bytes:
    if isinstance(rec, Recording):
        values = rec.values
        mask = np.zeros(values.shape, dtype=np.uint8)
        truth = None
    else:
        values, mask, truth = rec.values, rec.mask, rec.truth
    V, T = values.shape
    flags = FLAG_TRUTH if truth is not None else 0
    parts = [
        _HEADER.pack(MTSR_MAGIC, MTSR_VERSION, V, T, flags),
        np.ascontiguousarray(rec.coords, dtype="<f4").tobytes(),
        np.ascontiguousarray(values, dtype="<f8").tobytes(),
        np.ascontiguousarray(mask, dtype="u1").tobytes(),
    ]
    if truth is not None:
        parts.append(np.ascontiguousarray(truth, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_recording(buf: bytes, subject_id: str = "", window_id: int = 0) -> MaskedRecording:
    r = Reader(buf)
    magic = r.take(4, "magic")
    if magic != MTSR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MTSR_MAGIC!r}", 0)
    (version,) = r.unpack(struct.Struct("<H"), "version")
    if version != MTSR_VERSION:
        raise FormatError(f"unsupported MTSR version {version}", 4)
    V, T, flags = r.unpack(struct.Struct("<IIB"), "dimensions")
    if V < 1 or T < 1:
        raise FormatError(f"empty recording V={V} T={T}", 6)
    check_dims(6, V, T)
    coords = r.array("<f4", (V, 3), "coords").astype(np.float64)
    values = r.array("<f8", (V, T), "values")
    mask = r.array("u1", (V, T), "mask")
    truth = r.array("<f8", (V, T), "truth") if flags & FLAG_TRUTH else None
    r.finish()
    return MaskedRecording(values=values, mask=mask, coords=coords, truth=truth,
                           subject_id=subject_id, window_id=window_id)


def _ids_from_path(path: Path) -> tuple[str, int]:
    m = _NAME_RE.match(path.stem)
    if m:
        return m.group("subject"), int(m.group("window"))
    return path.stem, 0


def recording_filename(rec) -> str:
    return f"{rec.subject_id}_w{rec.window_id:03d}.mtsr"


def write_recording(rec, path) -> None:
    Path(path).write_bytes(encode_recording(rec))


def read_recording(path) -> MaskedRecording:
    path = Path(path)
    subject, window = _ids_from_path(path)
    return decode_recording(path.read_bytes(), subject, window)


def write_dataset(recs, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in recs:
        p = directory / recording_filename(rec)
        write_recording(rec, p)
        paths.append(p)
    return paths


def read_dataset(directory) -> list[MaskedRecording]:
    paths = sorted(Path(directory).glob("*.mtsr"))
    if not paths:
        raise FileNotFoundError(f"no .mtsr files in {directory}")
    return [read_recording(p) for p in paths]


def read_csv_recording(path, subject_id: str | None = None, window_id: int = 0) -> MaskedRecording:
    """Import ``voxel,x,y,z,t0..t{T-1}``; an empty cell marks a missing value."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    if header[:4] != ["voxel", "x", "y", "z"] or len(header) < 5:
        raise FormatError(f"{path}: header must start with voxel,x,y,z followed by t0..")
    T = len(header) - 4
    if header[4:] != [f"t{i}" for i in range(T)]:
        raise FormatError(f"{path}: time columns must be t0..t{T - 1}")
    coords, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        coords.append([float(c) for c in row[1:4]])
        values.append([float(c) if c.strip() else np.nan for c in row[4:]])
    values = np.array(values, dtype=np.float64)
    mask = np.isnan(values).astype(np.uint8)
    return MaskedRecording(values=values, mask=mask, coords=np.array(coords),
                           subject_id=subject_id if subject_id is not None else path.stem,
                           window_id=window_id)
