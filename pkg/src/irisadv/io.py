"""File formats: NetPBM images, IRSG surrogate checkpoints, manifests and CSV.

Irises are written as 16-bit binary PGM (P5, maxval 65535, big-endian
samples), masks and codes as packed PBM (P4). An IRSG checkpoint is::

    b"IRSG" | u32 version | u32 len | config JSON | u32 count
    then per tensor: u16 len | name | u8 ndim | u32 dims... | float32 LE data

All integers are little-endian.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .surrogate import Surrogate, SurrogateConfig

CHECKPOINT_MAGIC = b"IRSG"
CHECKPOINT_VERSION = 1
PGM_MAXVAL = 65535


class FormatError(ValueError):
    """A file could not be parsed; ``offset`` is the byte where parsing stopped."""

    def __init__(self, path, offset: int, message: str, expected=None, actual=None):
        self.path, self.offset = str(path), offset
        self.expected, self.actual = expected, actual
        detail = f" (expected {expected}, got {actual})" if expected is not None else ""
        super().__init__(f"{self.path}: byte {offset}: {message}{detail}")


# ---------------------------------------------------------------- NetPBM


def _pnm_header(buf: bytes, path, magic: bytes, n_fields: int) -> tuple[list[int], int]:
    """Parse magic plus ``n_fields`` integers; returns them and the payload offset."""
    if buf[:2] != magic:
        raise FormatError(path, 0, "bad magic", expected=magic.decode(), actual=buf[:2].decode("latin-1"))
    pos, fields = 2, []
    while len(fields) < n_fields:
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                    pos += 1
            pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(path, pos, "expected a decimal header field")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(path, pos, "header must end in a single whitespace byte")
    return fields, pos + 1


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] image as 16-bit PGM with value ``round(pixel * 65535)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    h, w = image.shape
    payload = np.round(image * PGM_MAXVAL).astype(">u2").tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode() + payload)


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (w, h, maxval), pos = _pnm_header(buf, path, b"P5", 3)
    if not 0 < maxval <= PGM_MAXVAL:
        raise FormatError(path, pos, "maxval out of range", expected="1..65535", actual=maxval)
    depth = 2 if maxval > 255 else 1
    need = w * h * depth
    have = len(buf) - pos
    if have < need:
        raise FormatError(path, len(buf), "truncated payload", expected=f"{need} bytes", actual=f"{have} bytes")
    dtype = ">u2" if depth == 2 else "u1"
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def write_pbm(path, bits: np.ndarray) -> None:
    """Write a binary array as packed P4; a set bit is stored as 1."""
    bits = np.asarray(bits)
    if bits.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {bits.shape}")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("PBM data must be binary")
    h, w = bits.shape
    payload = np.packbits(bits.astype(np.uint8), axis=1).tobytes()
    Path(path).write_bytes(f"P4\n{w} {h}\n".encode() + payload)


def read_pbm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (w, h), pos = _pnm_header(buf, path, b"P4", 2)
    row = (w + 7) // 8
    need, have = row * h, len(buf) - pos
    if have < need:
        raise FormatError(path, len(buf), "truncated payload", expected=f"{need} bytes", actual=f"{have} bytes")
    packed = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, row)
    return np.unpackbits(packed, axis=1)[:, :w].copy()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, net: Surrogate) -> None:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    out.write(cfg)
    state = net.state_dict()
    out.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.write(arr.tobytes())
    Path(path).write_bytes(out.getvalue())


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.path, self.pos = buf, path, 0

    def take(self, n: int, what: str) -> bytes:
        have = len(self.buf) - self.pos
        if have < n:
            raise FormatError(self.path, self.pos, f"truncated {what}", expected=f"{n} bytes", actual=f"{have} bytes")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Surrogate:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, "bad magic", expected=CHECKPOINT_MAGIC, actual=magic)
    version, cfg_len = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, 4, "unsupported version", expected=CHECKPOINT_VERSION, actual=version)
    at = r.pos
    try:
        config = SurrogateConfig(**json.loads(r.take(cfg_len, "config").decode()))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise FormatError(path, at, f"unreadable config: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "tensor name").decode()
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size, f"{name} data"), dtype="<f4")
        state[name] = data.astype(np.float32).reshape(shape)
    if r.pos != len(r.buf):
        raise FormatError(path, r.pos, "trailing bytes after the last tensor")
    try:
        return Surrogate.from_state_dict(config, state)
    except ValueError as exc:
        raise FormatError(path, r.pos, str(exc)) from None


# ---------------------------------------------------------------- text outputs


MANIFEST_HEADER = ("identity", "eye", "sample", "iris", "mask")


def write_manifest(path, rows: Iterable[Sequence]) -> None:
    """Tab-separated corpus index; paths relative to the manifest."""
    lines = ["#" + "\t".join(MANIFEST_HEADER)]
    lines += ["\t".join(str(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_HEADER):
            raise FormatError(path, 0, f"line {lineno}: wrong field count",
                              expected=len(MANIFEST_HEADER), actual=len(parts))
        row = dict(zip(MANIFEST_HEADER, parts))
        row["identity"], row["sample"] = int(row["identity"]), int(row["sample"])
        rows.append(row)
    return rows


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
