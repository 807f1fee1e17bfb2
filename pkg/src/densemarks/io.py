"""Binary and text file formats shared by the pipeline."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

UVW_MAGIC = b"DMUVW01"
COR_MAGIC = b"DMCOR01"


class FormatError(ValueError):
    """Malformed input file; carries the path and the byte offset of the failure."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{self.path}: byte {self.offset}: {message}")


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, pos, "truncated header")
        tokens.append((start, data[start:pos]))
    if tokens[0][1] != magic:
        raise FormatError(path, 0, f"expected {magic.decode()} header")
    try:
        w, h, maxval = (int(t) for _, t in tokens[1:])
    except ValueError:
        raise FormatError(path, tokens[1][0], "non-integer header field") from None
    if maxval != 255:
        raise FormatError(path, tokens[3][0], "only maxval 255 is supported")
    pos += 1  # single whitespace after maxval
    size = w * h * channels
    if len(data) - pos != size:
        raise FormatError(path, min(len(data), pos + size),
                          f"expected {size} pixel bytes, found {len(data) - pos}")
    arr = np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w, channels)
    return arr if channels == 3 else arr[..., 0]


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a float image in [0, 1] or a uint8 image as binary PPM (P6)."""
    img = np.asarray(rgb)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def write_pgm(path, gray: np.ndarray) -> None:
    img = np.asarray(gray).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def write_uvw(path, coords: np.ndarray, valid: np.ndarray) -> None:
    h, w = valid.shape
    header = UVW_MAGIC + struct.pack("<II", w, h)
    body = np.asarray(coords, dtype="<f4").reshape(h * w * 3).tobytes()
    flags = np.asarray(valid, dtype=np.uint8).reshape(-1).tobytes()
    Path(path).write_bytes(header + body + flags)


def read_uvw(path):
    """Returns ``(coords (H, W, 3) float64, valid (H, W) bool)``."""
    data = Path(path).read_bytes()
    if data[:7] != UVW_MAGIC:
        raise FormatError(path, 0, "bad magic, expected DMUVW01")
    if len(data) < 15:
        raise FormatError(path, len(data), "truncated header")
    w, h = struct.unpack_from("<II", data, 7)
    expected = 15 + h * w * 12 + h * w
    if len(data) != expected:
        raise FormatError(path, min(len(data), expected),
                          f"expected {expected} bytes, found {len(data)}")
    coords = np.frombuffer(data, dtype="<f4", count=h * w * 3, offset=15)
    valid = np.frombuffer(data, dtype=np.uint8, offset=15 + h * w * 12)
    if np.any(valid > 1):
        bad = int(np.argmax(valid > 1))
        raise FormatError(path, 15 + h * w * 12 + bad, "validity byte must be 0 or 1")
    return coords.reshape(h, w, 3).astype(np.float64), valid.reshape(h, w).astype(bool)


def write_correspondence(path, src_xy: np.ndarray, dist: np.ndarray) -> None:
    """``src_xy``: (H, W, 2) int source pixel (x, y), -1 where invalid; ``dist``: (H, W)."""
    h, w = dist.shape
    rec = np.zeros(h * w, dtype=[("sx", "<i4"), ("sy", "<i4"), ("d", "<f4")])
    rec["sx"] = src_xy[..., 0].reshape(-1)
    rec["sy"] = src_xy[..., 1].reshape(-1)
    rec["d"] = dist.reshape(-1)
    Path(path).write_bytes(COR_MAGIC + struct.pack("<II", w, h) + rec.tobytes())


def read_correspondence(path):
    data = Path(path).read_bytes()
    if data[:7] != COR_MAGIC:
        raise FormatError(path, 0, "bad magic, expected DMCOR01")
    if len(data) < 15:
        raise FormatError(path, len(data), "truncated header")
    w, h = struct.unpack_from("<II", data, 7)
    expected = 15 + 12 * w * h
    if len(data) != expected:
        raise FormatError(path, min(len(data), expected),
                          f"expected {expected} bytes, found {len(data)}")
    rec = np.frombuffer(data, dtype=[("sx", "<i4"), ("sy", "<i4"), ("d", "<f4")], offset=15)
    src = np.stack([rec["sx"], rec["sy"]], axis=-1).reshape(h, w, 2).astype(np.int64)
    return src, rec["d"].reshape(h, w).astype(np.float64)


def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """ASCII PLY with ``x y z red green blue`` per vertex; colors in [0, 1]."""
    rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(int)
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(points)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    for p, c in zip(points, rgb):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    text = Path(path).read_text()
    header, _, body = text.partition("end_header\n")
    count = 0
    for line in header.splitlines():
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    rows = [line.split() for line in body.splitlines() if line.strip()]
    if len(rows) != count:
        raise FormatError(path, len(header), f"expected {count} vertices, found {len(rows)}")
    if count == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=int)
    arr = np.array(rows, dtype=np.float64)
    return arr[:, :3], arr[:, 3:6].astype(int)


def parse_floats(path, text: str, expected: int | None = None) -> np.ndarray:
    """Parse whitespace-separated reals, reporting the byte offset of a bad token."""
    vals = []
    pos = 0
    for tok in text.split():
        pos = text.index(tok, pos)
        try:
            vals.append(float(tok))
        except ValueError:
            raise FormatError(path, len(text[:pos].encode()), f"not a number: {tok!r}") from None
        pos += len(tok)
    if expected is not None and len(vals) != expected:
        raise FormatError(path, len(text.encode()), f"expected {expected} numbers, found {len(vals)}")
    return np.array(vals, dtype=np.float64)
