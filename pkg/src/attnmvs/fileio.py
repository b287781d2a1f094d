"""File formats: PFM depth maps, binary PLY clouds, camera text files, tensor archives."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """Raised when an on-disk file does not match its expected format."""


# ---------------------------------------------------------------------------
# PFM (grayscale, little-endian, scale -1.0, rows stored bottom-to-top)
# ---------------------------------------------------------------------------

def write_pfm(path, data):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise DataFormatError(f"PFM writer expects a 2-D map, got shape {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise DataFormatError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().decode("ascii")
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise DataFormatError(f"{path}: malformed PFM dimension line {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().decode("ascii").strip())
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(f.read(4 * w * h * channels), dtype=endian + "f4")
        if data.size != w * h * channels:
            raise DataFormatError(f"{path}: truncated PFM payload")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).copy()


# ---------------------------------------------------------------------------
# PLY point clouds: binary little-endian, x/y/z float32 + r/g/b uint8
# ---------------------------------------------------------------------------

def write_ply(path, points, colors=None):
    points = np.asarray(points, dtype=np.float32)
    n = len(points)
    if colors is None:
        colors = np.full((n, 3), 255, dtype=np.uint8)
    colors = np.asarray(colors, dtype=np.uint8)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.empty(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec["xyz"] = points
    rec["rgb"] = colors
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "ushort": "<u2", "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
}


def read_ply(path):
    """Read an ascii or binary little-endian PLY. Returns (points, colors or None)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise DataFormatError(f"{path}: missing 'ply' magic")
        fmt = None
        n_vertex = None
        props = []
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise DataFormatError(f"{path}: unterminated header")
            tokens = line.decode("ascii").strip().split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] == "list":
                    raise DataFormatError(f"{path}: list properties unsupported on vertices")
                props.append((tokens[2], tokens[1]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("binary_little_endian", "ascii"):
            raise DataFormatError(f"{path}: unsupported PLY format {fmt}")
        if n_vertex is None:
            raise DataFormatError(f"{path}: no vertex element")
        names = [p[0] for p in props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise DataFormatError(f"{path}: vertex element lacks '{axis}'")
        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, _PLY_TYPES[t]) for name, t in props])
            rec = np.frombuffer(f.read(dtype.itemsize * n_vertex), dtype=dtype, count=n_vertex)
        else:
            raw = np.loadtxt(f, max_rows=n_vertex, ndmin=2)
            rec = {name: raw[:, i] for i, (name, _) in enumerate(props)}
    points = np.stack([np.asarray(rec["x"], dtype=np.float64),
                       np.asarray(rec["y"], dtype=np.float64),
                       np.asarray(rec["z"], dtype=np.float64)], axis=1)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([np.asarray(rec[c]) for c in ("red", "green", "blue")],
                          axis=1).astype(np.uint8)
    return points, colors


# ---------------------------------------------------------------------------
# Camera text files: 4x4 extrinsic block, 3x3 intrinsic block,
# final "depth_min depth_interval depth_count depth_max" line.
# ---------------------------------------------------------------------------

def write_camera_file(path, extrinsic, intrinsic, depth_min, depth_interval,
                      depth_count, depth_max):
    extrinsic = np.asarray(extrinsic, dtype=np.float64)
    intrinsic = np.asarray(intrinsic, dtype=np.float64)
    lines = ["extrinsic"]
    for row in extrinsic:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("")
    lines.append("intrinsic")
    for row in intrinsic:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("")
    lines.append(f"{depth_min!r} {depth_interval!r} {depth_count!r} {depth_max!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_camera_file(path):
    """Parse a camera file. Returns (extrinsic 4x4, intrinsic 3x3, depth line tuple)."""
    numbers = []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        for token in line.split():
            try:
                numbers.append(float(token))
            except ValueError:
                if token.lower() in ("extrinsic", "intrinsic"):
                    continue
                raise DataFormatError(
                    f"{path}:{lineno}: unexpected token {token!r}") from None
    if len(numbers) < 16 + 9 + 2:
        raise DataFormatError(f"{path}: expected 4x4 extrinsic, 3x3 intrinsic and a"
                              f" depth line, found only {len(numbers)} numbers")
    extrinsic = np.asarray(numbers[:16], dtype=np.float64).reshape(4, 4)
    intrinsic = np.asarray(numbers[16:25], dtype=np.float64).reshape(3, 3)
    depth_line = tuple(numbers[25:29])
    if len(depth_line) < 2:
        raise DataFormatError(f"{path}: missing depth range line")
    return extrinsic, intrinsic, depth_line


# ---------------------------------------------------------------------------
# Flat named-tensor archive: sorted names, shapes, little-endian float32 payloads.
# ---------------------------------------------------------------------------

_ARCHIVE_MAGIC = b"NTAR\x01"


def write_tensor_archive(path, tensors):
    with open(path, "wb") as f:
        f.write(_ARCHIVE_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(arr).astype("<f4").tobytes())


def read_tensor_archive(path):
    tensors = {}
    with open(path, "rb") as f:
        if f.read(len(_ARCHIVE_MAGIC)) != _ARCHIVE_MAGIC:
            raise DataFormatError(f"{path}: not a tensor archive")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack("<" + "I" * ndim, f.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise DataFormatError(f"{path}: truncated payload for {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return tensors


# ---------------------------------------------------------------------------
# Plain-text "key = value" config files.
# ---------------------------------------------------------------------------

def read_key_value_file(path):
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def write_key_value_file(path, values):
    lines = [f"{key} = {values[key]}" for key in values]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
