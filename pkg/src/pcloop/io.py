"""Readers and writers for PLY clouds, raw LiDAR scans, TUM trajectories and L3DD descriptor files.

L3DD layout (little-endian)::

    b"L3DD" | u32 version=1 | u32 N | u32 d | N*3 f32 points | N*d f32 descriptors
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np
from scipy.spatial.transform import Rotation

from pcloop.errors import InvariantViolation, ParseError, UnsupportedFormat
from pcloop.geometry import PointCloud, RigidTransform
from pcloop.records import UNIT_NORM_TOL, DescriptorSet, KeyframeRecord, Trajectory

__all__ = [
    "KeyframeRecord",
    "Trajectory",
    "read_ply",
    "write_ply",
    "read_lidar_bin",
    "write_lidar_bin",
    "read_trajectory",
    "write_trajectory",
    "read_descriptors",
    "write_descriptors",
    "read_cloud",
    "atomic_write",
]

PathLike = Union[str, os.PathLike]

L3DD_MAGIC = b"L3DD"
L3DD_VERSION = 1
L3DD_HEADER = struct.Struct("<4sIII")
# descriptors whose norm is off by more than this are rejected outright
L3DD_NORM_REJECT = 1e-3

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def atomic_write(path: PathLike, data: Union[bytes, str]) -> None:
    """Write ``data`` to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "\n"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------- PLY


def _parse_ply_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise ParseError("missing 'ply' magic line")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise ParseError("PLY header not terminated by end_header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            if len(tokens) < 2:
                raise ParseError("malformed format line")
            fmt = tokens[1]
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError(f"malformed element line: {line!r}")
            try:
                count = int(tokens[2])
            except ValueError as exc:
                raise ParseError(f"bad element count: {tokens[2]!r}") from exc
            elements.append({"name": tokens[1], "count": count, "props": []})
        elif key == "property":
            if not elements:
                raise ParseError("property declared before any element")
            if len(tokens) >= 5 and tokens[1] == "list":
                elements[-1]["props"].append((tokens[4], "list", tokens[2], tokens[3]))
            elif len(tokens) == 3:
                if tokens[1] not in _PLY_TYPES:
                    raise ParseError(f"unknown PLY property type {tokens[1]!r}")
                elements[-1]["props"].append((tokens[2], _PLY_TYPES[tokens[1]]))
            else:
                raise ParseError(f"malformed property line: {line!r}")
        else:
            raise ParseError(f"unexpected header keyword {key!r}")
    if fmt is None:
        raise ParseError("PLY header lacks a format line")
    return fmt, elements


def read_ply(path: PathLike) -> PointCloud:
    """Read the vertex element of an ASCII or binary little-endian PLY file."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        if fmt == "binary_big_endian":
            raise UnsupportedFormat("big-endian PLY is not supported")
        if fmt not in ("ascii", "binary_little_endian"):
            raise ParseError(f"unknown PLY format {fmt!r}")
        names = [e["name"] for e in elements]
        if "vertex" not in names:
            raise UnsupportedFormat("PLY has no vertex element")
        vi = names.index("vertex")
        vertex = elements[vi]
        prop_names = [p[0] for p in vertex["props"]]
        if not {"x", "y", "z"} <= set(prop_names):
            raise UnsupportedFormat("PLY vertex element lacks x, y, z properties")
        if any(p[1] == "list" for p in vertex["props"]):
            raise UnsupportedFormat("list properties on vertices are not supported")
        count = vertex["count"]
        body = fh.read()

    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        lines = [ln for ln in lines if ln.strip()]
        start = sum(e["count"] for e in elements[:vi])
        rows = lines[start : start + count]
        if len(rows) < count:
            raise ParseError(f"PLY declares {count} vertices but the body holds {len(rows)}")
        nprops = len(prop_names)
        try:
            table = np.array([[float(v) for v in r.split()[:nprops]] for r in rows], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"non-numeric vertex value: {exc}") from exc
        if count and table.shape != (count, nprops):
            raise ParseError("vertex line has too few values")
        cols = {n: table[:, i] if count else np.zeros(0) for i, n in enumerate(prop_names)}
    else:
        offset = 0
        for e in elements[:vi]:
            if any(p[1] == "list" for p in e["props"]):
                raise UnsupportedFormat("binary PLY with list elements before vertices")
            offset += e["count"] * np.dtype([(p[0], "<" + p[1]) for p in e["props"]]).itemsize
        dtype = np.dtype([(p[0], "<" + p[1]) for p in vertex["props"]])
        need = offset + count * dtype.itemsize
        if len(body) < need:
            raise ParseError(f"PLY body truncated: need {need} bytes, have {len(body)}")
        rec = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        cols = {n: rec[n].astype(np.float64) for n in prop_names}

    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1) if count else np.zeros((0, 3))
    inten = cols.get("intensity")
    return PointCloud(pts, inten)


def write_ply(path: PathLike, cloud: PointCloud, binary: bool = True, precision: str = "float") -> None:
    """Write a PLY with ``x y z`` (+ ``intensity``) as ``float`` or ``double`` properties."""
    if precision not in ("float", "double"):
        raise ValueError("precision must be 'float' or 'double'")
    code = "<f4" if precision == "float" else "<f8"
    names = ["x", "y", "z"] + (["intensity"] if cloud.intensity is not None else [])
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property {precision} {n}" for n in names]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    cols = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]]
    if cloud.intensity is not None:
        cols.append(cloud.intensity)
    if binary:
        rec = np.empty(len(cloud), dtype=[(n, code) for n in names])
        for n, c in zip(names, cols):
            rec[n] = c
        atomic_write(path, head + rec.tobytes())
    else:
        cast = np.float32 if precision == "float" else np.float64
        lines = [" ".join(repr(float(cast(c[i]))) for c in cols) for i in range(len(cloud))]
        atomic_write(path, head + ("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


# --------------------------------------------------------------------- LiDAR scans


def read_lidar_bin(path: PathLike) -> PointCloud:
    """Packed ``float32 x4`` records (x, y, z, intensity), KITTI velodyne layout."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ParseError(f"scan size {len(raw)} is not a multiple of 16 bytes")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(data[:, :3] if len(data) else np.zeros((0, 3)), data[:, 3])


def write_lidar_bin(path: PathLike, cloud: PointCloud) -> None:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    data = np.column_stack([cloud.points, inten]).astype("<f4")
    atomic_write(path, data.tobytes())


def read_cloud(path: PathLike) -> PointCloud:
    """Dispatch on extension: ``.ply``, ``.bin`` or ``.l3dd`` (points only)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".bin":
        return read_lidar_bin(path)
    if suffix == ".l3dd":
        return read_descriptors(path)[0]
    raise UnsupportedFormat(f"unrecognised point cloud extension {suffix!r}")


# --------------------------------------------------------------------- trajectories


def read_trajectory(path: PathLike) -> Trajectory:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` starts a comment line."""
    stamps, poses = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            fields = s.replace(",", " ").split()
            if len(fields) != 8:
                raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
            try:
                vals = [float(v) for v in fields]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if not np.all(np.isfinite(vals)):
                raise ParseError(f"{path}:{lineno}: non-finite value")
            q = np.array(vals[4:8])
            qn = np.linalg.norm(q)
            if qn == 0.0:
                raise ParseError(f"{path}:{lineno}: zero quaternion")
            R = Rotation.from_quat(q / qn).as_matrix()
            stamps.append(vals[0])
            poses.append(RigidTransform(R, vals[1:4]))
    try:
        return Trajectory(np.array(stamps), poses)
    except InvariantViolation as exc:
        raise InvariantViolation(f"{path}: {exc}") from exc


def write_trajectory(path: PathLike, traj: Trajectory) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, pose in zip(traj.timestamps, traj.poses):
        q = Rotation.from_matrix(pose.rotation).as_quat()
        vals = [float(ts), *map(float, pose.translation), *map(float, q)]
        lines.append(" ".join(repr(v) for v in vals))
    atomic_write(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------- descriptors


def read_descriptors(path: PathLike) -> tuple[PointCloud, DescriptorSet]:
    """Read an L3DD file.

    Stored vectors are kept bit-for-bit when already unit-norm to 1e-6;
    vectors off by at most 1e-3 are renormalised, anything worse is an
    InvariantViolation.
    """
    raw = Path(path).read_bytes()
    if len(raw) < L3DD_HEADER.size:
        raise ParseError("L3DD file shorter than its header")
    magic, version, n, d = L3DD_HEADER.unpack_from(raw)
    if magic != L3DD_MAGIC:
        raise ParseError(f"bad L3DD magic {magic!r}")
    if version != L3DD_VERSION:
        raise UnsupportedFormat(f"L3DD version {version} is not supported")
    if n == 0 or d == 0:
        raise ParseError("L3DD file holds an empty descriptor set")
    need = L3DD_HEADER.size + 4 * n * (3 + d)
    if len(raw) != need:
        raise ParseError(f"L3DD body size mismatch: expected {need} bytes, got {len(raw)}")
    off = L3DD_HEADER.size
    pts = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=off).reshape(n, 3).astype(np.float64)
    vecs = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off + 12 * n).reshape(n, d).astype(np.float64)
    norms = np.linalg.norm(vecs, axis=1)
    dev = np.abs(norms - 1.0)
    if dev.max() > L3DD_NORM_REJECT:
        raise InvariantViolation(f"descriptor norm deviates from 1 by {dev.max():.3g}")
    fix = dev > UNIT_NORM_TOL
    if fix.any():
        vecs[fix] /= norms[fix, None]
    return PointCloud(pts), DescriptorSet(vecs)


def write_descriptors(path: PathLike, cloud: PointCloud, descs: DescriptorSet) -> None:
    if len(cloud) != len(descs):
        raise ValueError(f"cloud has {len(cloud)} points but there are {len(descs)} descriptors")
    header = L3DD_HEADER.pack(L3DD_MAGIC, L3DD_VERSION, len(descs), descs.dim)
    body = cloud.points.astype("<f4").tobytes() + descs.vectors.astype("<f4").tobytes()
    atomic_write(path, header + body)


def read_keyframe(path: PathLike, kid: int, timestamp: float = 0.0) -> KeyframeRecord:
    return KeyframeRecord(kid, float(timestamp), read_cloud(path))
