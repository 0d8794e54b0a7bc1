"""Binary and text formats: TSDF grids, feature maps, camera trajectories, PLY clouds, manifests.

All binary payloads are little-endian float32/uint32.

TSDF grid::

    b"TSDF" u8(version=1) u32[3](W, H, D) f32[3](origin) f32(voxel_size) f32(truncation)
    f32[W*H*D] values, x fastest, then y, then z

Feature map::

    b"FMAP" u8(version=1) u32(height) u32(width) u32(channels)
    f32[h*w*C] values, channels fastest, then width, then height

Trajectory (text): one camera per line, ``fx fy cx cy width height`` followed
by the 12 entries of the 3x4 camera-to-world matrix in row-major order.
Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .aggregation import FeaturePointCloud
from .geometry import CameraIntrinsics, CameraPose, FeatureMap, check_rotation
from .tsdf import TsdfGrid

TSDF_MAGIC = b"TSDF"
FMAP_MAGIC = b"FMAP"
FORMAT_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1
POSE_TOLERANCE = 1e-4

_TSDF_HEADER = struct.Struct("<4sB3I5f")
_FMAP_HEADER = struct.Struct("<4sB3I")


class FormatError(ValueError):
    """Malformed file content; ``offset`` is the byte (or line) position of the problem."""

    def __init__(self, message: str, offset: Optional[int] = None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.offset = offset
        self.path = path


def _check_magic(buf: bytes, magic: bytes, path) -> None:
    if len(buf) < 5:
        raise FormatError(f"file too short for header: expected at least 5 bytes, got {len(buf)}", 0, path)
    if buf[:4] != magic:
        hint = " (byte-swapped magic; big-endian files are not supported)" if buf[:4] == magic[::-1] else ""
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}{hint}", 0, path)
    if buf[4] != FORMAT_VERSION:
        raise FormatError(f"unsupported version {buf[4]}, expected {FORMAT_VERSION}", 4, path)


def _read_payload(buf: bytes, start: int, count: int, path) -> np.ndarray:
    expected = start + 4 * count
    if len(buf) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(buf)}", len(buf), path)
    if len(buf) > expected:
        raise FormatError(f"trailing data: expected {expected} bytes, got {len(buf)}", expected, path)
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite value in payload", start + 4 * int(bad[0]), path)
    return values.astype(np.float32)


def encode_tsdf(grid: TsdfGrid) -> bytes:
    header = _TSDF_HEADER.pack(TSDF_MAGIC, FORMAT_VERSION, *grid.dims, *grid.origin, grid.voxel_size, grid.truncation)
    return header + grid.values.astype("<f4").tobytes(order="F")


def decode_tsdf(buf: bytes, path=None) -> TsdfGrid:
    _check_magic(buf, TSDF_MAGIC, path)
    if len(buf) < _TSDF_HEADER.size:
        raise FormatError(f"file too short for header: expected {_TSDF_HEADER.size} bytes, got {len(buf)}",
                          len(buf), path)
    _, _, w, h, d, ox, oy, oz, vs, tau = _TSDF_HEADER.unpack_from(buf)
    header_floats = np.array([ox, oy, oz, vs, tau])
    if not np.all(np.isfinite(header_floats)):
        raise FormatError("non-finite header value", 17, path)
    if min(w, h, d) < 1:
        raise FormatError(f"invalid dims ({w}, {h}, {d})", 5, path)
    values = _read_payload(buf, _TSDF_HEADER.size, w * h * d, path)
    try:
        return TsdfGrid(values.reshape((w, h, d), order="F"), (ox, oy, oz), vs, tau)
    except ValueError as exc:
        raise FormatError(str(exc), _TSDF_HEADER.size, path) from exc


def write_tsdf(path, grid: TsdfGrid) -> None:
    Path(path).write_bytes(encode_tsdf(grid))


def read_tsdf(path) -> TsdfGrid:
    return decode_tsdf(Path(path).read_bytes(), path)


def encode_feature_map(fmap: FeatureMap) -> bytes:
    header = _FMAP_HEADER.pack(FMAP_MAGIC, FORMAT_VERSION, fmap.height, fmap.width, fmap.channels)
    return header + fmap.data.astype("<f4").tobytes(order="C")


def decode_feature_map(buf: bytes, path=None, channels: Optional[int] = None) -> FeatureMap:
    _check_magic(buf, FMAP_MAGIC, path)
    if len(buf) < _FMAP_HEADER.size:
        raise FormatError(f"file too short for header: expected {_FMAP_HEADER.size} bytes, got {len(buf)}",
                          len(buf), path)
    _, _, h, w, c = _FMAP_HEADER.unpack_from(buf)
    if min(h, w, c) < 1:
        raise FormatError(f"invalid shape ({h}, {w}, {c})", 5, path)
    if channels is not None and c != channels:
        raise FormatError(f"channel count {c} does not match expected {channels}", 13, path)
    values = _read_payload(buf, _FMAP_HEADER.size, h * w * c, path)
    return FeatureMap(values.reshape(h, w, c))


def write_feature_map(path, fmap: FeatureMap) -> None:
    Path(path).write_bytes(encode_feature_map(fmap))


def read_feature_map(path, channels: Optional[int] = None) -> FeatureMap:
    return decode_feature_map(Path(path).read_bytes(), path, channels)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


def format_trajectory(cameras: List[Tuple[CameraIntrinsics, CameraPose]]) -> str:
    lines = ["# fx fy cx cy width height r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 (camera-to-world)"]
    for k, pose in cameras:
        m = pose.matrix()[:3].reshape(-1)
        vals = [repr(float(k.fx)), repr(float(k.fy)), repr(float(k.cx)), repr(float(k.cy)),
                str(int(k.width)), str(int(k.height))] + [repr(float(x)) for x in m]
        lines.append(" ".join(vals))
    return "\n".join(lines) + "\n"


def parse_trajectory(text: str, path=None) -> List[Tuple[CameraIntrinsics, CameraPose]]:
    cameras = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 18:
            raise FormatError(f"expected 18 values per camera, got {len(tokens)}", lineno, path)
        try:
            vals = [float(x) for x in tokens]
        except ValueError as exc:
            raise FormatError(f"non-numeric value: {exc}", lineno, path) from exc
        if not np.all(np.isfinite(vals)):
            raise FormatError("non-finite value", lineno, path)
        if vals[4] != int(vals[4]) or vals[5] != int(vals[5]):
            raise FormatError("image width/height must be integers", lineno, path)
        m = np.array(vals[6:]).reshape(3, 4)
        try:
            check_rotation(m[:, :3], POSE_TOLERANCE)
            k = CameraIntrinsics(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))
        except ValueError as exc:
            raise FormatError(str(exc), lineno, path) from exc
        rot = m[:, :3]
        try:
            check_rotation(rot)
        except ValueError:
            # accepted at file tolerance; snap to the nearest rotation for the strict in-memory check
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
        cameras.append((k, CameraPose(rot, m[:, 3])))
    return cameras


def write_trajectory(path, cameras) -> None:
    Path(path).write_text(format_trajectory(cameras))


def read_trajectory(path) -> List[Tuple[CameraIntrinsics, CameraPose]]:
    return parse_trajectory(Path(path).read_text(), path)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def _ply_dtype(channels: int) -> np.dtype:
    names = ["x", "y", "z", "weight"] + [f"f_{i}" for i in range(channels)]
    return np.dtype([(n, "<f4") for n in names])


def encode_ply(cloud: FeaturePointCloud) -> bytes:
    c = cloud.channels
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {n}" for n in ["x", "y", "z", "weight"] + [f"f_{i}" for i in range(c)]]
    header.append("end_header")
    body = np.empty(len(cloud), dtype=_ply_dtype(c))
    rec = body.view("<f4").reshape(len(cloud), 4 + c)
    rec[:, :3] = cloud.points
    rec[:, 3] = cloud.weights
    rec[:, 4:] = cloud.features
    return ("\n".join(header) + "\n").encode("ascii") + body.tobytes()


def write_ply(path, cloud: FeaturePointCloud) -> None:
    Path(path).write_bytes(encode_ply(cloud))


def decode_ply(buf: bytes, path=None) -> FeaturePointCloud:
    """Parse the PLY layout written by :func:`encode_ply` (float properties only)."""
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file (missing 'ply' or 'end_header')", 0, path)
    lines = buf[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError("only binary_little_endian PLY is supported", 4, path)
    count = None
    props = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise FormatError(f"unsupported property type {parts[1]!r}", 0, path)
            props.append(parts[2])
    if count is None or props[:4] != ["x", "y", "z", "weight"]:
        raise FormatError("expected vertex element with x, y, z, weight properties", 0, path)
    start = end + len(b"end_header\n")
    width = len(props)
    expected = start + 4 * width * count
    if len(buf) != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, got {len(buf)}", len(buf), path)
    rec = np.frombuffer(buf, dtype="<f4", offset=start).reshape(count, width).astype(np.float64)
    return FeaturePointCloud(rec[:, :3].copy(), rec[:, 3].copy(), rec[:, 4:].copy())


def read_ply(path) -> FeaturePointCloud:
    return decode_ply(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class SceneManifest:
    """Experiment description; relative paths resolve against the manifest's directory."""

    grid: str
    trajectory: str
    features: List[str]
    channels: int
    output: str = "cloud.ply"
    scene: Optional[dict] = None
    rma: dict = field(default_factory=dict)
    da: dict = field(default_factory=dict)
    va: dict = field(default_factory=dict)
    seed: Optional[int] = None
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        d = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "grid": self.grid,
            "trajectory": self.trajectory,
            "features": list(self.features),
            "channels": self.channels,
            "output": self.output,
            "rma": self.rma,
            "da": self.da,
            "va": self.va,
        }
        if self.scene is not None:
            d["scene"] = self.scene
        if self.seed is not None:
            d["seed"] = self.seed
        return d


def write_manifest(path, manifest: SceneManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def read_manifest(path, check_files: bool = True) -> SceneManifest:
    """Load and validate a manifest. Missing referenced files raise ``FileNotFoundError``."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.pos, path) from exc
    if d.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {d.get('schema_version')!r}", None, path)
    missing = [k for k in ("grid", "trajectory", "features", "channels") if k not in d]
    if missing:
        raise FormatError(f"missing keys: {', '.join(missing)}", None, path)
    if not d["features"]:
        raise FormatError("manifest lists no views", None, path)
    m = SceneManifest(
        grid=d["grid"],
        trajectory=d["trajectory"],
        features=list(d["features"]),
        channels=int(d["channels"]),
        output=d.get("output", "cloud.ply"),
        scene=d.get("scene"),
        rma=d.get("rma", {}),
        da=d.get("da", {}),
        va=d.get("va", {}),
        seed=d.get("seed"),
        base_dir=path.parent,
    )
    if check_files:
        for rel in [m.grid, m.trajectory] + m.features:
            if not m.resolve(rel).is_file():
                raise FileNotFoundError(os.fspath(m.resolve(rel)))
    return m
