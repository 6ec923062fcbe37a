"""Voxelized point cloud container, PLY I/O, Morton ordering and KD cropping."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# BT.709 full-range luma coefficients, peak 255.
_Y_COEFFS = np.array([0.2126, 0.7152, 0.0722], dtype=np.float64)


class PlyError(ValueError):
    """Raised for malformed or unsupported PLY input."""


@dataclass
class PointCloud:
    """Integer voxel positions with per-point 8-bit RGB colors.

    positions: (N, 3) int64, all coordinates in [0, 2**resolution_bits)
    colors:    (N, 3) uint8
    """

    positions: np.ndarray
    colors: np.ndarray
    resolution_bits: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.colors = np.asarray(self.colors, dtype=np.uint8)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.colors.shape != self.positions.shape:
            raise ValueError(
                f"colors shape {self.colors.shape} != positions shape {self.positions.shape}"
            )
        if len(self.positions) == 0:
            raise ValueError("point cloud must contain at least one point")
        if self.resolution_bits < 1:
            raise ValueError("resolution_bits must be positive")
        if self.positions.min() < 0:
            raise ValueError("negative coordinate")
        if self.positions.max() >= (1 << self.resolution_bits):
            raise ValueError(
                f"coordinate {self.positions.max()} does not fit in "
                f"{self.resolution_bits} bits"
            )

    def __len__(self) -> int:
        return len(self.positions)

    def with_colors(self, colors: np.ndarray) -> "PointCloud":
        """Same geometry, new colors."""
        return PointCloud(self.positions, colors, self.resolution_bits)


@dataclass
class MortonPermutation:
    keys: np.ndarray  # (N,) uint64
    order: np.ndarray  # (N,) int64 permutation; keys[order] is non-decreasing


def min_resolution_bits(positions: np.ndarray) -> int:
    """Smallest b >= 1 such that every coordinate is < 2**b."""
    top = int(np.asarray(positions).max(initial=0))
    return max(1, top.bit_length())


# ---------------------------------------------------------------------------
# PLY subset: element vertex with x,y,z (float32/int32) and red,green,blue
# (uchar), ascii or binary_little_endian.  Anything else is rejected.

_REQUIRED = ("x", "y", "z", "red", "green", "blue")
_COORD_TYPES = {"float": "f4", "float32": "f4", "int": "i4", "int32": "i4"}
_COLOR_TYPES = {"uchar": "u1", "uint8": "u1"}


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def parse_ply(data: bytes) -> PointCloud:
    """Parse an ASCII or binary-little-endian PLY into a PointCloud.

    Float coordinates are rounded half-away-from-zero to integers; point
    order is preserved; resolution_bits is the smallest width that holds
    every coordinate.
    """
    lines = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise PlyError("malformed header: no end_header")
        line = data[pos:nl].rstrip(b"\r").decode("ascii", errors="replace")
        pos = nl + 1
        lines.append(line)
        if line == "end_header":
            break

    if not lines or lines[0] != "ply":
        raise PlyError("malformed header: missing 'ply' magic")

    fmt = None
    count = None
    props: list[tuple[str, str]] = []  # (name, numpy dtype code)
    in_vertex = False
    for line in lines[1:-1]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"malformed header: unsupported format {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyError(f"malformed header: bad element line {line!r}")
            if tok[1] != "vertex":
                raise PlyError(f"unsupported element {tok[1]!r}")
            count = int(tok[2])
            in_vertex = True
        elif tok[0] == "property":
            if not in_vertex:
                raise PlyError("malformed header: property before element vertex")
            if len(tok) != 3:
                raise PlyError(f"malformed header: bad property line {line!r}")
            ptype, pname = tok[1], tok[2]
            if pname in ("x", "y", "z"):
                if ptype not in _COORD_TYPES:
                    raise PlyError(f"unsupported type {ptype!r} for property {pname!r}")
                props.append((pname, _COORD_TYPES[ptype]))
            elif pname in ("red", "green", "blue"):
                if ptype not in _COLOR_TYPES:
                    raise PlyError(f"unsupported type {ptype!r} for property {pname!r}")
                props.append((pname, _COLOR_TYPES[ptype]))
            else:
                raise PlyError(f"unsupported property {pname!r}")
        else:
            raise PlyError(f"malformed header: unexpected line {line!r}")

    if fmt is None:
        raise PlyError("malformed header: missing format line")
    if count is None:
        raise PlyError("malformed header: missing element vertex")
    for name in _REQUIRED:
        if name not in [p[0] for p in props]:
            raise PlyError(f"missing required property {name!r}")
    if count < 1:
        raise PlyError("element count mismatch: empty vertex element")

    dtype = np.dtype([(name, "<" + code) for name, code in props])
    if fmt == "binary_little_endian":
        body = data[pos:]
        need = dtype.itemsize * count
        if len(body) < need:
            raise PlyError(
                f"element count mismatch: need {need} bytes, have {len(body)}"
            )
        rows = np.frombuffer(body[:need], dtype=dtype)
    else:
        text = data[pos:].split(b"\n")
        vals = []
        taken = 0
        for raw in text:
            raw = raw.strip()
            if not raw:
                continue
            fields = raw.split()
            if len(fields) != len(props):
                raise PlyError(
                    f"element count mismatch: row has {len(fields)} fields, "
                    f"expected {len(props)}"
                )
            vals.append(tuple(float(f) for f in fields))
            taken += 1
            if taken == count:
                break
        if taken != count:
            raise PlyError(f"element count mismatch: {taken} rows, expected {count}")
        rows = np.array(vals, dtype=np.float64)
        rows = np.rec.fromarrays(
            [rows[:, i] for i in range(len(props))], names=[p[0] for p in props]
        )

    coords = np.stack(
        [np.asarray(rows[n], dtype=np.float64) for n in ("x", "y", "z")], axis=1
    )
    coords = _round_half_away(coords).astype(np.int64)
    if coords.min() < 0:
        raise PlyError("negative coordinate after rounding")
    colors = np.stack([np.asarray(rows[n]) for n in ("red", "green", "blue")], axis=1)
    if colors.min() < 0 or colors.max() > 255:
        raise PlyError("color component outside [0, 255]")
    return PointCloud(coords, colors.astype(np.uint8), min_resolution_bits(coords))


def write_ply(cloud: PointCloud, fmt: str = "binary_le") -> bytes:
    """Serialize a cloud: x,y,z as float32 (exact integers), colors as uchar."""
    if fmt not in ("ascii", "binary_le"):
        raise ValueError(f"unknown format {fmt!r}")
    if len(cloud) == 0:
        raise ValueError("empty cloud not writable")
    header = "\n".join(
        [
            "ply",
            "format " + ("ascii" if fmt == "ascii" else "binary_little_endian") + " 1.0",
            f"element vertex {len(cloud)}",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "end_header",
            "",
        ]
    ).encode("ascii")
    if fmt == "ascii":
        out = []
        for (x, y, z), (r, g, b) in zip(cloud.positions, cloud.colors):
            out.append(f"{x} {y} {z} {r} {g} {b}\n")
        return header + "".join(out).encode("ascii")
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    rows = np.empty(len(cloud), dtype=dtype)
    for i, n in enumerate(("x", "y", "z")):
        rows[n] = cloud.positions[:, i].astype(np.float32)
    for i, n in enumerate(("red", "green", "blue")):
        rows[n] = cloud.colors[:, i]
    return header + rows.tobytes()


# ---------------------------------------------------------------------------
# Morton (Z-order) serialization: bit i of x -> key bit 3i, y -> 3i+1, z -> 3i+2.

def _spread_bits(v: np.ndarray) -> np.ndarray:
    # 21-bit input spread to every third bit of a 63-bit key.
    x = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def morton_keys(positions: np.ndarray, resolution_bits: int) -> np.ndarray:
    if resolution_bits > 21:
        raise ValueError(f"resolution_bits {resolution_bits} > 21 overflows 63-bit keys")
    p = np.asarray(positions, dtype=np.uint64)
    return (
        _spread_bits(p[:, 0])
        | (_spread_bits(p[:, 1]) << np.uint64(1))
        | (_spread_bits(p[:, 2]) << np.uint64(2))
    )


def morton_order(cloud: PointCloud) -> MortonPermutation:
    """Stable sort of points by Morton key."""
    keys = morton_keys(cloud.positions, cloud.resolution_bits)
    order = np.argsort(keys, kind="stable").astype(np.int64)
    return MortonPermutation(keys=keys, order=order)


# ---------------------------------------------------------------------------
# KD-style recursive cropping used to cut training blocks out of large clouds.

def kdtree_crop(cloud: PointCloud, k: int, rng_seed: int) -> PointCloud:
    """Halve the cloud along the largest-variance axis until it has < k points.

    Each step splits at the median rank of the chosen axis and keeps one half
    uniformly at random, so every step is an exact 0.5 scaling.  The surviving
    points keep their original relative order.  Deterministic per seed.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(rng_seed)
    idx = np.arange(len(cloud), dtype=np.int64)
    while len(idx) >= k:
        pos = cloud.positions[idx]
        axis = int(np.argmax(pos.var(axis=0)))
        rank = np.argsort(pos[:, axis], kind="stable")
        half = len(idx) // 2
        keep = rank[:half] if rng.random() < 0.5 else rank[half:]
        idx = idx[np.sort(keep)]
    return PointCloud(cloud.positions[idx], cloud.colors[idx], cloud.resolution_bits)


def y_channel(colors: np.ndarray) -> np.ndarray:
    """Luma of (N, 3) RGB values (BT.709 full range), float64 in [0, 255].

    Spelled out as scalar multiply-adds (not a dot product) so per-point
    recomputation reproduces it bit for bit.
    """
    c = np.asarray(colors, dtype=np.float64)
    return c[:, 0] * _Y_COEFFS[0] + c[:, 1] * _Y_COEFFS[1] + c[:, 2] * _Y_COEFFS[2]


# ---------------------------------------------------------------------------
# Synthetic test content: cube-surface cloud with smooth gradients plus one
# high-frequency checkerboard patch.

def synthetic_cube_cloud(points: int, seed: int, resolution_bits: int = 8) -> PointCloud:
    """Voxelized cube-surface cloud of roughly `points` points."""
    if points < 1:
        raise ValueError("points must be >= 1")
    rng = np.random.default_rng(seed)
    side = (1 << resolution_bits) - 1
    face = rng.integers(0, 6, size=points)
    u = rng.integers(0, side + 1, size=points)
    v = rng.integers(0, side + 1, size=points)
    fixed = np.where(face % 2 == 0, 0, side)
    pos = np.empty((points, 3), dtype=np.int64)
    ax = face // 2  # 0: x fixed, 1: y fixed, 2: z fixed
    pos[ax == 0] = np.stack([fixed, u, v], axis=1)[ax == 0]
    pos[ax == 1] = np.stack([u, fixed, v], axis=1)[ax == 1]
    pos[ax == 2] = np.stack([u, v, fixed], axis=1)[ax == 2]

    # Deduplicate voxels, keeping first occurrence order.
    _, first = np.unique(pos, axis=0, return_index=True)
    pos = pos[np.sort(first)]
    n = len(pos)

    scale = 255.0 / max(side, 1)
    r = pos[:, 0] * scale
    g = pos[:, 1] * scale
    b = 0.5 * (pos[:, 2] + 0.5 * pos[:, 0]) * scale
    colors = np.stack([r, g, b], axis=1)

    # Checkerboard patch on the z=0 face corner: textured regime.
    patch = (pos[:, 2] == 0) & (pos[:, 0] < side // 2) & (pos[:, 1] < side // 2)
    checker = ((pos[:, 0] // 2 + pos[:, 1] // 2) % 2).astype(np.float64)
    colors[patch] = 64.0 + 127.0 * checker[patch, None]

    colors = np.clip(_round_half_away(colors), 0, 255).astype(np.uint8)
    return PointCloud(pos, colors, resolution_bits)
