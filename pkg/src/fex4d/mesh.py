"""Triangle-mesh utilities for the retargeter.

Spiral orderings, a nested icosphere hierarchy used as the synthetic face
template, and OBJ / PLY / landmark-index file I/O.

Spiral rule: a vertex's spiral is the vertex itself, then its 1-ring in
counter-clockwise order starting at the smallest-index neighbour, then the
next ring, and so on. Only complete rings are taken; the remainder of the
length-``k`` sequence is padded with the centre index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NonManifoldEdgeError, ShapeMismatchError


@dataclass
class MeshTopology:
    n_vertices: int
    faces: np.ndarray
    spirals: np.ndarray | None = None

    @property
    def k(self) -> int:
        return 0 if self.spirals is None else self.spirals.shape[1]


def _fans(n_vertices: int, faces: np.ndarray) -> list[dict[int, int]]:
    """Per-vertex map a -> b for each incident face (v, a, b) in CCW order."""
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ShapeMismatchError(f"faces must be (n, 3), got {faces.shape}")
    if faces.size and (faces.min() < 0 or faces.max() >= n_vertices):
        raise ShapeMismatchError("face index out of range")
    directed: set[tuple[int, int]] = set()
    count: dict[tuple[int, int], int] = {}
    for f in faces:
        for i in range(3):
            a, b = int(f[i]), int(f[(i + 1) % 3])
            if a == b:
                raise NonManifoldEdgeError((a, b), "degenerate face")
            if (a, b) in directed:
                raise NonManifoldEdgeError((min(a, b), max(a, b)), "inconsistent orientation or duplicate face")
            directed.add((a, b))
            key = (min(a, b), max(a, b))
            count[key] = count.get(key, 0) + 1
            if count[key] > 2:
                raise NonManifoldEdgeError(key, "edge shared by more than two faces")
    fans: list[dict[int, int]] = [dict() for _ in range(n_vertices)]
    for f in faces:
        for i in range(3):
            v, a, b = int(f[i]), int(f[(i + 1) % 3]), int(f[(i + 2) % 3])
            fans[v][a] = b
    return fans


def _ring_order(fan: dict[int, int]) -> list[int]:
    """Neighbours of one vertex in CCW order, starting at the smallest index."""
    if not fan:
        return []
    nbrs = set(fan) | set(fan.values())
    preds = set(fan.values())
    # on a boundary the walk must start where the fan opens
    starts = [a for a in fan if a not in preds]
    start = min(starts) if starts else min(nbrs)
    order, cur, seen = [start], start, {start}
    while cur in fan and fan[cur] not in seen:
        cur = fan[cur]
        order.append(cur)
        seen.add(cur)
    order += sorted(nbrs - seen)  # pinched fans: append leftovers deterministically
    i = order.index(min(order))
    return order[i:] + order[:i]


def build_spirals(n_vertices: int, faces, k: int = 9) -> MeshTopology:
    if k < 1:
        raise ValueError(f"spiral length must be >= 1, got {k}")
    fans = _fans(n_vertices, faces)
    rings = [_ring_order(f) for f in fans]
    out = np.empty((n_vertices, k), dtype=np.int64)
    for v in range(n_vertices):
        seq, seen, ring = [v], {v}, [v]
        while len(seq) < k:
            nxt = []
            for u in ring:
                for w in rings[u]:
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
            if not nxt or len(seq) + len(nxt) > k:
                break
            seq += nxt
            ring = nxt
        out[v] = seq + [v] * (k - len(seq))
    return MeshTopology(n_vertices, np.asarray(faces, dtype=np.int64), out)


def vertex_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = np.asarray(verts, dtype=np.float64)
    tri = v[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n = np.zeros_like(v)
    for i in range(3):
        np.add.at(n, faces[:, i], fn)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


# ---------------------------------------------------------------------------
# icosphere hierarchy

_T = (1.0 + 5 ** 0.5) / 2.0
_ICO_V = np.array([
    (-1, _T, 0), (1, _T, 0), (-1, -_T, 0), (1, -_T, 0),
    (0, -1, _T), (0, 1, _T), (0, -1, -_T), (0, 1, -_T),
    (_T, 0, -1), (_T, 0, 1), (-_T, 0, -1), (-_T, 0, 1),
], dtype=np.float64)
_ICO_F = np.array([
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
], dtype=np.int64)


def icosahedron() -> tuple[np.ndarray, np.ndarray]:
    v = _ICO_V / np.linalg.norm(_ICO_V, axis=1, keepdims=True)
    return v, _ICO_F.copy()


def _subdivide(verts, faces):
    verts = list(map(tuple, verts))
    mid: dict[tuple[int, int], int] = {}
    parents = []

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in mid:
            p = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
            verts.append(tuple(p / np.linalg.norm(p)))
            mid[key] = len(verts) - 1
            parents.append(key)
        return mid[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.array(verts), np.array(out, dtype=np.int64), np.array(parents, dtype=np.int64)


@dataclass
class MeshHierarchy:
    """Nested meshes, finest first. Level ``i + 1`` vertices are the first
    ``n_i+1`` vertices of level ``i``; ``parents[i]`` gives, for every vertex
    of level ``i`` beyond that prefix, the two coarser vertices it bisects."""

    verts: list[np.ndarray]
    faces: list[np.ndarray]
    parents: list[np.ndarray]
    topologies: list[MeshTopology] = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [len(v) for v in self.verts]


def icosphere_hierarchy(levels: int = 3, k: int = 9) -> MeshHierarchy:
    v, f = icosahedron()
    verts, faces, parents = [v], [f], []
    for _ in range(levels):
        v, f, p = _subdivide(v, f)
        verts.append(v)
        faces.append(f)
        parents.append(p)
    verts, faces, parents = verts[::-1], faces[::-1], parents[::-1] + [np.zeros((0, 2), np.int64)]
    topo = [build_spirals(len(vv), ff, k) for vv, ff in zip(verts, faces)]
    return MeshHierarchy(verts, faces, parents, topo)


# ---------------------------------------------------------------------------
# file formats


def write_obj(path, verts, faces) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(verts)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for j in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[j], idx[j + 1]])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{n}: malformed OBJ line") from exc
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_ply(path, verts, faces) -> None:
    verts = np.asarray(verts, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(verts)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n"
    ).encode("ascii")
    body = bytearray(verts.tobytes())
    for f in faces:
        body += struct.pack("<B", 3) + f.tobytes()
    Path(path).write_bytes(header + bytes(body))


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Reader for the subset written by :func:`write_ply` (float xyz, uchar/int face lists)."""
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = buf[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    counts = {}
    for line in header:
        p = line.split()
        if p[:1] == ["element"]:
            counts[p[1]] = int(p[2])
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    off = end + len(b"end_header\n")
    if len(buf) < off + 12 * nv:
        raise FormatError(f"{path}: truncated vertex block")
    verts = np.frombuffer(buf, dtype="<f4", count=3 * nv, offset=off).reshape(nv, 3).astype(np.float64)
    off += 12 * nv
    faces = []
    for _ in range(nf):
        if off >= len(buf):
            raise FormatError(f"{path}: truncated face block")
        n = buf[off]
        idx = np.frombuffer(buf, dtype="<i4", count=n, offset=off + 1)
        off += 1 + 4 * n
        for j in range(1, n - 1):
            faces.append([idx[0], idx[j], idx[j + 1]])
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def read_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise FormatError(f"unsupported mesh format {suffix!r}")


def write_mesh(path, verts, faces) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        write_obj(path, verts, faces)
    elif suffix == ".ply":
        write_ply(path, verts, faces)
    else:
        raise FormatError(f"unsupported mesh format {suffix!r}")


def write_landmark_index(path, idx) -> None:
    Path(path).write_text("".join(f"{int(i)}\n" for i in idx))


def read_landmark_index(path, n_vertices: int | None = None, n_landmarks: int = 68) -> np.ndarray:
    try:
        idx = np.array([int(s) for s in Path(path).read_text().split()], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: landmark index file must hold one integer per line") from exc
    if idx.size != n_landmarks:
        raise FormatError(f"{path}: expected {n_landmarks} indices, found {idx.size}")
    if n_vertices is not None and (idx.min() < 0 or idx.max() >= n_vertices):
        raise FormatError(f"{path}: vertex index out of range for a {n_vertices}-vertex mesh")
    return idx
