"""Triangle meshes: OBJ I/O, bounding-box normalization, edges, shuffling, noise."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .autodiff import ContractError


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DegenerateMeshError(MeshError):
    pass


@dataclass(frozen=True)
class Mesh:
    """Vertices (N x 3 float64) plus zero-based triangle indices (F x 3 int64)."""

    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError(f"face index out of range [0, {len(v)})")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("face repeats a vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        return (np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.faces, other.faces))

    __hash__ = None


def load_obj(path) -> Mesh:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated."""
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    face_lines = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise ObjParseError("vertex needs three coordinates", lineno)
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise ObjParseError(f"non-numeric vertex coordinate in {raw!r}", lineno) from None
        elif tok[0] == "f":
            face_lines.append((lineno, tok[1:]))
    n = len(verts)
    for lineno, refs in face_lines:
        if len(refs) < 3:
            raise ObjParseError("face needs at least three vertices", lineno)
        idx = []
        for r in refs:
            try:
                k = int(r.split("/", 1)[0])
            except ValueError:
                raise ObjParseError(f"bad face index {r!r}", lineno) from None
            k = k - 1 if k > 0 else n + k
            if not 0 <= k < n:
                raise ObjParseError(f"face index {r} out of range (have {n} vertices)", lineno)
            idx.append(k)
        for i in range(1, len(idx) - 1):
            faces.append((idx[0], idx[i], idx[i + 1]))
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: Mesh, path) -> None:
    parts = ["v %.9g %.9g %.9g\n" % tuple(v) for v in mesh.vertices]
    parts += ["f %d %d %d\n" % tuple(f + 1) for f in mesh.faces]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(parts))


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center on the bounding-box center and scale the longest axis to [-1, 1]."""
    v = mesh.vertices
    if len(v) == 0:
        raise DegenerateMeshError("mesh has no vertices")
    lo, hi = v.min(axis=0), v.max(axis=0)
    half = (hi - lo).max() / 2.0
    if not half > 0:
        raise DegenerateMeshError("bounding box has zero extent")
    center = (lo + hi) / 2.0
    return Mesh((v - center) / half, mesh.faces)


def extract_edges(mesh: Mesh) -> np.ndarray:
    """Sorted, deduplicated undirected edges as an E x 2 array (i < j)."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e.sort(axis=1)
    return np.unique(e, axis=0).reshape(-1, 2)


def edge_lengths(vertices: np.ndarray, edges: np.ndarray) -> np.ndarray:
    d = vertices[edges[:, 0]] - vertices[edges[:, 1]]
    return np.sqrt((d * d).sum(axis=1))


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood constants), 64-bit outputs."""

    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & self.MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        return z ^ (z >> 31)


def fisher_yates(n: int, seed: int) -> np.ndarray:
    """Shuffled ``arange(n)``: for i = n-1..1 swap a[i], a[next() % (i+1)]."""
    rng = SplitMix64(seed)
    a = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.next() % (i + 1)
        a[i], a[j] = a[j], a[i]
    return np.array(a, dtype=np.int64)


def shuffle_vertices(mesh: Mesh, seed: int) -> Tuple[Mesh, np.ndarray]:
    """Reorder vertices; returns ``(out, perm)`` with ``out.vertices[perm[i]] == mesh.vertices[i]``."""
    order = fisher_yates(mesh.n_vertices, seed)
    perm = np.empty_like(order)
    perm[order] = np.arange(order.size)
    return apply_permutation(mesh, perm), perm


def apply_permutation(mesh: Mesh, perm: np.ndarray) -> Mesh:
    perm = np.asarray(perm, dtype=np.int64)
    v = np.empty_like(mesh.vertices)
    v[perm] = mesh.vertices
    return Mesh(v, perm[mesh.faces])


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def add_vertex_noise(mesh: Mesh, sigma: float, seed: int) -> Mesh:
    if sigma < 0:
        raise ContractError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return mesh
    rng = np.random.default_rng(seed)
    return Mesh(mesh.vertices + rng.normal(0.0, sigma, size=mesh.vertices.shape), mesh.faces)


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
