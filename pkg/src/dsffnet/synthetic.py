"""Procedural articulated meshes with exact pose-transfer ground truth.

A body is a chain of K bones along +y.  Joint j (1 <= j < K) rotates every
bone distal to it about a fixed local axis (z for odd j, x for even j).  The
surface is one tube of rings, ``along`` ring intervals per bone and ``around``
vertices per ring, closed at both ends by fans over the end rings.  Vertices
within a blend band around a joint (15% of each adjacent bone's length)
interpolate the two bone transforms linearly in arc length.  Vertex count and
order depend only on the identity, never on the pose.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ContractError
from .mesh import Mesh, load_obj, normalize_mesh, save_obj, shuffle_vertices, apply_permutation

BLEND_BAND = 0.15
LENGTH_RANGE = (0.5, 1.5)
RADIUS_RANGE = (0.08, 0.2)
ANGLE_LIMIT = np.pi / 2
DEFAULT_RESOLUTION = (12, 8)

MANIFEST = "manifest.json"

# the desk-scale overfit benchmark: 4 identities x 8 poses, two bones, 300 vertices
BENCHMARK = {"n_identities": 4, "n_poses": 8, "seed": 0, "resolution": (12, 12), "k": 2}


@dataclass(frozen=True)
class IdentitySpec:
    lengths: Tuple[float, ...]
    radii: Tuple[float, ...]
    around: int = DEFAULT_RESOLUTION[0]
    along: int = DEFAULT_RESOLUTION[1]

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(float(x) for x in self.lengths))
        object.__setattr__(self, "radii", tuple(float(x) for x in self.radii))
        k = len(self.lengths)
        if k < 2 or len(self.radii) != k:
            raise ContractError("identity needs K >= 2 bones with one radius per bone")
        if min(self.lengths) <= 0 or min(self.radii) <= 0:
            raise ContractError("bone lengths and radii must be positive")
        if self.around < 3 or self.along < 2:
            raise ContractError("resolution must be >= 3 around and >= 2 along")

    @property
    def k(self) -> int:
        return len(self.lengths)

    @property
    def n_vertices(self) -> int:
        return self.around * (self.k * self.along + 1)


@dataclass(frozen=True)
class PoseSpec:
    angles: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if any(abs(a) > ANGLE_LIMIT for a in self.angles):
            raise ContractError("joint angles must lie in [-pi/2, pi/2]")

    @property
    def k(self) -> int:
        return len(self.angles) + 1


@dataclass
class Triple:
    source: Mesh
    target: Mesh
    gt: Mesh
    meta: Dict = field(default_factory=dict)

    @property
    def split(self) -> str:
        return self.meta.get("split", "train")


def _child_seed(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1, np.uint64)[0])


def gen_identity(seed: int, k: int, resolution: Tuple[int, int] = DEFAULT_RESOLUTION) -> IdentitySpec:
    if k < 2:
        raise ContractError(f"K must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    lengths = rng.uniform(*LENGTH_RANGE, size=k)
    radii = rng.uniform(*RADIUS_RANGE, size=k)
    return IdentitySpec(tuple(lengths), tuple(radii), int(resolution[0]), int(resolution[1]))


def gen_pose(seed: int, k: int) -> PoseSpec:
    if k < 2:
        raise ContractError(f"K must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    return PoseSpec(tuple(rng.uniform(-ANGLE_LIMIT, ANGLE_LIMIT, size=k - 1)))


def _axis_rotation(axis: str, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def joint_axis(j: int) -> str:
    return "z" if j % 2 == 1 else "x"


def forward_kinematics(identity: IdentitySpec, pose: PoseSpec):
    """Per-bone world rotations and joint positions (K+1 points, base first)."""
    if identity.k != pose.k:
        raise ContractError(f"identity has K={identity.k} bones but pose has K={pose.k}")
    rots = [np.eye(3)]
    for j in range(1, identity.k):
        rots.append(rots[-1] @ _axis_rotation(joint_axis(j), pose.angles[j - 1]))
    joints = [np.zeros(3)]
    for k, length in enumerate(identity.lengths):
        joints.append(joints[-1] + rots[k] @ np.array([0.0, length, 0.0]))
    return rots, np.array(joints)


def _ring_arcs(identity: IdentitySpec) -> np.ndarray:
    starts = np.concatenate([[0.0], np.cumsum(identity.lengths)])
    arcs = [starts[k] + identity.lengths[k] * i / identity.along
            for k in range(identity.k) for i in range(identity.along)]
    arcs.append(starts[-1])
    return np.array(arcs)


def _bone_weights(identity: IdentitySpec, s: float) -> Dict[int, float]:
    """Blend weights per bone for a ring at arc length ``s``."""
    L = identity.lengths
    starts = np.concatenate([[0.0], np.cumsum(L)])
    for j in range(1, identity.k):
        lo = starts[j] - BLEND_BAND * L[j - 1]
        hi = starts[j] + BLEND_BAND * L[j]
        if lo < s < hi:
            w = (s - lo) / (hi - lo)
            return {j - 1: 1.0 - w, j: w}
    k = int(np.searchsorted(starts, s, side="right") - 1)
    return {min(max(k, 0), identity.k - 1): 1.0}


def tube_faces(around: int, rings: int) -> np.ndarray:
    faces = []
    for r in range(rings - 1):
        a, b = r * around, (r + 1) * around
        for i in range(around):
            i2 = (i + 1) % around
            faces.append((a + i, b + i, a + i2))
            faces.append((a + i2, b + i, b + i2))
    last = (rings - 1) * around
    for i in range(1, around - 1):
        faces.append((0, i + 1, i))
        faces.append((last, last + i, last + i + 1))
    return np.array(faces, dtype=np.int64)


def skin(identity: IdentitySpec, pose: PoseSpec) -> Mesh:
    rots, joints = forward_kinematics(identity, pose)
    starts = np.concatenate([[0.0], np.cumsum(identity.lengths)])
    phi = 2.0 * np.pi * np.arange(identity.around) / identity.around
    ring_dir = np.stack([np.cos(phi), np.zeros_like(phi), np.sin(phi)], axis=1)
    verts = []
    for s in _ring_arcs(identity):
        weights = _bone_weights(identity, s)
        radius = sum(w * identity.radii[k] for k, w in weights.items())
        rest = radius * ring_dir + np.array([0.0, s, 0.0])
        pos = np.zeros_like(rest)
        for k, w in weights.items():
            local = rest - np.array([0.0, starts[k], 0.0])
            pos += w * (joints[k] + local @ rots[k].T)
        verts.append(pos)
    rings = identity.k * identity.along + 1
    return Mesh(np.concatenate(verts, axis=0), tube_faces(identity.around, rings))


def make_triple(id_a: IdentitySpec, pose_p: PoseSpec, id_b: IdentitySpec, pose_q: PoseSpec,
                shuffle_seed: int, meta: Optional[Dict] = None) -> Triple:
    """Source in pose P, target in pose Q, ground truth = target identity in pose P.

    Target and ground truth share one vertex permutation so they stay aligned.
    """
    if id_a.k != id_b.k or pose_p.k != id_a.k or pose_q.k != id_a.k:
        raise ContractError("all identity and pose specs of a triple must share K")
    source, _ = shuffle_vertices(normalize_mesh(skin(id_a, pose_p)), _child_seed(shuffle_seed, 0))
    target, perm = shuffle_vertices(normalize_mesh(skin(id_b, pose_q)), _child_seed(shuffle_seed, 1))
    gt = apply_permutation(normalize_mesh(skin(id_b, pose_p)), perm)
    return Triple(source, target, gt, dict(meta or {}))


def split_poses(n_poses: int, unseen_frac: float, seed: int) -> Tuple[List[int], List[int]]:
    if not 0.0 <= unseen_frac < 1.0:
        raise ContractError(f"unseen fraction must be in [0, 1), got {unseen_frac}")
    n_unseen = int(round(n_poses * unseen_frac))
    order = np.random.default_rng(_child_seed(seed, 3)).permutation(n_poses)
    unseen = sorted(int(i) for i in order[:n_unseen])
    seen = sorted(int(i) for i in order[n_unseen:])
    return seen, unseen


def make_dataset(n_identities: int, n_poses: int, seed: int,
                 resolution: Tuple[int, int] = DEFAULT_RESOLUTION, k: int = 3,
                 unseen_frac: float = 0.5) -> Tuple[List[Triple], Dict]:
    """Training triples over every (source identity, seen pose, target identity), plus
    validation triples whose source pose is seen or unseen.

    Returns ``(triples, manifest)``; ``triples[i].meta`` mirrors ``manifest['triples'][i]``.
    """
    if n_identities < 1 or n_poses < 1:
        raise ContractError("need at least one identity and one pose")
    idents = [gen_identity(_child_seed(seed, 1, i), k, resolution) for i in range(n_identities)]
    poses = [gen_pose(_child_seed(seed, 2, j), k) for j in range(n_poses)]
    seen, unseen = split_poses(n_poses, unseen_frac, seed)
    if not seen:
        raise ContractError("split leaves no seen poses for training")
    rng = np.random.default_rng(_child_seed(seed, 4))

    def other(choices: Sequence[int], avoid: Sequence[int]) -> int:
        pool = [c for c in choices if c not in avoid] or list(choices)
        return int(pool[rng.integers(len(pool))])

    plan = []
    train_q = {}
    for a in range(n_identities):
        for p in seen:
            for b in range(n_identities):
                q = other(seen, [p])
                train_q[(a, p, b)] = q
                plan.append(("train", a, p, b, q))
    for p in seen:
        for b in range(n_identities):
            a = int(rng.integers(n_identities))
            plan.append(("seen", a, p, b, other(seen, [p, train_q[(a, p, b)]])))
    for p in unseen:
        for b in range(n_identities):
            plan.append(("unseen", int(rng.integers(n_identities)), p, b, other(seen, [p])))

    triples = []
    records = []
    for index, (split, a, p, b, q) in enumerate(plan):
        shuffle_seed = _child_seed(seed, 5, index)
        meta = {"index": index, "split": split, "source_identity": a, "source_pose": p,
                "target_identity": b, "target_pose": q, "shuffle_seed": shuffle_seed}
        triples.append(make_triple(idents[a], poses[p], idents[b], poses[q], shuffle_seed, meta))
        records.append(meta)
    manifest = {
        "seed": seed,
        "k": k,
        "resolution": list(resolution),
        "unseen_frac": unseen_frac,
        "identities": [{"id": i, "seed": _child_seed(seed, 1, i), "lengths": list(s.lengths),
                        "radii": list(s.radii)} for i, s in enumerate(idents)],
        "poses": [{"id": j, "seed": _child_seed(seed, 2, j), "angles": list(s.angles),
                   "split": "unseen" if j in unseen else "seen"} for j, s in enumerate(poses)],
        "seen_poses": seen,
        "unseen_poses": unseen,
        "train_poses": sorted({r["source_pose"] for r in records if r["split"] == "train"}),
        "variants": [{"identity": i, "pose": j} for i in range(n_identities) for j in range(n_poses)],
        "triples": records,
    }
    return triples, manifest


def manifest_json(manifest: Dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def write_dataset(triples: Sequence[Triple], manifest: Dict, out_dir) -> None:
    """Layout: ``triples/<index>/{source,target,gt}.obj`` plus ``manifest.json``."""
    for t in triples:
        d = os.path.join(out_dir, "triples", str(t.meta["index"]))
        os.makedirs(d, exist_ok=True)
        save_obj(t.source, os.path.join(d, "source.obj"))
        save_obj(t.target, os.path.join(d, "target.obj"))
        save_obj(t.gt, os.path.join(d, "gt.obj"))
    with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(manifest_json(manifest))


def read_dataset(data_dir) -> Tuple[List[Triple], Dict]:
    with open(os.path.join(data_dir, MANIFEST), encoding="utf-8") as fh:
        manifest = json.load(fh)
    triples = []
    for rec in manifest["triples"]:
        d = os.path.join(data_dir, "triples", str(rec["index"]))
        triples.append(Triple(load_obj(os.path.join(d, "source.obj")),
                              load_obj(os.path.join(d, "target.obj")),
                              load_obj(os.path.join(d, "gt.obj")), dict(rec)))
    return triples, manifest


def select(triples: Sequence[Triple], split: str) -> List[Triple]:
    return [t for t in triples if t.split == split]
