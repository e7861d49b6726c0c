"""Triangle meshes: icosphere construction, radial noise perturbation, placement."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .noise import simplex_noise

MAX_LEVEL = 6


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Closed triangle mesh, faces oriented outward.

    ``center`` is the point the mesh is star-shaped about (origin for a fresh
    icosphere, the placement point after :func:`place_mesh`).
    """

    vertices: np.ndarray
    faces: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        c = np.array(self.center, dtype=np.float64).reshape(3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        for name, arr in (("vertices", v), ("faces", f), ("center", c)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def radii(self):
        return np.linalg.norm(self.vertices - self.center, axis=1)

    def edges(self):
        """Unique undirected edges as a sorted ``(E, 2)`` array."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self):
        return len(self.vertices) - len(self.edges()) + len(self.faces)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _icosahedron():
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return verts.tolist(), faces


def icosphere(level):
    """Unit geodesic sphere: icosahedron with each triangle split 4-way ``level`` times."""
    level = int(level)
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"icosphere level must lie in [0, {MAX_LEVEL}], got {level}")
    verts, faces = _icosahedron()
    for _ in range(level):
        midpoint = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            idx = midpoint.get(key)
            if idx is None:
                p = np.add(verts[a], verts[b])
                p /= np.linalg.norm(p)
                verts.append(p.tolist())
                idx = midpoint[key] = len(verts) - 1
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return TriMesh(np.array(verts), np.array(faces))


def perturb_mesh(mesh, noise):
    """Radial displacement ``v -> v * (1 + amplitude * n(v))`` about the mesh center.

    Radial moves keep every vertex direction, so the result stays star-shaped
    as long as ``amplitude * octave_bound < 1``.
    """
    bound = noise.amplitude * noise.octave_bound
    if bound >= 1.0:
        raise ValueError(
            f"amplitude {noise.amplitude} x octave bound {noise.octave_bound:.4g} >= 1 "
            "would allow non-positive radii")
    rel = mesh.vertices - mesh.center
    if noise.amplitude == 0:
        return TriMesh(mesh.vertices, mesh.faces, mesh.center)
    n = simplex_noise(rel, noise)
    out = mesh.center + rel * (1.0 + noise.amplitude * n)[:, None]
    return TriMesh(out, mesh.faces, mesh.center)


def quaternion_to_matrix(q):
    w, x, y, z = (float(c) for c in q)
    norm = np.sqrt(w * w + x * x + y * y + z * z)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"rotation quaternion must be unit length (|q| = {norm:.9g})")
    w, x, y, z = w / norm, x / norm, y / norm, z / norm
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_quaternion(rng):
    """Uniform on SO(3): a normalised 4D Gaussian, sign-fixed to ``w >= 0``."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def place_mesh(mesh, center, radius_mm, scale=(1.0, 1.0, 1.0), rotation=(1.0, 0.0, 0.0, 0.0),
               spacing=(1.0, 1.0, 1.0)):
    """Map a unit mesh into physical space: ``v -> c + R @ (scale * radius * v)``.

    ``center`` is a voxel coordinate; voxel ``(i, j, k)`` sits at
    ``(i*sx, j*sy, k*sz)`` mm, so with unit spacing it is used as-is.
    """
    if not radius_mm > 0:
        raise ValueError("radius must be > 0")
    rot = quaternion_to_matrix(rotation)
    c = np.asarray(center, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
    rel = (mesh.vertices - mesh.center) * (np.asarray(scale, dtype=np.float64) * float(radius_mm))
    return TriMesh(c + rel @ rot.T, mesh.faces, c)


def radii_digest(mesh):
    """64-bit hex digest of the per-vertex radii, for drift detection."""
    r = np.ascontiguousarray(mesh.radii, dtype="<f8")
    return hashlib.blake2b(r.tobytes(), digest_size=8).hexdigest()
