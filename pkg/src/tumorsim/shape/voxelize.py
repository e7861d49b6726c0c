"""Mesh-to-mask conversion.

``voxelize`` is the production path: for a mesh star-shaped about its center,
voxel ``p`` is inside iff ``|p - c|`` does not exceed the surface radius along
the ray ``c -> p``. The face crossed by the ray is found with three edge-plane
tests (the face's cone about ``c``), then one plane test decides the voxel.
Candidate faces come from a cube-map index over ray directions; each cell
lists, in ascending order, every face whose cone can reach the cell, so the
first hit equals the first hit of a scan over all faces.

``voxelize_ray_parity`` is the brute-force oracle: count crossings of a fixed
ray from every voxel center with every triangle.
"""
from __future__ import annotations

import numpy as np

from scipy.spatial import cKDTree

from .._accel import njit, use_numba
from ..volume import BinaryMask

_CONE_TOL = 1e-12
_NUDGE = 1e-7
_PARITY_DIR = np.array([1.0, np.sqrt(2.0) - 1.0, np.sqrt(3.0) - 1.5])
_PARITY_DIR = _PARITY_DIR / np.linalg.norm(_PARITY_DIR)
_CHUNK = 2048


class DegenerateMeshError(ValueError):
    pass


def _face_tables(mesh):
    rel = mesh.vertices - mesh.center
    a, b, c = (rel[mesh.faces[:, k]] for k in range(3))
    edge_normals = np.stack([np.cross(a, b), np.cross(b, c), np.cross(c, a)], axis=1)  # (F, 3, 3)
    normals = np.cross(b - a, c - a)
    offsets = np.einsum("ij,ij->i", normals, a)
    if np.any(offsets <= 0):
        raise DegenerateMeshError("mesh is not star-shaped about its center (face plane behind center)")
    edge_norms = np.linalg.norm(edge_normals, axis=2)
    return (np.ascontiguousarray(edge_normals), edge_norms, np.ascontiguousarray(normals), offsets)


def _cell_of(u, bins):
    """Cube-map cell of direction(s) ``u`` (``(n, 3)``); ties go to the lowest axis."""
    major = np.argmax(np.abs(u), axis=1)
    rows = np.arange(len(u))
    um = u[rows, major]
    a = u[rows, (major + 1) % 3] / np.abs(um)
    b = u[rows, (major + 2) % 3] / np.abs(um)
    ia = np.minimum(((a + 1.0) * 0.5 * bins).astype(np.int64), bins - 1)
    ib = np.minimum(((b + 1.0) * 0.5 * bins).astype(np.int64), bins - 1)
    side = (um < 0).astype(np.int64)
    return ((major * 2 + side) * bins + ia) * bins + ib


def _angle(u, v):
    """Angle between unit vectors, accurate for small angles."""
    return np.arctan2(np.linalg.norm(np.cross(u, v), axis=-1), (u * v).sum(axis=-1))


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _direction_index(mesh):
    """CSR table ``(bins, cell_start, cell_faces)`` of candidate faces per cube-map cell."""
    rel = _unit(mesh.vertices - mesh.center)
    tri = rel[mesh.faces]
    n_faces = len(mesh.faces)
    bins = int(np.clip(np.sqrt(n_faces / 24.0), 4, 64))
    centroid = _unit(tri.sum(axis=1))
    # cap about the centroid direction holding the face's cone (cones are below a hemisphere)
    rho = np.max(np.stack([_angle(centroid, tri[:, k]) for k in range(3)]), axis=0)

    # cell geometry in the same (major, side, ia, ib) order that _cell_of encodes
    edges = np.linspace(-1.0, 1.0, bins + 1)
    major, side, ia, ib = (g.ravel() for g in np.meshgrid(np.arange(3), [1.0, -1.0], np.arange(bins),
                                                          np.arange(bins), indexing="ij"))

    def direction(a, b):
        d = np.zeros((len(major), 3))
        rows = np.arange(len(major))
        d[rows, major] = side
        d[rows, (major + 1) % 3] = a
        d[rows, (major + 2) % 3] = b
        return _unit(d)

    mid = 0.5 * (edges[:-1] + edges[1:])
    cells = direction(mid[ia], mid[ib])
    radii = np.max([_angle(cells, direction(edges[ia + da], edges[ib + db]))
                    for da in (0, 1) for db in (0, 1)], axis=0)

    margin = 1e-6
    wide = rho > np.pi / 2 - 0.2
    reach = np.minimum(rho.max() + radii + margin, np.pi)
    tree = cKDTree(centroid)
    near = tree.query_ball_point(cells, 2.0 * np.sin(reach / 2.0) + 1e-12)
    start = np.zeros(len(cells) + 1, dtype=np.int64)
    lists = []
    always = np.flatnonzero(wide)
    for ci, cand in enumerate(near):
        cand = np.union1d(np.asarray(cand, dtype=np.int64), always)
        if cand.size:
            keep = _angle(cells[ci][None], centroid[cand]) <= rho[cand] + radii[ci] + margin
            cand = cand[keep | wide[cand]]
        lists.append(cand)
        start[ci + 1] = start[ci] + cand.size
    faces = np.concatenate(lists) if lists else np.zeros(0, dtype=np.int64)
    return bins, start, faces


def _grid_box(mesh, dims, spacing):
    lo, hi = mesh.bounds()
    sp = np.asarray(spacing, dtype=np.float64)
    start = np.maximum(np.floor(lo / sp).astype(np.int64), 0)
    stop = np.minimum(np.ceil(hi / sp).astype(np.int64), np.asarray(dims) - 1)
    return start, stop


# ---------------------------------------------------------------------------
# radial kernels
# ---------------------------------------------------------------------------

@njit
def _find_face(ux, uy, uz, un, edge_normals, edge_norms):
    for f in range(edge_normals.shape[0]):
        ok = True
        for e in range(3):
            d = ux * edge_normals[f, e, 0] + uy * edge_normals[f, e, 1] + uz * edge_normals[f, e, 2]
            if d < -_CONE_TOL * un * edge_norms[f, e]:
                ok = False
                break
        if ok:
            return f
    return -1


@njit
def _find_face_indexed(ux, uy, uz, un, edge_normals, edge_norms, bins, cell_start, cell_faces):
    ax, ay, az = abs(ux), abs(uy), abs(uz)
    if ax >= ay and ax >= az:
        major, um, a, b = 0, ux, uy, uz
    elif ay >= az:
        major, um, a, b = 1, uy, uz, ux
    else:
        major, um, a, b = 2, uz, ux, uy
    ia = min(int((a / abs(um) + 1.0) * 0.5 * bins), bins - 1)
    ib = min(int((b / abs(um) + 1.0) * 0.5 * bins), bins - 1)
    side = 1 if um < 0 else 0
    cell = ((major * 2 + side) * bins + ia) * bins + ib
    for p in range(cell_start[cell], cell_start[cell + 1]):
        f = cell_faces[p]
        ok = True
        for e in range(3):
            d = ux * edge_normals[f, e, 0] + uy * edge_normals[f, e, 1] + uz * edge_normals[f, e, 2]
            if d < -_CONE_TOL * un * edge_norms[f, e]:
                ok = False
                break
        if ok:
            return f
    return -1


@njit
def _radial_numba(out, start, stop, spacing, center, edge_normals, edge_norms, normals, offsets,
                  bins, cell_start, cell_faces):
    for i in range(start[0], stop[0] + 1):
        ux = i * spacing[0] - center[0]
        for j in range(start[1], stop[1] + 1):
            uy = j * spacing[1] - center[1]
            for k in range(start[2], stop[2] + 1):
                uz = k * spacing[2] - center[2]
                un = np.sqrt(ux * ux + uy * uy + uz * uz)
                if un == 0.0:
                    out[i, j, k] = True
                    continue
                f = _find_face_indexed(ux, uy, uz, un, edge_normals, edge_norms, bins, cell_start, cell_faces)
                if f < 0:
                    f = _find_face(ux, uy, uz, un, edge_normals, edge_norms)
                if f < 0:
                    f = _find_face(ux + _NUDGE * un * 0.267, uy + _NUDGE * un * 0.535,
                                   uz + _NUDGE * un * 0.802, un, edge_normals, edge_norms)
                    if f < 0:
                        raise ValueError("ray from mesh center crosses no face (degenerate mesh)")
                proj = normals[f, 0] * ux + normals[f, 1] * uy + normals[f, 2] * uz
                out[i, j, k] = proj <= offsets[f]


def _in_cone(u, un, edge_normals, edge_norms, faces):
    """``(n, k)`` cone tests of directions ``u`` against per-row candidate ``faces``."""
    ok = np.ones(faces.shape, dtype=bool)
    for e in range(3):
        d = np.einsum("nj,nkj->nk", u, edge_normals[faces, e, :])
        ok &= d >= -_CONE_TOL * un[:, None] * edge_norms[faces, e]
    return ok


def _full_search(u, un, edge_normals, edge_norms):
    incone = np.ones((len(u), len(edge_normals)), dtype=bool)
    for e in range(3):
        incone &= (u @ edge_normals[:, e, :].T) >= -_CONE_TOL * un[:, None] * edge_norms[None, :, e]
    return incone


def _radial_numpy(out, start, stop, spacing, center, edge_normals, edge_norms, normals, offsets,
                  bins, cell_start, cell_faces):
    axes = [np.arange(start[d], stop[d] + 1) for d in range(3)]
    idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    counts = np.diff(cell_start)
    width = max(int(counts.max()), 1)
    # padded candidate table; padding repeats the first candidate and is masked out
    slots = np.arange(width)
    take = cell_start[:-1, None] + np.minimum(slots[None, :], np.maximum(counts[:, None] - 1, 0))
    padded = cell_faces[np.minimum(take, max(len(cell_faces) - 1, 0))] if len(cell_faces) else \
        np.zeros((len(counts), width), dtype=np.int64)
    valid = slots[None, :] < counts[:, None]
    for s in range(0, len(idx), _CHUNK):
        block = idx[s:s + _CHUNK]
        u = block * spacing - center
        un = np.sqrt((u * u).sum(axis=1))
        zero = un == 0.0
        face = np.zeros(len(u), dtype=np.int64)
        live = np.flatnonzero(~zero)
        if live.size:
            ul, unl = u[live], un[live]
            cells = _cell_of(ul, bins)
            cand = padded[cells]
            hit = _in_cone(ul, unl, edge_normals, edge_norms, cand) & valid[cells]
            found = hit.any(axis=1)
            face[live] = cand[np.arange(live.size), np.argmax(hit, axis=1)]
            miss = live[~found]
            if miss.size:
                um, unm = u[miss], un[miss]
                incone = _full_search(um, unm, edge_normals, edge_norms)
                lost = ~incone.any(axis=1)
                if lost.any():
                    uu = um[lost] + _NUDGE * unm[lost, None] * np.array([0.267, 0.535, 0.802])
                    retry = _full_search(uu, unm[lost], edge_normals, edge_norms)
                    if not retry.any(axis=1).all():
                        raise DegenerateMeshError("ray from mesh center crosses no face (degenerate mesh)")
                    incone[lost] = retry
                face[miss] = np.argmax(incone, axis=1)
        proj = (u * normals[face]).sum(axis=1)
        inside = zero | (proj <= offsets[face])
        out[block[:, 0], block[:, 1], block[:, 2]] = inside


def voxelize(mesh, dims, spacing=(1.0, 1.0, 1.0)):
    """Binary mask of voxel centers inside a star-shaped mesh (mm coordinates)."""
    dims = tuple(int(n) for n in dims)
    out = np.zeros(dims, dtype=bool)
    sp = np.asarray(spacing, dtype=np.float64)
    start, stop = _grid_box(mesh, dims, sp)
    if np.any(stop < start):
        return BinaryMask(out, tuple(sp))
    edge_normals, edge_norms, normals, offsets = _face_tables(mesh)
    bins, cell_start, cell_faces = _direction_index(mesh)
    kernel = _radial_numba if use_numba() else _radial_numpy
    kernel(out, start, stop, sp, mesh.center, edge_normals, edge_norms, normals, offsets,
           bins, cell_start, cell_faces)
    return BinaryMask(out, tuple(sp))


# ---------------------------------------------------------------------------
# ray-parity oracle
# ---------------------------------------------------------------------------

@njit
def _parity_numba(out, spacing, tri, direction):
    eps = 1e-14
    nf = tri.shape[0]
    dx, dy, dz = direction[0], direction[1], direction[2]
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for k in range(out.shape[2]):
                px, py, pz = i * spacing[0], j * spacing[1], k * spacing[2]
                hits = 0
                for f in range(nf):
                    e1x = tri[f, 1, 0] - tri[f, 0, 0]
                    e1y = tri[f, 1, 1] - tri[f, 0, 1]
                    e1z = tri[f, 1, 2] - tri[f, 0, 2]
                    e2x = tri[f, 2, 0] - tri[f, 0, 0]
                    e2y = tri[f, 2, 1] - tri[f, 0, 1]
                    e2z = tri[f, 2, 2] - tri[f, 0, 2]
                    hx = dy * e2z - dz * e2y
                    hy = dz * e2x - dx * e2z
                    hz = dx * e2y - dy * e2x
                    det = e1x * hx + e1y * hy + e1z * hz
                    if abs(det) < eps:
                        continue
                    inv = 1.0 / det
                    sx = px - tri[f, 0, 0]
                    sy = py - tri[f, 0, 1]
                    sz = pz - tri[f, 0, 2]
                    a = (sx * hx + sy * hy + sz * hz) * inv
                    if a < 0.0 or a > 1.0:
                        continue
                    qx = sy * e1z - sz * e1y
                    qy = sz * e1x - sx * e1z
                    qz = sx * e1y - sy * e1x
                    b = (dx * qx + dy * qy + dz * qz) * inv
                    if b < 0.0 or a + b > 1.0:
                        continue
                    t = (e2x * qx + e2y * qy + e2z * qz) * inv
                    if t > 0.0:
                        hits += 1
                out[i, j, k] = (hits % 2) == 1


def _parity_numpy(out, spacing, tri, direction):
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in out.shape], indexing="ij"), axis=-1).reshape(-1, 3)
    p = idx * spacing
    hits = np.zeros(len(p), dtype=np.int64)
    d = direction
    for f in range(len(tri)):
        v0, v1, v2 = tri[f]
        e1, e2 = v1 - v0, v2 - v0
        h = np.cross(d, e2)
        det = e1 @ h
        if abs(det) < 1e-14:
            continue
        s = p - v0
        a = (s @ h) / det
        q = np.cross(s, e1)
        b = (q @ d) / det
        t = (q @ e2) / det
        hits += (a >= 0) & (a <= 1) & (b >= 0) & (a + b <= 1) & (t > 0)
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = (hits % 2) == 1


def voxelize_ray_parity(mesh, dims, spacing=(1.0, 1.0, 1.0)):
    """Oracle: inside iff a fixed ray from the voxel center crosses the surface an odd number of times."""
    dims = tuple(int(n) for n in dims)
    out = np.zeros(dims, dtype=bool)
    sp = np.asarray(spacing, dtype=np.float64)
    tri = np.ascontiguousarray(mesh.vertices[mesh.faces])
    kernel = _parity_numba if use_numba() else _parity_numpy
    kernel(out, sp, tri, _PARITY_DIR)
    return BinaryMask(out, tuple(sp))
