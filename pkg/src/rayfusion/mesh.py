"""Isosurface extraction from sparse TSDF maps and mesh serialization.

Classic 256-case marching cubes over the cells spanned by stored voxel
centers.  Two boundary conventions:

* ``close``  -- absent neighbors count as +1 (empty), so surfaces are capped
  at the border of the stored volume
* ``open``   -- cells touching any absent voxel are skipped, leaving holes at
  the border instead of phantom caps
* ``trim``   -- absent neighbors count as +1 but cells whose stored corners
  are all inside the surface are skipped; keeps genuine crossing cells that
  lost a corner to sparsification while suppressing back-side caps
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, MeshIOError
from .geometry import VoxelGridSpec
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

WELD_TOL = 1e-7


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.vertices.size and not np.all(np.isfinite(self.vertices)):
            raise InvalidInputError("mesh vertices must be finite")
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise InvalidInputError("triangle indices out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def euler_characteristic(self) -> int:
        """V - E + F with E counted over unique undirected edges."""
        if self.num_triangles == 0:
            return self.num_vertices
        e = np.vstack([
            self.triangles[:, [0, 1]],
            self.triangles[:, [1, 2]],
            self.triangles[:, [2, 0]],
        ])
        e = np.sort(e, axis=1)
        n_edges = np.unique(e, axis=0).shape[0]
        return self.num_vertices - n_edges + self.num_triangles


def empty_mesh() -> TriangleMesh:
    return TriangleMesh(vertices=np.empty((0, 3)), triangles=np.empty((0, 3), np.int64))


def marching_cubes(
    tsdf: dict[tuple[int, int, int], float],
    spec: VoxelGridSpec,
    iso: float = 0.0,
    boundary: str = "close",
) -> TriangleMesh:
    """Triangulate the iso-level set of a sparse per-voxel TSDF map.

    Cells are anchored between eight neighboring voxel centers; vertices on
    sign-changing edges are placed by linear interpolation and welded by the
    (deterministic) global edge identity.
    """
    if boundary not in ("close", "open", "trim"):
        raise InvalidInputError("boundary must be 'close', 'open' or 'trim'")
    if not tsdf:
        return empty_mesh()

    coords = np.array(sorted(tsdf.keys()), dtype=np.int64)
    values = np.array([tsdf[tuple(c)] for c in coords])
    if np.any(np.abs(values) > 1.0 + 1e-9):
        raise InvalidInputError("tsdf values must lie in [-1, 1]")

    # dense bounding-box array, padded one voxel on each side with +1
    lo = coords.min(axis=0) - 1
    hi = coords.max(axis=0) + 1
    shape = hi - lo + 1
    dense = np.full(shape, 1.0)
    present = np.zeros(shape, dtype=bool)
    local = coords - lo
    dense[local[:, 0], local[:, 1], local[:, 2]] = values
    present[local[:, 0], local[:, 1], local[:, 2]] = True

    # candidate cell anchors: any cell one of whose corners is a stored voxel
    anchors = (local[:, None, :] - CORNER_OFFSETS[None, :, :]).reshape(-1, 3)
    ok = np.all(anchors >= 0, axis=1) & np.all(anchors < shape - 1, axis=1)
    anchors = np.unique(anchors[ok], axis=0)

    corner = anchors[:, None, :] + CORNER_OFFSETS[None, :, :]  # (M, 8, 3)
    cv = dense[corner[..., 0], corner[..., 1], corner[..., 2]]  # (M, 8)
    if boundary != "close":
        have = present[corner[..., 0], corner[..., 1], corner[..., 2]]
        if boundary == "open":
            ok_cells = have.all(axis=1)
        else:  # trim: a crossing needs at least one stored corner outside
            ok_cells = have.all(axis=1) | np.any((cv >= iso) & have, axis=1)
        anchors, corner, cv = anchors[ok_cells], corner[ok_cells], cv[ok_cells]

    case = ((cv < iso) << np.arange(8)).sum(axis=1)
    active = (EDGE_TABLE[case] != 0)
    anchors, corner, cv, case = anchors[active], corner[active], cv[active], case[active]
    if anchors.shape[0] == 0:
        return empty_mesh()

    # expand the triangle table: (cell, edge) pairs in emission order
    tri = TRI_TABLE[case]  # (M, 16)
    valid = tri >= 0
    cell_of = np.repeat(np.arange(anchors.shape[0]), valid.sum(axis=1))
    edges = tri[valid]  # local edge ids, flattened, multiples of 3 per cell

    # global edge identity: (lower corner voxel linear id, axis)
    c0 = corner[cell_of, EDGE_CORNERS[0, edges]]  # (K, 3) voxel coords
    c1 = corner[cell_of, EDGE_CORNERS[1, edges]]
    axis = np.argmax(c0 != c1, axis=1)
    base = np.minimum(c0, c1)
    lin = (base[:, 0] * shape[1] + base[:, 1]) * shape[2] + base[:, 2]
    key = lin * 3 + axis
    uniq_key, inverse = np.unique(key, return_inverse=True)

    # one interpolated vertex per unique edge
    first = np.zeros(uniq_key.size, dtype=np.int64)
    first[inverse[::-1]] = np.arange(key.size - 1, -1, -1)
    e0, e1 = c0[first], c1[first]
    v0 = dense[e0[:, 0], e0[:, 1], e0[:, 2]]
    v1 = dense[e1[:, 0], e1[:, 1], e1[:, 2]]
    t = (iso - v0) / (v1 - v0)
    p0 = spec.centers(e0 + lo)
    p1 = spec.centers(e1 + lo)
    verts = p0 + t[:, None] * (p1 - p0)

    # reverse the table's winding so normals follow the TSDF gradient (outward)
    tris = inverse.reshape(-1, 3)[:, ::-1]
    # drop degenerate triangles (shared welded vertices)
    good = (
        (tris[:, 0] != tris[:, 1])
        & (tris[:, 1] != tris[:, 2])
        & (tris[:, 0] != tris[:, 2])
    )
    return TriangleMesh(vertices=verts, triangles=tris[good])


def flip_orientation(mesh: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(vertices=mesh.vertices.copy(),
                        triangles=mesh.triangles[:, [0, 2, 1]])


# ---------------------------------------------------------------------------
# serialization

def export_ply(mesh: TriangleMesh, path: str) -> None:
    """Binary little-endian PLY: float32 x/y/z, uchar count + int32 indices."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {mesh.num_vertices}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        f"element face {mesh.num_triangles}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(mesh.vertices.astype("<f4").tobytes())
            if mesh.num_triangles:
                rec = np.zeros(mesh.num_triangles,
                               dtype=[("n", "u1"), ("i", "<i4", (3,))])
                rec["n"] = 3
                rec["i"] = mesh.triangles
                fh.write(rec.tobytes())
    except OSError as exc:
        raise MeshIOError(f"cannot write mesh to {path!r}: {exc}") from exc


def read_ply(path: str) -> TriangleMesh:
    """Reads the subset of PLY produced by export_ply."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise MeshIOError(f"cannot read mesh from {path!r}: {exc}") from exc
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise MeshIOError(f"{path!r} is not a PLY file")
    n_vert = n_face = 0
    for line in blob[:end].decode("ascii", "replace").splitlines():
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
    off = end + len(b"end_header\n")
    verts = np.frombuffer(blob, dtype="<f4", count=3 * n_vert, offset=off)
    off += 12 * n_vert
    rec = np.frombuffer(blob, dtype=[("n", "u1"), ("i", "<i4", (3,))],
                        count=n_face, offset=off)
    if n_face and not np.all(rec["n"] == 3):
        raise MeshIOError(f"{path!r}: non-triangular faces unsupported")
    return TriangleMesh(vertices=verts.reshape(-1, 3).astype(np.float64),
                        triangles=rec["i"].astype(np.int64).reshape(-1, 3))


def export_obj(mesh: TriangleMesh, path: str) -> None:
    """Plain-text Wavefront OBJ (1-based indices)."""
    try:
        with open(path, "w", encoding="ascii") as fh:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for tri in mesh.triangles:
                fh.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
    except OSError as exc:
        raise MeshIOError(f"cannot write mesh to {path!r}: {exc}") from exc
