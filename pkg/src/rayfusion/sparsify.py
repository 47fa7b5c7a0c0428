"""Ray-based local sparsification plus top-k / global-threshold baselines.

For every pixel ray of every view the voxels of the current (sparse) level
grid crossed by the ray are ordered by depth; a length-K sliding window with
the highest occupancy sum is selected and its voxels survive to the next
level.  A voxel is dropped only if no ray's selected window contains it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import (
    Camera,
    SparseVoxelGrid,
    VoxelGridSpec,
    traverse_rays_batch,
)

DEFAULT_WINDOW = 9


@dataclass(frozen=True)
class WindowSelection:
    """Best occupancy window along one ray (start index is 0-based)."""

    start: int
    total: float
    size: int


def select_window(occupancies: np.ndarray, window: int = DEFAULT_WINDOW) -> WindowSelection:
    """Argmax-sum sliding window; ties go to the smallest start index.

    When the ray crosses fewer than ``window`` voxels the single full-ray
    window is returned.
    """
    occ = np.asarray(occupancies, dtype=float).reshape(-1)
    if occ.size == 0:
        raise InvalidInputError("empty occupancy sequence")
    if window < 1:
        raise InvalidInputError("window size must be >= 1")
    if occ.size <= window:
        return WindowSelection(start=0, total=float(occ.sum()), size=occ.size)
    sums = np.lib.stride_tricks.sliding_window_view(occ, window).sum(axis=1)
    start = int(np.argmax(sums))  # first maximum
    return WindowSelection(start=start, total=float(sums[start]), size=window)


# ---------------------------------------------------------------------------
# batched per-view ray casting

@dataclass
class RayHits:
    """Flat (ray, voxel) incidence for all sampled pixel rays of a fragment.

    Entries are grouped by ray and ordered by entry depth within each ray.
    ``sparse_idx`` indexes into the sparse grid's coordinate array.
    """

    entry_ray: np.ndarray  # (E,) global ray id
    sparse_idx: np.ndarray  # (E,) int
    seg_start: np.ndarray  # (S,) offsets of each nonempty ray's run
    seg_len: np.ndarray  # (S,)
    view_ray_offsets: np.ndarray  # (V+1,) first global ray id of each view
    strided_dims: tuple[tuple[int, int], ...] = ()  # (rows, cols) of each view's ray grid
    stride: int = 1


def cast_fragment_rays(
    grid: SparseVoxelGrid,
    cameras: Sequence[Camera],
    d_max: float = 3.0,
    stride: int = 1,
) -> RayHits:
    """Traverse one ray per (strided) pixel of every view through the grid."""
    if stride < 1:
        raise InvalidInputError("ray stride must be >= 1")
    spec = grid.spec
    membership = np.full(spec.num_voxels, -1, dtype=np.int64)
    membership[spec.linear_index(grid.coords)] = np.arange(grid.num_voxels)

    all_rays = []
    all_sparse = []
    ray_base = 0
    offsets = [0]
    shapes = []
    for intr, pose in cameras:
        us = np.arange(0, intr.width, stride, dtype=float)
        vs = np.arange(0, intr.height, stride, dtype=float)
        uu, vv = np.meshgrid(us, vs, indexing="xy")
        cam = np.stack(
            [
                (uu.ravel() - intr.cx) / intr.fx,
                (vv.ravel() - intr.cy) / intr.fy,
                np.ones(uu.size),
            ],
            axis=-1,
        )
        norms = np.linalg.norm(cam, axis=-1)
        dirs = (cam / norms[:, None]) @ pose.rotation
        origins = np.broadcast_to(pose.center, dirs.shape)
        t_min = np.full(uu.size, 1e-9)
        t_max = d_max * norms
        ray_ids, lin = traverse_rays_batch(spec, origins, dirs, t_min, t_max)
        sidx = membership[lin]
        keep = sidx >= 0
        all_rays.append(ray_ids[keep] + ray_base)
        all_sparse.append(sidx[keep])
        ray_base += uu.size
        offsets.append(ray_base)
        shapes.append((vs.size, us.size))

    entry_ray = np.concatenate(all_rays) if all_rays else np.empty(0, np.int64)
    sparse_idx = np.concatenate(all_sparse) if all_sparse else np.empty(0, np.int64)
    if entry_ray.size:
        boundaries = np.flatnonzero(np.diff(entry_ray)) + 1
        seg_start = np.concatenate([[0], boundaries]).astype(np.int64)
        seg_len = np.diff(np.concatenate([seg_start, [entry_ray.size]]))
    else:
        seg_start = np.empty(0, np.int64)
        seg_len = np.empty(0, np.int64)
    return RayHits(entry_ray=entry_ray, sparse_idx=sparse_idx,
                   seg_start=seg_start, seg_len=seg_len,
                   view_ray_offsets=np.array(offsets, dtype=np.int64),
                   strided_dims=tuple(shapes), stride=stride)


def _segmented_first_argmax(values: np.ndarray, seg_start: np.ndarray) -> np.ndarray:
    """Index (into values) of the first per-segment maximum."""
    seg_max = np.maximum.reduceat(values, seg_start)
    seg_id = np.zeros(values.size, dtype=np.int64)
    seg_id[seg_start[1:]] = 1
    seg_id = np.cumsum(seg_id)
    is_max = values == seg_max[seg_id]
    cand = np.where(is_max, np.arange(values.size), values.size)
    return np.minimum.reduceat(cand, seg_start)


def _selected_window_entries(hits: RayHits, occupancy: np.ndarray, window: int
                             ) -> np.ndarray:
    """Flat-entry indices covered by each ray's best window."""
    if hits.entry_ray.size == 0:
        return np.empty(0, np.int64)
    occ_flat = occupancy[hits.sparse_idx].astype(float)
    n_entries = occ_flat.size
    keep_entries = []

    short = hits.seg_len <= window
    # short rays: the single full-ray window keeps everything
    if short.any():
        starts = hits.seg_start[short]
        lens = hits.seg_len[short]
        idx = np.repeat(starts, lens) + _ranges(lens)
        keep_entries.append(idx)

    long_mask = ~short
    if long_mask.any():
        # window sums over the flat array; windows crossing a ray boundary or
        # belonging to a short ray are poisoned so the per-segment argmax
        # (whose reduceat ranges may span short rays) never picks them
        sums = np.lib.stride_tricks.sliding_window_view(occ_flat, window).sum(axis=1)
        win_seg = np.zeros(n_entries, dtype=np.int64)
        win_seg[hits.seg_start[1:]] = 1
        win_seg = np.cumsum(win_seg)
        valid = win_seg[: sums.size] == win_seg[np.arange(sums.size) + window - 1]
        valid &= long_mask[win_seg[: sums.size]]
        sums = np.where(valid, sums, -np.inf)
        starts = hits.seg_start[long_mask]
        best = _segmented_first_argmax(sums, starts)
        idx = np.repeat(best, window) + _ranges(np.full(best.size, window))
        keep_entries.append(idx)

    return np.concatenate(keep_entries)


def _ranges(lengths: np.ndarray) -> np.ndarray:
    """Concatenated [0..l) ranges, vectorized."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0:
        return np.empty(0, np.int64)
    total = int(lengths.sum())
    out = np.ones(total, dtype=np.int64)
    out[0] = 0
    ends = np.cumsum(lengths)[:-1]
    out[ends] = 1 - lengths[:-1]
    return np.cumsum(out)


def sparsify_fragment(
    grid: SparseVoxelGrid,
    occupancy: np.ndarray,
    cameras: Sequence[Camera],
    window: int = DEFAULT_WINDOW,
    d_max: float = 3.0,
    stride: int = 1,
    hits: RayHits | None = None,
) -> np.ndarray:
    """Keep mask over the sparse grid: union of all rays' selected windows.

    Voxels crossed by no sampled ray are dropped.  Pass precomputed ``hits``
    to reuse the traversal.
    """
    if hits is None:
        hits = cast_fragment_rays(grid, cameras, d_max=d_max, stride=stride)
    kept = np.zeros(grid.num_voxels, dtype=bool)
    entries = _selected_window_entries(hits, np.asarray(occupancy), window)
    kept[hits.sparse_idx[entries]] = True
    return kept


def topk_sparsify(
    grid: SparseVoxelGrid,
    occupancy: np.ndarray,
    cameras: Sequence[Camera],
    k: int = DEFAULT_WINDOW,
    d_max: float = 3.0,
    stride: int = 1,
    hits: RayHits | None = None,
) -> np.ndarray:
    """Baseline: per ray keep the k highest-occupancy voxels (ties: nearer)."""
    if hits is None:
        hits = cast_fragment_rays(grid, cameras, d_max=d_max, stride=stride)
    kept = np.zeros(grid.num_voxels, dtype=bool)
    if hits.entry_ray.size == 0:
        return kept
    occ_flat = np.asarray(occupancy)[hits.sparse_idx].astype(float)
    pos = np.arange(occ_flat.size)
    # sort by (ray, -occ, depth order); the first k entries per ray survive
    order = np.lexsort((pos, -occ_flat, hits.entry_ray))
    within = _ranges(hits.seg_len)  # rank within each ray's sorted run
    kept[hits.sparse_idx[order[within < k]]] = True
    return kept


def threshold_sparsify(occupancy: np.ndarray, theta: float) -> np.ndarray:
    """NeuralRecon-style baseline: keep voxels with occupancy above theta."""
    if not 0.0 <= theta <= 1.0:
        raise InvalidInputError("theta must lie in [0, 1]")
    return np.asarray(occupancy) > theta


def upsample_voxels(
    kept_coords: np.ndarray, spec: VoxelGridSpec, fine_spec: VoxelGridSpec
) -> SparseVoxelGrid:
    """Expand each kept coarse voxel into its 8 children on the next level."""
    if not np.isclose(fine_spec.voxel_size, spec.voxel_size / 2.0):
        raise InvalidInputError("levels must nest with a factor-2 refinement")
    coords = np.asarray(kept_coords, dtype=np.int64).reshape(-1, 3)
    offsets = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"),
                       axis=-1).reshape(-1, 3)
    children = (2 * coords[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    return SparseVoxelGrid(spec=fine_spec, coords=children)


def dump_kept_voxels(path: str, coords: np.ndarray) -> None:
    """Debug dump: one 'x y z' integer triple per line."""
    np.savetxt(path, np.asarray(coords, dtype=np.int64), fmt="%d")
