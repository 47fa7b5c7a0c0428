"""Per-fragment local fusion: back-projection, pairwise similarity volumes,
visibility-weighted feature aggregation, occupancy/TSDF heads, and the
associated evaluable losses.

The learned 3D CNN heads are replaced by pluggable deterministic predictors:
``oracle`` (ground truth from an analytic scene), ``heuristic`` (statistics
of the similarity volume), and ``external`` (precomputed values loaded from a
sidecar file).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, InvalidInputError, SidecarFormatError
from .geometry import (
    Camera,
    SparseVoxelGrid,
    bilinear_sample_many,
    project_points,
)
from .synth import GroundTruthScene, trace_rays

BCE_EPS = 1e-7
DEFAULT_TAU_VIS = 0.1
DEFAULT_LOGISTIC_GAIN = 10.0
DEFAULT_LOGISTIC_MID = 0.5

VIS_SIDECAR_MAGIC = b"VFW1"
HEAD_SIDECAR_MAGIC = b"VFH1"


@dataclass
class FeatureVolume:
    """Back-projected per-view features: (D, N, C) with a (D, N) validity mask."""

    voxels: np.ndarray
    valid: np.ndarray


@dataclass
class SimilarityVolume:
    """Flattened pairwise cosine similarities, (D, N*(N-1)).

    Row-major over ordered view pairs (m, n), m != n, diagonal removed.
    Entries whose pair involves an invalid view are 0 with pair_valid False.
    """

    flat: np.ndarray
    pair_valid: np.ndarray
    num_views: int

    def pair_index(self, m: int, n: int) -> int:
        if m == n:
            raise InvalidInputError("diagonal pairs are eliminated")
        return m * (self.num_views - 1) + (n if n < m else n - 1)


@dataclass
class VisibilityWeights:
    """Per-voxel per-view fusion weights; rows are all-zero or sum to 1."""

    w: np.ndarray  # (D, N) in [0, 1]


@dataclass
class LocalPrediction:
    occupancy: np.ndarray  # (D,) in [0, 1]
    tsdf: np.ndarray  # (D,) in [-1, 1]


@dataclass
class LocalContext:
    """Everything a predictor/head may need besides the similarity volume."""

    grid: SparseVoxelGrid
    cameras: list[Camera]
    valid: np.ndarray  # (D, N) back-projection validity
    truncation: float
    scene: GroundTruthScene | None = None
    d_max: float = 3.0
    ray_stride: int = 1


# ---------------------------------------------------------------------------
# feature volume construction

def backproject_features(
    grid: SparseVoxelGrid,
    feature_maps: Sequence[np.ndarray],
    cameras: Sequence[Camera],
) -> FeatureVolume:
    """Sample each view's feature map at the projection of every voxel center.

    Out-of-view voxels get zero features and a False mask entry.  The feature
    map resolution must match the (level-rescaled) intrinsics.
    """
    if len(feature_maps) != len(cameras):
        raise InvalidInputError("one feature map per camera required")
    centers = grid.centers()
    d = centers.shape[0]
    n = len(cameras)
    c = feature_maps[0].shape[2]
    voxels = np.zeros((d, n, c))
    valid = np.zeros((d, n), dtype=bool)
    for i, ((intr, pose), fm) in enumerate(zip(cameras, feature_maps)):
        if fm.shape[:2] != (intr.height, intr.width):
            raise InvalidInputError(
                f"feature map {i} is {fm.shape[:2]}, intrinsics say "
                f"{(intr.height, intr.width)}"
            )
        pix, _, ok = project_points(intr, pose, centers)
        # bilinear support ends at the last pixel row/column
        ok &= (pix[:, 0] <= intr.width - 1) & (pix[:, 1] <= intr.height - 1)
        if ok.any():
            voxels[ok, i] = bilinear_sample_many(fm, pix[ok])
        valid[:, i] = ok
    return FeatureVolume(voxels=voxels, valid=valid)


def pairwise_similarity(fv: FeatureVolume) -> SimilarityVolume:
    """Cosine similarity between every ordered pair of views, per voxel."""
    f = fv.voxels
    d, n, _ = f.shape
    norms = np.linalg.norm(f, axis=-1)
    nonzero = norms > 0
    unit = np.where(nonzero[..., None], f / np.maximum(norms, 1e-300)[..., None], 0.0)
    # single precision is plenty for cosine similarities and twice as fast
    unit = unit.astype(np.float32)
    sim = np.einsum("dmc,dnc->dmn", unit, unit).astype(np.float64)
    ok = fv.valid & nonzero
    pair_ok = ok[:, :, None] & ok[:, None, :]
    sim = np.clip(np.where(pair_ok, sim, 0.0), -1.0, 1.0)
    off = ~np.eye(n, dtype=bool)
    return SimilarityVolume(
        flat=sim[:, off].reshape(d, n * (n - 1)),
        pair_valid=pair_ok[:, off].reshape(d, n * (n - 1)),
        num_views=n,
    )


def fuse_features(fv: FeatureVolume, weights: VisibilityWeights) -> np.ndarray:
    """Visibility-weighted sum of per-view features, (D, C)."""
    if weights.w.shape != fv.voxels.shape[:2]:
        raise InvalidInputError("weights and feature volume shapes disagree")
    return np.einsum("dn,dnc->dc", weights.w, fv.voxels)


# ---------------------------------------------------------------------------
# ground-truth visibility

@dataclass
class GroundTruthVisibility:
    binary: np.ndarray  # (D, N) in {0, 1}
    normalized: np.ndarray  # (D, N), rows sum to 1 or are all-zero


def ground_truth_visibility(
    grid: SparseVoxelGrid,
    cameras: Sequence[Camera],
    scene: GroundTruthScene,
    truncation: float,
    occlusion_margin: float | None = None,
) -> GroundTruthVisibility:
    """A voxel is visible to a view iff it is occupied (|SDF| < truncation)
    and the segment from the camera to its center hits no surface more than
    half a voxel before it.  Empty and occluded voxels are invisible.
    """
    centers = grid.centers()
    d = centers.shape[0]
    n = len(cameras)
    margin = 0.5 * grid.spec.voxel_size if occlusion_margin is None else occlusion_margin
    occupied = np.abs(scene.sdf(centers)) < truncation
    binary = np.zeros((d, n))
    occ_idx = np.flatnonzero(occupied)
    for i, (intr, pose) in enumerate(cameras):
        if occ_idx.size == 0:
            break
        _, _, ok = project_points(intr, pose, centers[occ_idx])
        cand = occ_idx[ok]
        if cand.size == 0:
            continue
        delta = centers[cand] - pose.center
        dist = np.linalg.norm(delta, axis=-1)
        dirs = delta / dist[:, None]
        # trace only up to the occlusion margin in front of the voxel center;
        # any hit inside that range means the view is blocked
        _, occluded = trace_rays(scene, np.broadcast_to(pose.center, dirs.shape),
                                 dirs, t_max=dist - margin)
        binary[cand[~occluded], i] = 1.0
    return GroundTruthVisibility(binary=binary, normalized=normalize_rows(binary))


def normalize_rows(w: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; all-zero rows stay all-zero."""
    s = w.sum(axis=-1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w, dtype=float), where=s > 0)


# ---------------------------------------------------------------------------
# visibility predictors

class VisibilityPredictor:
    def __call__(self, sv: SimilarityVolume, ctx: LocalContext) -> VisibilityWeights:
        raise NotImplementedError


@dataclass
class OracleVisibilityPredictor(VisibilityPredictor):
    """Normalized ground-truth visibility; for pipeline verification."""

    def __call__(self, sv, ctx):
        if ctx.scene is None:
            raise ConfigError("oracle visibility needs a ground-truth scene")
        gt = ground_truth_visibility(ctx.grid, ctx.cameras, ctx.scene, ctx.truncation)
        return VisibilityWeights(w=gt.normalized)


@dataclass
class HeuristicVisibilityPredictor(VisibilityPredictor):
    """Similarity-statistics heuristic: a view scores the mean positive
    similarity against all other valid views; scores at or below tau are cut,
    the rest renormalized."""

    tau: float = DEFAULT_TAU_VIS

    def __call__(self, sv, ctx):
        scores = view_similarity_scores(sv)
        w = np.where(scores > self.tau, scores, 0.0)
        return VisibilityWeights(w=normalize_rows(w))


def view_similarity_scores(sv: SimilarityVolume) -> np.ndarray:
    """(D, N) mean over valid pairs (n, m) of max(similarity, 0)."""
    d = sv.flat.shape[0]
    n = sv.num_views
    pos = np.maximum(sv.flat, 0.0) * sv.pair_valid
    pos = pos.reshape(d, n, n - 1)
    cnt = sv.pair_valid.reshape(d, n, n - 1).sum(axis=-1)
    with np.errstate(invalid="ignore"):
        return np.where(cnt > 0, pos.sum(axis=-1) / np.maximum(cnt, 1), 0.0)


@dataclass
class ExternalVisibilityPredictor(VisibilityPredictor):
    """Weights precomputed elsewhere, loaded from a VFW1 sidecar file."""

    path: str

    def __call__(self, sv, ctx):
        level, w = read_visibility_sidecar(self.path)
        if w.shape != (ctx.grid.num_voxels, len(ctx.cameras)):
            raise SidecarFormatError(
                f"sidecar {self.path!r} carries {w.shape}, fragment needs "
                f"{(ctx.grid.num_voxels, len(ctx.cameras))}"
            )
        if ctx.grid.spec.level != level:
            raise SidecarFormatError(
                f"sidecar level {level} != grid level {ctx.grid.spec.level}"
            )
        w = np.where(ctx.valid, w, 0.0)
        return VisibilityWeights(w=normalize_rows(w))


def make_visibility_predictor(name: str, tau: float = DEFAULT_TAU_VIS,
                              path: str | None = None) -> VisibilityPredictor:
    if name == "oracle":
        return OracleVisibilityPredictor()
    if name == "heuristic":
        return HeuristicVisibilityPredictor(tau=tau)
    if name == "external":
        if path is None:
            raise ConfigError("external visibility predictor needs a sidecar path")
        return ExternalVisibilityPredictor(path=path)
    raise ConfigError(f"unknown visibility predictor {name!r}")


def predict_visibility(sv: SimilarityVolume, predictor: VisibilityPredictor,
                       ctx: LocalContext) -> VisibilityWeights:
    w = predictor(sv, ctx)
    w.w = np.where(ctx.valid, w.w, 0.0)
    w.w = normalize_rows(w.w)
    return w


def write_visibility_sidecar(path: str, level: int, w: np.ndarray) -> None:
    """Binary interchange format: 'VFW1', level, D, N (int32 LE), D*N f32."""
    w = np.asarray(w, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(VIS_SIDECAR_MAGIC)
        fh.write(struct.pack("<iii", level, w.shape[0], w.shape[1]))
        fh.write(w.astype("<f4").tobytes())


def read_visibility_sidecar(path: str) -> tuple[int, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != VIS_SIDECAR_MAGIC:
            raise SidecarFormatError(f"{path!r}: bad magic {magic!r}")
        level, d, n = struct.unpack("<iii", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != d * n:
        raise SidecarFormatError(f"{path!r}: truncated payload")
    return level, data.reshape(d, n).astype(np.float64)


# ---------------------------------------------------------------------------
# occupancy / TSDF heads

class LocalHead:
    def __call__(self, fused: np.ndarray, weights: VisibilityWeights,
                 sv: SimilarityVolume, ctx: LocalContext) -> LocalPrediction:
        raise NotImplementedError


@dataclass
class OracleHead(LocalHead):
    """Ground-truth occupancy and truncated SDF from the analytic scene."""

    def __call__(self, fused, weights, sv, ctx):
        if ctx.scene is None:
            raise ConfigError("oracle head needs a ground-truth scene")
        sdf = ctx.scene.sdf(ctx.grid.centers())
        occupancy = (np.abs(sdf) < ctx.truncation).astype(float)
        tsdf = np.clip(sdf / ctx.truncation, -1.0, 1.0)
        return LocalPrediction(occupancy=occupancy, tsdf=tsdf)


@dataclass
class HeuristicHead(LocalHead):
    """Logistic occupancy from similarity statistics, then projective TSDF
    fusion of per-ray depth estimates taken inside each ray's best window."""

    gain: float = DEFAULT_LOGISTIC_GAIN
    midpoint: float = DEFAULT_LOGISTIC_MID
    window: int = 9

    def __call__(self, fused, weights, sv, ctx):
        scores = view_similarity_scores(sv)
        s_bar = np.einsum("dn,dn->d", weights.w, scores)
        occupancy = expit(self.gain * (s_bar - self.midpoint))
        tsdf = _projective_tsdf_from_windows(occupancy, ctx, self.window)
        return LocalPrediction(occupancy=occupancy, tsdf=tsdf)


@dataclass
class ExternalHead(LocalHead):
    """Occupancy/TSDF activations loaded from a VFH1 sidecar file."""

    path: str

    def __call__(self, fused, weights, sv, ctx):
        level, occ, tsdf = read_head_sidecar(self.path)
        if occ.shape[0] != ctx.grid.num_voxels or level != ctx.grid.spec.level:
            raise SidecarFormatError(
                f"sidecar {self.path!r} does not match fragment level/size"
            )
        return LocalPrediction(occupancy=occ, tsdf=tsdf)


def _projective_tsdf_from_windows(occupancy: np.ndarray, ctx: LocalContext,
                                  window: int) -> np.ndarray:
    """Per view: estimate a depth per pixel ray as the occupancy-weighted mean
    voxel depth inside the ray's selected window, then fuse the estimates into
    a voxel TSDF with truncation; voxels with no observation default to +1."""
    from .sparsify import _ranges, _selected_window_entries, cast_fragment_rays

    grid = ctx.grid
    hits = cast_fragment_rays(grid, ctx.cameras, d_max=ctx.d_max, stride=ctx.ray_stride)
    d = grid.num_voxels
    if hits.entry_ray.size == 0:
        return np.ones(d)
    entries = _selected_window_entries(hits, occupancy, window)

    centers = grid.centers()
    num = np.zeros(d)
    cnt = np.zeros(d)
    lam = ctx.truncation
    for i, (intr, pose) in enumerate(ctx.cameras):
        lo = int(hits.view_ray_offsets[i])
        hi = int(hits.view_ray_offsets[i + 1])
        in_view = (hits.entry_ray[entries] >= lo) & (hits.entry_ray[entries] < hi)
        ent = entries[in_view]
        if ent.size == 0:
            continue
        rays = hits.entry_ray[ent]
        cam_z = (centers[hits.sparse_idx[ent]] @ pose.rotation.T + pose.translation)[:, 2]
        occ_e = occupancy[hits.sparse_idx[ent]]
        # occupancy-weighted mean depth per ray; empty-weight rays use the mean
        uniq, inv = np.unique(rays, return_inverse=True)
        wsum = np.bincount(inv, weights=occ_e, minlength=uniq.size)
        zsum = np.bincount(inv, weights=occ_e * cam_z, minlength=uniq.size)
        csum = np.bincount(inv, minlength=uniq.size)
        zmean = np.bincount(inv, weights=cam_z, minlength=uniq.size) / csum
        est = np.where(wsum > 0, zsum / np.maximum(wsum, 1e-300), zmean)

        # project every voxel into this view and read the nearest ray's estimate
        pix, z, ok = project_points(intr, pose, centers)
        rows, cols = hits.strided_dims[i]
        r = np.round(pix[:, 1] / hits.stride).astype(np.int64)
        c = np.round(pix[:, 0] / hits.stride).astype(np.int64)
        ok &= (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
        ray_id = r * cols + c  # view-local ray index
        est_map = np.full(hi - lo, np.nan)
        est_map[uniq - lo] = est
        vi = np.flatnonzero(ok)
        est_v = est_map[ray_id[vi]]
        have = ~np.isnan(est_v)
        vi = vi[have]
        sdf_est = est_v[have] - z[vi]
        inside_trunc = sdf_est >= -lam
        vi = vi[inside_trunc]
        num[vi] += np.clip(sdf_est[inside_trunc] / lam, -1.0, 1.0)
        cnt[vi] += 1.0
    return np.where(cnt > 0, num / np.maximum(cnt, 1), 1.0)


def make_head(name: str, path: str | None = None, gain: float = DEFAULT_LOGISTIC_GAIN,
              midpoint: float = DEFAULT_LOGISTIC_MID, window: int = 9) -> LocalHead:
    if name == "oracle":
        return OracleHead()
    if name == "heuristic":
        return HeuristicHead(gain=gain, midpoint=midpoint, window=window)
    if name == "external":
        if path is None:
            raise ConfigError("external head needs a sidecar path")
        return ExternalHead(path=path)
    raise ConfigError(f"unknown head mode {name!r}")


def predict_local_heads(fused: np.ndarray, weights: VisibilityWeights,
                        sv: SimilarityVolume, ctx: LocalContext,
                        head: LocalHead) -> LocalPrediction:
    pred = head(fused, weights, sv, ctx)
    pred.occupancy = np.clip(pred.occupancy, 0.0, 1.0)
    pred.tsdf = np.clip(pred.tsdf, -1.0, 1.0)
    return pred


def write_head_sidecar(path: str, level: int, occupancy: np.ndarray,
                       tsdf: np.ndarray) -> None:
    """Binary format: 'VFH1', level, D (int32 LE), D f32 occupancy, D f32 tsdf."""
    occ = np.asarray(occupancy, dtype="<f4")
    ts = np.asarray(tsdf, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(HEAD_SIDECAR_MAGIC)
        fh.write(struct.pack("<ii", level, occ.size))
        fh.write(occ.tobytes())
        fh.write(ts.tobytes())


def read_head_sidecar(path: str) -> tuple[int, np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != HEAD_SIDECAR_MAGIC:
            raise SidecarFormatError(f"{path!r}: bad magic {magic!r}")
        level, d = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != 2 * d:
        raise SidecarFormatError(f"{path!r}: truncated payload")
    return level, data[:d].astype(np.float64), data[d:].astype(np.float64)


# ---------------------------------------------------------------------------
# losses

def loss_visibility(pred: VisibilityWeights, gt: GroundTruthVisibility) -> float:
    """Mean squared error against row-normalized ground-truth visibility."""
    if pred.w.shape != gt.normalized.shape:
        raise InvalidInputError("shape mismatch")
    return float(np.mean((pred.w - gt.normalized) ** 2))


def loss_occupancy(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean binary cross entropy; predictions clamped to [eps, 1-eps]."""
    p = np.clip(np.asarray(pred, dtype=float), BCE_EPS, 1.0 - BCE_EPS)
    g = np.asarray(gt, dtype=float)
    return float(np.mean(-(g * np.log(p) + (1.0 - g) * np.log(1.0 - p))))


def log_scale(x: np.ndarray) -> np.ndarray:
    """sgn(x) * log(|x| + 1)."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.log1p(np.abs(x))


def loss_tsdf(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute difference of log-scaled TSDF values."""
    return float(np.mean(np.abs(log_scale(pred) - log_scale(gt))))
