"""Feature back-projection, similarity volumes, visibility, heads, losses."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rayfusion.errors import SidecarFormatError
from rayfusion.geometry import (
    CameraIntrinsics,
    SparseVoxelGrid,
    VoxelGridSpec,
)
from rayfusion.localfuse import (
    FeatureVolume,
    GroundTruthVisibility,
    LocalContext,
    VisibilityWeights,
    backproject_features,
    fuse_features,
    ground_truth_visibility,
    log_scale,
    loss_occupancy,
    loss_tsdf,
    loss_visibility,
    make_head,
    make_visibility_predictor,
    normalize_rows,
    pairwise_similarity,
    predict_local_heads,
    predict_visibility,
    read_head_sidecar,
    read_visibility_sidecar,
    view_similarity_scores,
    write_head_sidecar,
    write_visibility_sidecar,
)
from rayfusion.synth import (
    Box,
    GroundTruthScene,
    Sphere,
    builtin_scene,
    pose_look_at,
    synth_features,
)

INTR = CameraIntrinsics(fx=100.0, fy=100.0, cx=80.0, cy=60.0, width=160, height=120)


def small_grid(dims=(6, 6, 6), voxel=0.16, origin=(-0.48, -0.48, 0.52)):
    spec = VoxelGridSpec(origin=np.array(origin), voxel_size=voxel,
                         dims=np.array(dims), level=1)
    return SparseVoxelGrid.full(spec)


def orbit_cams(n=4):
    bundle = builtin_scene("sphere-orbit")
    return [(bundle.intrinsics, p) for p in bundle.poses[:n]], bundle.scene


# ---------------------------------------------------------------------------
# back-projection and similarity

def test_backproject_marks_out_of_view_invalid():
    grid = small_grid()
    pose = pose_look_at(np.array([0.0, 0.0, -1.0]), np.array([0.0, 0.0, 1.0]),
                        up=(0.0, -1.0, 0.0))
    behind = pose_look_at(np.array([0.0, 0.0, 5.0]), np.array([0.0, 0.0, 10.0]),
                          up=(0.0, -1.0, 0.0))
    fm = np.ones((120, 160, 4))
    fv = backproject_features(grid, [fm, fm], [(INTR, pose), (INTR, behind)])
    assert fv.valid[:, 0].all()
    assert not fv.valid[:, 1].any()
    assert np.all(fv.voxels[:, 1] == 0.0)


def test_backproject_bilinear_values():
    grid = small_grid()
    pose = pose_look_at(np.array([0.0, 0.0, -1.0]), np.array([0.0, 0.0, 1.0]),
                        up=(0.0, -1.0, 0.0))
    # feature = u coordinate: back-projected value must equal the projection
    uu = np.tile(np.arange(160.0), (120, 1))[..., None]
    fv = backproject_features(grid, [uu], [(INTR, pose)])
    from rayfusion.geometry import project_points
    pix, _, ok = project_points(INTR, pose, grid.centers())
    np.testing.assert_allclose(fv.voxels[ok, 0, 0], pix[ok, 0], atol=1e-9)


def test_pairwise_similarity_layout_and_range():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(5, 4, 8))
    fv = FeatureVolume(voxels=f, valid=np.ones((5, 4), dtype=bool))
    sv = pairwise_similarity(fv)
    assert sv.flat.shape == (5, 12)  # N(N-1) ordered pairs
    assert np.all(sv.flat >= -1.0 - 1e-12) and np.all(sv.flat <= 1.0 + 1e-12)
    # manual check of one entry: pair (m=2, n=0)
    idx = sv.pair_index(2, 0)
    a, b = f[3, 2], f[3, 0]
    expect = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    assert np.isclose(sv.flat[3, idx], expect)
    # symmetric counterpart holds the same value
    assert np.isclose(sv.flat[3, sv.pair_index(0, 2)], expect)


def test_pairwise_similarity_identical_and_zero_features():
    f = np.zeros((2, 3, 4))
    f[0, :, :] = [1.0, 2.0, 3.0, 4.0]  # identical across views
    fv = FeatureVolume(voxels=f, valid=np.ones((2, 3), dtype=bool))
    sv = pairwise_similarity(fv)
    np.testing.assert_allclose(sv.flat[0], 1.0)
    # zero-norm features produce similarity 0 and invalid pairs
    np.testing.assert_allclose(sv.flat[1], 0.0)
    assert not sv.pair_valid[1].any()


def test_fuse_features_weighted_sum():
    f = np.array([[[1.0, 0.0], [0.0, 2.0], [4.0, 4.0]]])
    fv = FeatureVolume(voxels=f, valid=np.ones((1, 3), dtype=bool))
    w = VisibilityWeights(w=np.array([[0.5, 0.5, 0.0]]))
    np.testing.assert_allclose(fuse_features(fv, w), [[0.5, 1.0]])


# ---------------------------------------------------------------------------
# ground-truth visibility

def test_ground_truth_visibility_occlusion_and_occupancy():
    # a wall hides a sphere from a camera behind it
    scene = GroundTruthScene(primitives=(
        Sphere(center=np.array([0.0, 0.0, 1.0]), radius=0.3),
        Box(center=np.array([0.0, 0.0, 2.0]), half=np.array([1.5, 1.5, 0.05])),
    ))
    spec = VoxelGridSpec(origin=np.array([-0.48, -0.48, 0.52]), voxel_size=0.16,
                         dims=np.array([6, 6, 6]), level=1)
    grid = SparseVoxelGrid.full(spec)
    front = pose_look_at(np.array([0.0, 0.0, -1.0]), np.array([0.0, 0.0, 1.0]),
                         up=(0.0, -1.0, 0.0))
    behind = pose_look_at(np.array([0.0, 0.0, 4.0]), np.array([0.0, 0.0, 1.0]),
                          up=(0.0, -1.0, 0.0))
    gt = ground_truth_visibility(grid, [(INTR, front), (INTR, behind)], scene,
                                 truncation=0.48)
    lam = 0.48
    sdf = scene.sdf(grid.centers())
    occupied = np.abs(sdf) < lam
    # empty voxels are invisible everywhere
    assert np.all(gt.binary[~occupied] == 0.0)
    # the front camera sees the front hemisphere voxels
    assert gt.binary[occupied, 0].sum() > 0
    # the wall blocks every occupied sphere voxel from the rear camera
    near_sphere = np.linalg.norm(grid.centers() - [0.0, 0.0, 1.0], axis=1) < 0.8
    assert np.all(gt.binary[occupied & near_sphere, 1] == 0.0)
    # normalized rows: all-zero or summing to one
    sums = gt.normalized.sum(axis=1)
    assert np.all(np.isclose(sums, 1.0) | (sums == 0.0))


def test_normalize_rows():
    w = np.array([[2.0, 2.0], [0.0, 0.0], [1.0, 3.0]])
    out = normalize_rows(w)
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.0, 0.0], [0.25, 0.75]])


# ---------------------------------------------------------------------------
# predictors

def oracle_setup():
    cams, scene = orbit_cams(4)
    spec = VoxelGridSpec(origin=np.array([-0.64, -0.64, 0.36]), voxel_size=0.16,
                         dims=np.array([8, 8, 8]), level=1)
    grid = SparseVoxelGrid.full(spec)
    fmaps = [synth_features(scene, intr, pose, 8) for intr, pose in cams]
    fv = backproject_features(grid, fmaps, cams)
    sv = pairwise_similarity(fv)
    ctx = LocalContext(grid=grid, cameras=cams, valid=fv.valid, truncation=0.48,
                       scene=scene, ray_stride=8)
    return grid, cams, scene, fv, sv, ctx


def test_heuristic_visibility_tracks_ground_truth():
    grid, cams, scene, fv, sv, ctx = oracle_setup()
    pred = predict_visibility(sv, make_visibility_predictor("heuristic"), ctx)
    gt = ground_truth_visibility(grid, cams, scene, truncation=0.48)
    sums = pred.w.sum(axis=1)
    assert np.all(np.isclose(sums, 1.0) | (sums == 0.0))
    # on mutually visible surface voxels the heuristic gives nonzero weight
    covis = gt.binary.sum(axis=1) >= 2
    assert covis.any()
    assert (pred.w[covis].sum(axis=1) > 0).mean() > 0.9


def test_oracle_visibility_predictor_matches_gt():
    grid, cams, scene, fv, sv, ctx = oracle_setup()
    pred = predict_visibility(sv, make_visibility_predictor("oracle"), ctx)
    gt = ground_truth_visibility(grid, cams, scene, truncation=0.48)
    # oracle weights are masked by back-projection validity then renormalized
    masked = normalize_rows(np.where(ctx.valid, gt.normalized, 0.0))
    np.testing.assert_allclose(pred.w, masked, atol=1e-12)


def test_view_similarity_scores_shape():
    _, _, _, _, sv, _ = oracle_setup()
    s = view_similarity_scores(sv)
    assert s.shape == (sv.flat.shape[0], sv.num_views)
    assert np.all(s >= 0.0) and np.all(s <= 1.0 + 1e-12)


def test_visibility_sidecar_roundtrip(tmp_path):
    w = np.random.default_rng(5).random((7, 3)).astype(np.float32)
    path = str(tmp_path / "w.vfw")
    write_visibility_sidecar(path, 2, w)
    level, back = read_visibility_sidecar(path)
    assert level == 2
    np.testing.assert_allclose(back, w.astype(np.float64))


def test_visibility_sidecar_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.vfw"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(SidecarFormatError):
        read_visibility_sidecar(str(path))


def test_external_visibility_predictor(tmp_path):
    grid, cams, scene, fv, sv, ctx = oracle_setup()
    gt = ground_truth_visibility(grid, cams, scene, truncation=0.48)
    path = str(tmp_path / "w.vfw")
    write_visibility_sidecar(path, 1, gt.normalized)
    pred = predict_visibility(
        sv, make_visibility_predictor("external", path=path), ctx)
    masked = normalize_rows(np.where(ctx.valid, gt.normalized.astype(np.float32)
                                     .astype(np.float64), 0.0))
    np.testing.assert_allclose(pred.w, masked, atol=1e-6)


# ---------------------------------------------------------------------------
# heads

def test_oracle_head_matches_analytic_tsdf():
    grid, cams, scene, fv, sv, ctx = oracle_setup()
    w = predict_visibility(sv, make_visibility_predictor("oracle"), ctx)
    fused = fuse_features(fv, w)
    pred = predict_local_heads(fused, w, sv, ctx, make_head("oracle"))
    sdf = scene.sdf(grid.centers())
    np.testing.assert_allclose(pred.tsdf, np.clip(sdf / 0.48, -1, 1), atol=1e-12)
    np.testing.assert_array_equal(pred.occupancy, (np.abs(sdf) < 0.48).astype(float))


def test_heuristic_head_separates_surface_from_empty():
    grid, cams, scene, fv, sv, ctx = oracle_setup()
    w = predict_visibility(sv, make_visibility_predictor("heuristic"), ctx)
    fused = fuse_features(fv, w)
    pred = predict_local_heads(fused, w, sv, ctx, make_head("heuristic"))
    gt = ground_truth_visibility(grid, cams, scene, truncation=0.48)
    visible = gt.binary.sum(axis=1) >= 2
    sdf = scene.sdf(grid.centers())
    far_empty = sdf > 0.8
    if visible.any() and far_empty.any():
        assert pred.occupancy[visible].mean() > pred.occupancy[far_empty].mean() + 0.3
    assert np.all(pred.tsdf >= -1.0) and np.all(pred.tsdf <= 1.0)


def test_head_sidecar_roundtrip(tmp_path):
    occ = np.random.default_rng(9).random(11)
    tsdf = np.random.default_rng(10).uniform(-1, 1, 11)
    path = str(tmp_path / "h.vfh")
    write_head_sidecar(path, 3, occ, tsdf)
    level, occ2, tsdf2 = read_head_sidecar(path)
    assert level == 3
    np.testing.assert_allclose(occ2, occ, atol=1e-6)
    np.testing.assert_allclose(tsdf2, tsdf, atol=1e-6)


def test_external_head(tmp_path):
    grid, cams, scene, fv, sv, ctx = oracle_setup()
    sdf = scene.sdf(grid.centers())
    occ = (np.abs(sdf) < 0.48).astype(float)
    tsdf = np.clip(sdf / 0.48, -1, 1)
    path = str(tmp_path / "h.vfh")
    write_head_sidecar(path, 1, occ, tsdf)
    w = VisibilityWeights(w=np.zeros_like(ctx.valid, dtype=float))
    pred = predict_local_heads(np.zeros((grid.num_voxels, 8)), w, sv, ctx,
                               make_head("external", path=path))
    np.testing.assert_allclose(pred.occupancy, occ, atol=1e-6)
    np.testing.assert_allclose(pred.tsdf, tsdf, atol=1e-6)


# ---------------------------------------------------------------------------
# losses

def test_loss_visibility_perfect_and_known_value():
    gt = GroundTruthVisibility(binary=np.array([[1.0, 1.0]]),
                               normalized=np.array([[0.5, 0.5]]))
    assert loss_visibility(VisibilityWeights(w=np.array([[0.5, 0.5]])), gt) == 0.0
    # mse of ([1,0] vs [.5,.5]) = (0.25 + 0.25)/2
    v = loss_visibility(VisibilityWeights(w=np.array([[1.0, 0.0]])), gt)
    assert np.isclose(v, 0.25)


def test_loss_occupancy_known_values():
    # perfect confident prediction: clamped at eps, near zero
    assert loss_occupancy(np.array([1.0, 0.0]), np.array([1.0, 0.0])) < 1e-6
    # p=0.5 everywhere: ln 2
    assert np.isclose(loss_occupancy(np.array([0.5, 0.5]), np.array([1.0, 0.0])),
                      np.log(2.0))
    # clamping keeps the worst case finite
    assert np.isfinite(loss_occupancy(np.array([0.0]), np.array([1.0])))


def test_log_scale_properties():
    x = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    y = log_scale(x)
    assert y[2] == 0.0
    np.testing.assert_allclose(y, -y[::-1])  # odd function
    np.testing.assert_allclose(y[3], np.log(2.0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20))
def test_loss_tsdf_zero_iff_equal(vals):
    v = np.array(vals)
    assert loss_tsdf(v, v) == 0.0
    assert loss_tsdf(v, np.clip(v + 0.5, -1, 1)) >= 0.0
