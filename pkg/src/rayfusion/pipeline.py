"""Coarse-to-fine incremental reconstruction driver.

Per fragment and per level: back-project per-view features, build the
pairwise similarity volume, predict per-view visibility weights, fuse
features, predict occupancy/TSDF, sparsify along pixel rays, compose the
TSDF residual against the coarser level, fuse into the persistent global
volume through the recurrent unit, and hand the surviving voxels to the next
level.  After the last fragment the fine-level global TSDF is meshed.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyResultError, InvalidInputError
from .features import make_feature_provider
from .fragments import (
    Fragment,
    FrameRecord,
    assemble_fragments,
    frames_from_poses,
    load_dataset,
    select_keyframes,
)
from .geometry import CameraIntrinsics, SparseVoxelGrid
from .globalfuse import (
    GlobalVolume,
    GruParams,
    compose_residual,
    default_gru_params,
    gru_fuse,
    read_gru_sidecar,
    total_loss,
    update_global,
)
from .localfuse import (
    LocalContext,
    VisibilityWeights,
    backproject_features,
    fuse_features,
    ground_truth_visibility,
    loss_occupancy,
    loss_tsdf,
    loss_visibility,
    make_head,
    make_visibility_predictor,
    pairwise_similarity,
    predict_local_heads,
    predict_visibility,
)
from .mesh import TriangleMesh, export_ply, marching_cubes
from .metrics import compute_metrics, sample_mesh, write_metrics
from .sparsify import (
    cast_fragment_rays,
    sparsify_fragment,
    threshold_sparsify,
    topk_sparsify,
    upsample_voxels,
)
from .synth import (
    GroundTruthScene,
    SceneBundle,
    builtin_scene,
    gt_tsdf,
    load_scene_file,
    sample_scene_surface,
    visible_surface_mask,
)

logger = logging.getLogger(__name__)

LEVEL_SCALES = (0.25, 0.5, 1.0)
FRAGMENT_TIME_BUDGET_S = 0.5

_STRATEGIES = ("sliding_window", "topk", "threshold")
_MODES = ("oracle", "heuristic", "external")


@dataclass
class PipelineConfig:
    """All pipeline knobs; defaults are the reference operating point."""

    voxel_sizes: tuple[float, float, float] = (0.16, 0.08, 0.04)
    n_views: int = 9
    window: int = 9
    lambda_mult: float = 3.0
    d_max: float = 3.0
    t_thresh: float = 0.1
    r_thresh: float = 15.0
    loss_weights: tuple[float, float, float] = (1.0, 0.8, 0.64)
    feature_channels: tuple[int, int, int] = (24, 16, 8)
    predictor: str = "oracle"
    head: str = "oracle"
    feature_provider: str = "oracle"
    strategy: str = "sliding_window"
    theta: float = 0.5
    tau_vis: float = 0.1
    logistic_gain: float = 10.0
    logistic_mid: float = 0.5
    ray_stride: int = 1
    metric_threshold_cm: float = 5.0
    sample_density: float = 10000.0
    seed: int = 0
    zero_residual: bool = False
    mesh_boundary: str = "trim"
    compute_losses: bool = True
    visibility_sidecar: str = ""
    head_sidecar: str = ""
    gru_sidecar: str = ""

    def validate(self) -> None:
        if len(self.voxel_sizes) != 3 or any(v <= 0 for v in self.voxel_sizes):
            raise ConfigError("voxel_sizes must be three positive lengths")
        if any(a <= b for a, b in zip(self.voxel_sizes, self.voxel_sizes[1:])):
            raise ConfigError("voxel_sizes must be strictly decreasing")
        if self.n_views < 2:
            raise ConfigError("n_views must be at least 2")
        if self.window < 1:
            raise ConfigError("window must be at least 1")
        if self.lambda_mult <= 0:
            raise ConfigError("lambda_mult must be positive")
        if self.d_max <= 0:
            raise ConfigError("d_max must be positive")
        if self.t_thresh <= 0 or self.r_thresh <= 0:
            raise ConfigError("t_thresh and r_thresh must be positive")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be three non-negative numbers")
        if len(self.feature_channels) != 3 or any(c < 3 for c in self.feature_channels):
            raise ConfigError("feature_channels must be three integers >= 3")
        if self.strategy not in _STRATEGIES:
            raise ConfigError(f"strategy must be one of {_STRATEGIES}")
        if self.predictor not in _MODES:
            raise ConfigError(f"predictor must be one of {_MODES}")
        if self.head not in _MODES:
            raise ConfigError(f"head must be one of {_MODES}")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        if self.ray_stride < 1:
            raise ConfigError("ray_stride must be at least 1")
        if self.metric_threshold_cm <= 0:
            raise ConfigError("metric_threshold_cm must be positive")
        if self.sample_density <= 0:
            raise ConfigError("sample_density must be positive")
        if self.mesh_boundary not in ("open", "close", "trim"):
            raise ConfigError("mesh_boundary must be 'open', 'close' or 'trim'")

    def truncation(self, level: int) -> float:
        return self.lambda_mult * self.voxel_sizes[level - 1]


_TUPLE_FIELDS = {"voxel_sizes", "loss_weights", "feature_channels"}
_BOOL_FIELDS = {"zero_residual", "compute_losses"}


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Flat ``key = value`` config format; '#' starts a comment."""
    cfg = dataclasses.replace(base) if base else PipelineConfig()
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not sep or key not in fields:
            raise ConfigError(f"unknown or malformed config line {line!r}")
        setattr(cfg, key, _coerce(key, val))
    cfg.validate()
    return cfg


def _coerce(key: str, val: str):
    if key in _TUPLE_FIELDS:
        parts = [float(x) for x in val.split(",")]
        if key == "feature_channels":
            return tuple(int(x) for x in parts)
        return tuple(parts)
    if key in _BOOL_FIELDS:
        if val.lower() in ("1", "true", "yes"):
            return True
        if val.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {val!r}")
    current = getattr(PipelineConfig(), key)
    if isinstance(current, bool):
        return val.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(val)
    if isinstance(current, float):
        return float(val)
    return val


def load_config(path: str, overrides: dict | None = None) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = parse_config_text(fh.read())
    if overrides:
        for k, v in overrides.items():
            if not hasattr(cfg, k):
                raise ConfigError(f"unknown config field {k!r}")
            setattr(cfg, k, v)
        cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# per-fragment results

@dataclass
class LevelResult:
    level: int
    coords: np.ndarray  # grid coordinates before sparsification
    occupancy: np.ndarray
    tsdf: np.ndarray  # composed TSDF on the full level grid
    kept: np.ndarray  # bool mask over coords
    losses: dict[str, float] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


@dataclass
class FragmentResult:
    index: int
    levels: dict[int, LevelResult]
    total_loss: float | None
    wall_clock_s: float


class Reconstructor:
    """Stateful fragment-by-fragment reconstruction engine."""

    def __init__(self, config: PipelineConfig, scene: GroundTruthScene | None = None):
        config.validate()
        self.config = config
        self.scene = scene
        # one hidden-state volume per level (feature widths differ)
        self.volumes = {
            lvl: GlobalVolume(width=config.feature_channels[lvl - 1])
            for lvl in (1, 2, 3)
        }
        self.gru = {
            lvl: self._gru_params(lvl, config.feature_channels[lvl - 1])
            for lvl in (1, 2, 3)
        }
        self.results: list[FragmentResult] = []
        self._provider = make_feature_provider(config.feature_provider,
                                               scene=scene, d_max=config.d_max)

    def _gru_params(self, level: int, width: int) -> GruParams:
        if self.config.gru_sidecar:
            path = self.config.gru_sidecar.replace("{level}", str(level))
            lvl, params = read_gru_sidecar(path)
            if params.width != width:
                raise ConfigError(f"gru_sidecar width {params.width} != {width}")
            return params
        return default_gru_params(width)

    def _cameras(self, fragment: Fragment, level: int):
        scale = LEVEL_SCALES[level - 1]
        return [(intr.scaled(scale), pose) for intr, pose in fragment.cameras]

    def _predictor(self, level: int):
        cfg = self.config
        path = cfg.visibility_sidecar.replace("{level}", str(level)) or None
        return make_visibility_predictor(cfg.predictor, tau=cfg.tau_vis, path=path)

    def _head(self, level: int):
        cfg = self.config
        path = cfg.head_sidecar.replace("{level}", str(level)) or None
        return make_head(cfg.head, path=path, gain=cfg.logistic_gain,
                         midpoint=cfg.logistic_mid, window=cfg.window)

    def feed_fragment(self, fragment: Fragment) -> FragmentResult:
        cfg = self.config
        t_start = time.perf_counter()
        levels: dict[int, LevelResult] = {}
        grid = SparseVoxelGrid.full(fragment.fbv[1])
        prev: LevelResult | None = None
        for lvl in (1, 2, 3):
            res = self._process_level(fragment, lvl, grid, prev)
            levels[lvl] = res
            if lvl < 3:
                kept_coords = res.coords[res.kept]
                grid = upsample_voxels(kept_coords, fragment.fbv[lvl],
                                       fragment.fbv[lvl + 1])
            prev = res

        loss = None
        if self.scene is not None and cfg.compute_losses:
            loss = total_loss({l: r.losses for l, r in levels.items()},
                              weights=cfg.loss_weights)
        wall = time.perf_counter() - t_start
        coarse_time = sum(levels[1].timings.values())
        if coarse_time > FRAGMENT_TIME_BUDGET_S:
            logger.warning(
                "fragment %d coarse level took %.0f ms (budget %.0f ms)",
                fragment.index, 1e3 * coarse_time, 1e3 * FRAGMENT_TIME_BUDGET_S,
            )
        result = FragmentResult(index=fragment.index, levels=levels,
                                total_loss=loss, wall_clock_s=wall)
        self.results.append(result)
        return result

    def _process_level(self, fragment: Fragment, lvl: int,
                       grid: SparseVoxelGrid, prev: LevelResult | None) -> LevelResult:
        cfg = self.config
        cams = self._cameras(fragment, lvl)
        lam = cfg.truncation(lvl)
        channels = cfg.feature_channels[lvl - 1]
        timings: dict[str, float] = {}

        t0 = time.perf_counter()
        fmaps = [self._provider.maps(f, cam[0], channels)
                 for f, cam in zip(fragment.keyframes, cams)]
        fv = backproject_features(grid, fmaps, cams)
        timings["backproject"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        sv = pairwise_similarity(fv)
        timings["similarity"] = time.perf_counter() - t0

        ctx = LocalContext(grid=grid, cameras=cams, valid=fv.valid, truncation=lam,
                           scene=self.scene, d_max=cfg.d_max,
                           ray_stride=cfg.ray_stride)

        t0 = time.perf_counter()
        gt_vis = None
        if self.scene is not None and (cfg.predictor == "oracle" or cfg.compute_losses):
            gt_vis = ground_truth_visibility(grid, cams, self.scene, lam)
        if cfg.predictor == "oracle" and gt_vis is not None:
            weights = VisibilityWeights(w=gt_vis.normalized.copy())
            weights.w = np.where(ctx.valid, weights.w, 0.0)
            from .localfuse import normalize_rows
            weights.w = normalize_rows(weights.w)
        else:
            weights = predict_visibility(sv, self._predictor(lvl), ctx)
        timings["visibility"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        fused = fuse_features(fv, weights)
        pred = predict_local_heads(fused, weights, sv, ctx, self._head(lvl))
        timings["heads"] = time.perf_counter() - t0

        # residual TSDF against the committed coarser level of this fragment
        t0 = time.perf_counter()
        if prev is None:
            tsdf = pred.tsdf.copy()
        else:
            base, missing = self._parent_lookup(prev, grid)
            if missing:
                logger.info("level %d: %d voxels lack a committed parent", lvl, missing)
            delta = np.zeros_like(base) if cfg.zero_residual else pred.tsdf - base
            tsdf = compose_residual(base, delta)
        timings["residual"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        hits = cast_fragment_rays(grid, cams, d_max=cfg.d_max, stride=cfg.ray_stride)
        # grade plateau occupancies by surface proximity so each ray's best
        # window centers on the zero crossing instead of the run entry
        score = pred.occupancy * (1.0 - 0.5 * np.abs(tsdf))
        if cfg.strategy == "sliding_window":
            kept = sparsify_fragment(grid, score, cams, window=cfg.window, hits=hits)
        elif cfg.strategy == "topk":
            kept = topk_sparsify(grid, score, cams, k=cfg.window, hits=hits)
        else:
            kept = threshold_sparsify(pred.occupancy, cfg.theta)
        timings["sparsify"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        kept_coords = grid.coords[kept]
        # the FBV origin snaps to coarse-voxel multiples, so local coordinates
        # translate to a world-aligned lattice shared by all fragments
        offset = np.round(grid.spec.origin / grid.spec.voxel_size).astype(np.int64)
        world_coords = kept_coords + offset
        volume = self.volumes[lvl]
        hidden = volume.lookup_hidden(lvl, world_coords)
        fused_hidden = gru_fuse(fused[kept], hidden, self.gru[lvl])
        update_global(volume, lvl, world_coords, fused_hidden, tsdf[kept])
        timings["gru"] = time.perf_counter() - t0

        losses: dict[str, float] = {}
        if self.scene is not None and cfg.compute_losses and gt_vis is not None:
            centers = grid.centers()
            gt_t, gt_o = gt_tsdf(self.scene, centers, lam)
            losses["visibility"] = loss_visibility(weights, gt_vis)
            losses["occupancy"] = loss_occupancy(pred.occupancy, gt_o.astype(float))
            losses["tsdf"] = loss_tsdf(pred.tsdf, gt_t)
            if kept.any():
                g_vals, _ = volume.lookup_tsdf(lvl, world_coords)
                losses["global_occupancy"] = loss_occupancy(
                    pred.occupancy[kept], gt_o[kept].astype(float))
                losses["global_tsdf"] = loss_tsdf(g_vals, gt_t[kept])
            else:
                losses["global_occupancy"] = 0.0
                losses["global_tsdf"] = 0.0

        return LevelResult(level=lvl, coords=grid.coords, occupancy=pred.occupancy,
                           tsdf=tsdf, kept=kept, losses=losses, timings=timings)

    def _parent_lookup(self, prev: LevelResult, grid: SparseVoxelGrid
                       ) -> tuple[np.ndarray, int]:
        """Committed TSDF of each voxel's parent on the previous level.

        Parents absent from the previous level's committed set default to +1
        (empty space).
        """
        parents = grid.coords // 2
        committed = {tuple(c): v for c, v in
                     zip(prev.coords[prev.kept], prev.tsdf[prev.kept])}
        base = np.ones(grid.num_voxels)
        missing = 0
        for i, key in enumerate(map(tuple, parents)):
            v = committed.get(key)
            if v is None:
                missing += 1
            else:
                base[i] = v
        return base, missing

    def finalize(self, boundary: str | None = None) -> TriangleMesh:
        """Mesh the fine-level global TSDF accumulated so far."""
        if not self.results:
            raise EmptyResultError("no fragments were processed")
        tsdf = self.volumes[3].tsdf_dict(3)
        from .geometry import VoxelGridSpec

        # global coordinates live on the world lattice anchored at the origin
        spec = VoxelGridSpec(origin=np.zeros(3),
                             voxel_size=self.config.voxel_sizes[2],
                             dims=np.array([1, 1, 1]), level=3)
        return marching_cubes(tsdf, spec, boundary=boundary or self.config.mesh_boundary)


# ---------------------------------------------------------------------------
# end-to-end driver

def fragments_from_source(config: PipelineConfig,
                          scene_bundle: SceneBundle | None = None,
                          dataset_dir: str | None = None,
                          ) -> tuple[list[Fragment], GroundTruthScene | None]:
    if (scene_bundle is None) == (dataset_dir is None):
        raise InvalidInputError("provide exactly one of scene_bundle or dataset_dir")
    if scene_bundle is not None:
        frames = frames_from_poses(scene_bundle.poses, scene_bundle.intrinsics)
        scene = scene_bundle.scene
    else:
        frames = load_dataset(dataset_dir)
        scene = None
    kf_ids = select_keyframes(frames, t_thresh=config.t_thresh,
                              r_thresh=config.r_thresh)
    by_id = {f.frame_id: f for f in frames}
    keyframes = [by_id[i] for i in kf_ids]
    frags = assemble_fragments(keyframes, n_views=config.n_views,
                               d_max=config.d_max, voxel_sizes=config.voxel_sizes)
    return frags, scene


def _format_log_line(r: FragmentResult) -> str:
    cols = [str(r.index)]
    for lvl in (1, 2, 3):
        lr = r.levels[lvl]
        cols.append(str(len(lr.coords)))
        cols.append(str(int(lr.kept.sum())))
    cols.append("" if r.total_loss is None else f"{r.total_loss:.6f}")
    for lvl in (1, 2, 3):
        cols.append(f"{sum(r.levels[lvl].timings.values()):.4f}")
    cols.append(f"{r.wall_clock_s:.4f}")
    return "\t".join(cols)


LOG_HEADER = ("# fragment\tL1_voxels\tL1_kept\tL2_voxels\tL2_kept\t"
              "L3_voxels\tL3_kept\ttotal_loss\tL1_s\tL2_s\tL3_s\twall_s")


def run_pipeline(config: PipelineConfig, out_dir: str,
                 scene_bundle: SceneBundle | None = None,
                 dataset_dir: str | None = None,
                 gt_points: np.ndarray | None = None) -> dict:
    """Run the full stream and write mesh.ply, metrics.json, fragments.log."""
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    frags, scene = fragments_from_source(config, scene_bundle, dataset_dir)
    recon = Reconstructor(config, scene=scene)
    log_lines = [LOG_HEADER]
    for frag in frags:
        res = recon.feed_fragment(frag)
        log_lines.append(_format_log_line(res))
    mesh = recon.finalize()
    mesh_path = os.path.join(out_dir, "mesh.ply")
    export_ply(mesh, mesh_path)
    with open(os.path.join(out_dir, "fragments.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(log_lines) + "\n")
    out = {"mesh": mesh_path, "fragments": len(frags),
           "log": os.path.join(out_dir, "fragments.log")}

    if scene_bundle is not None or gt_points is not None:
        if gt_points is None:
            cams = [(f.intrinsics, f.pose) for frag in frags for f in frag.keyframes]
            gt_points = reference_surface_points(scene_bundle, config, cameras=cams)
        pred_points = sample_mesh(mesh, density=config.sample_density,
                                  seed=config.seed + 1)
        if len(pred_points) and len(gt_points):
            metrics = compute_metrics(pred_points, gt_points,
                                      threshold_cm=config.metric_threshold_cm)
            metrics_path = os.path.join(out_dir, "metrics.json")
            write_metrics(metrics, metrics_path)
            out["metrics"] = metrics_path
            out["chamfer_cm"] = metrics.chamfer_cm
            out["fscore"] = metrics.fscore
    return out


def reference_surface_points(bundle: SceneBundle, config: PipelineConfig,
                             n_points: int = 200000,
                             cameras: list | None = None) -> np.ndarray:
    """Analytic surface samples restricted to what the rig could observe.

    Points never seen unoccluded within d_max by any camera are excluded so
    completeness measures the reachable surface only.  Pass ``cameras`` to
    restrict visibility to the keyframes the pipeline actually consumed.
    """
    rng = np.random.default_rng(config.seed + 2)
    pts = sample_scene_surface(bundle.scene, n_points, rng)
    cams = cameras if cameras is not None else [
        (bundle.intrinsics, p) for p in bundle.poses
    ]
    mask = visible_surface_mask(bundle.scene, pts, cams, d_max=config.d_max)
    return pts[mask]


def ablation_report(runs: list[tuple[str, PipelineConfig]], out_csv: str,
                    scene_bundle: SceneBundle) -> None:
    """One CSV row per configuration over the same scene."""
    import csv

    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "strategy", "predictor", "head",
                    "acc_cm", "comp_cm", "chamfer_cm", "prec", "recall", "fscore",
                    "fine_voxels", "runtime_s"])
        for label, cfg in runs:
            import tempfile

            with tempfile.TemporaryDirectory() as tmp:
                t0 = time.perf_counter()
                out = run_pipeline(cfg, tmp, scene_bundle=scene_bundle)
                runtime = time.perf_counter() - t0
                from .metrics import read_metrics

                if "metrics" in out:
                    m = read_metrics(out["metrics"])
                    vals = [f"{m.acc_cm:.4f}", f"{m.comp_cm:.4f}",
                            f"{m.chamfer_cm:.4f}", f"{m.prec:.4f}",
                            f"{m.recall:.4f}", f"{m.fscore:.4f}"]
                else:
                    vals = [""] * 6
                with open(out["log"], "r", encoding="utf-8") as lf:
                    lines = [l for l in lf.read().splitlines()
                             if l and not l.startswith("#")]
                fine = sum(int(l.split("\t")[6]) for l in lines)
                w.writerow([label, cfg.strategy, cfg.predictor, cfg.head]
                           + vals + [fine, f"{runtime:.2f}"])
