"""Config parsing, end-to-end pipeline contracts, and the command line."""

import dataclasses
import json
import os

import numpy as np
import pytest

from rayfusion.cli import main as cli_main
from rayfusion.errors import ConfigError, EmptyResultError, InvalidInputError
from rayfusion.pipeline import (
    LOG_HEADER,
    PipelineConfig,
    Reconstructor,
    ablation_report,
    fragments_from_source,
    load_config,
    parse_config_text,
    run_pipeline,
)
from rayfusion.synth import builtin_scene


@pytest.fixture(scope="module")
def sphere_bundle():
    return builtin_scene("sphere-orbit")


# ---------------------------------------------------------------------------
# configuration

def test_default_config_validates():
    PipelineConfig().validate()


def test_parse_config_text_types_and_comments():
    cfg = parse_config_text(
        "# comment line\n"
        "n_views = 5          # trailing comment\n"
        "voxel_sizes = 0.2, 0.1, 0.05\n"
        "zero_residual = true\n"
        "strategy = topk\n"
        "theta = 0.25\n"
    )
    assert cfg.n_views == 5
    assert cfg.voxel_sizes == (0.2, 0.1, 0.05)
    assert cfg.zero_residual is True
    assert cfg.strategy == "topk"
    assert cfg.theta == 0.25
    # untouched fields keep their defaults
    assert cfg.window == 9 and cfg.predictor == "oracle"


def test_parse_config_unknown_key():
    with pytest.raises(ConfigError):
        parse_config_text("not_a_field = 3\n")
    with pytest.raises(ConfigError):
        parse_config_text("just a malformed line\n")


@pytest.mark.parametrize("line,field", [
    ("n_views = 1", "n_views"),
    ("window = 0", "window"),
    ("d_max = -1", "d_max"),
    ("voxel_sizes = 0.04, 0.08, 0.16", "voxel_sizes"),
    ("strategy = random", "strategy"),
    ("predictor = learned", "predictor"),
    ("theta = 1.5", "theta"),
    ("ray_stride = 0", "ray_stride"),
    ("mesh_boundary = hole", "mesh_boundary"),
])
def test_config_errors_name_the_field(line, field):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(line)
    assert field in str(exc.value)


def test_load_config_with_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 7\nstrategy = threshold\n")
    cfg = load_config(str(path), overrides={"strategy": "topk", "seed": 3})
    assert cfg.strategy == "topk" and cfg.seed == 3
    with pytest.raises(ConfigError):
        load_config(str(path), overrides={"bogus": 1})


def test_truncation_scales_with_level():
    cfg = PipelineConfig()
    for lvl, vs in zip((1, 2, 3), cfg.voxel_sizes):
        assert np.isclose(cfg.truncation(lvl), cfg.lambda_mult * vs)


# ---------------------------------------------------------------------------
# end-to-end contracts

def test_run_pipeline_outputs(tmp_path, sphere_bundle):
    out = run_pipeline(PipelineConfig(), str(tmp_path), scene_bundle=sphere_bundle)
    assert os.path.exists(out["mesh"])
    assert os.path.exists(out["log"])
    assert os.path.exists(out["metrics"])
    with open(out["metrics"], "r", encoding="utf-8") as fh:
        m = json.load(fh)
    for key in ("acc_cm", "comp_cm", "chamfer_cm", "prec", "recall", "fscore"):
        assert key in m
    assert out["chamfer_cm"] < 4.0


def test_fragment_log_format(tmp_path, sphere_bundle):
    out = run_pipeline(PipelineConfig(), str(tmp_path), scene_bundle=sphere_bundle)
    with open(out["log"], "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    assert lines[0] == LOG_HEADER
    n_cols = len(LOG_HEADER.split("\t"))
    assert len(lines) == 1 + out["fragments"]
    for line in lines[1:]:
        cols = line.split("\t")
        assert len(cols) == n_cols
        # voxel counts are integers and never grow after sparsification
        for lvl in range(3):
            total, kept = int(cols[1 + 2 * lvl]), int(cols[2 + 2 * lvl])
            assert 0 <= kept <= total
        float(cols[7])  # total loss present for synthetic scenes
        for c in cols[8:]:
            assert float(c) >= 0.0


def test_rerun_is_bitwise_reproducible(tmp_path, sphere_bundle):
    out_a = run_pipeline(PipelineConfig(seed=11), str(tmp_path / "a"),
                         scene_bundle=sphere_bundle)
    out_b = run_pipeline(PipelineConfig(seed=11), str(tmp_path / "b"),
                         scene_bundle=sphere_bundle)
    with open(out_a["mesh"], "rb") as fa, open(out_b["mesh"], "rb") as fb:
        assert fa.read() == fb.read()
    with open(out_a["metrics"], "rb") as fa, open(out_b["metrics"], "rb") as fb:
        assert fa.read() == fb.read()


def test_incremental_equals_batch(tmp_path, sphere_bundle):
    cfg = PipelineConfig()
    frags, scene = fragments_from_source(cfg, scene_bundle=sphere_bundle)
    assert len(frags) >= 1

    batch = Reconstructor(cfg, scene=scene)
    for f in frags:
        batch.feed_fragment(f)
    mesh_batch = batch.finalize()

    # a persistent engine that is inspected between fragments must converge
    # to the same surface
    online = Reconstructor(cfg, scene=scene)
    for f in frags:
        online.feed_fragment(f)
        online.finalize()  # mid-stream meshing must not disturb state
    mesh_online = online.finalize()

    np.testing.assert_array_equal(mesh_batch.vertices, mesh_online.vertices)
    np.testing.assert_array_equal(mesh_batch.triangles, mesh_online.triangles)


def test_zero_residual_copies_parent(sphere_bundle):
    cfg = PipelineConfig(zero_residual=True, compute_losses=False)
    frags, scene = fragments_from_source(cfg, scene_bundle=sphere_bundle)
    recon = Reconstructor(cfg, scene=scene)
    res = recon.feed_fragment(frags[0])
    for lvl in (2, 3):
        prev = res.levels[lvl - 1]
        committed = {tuple(c): v for c, v in
                     zip(prev.coords[prev.kept], prev.tsdf[prev.kept])}
        cur = res.levels[lvl]
        for coord, val in zip(cur.coords, cur.tsdf):
            expect = committed.get(tuple(coord // 2), 1.0)
            assert val == expect  # bitwise, no arithmetic drift allowed


def test_finalize_without_fragments():
    with pytest.raises(EmptyResultError):
        Reconstructor(PipelineConfig(feature_provider="constant")).finalize()


def test_fragments_from_source_exclusive(sphere_bundle):
    cfg = PipelineConfig()
    with pytest.raises(InvalidInputError):
        fragments_from_source(cfg)
    with pytest.raises(InvalidInputError):
        fragments_from_source(cfg, scene_bundle=sphere_bundle, dataset_dir="x")


def test_ablation_report_rows(tmp_path, sphere_bundle):
    cfg_a = PipelineConfig(strategy="sliding_window")
    cfg_b = PipelineConfig(strategy="topk")
    path = str(tmp_path / "ablation.csv")
    ablation_report([("window", cfg_a), ("topk", cfg_b)], path, sphere_bundle)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("label,strategy")
    assert lines[1].split(",")[0] == "window"
    assert lines[2].split(",")[0] == "topk"


def test_ablation_identical_configs_identical_metrics(tmp_path, sphere_bundle):
    cfg = PipelineConfig()
    path = str(tmp_path / "ablation.csv")
    ablation_report([("a", cfg), ("b", dataclasses.replace(cfg))],
                    path, sphere_bundle)
    with open(path, "r", encoding="utf-8") as fh:
        _, row_a, row_b = fh.read().splitlines()
    # all columns except label and wall-clock runtime must agree
    assert row_a.split(",")[1:-1] == row_b.split(",")[1:-1]


# ---------------------------------------------------------------------------
# command line

def test_cli_reconstruct_and_evaluate(tmp_path):
    out_dir = str(tmp_path / "run")
    rc = cli_main(["reconstruct", "--scene", "sphere-orbit", "--out", out_dir])
    assert rc == 0
    assert os.path.exists(os.path.join(out_dir, "mesh.ply"))
    assert os.path.exists(os.path.join(out_dir, "metrics.json"))
    assert os.path.exists(os.path.join(out_dir, "fragments.log"))

    metrics_out = str(tmp_path / "eval.json")
    rc = cli_main(["evaluate", "--pred", os.path.join(out_dir, "mesh.ply"),
                   "--gt", "sphere-orbit", "--threshold-cm", "5",
                   "--out", metrics_out])
    assert rc == 0
    with open(metrics_out, "r", encoding="utf-8") as fh:
        m = json.load(fh)
    assert m["threshold_cm"] == 5.0
    assert m["fscore"] > 0.9


def test_cli_reconstruct_with_config_and_flags(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("window = 5\nstrategy = threshold\n")
    out_dir = str(tmp_path / "run")
    rc = cli_main(["reconstruct", "--config", str(cfg_path),
                   "--scene", "sphere-orbit", "--out", out_dir,
                   "--strategy", "topk", "--seed", "4"])
    assert rc == 0
    assert os.path.exists(os.path.join(out_dir, "mesh.ply"))


def test_cli_ablate(tmp_path):
    cfg_dir = tmp_path / "cfgs"
    cfg_dir.mkdir()
    (cfg_dir / "base.cfg").write_text("strategy = sliding_window\n")
    (cfg_dir / "topk.cfg").write_text("strategy = topk\n")
    out_csv = str(tmp_path / "report.csv")
    rc = cli_main(["ablate", "--configs", str(cfg_dir),
                   "--scene", "sphere-orbit", "--out", out_csv])
    assert rc == 0
    with open(out_csv, "r", encoding="utf-8") as fh:
        assert len(fh.read().splitlines()) == 3


def test_cli_error_paths(tmp_path):
    rc = cli_main(["reconstruct", "--scene", "no-such-scene",
                   "--out", str(tmp_path / "x")])
    assert rc == 1
    rc = cli_main(["evaluate", "--pred", str(tmp_path / "missing.ply"),
                   "--gt", "sphere-orbit"])
    assert rc == 1
