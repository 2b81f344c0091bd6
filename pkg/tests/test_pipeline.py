import math
from pathlib import Path

import numpy as np
import pytest

from pdfield import pipeline as P
from pdfield.cli import main
from pdfield.diffcore import Tensor
from pdfield.diffusion import TrainingDiverged
from pdfield.geometry import load_ply, load_pair
from pdfield.scene import load_scene

ROOT = Path(__file__).resolve().parents[1]

TINY = """
[run]
seed = 3

[scene]
preset = unit-sphere
n_views = 3
width = 16
height = 16
n_surface_points = 400

[diffusion]
T = 20
reference_T = 1000
steps = 4
batch_size = 2
hidden = 16
code_dim = 8
point_hidden = 8
time_dim = 8
log_every = 0

[render]
n_fg_samples = 16
n_bg_samples = 8
near = 2.0
far = 5.0
bg_far = 100.0

[field]
feat_dim = 8
hidden = 16
pos_freqs = 2
bg_freqs = 2

[stage2]
steps = 4
batch_rays = 32
log_every = 0
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = root / "tiny.ini"
    cfg_path.write_text(TINY)
    scene, run = root / "scene", root / "run"
    common = ["--config", str(cfg_path)]
    assert main(["gen-scene", *common, "--out", str(scene)]) == 0
    assert main(["train-diffusion", *common, "--scene", str(scene), "--out", str(run)]) == 0
    dense_bytes = (run / "dense.ply").read_bytes()
    assert main(["train-renderer", *common, "--scene", str(scene), "--out", str(run), "--ablation", "all"]) == 0
    assert main(["eval", *common, "--scene", str(scene), "--out", str(run)]) == 0
    return {"cfg": cfg_path, "scene": scene, "run": run, "dense_bytes": dense_bytes}


def test_defaults_are_reference_values():
    cfg = P.load_config()
    d = cfg.diffusion
    assert (d.T, d.beta0, d.betaT, d.lr, d.reference_T) == (1000, 1e-4, 0.01, 2e-4, 0)
    assert cfg.render.K == 8 and cfg.stage2.lr == 5e-4
    assert (cfg.render.n_fg_samples, cfg.render.n_bg_samples) == (64, 64)
    assert d.upsample_factor == 4 and cfg.field.feat_dim == 128 and cfg.field.fusion_layers == 4


def test_toy_config_parses():
    cfg = P.load_config(ROOT / "configs" / "toy.ini", seed=7)
    assert cfg.seed == 7 and cfg.diffusion.seed == 7
    s = cfg.diffusion.schedule()
    assert s.T == 100 and s.alpha_bars[-1] < 0.01


@pytest.mark.parametrize("text, match", [
    ("[nope]\na = 1\n", "section"),
    ("[render]\nk = 8\n", "unknown key"),
    ("[render]\nK = eight\n", "cannot parse"),
    ("[render]\nnear = 5\nfar = 1\n", "near"),
])
def test_bad_config(tmp_path, text, match):
    (tmp_path / "c.ini").write_text(text)
    with pytest.raises(P.ConfigError, match=match):
        P.load_config(tmp_path / "c.ini")


def test_missing_config_file(tmp_path):
    with pytest.raises(P.ConfigError):
        P.load_config(tmp_path / "absent.ini")


def test_stage1_outputs(tiny):
    scene = load_scene(tiny["scene"])
    dense = load_ply(tiny["run"] / "dense.ply")
    assert len(dense) == 4 * len(scene.prior)
    assert np.array_equal(dense.points[: len(scene.prior)], scene.prior.points)
    assert (tiny["run"] / "diffusion.ckpt").exists()
    assert len(P.read_csv(tiny["run"] / "stage1_loss.csv")) == 4


def test_stage2_does_not_touch_stage1(tiny):
    assert (tiny["run"] / "dense.ply").read_bytes() == tiny["dense_bytes"]


def test_eval_tables(tiny):
    rows = P.read_csv(tiny["run"] / "metrics.csv")
    scene = load_scene(tiny["scene"])
    assert len(rows) == len(scene.test_ids) * len(P.MODES)
    assert {r["mode"] for r in rows} == set(P.MODES)
    summary = P.read_csv(tiny["run"] / "summary.csv")
    assert [r["mode"] for r in summary] == list(P.MODES) + ["mean-color-baseline"]
    for r in rows:
        assert math.isfinite(float(r["psnr"])) and -1 <= float(r["ssim"]) <= 1


def test_eval_reproducible(tiny, tmp_path):
    before = (tiny["run"] / "metrics.csv").read_bytes()
    assert main(["eval", "--config", str(tiny["cfg"]), "--scene", str(tiny["scene"]), "--out", str(tiny["run"])]) == 0
    assert (tiny["run"] / "metrics.csv").read_bytes() == before


def test_stage2_reproducible(tiny, tmp_path):
    cfg = P.load_config(tiny["cfg"])
    scene = load_scene(tiny["scene"])
    run = tmp_path / "run"
    run.mkdir()
    (run / "dense.ply").write_bytes(tiny["dense_bytes"])
    P.run_stage2(scene, cfg, run, "none")
    assert (run / "field_none.ckpt").read_bytes() == (tiny["run"] / "field_none.ckpt").read_bytes()


def test_ablation_modes_use_the_right_inputs(tiny):
    for mode in P.MODES:
        _, meta = P.load_field(tiny["run"] / f"field_{mode}.ckpt")
        dense, bg = P.mode_flags(mode)
        assert meta["cloud"] == ("dense.ply" if dense else "prior") and meta["use_background"] == bg
    radii = {P.load_field(tiny["run"] / f"field_{m}.ckpt")[1]["radius"] for m in P.MODES}
    assert len(radii) == 1


def test_render_writes_pngs(tiny):
    assert main(["render", "--config", str(tiny["cfg"]), "--scene", str(tiny["scene"]), "--out", str(tiny["run"]),
                 "--ablation", "no-background", "--views", "1", "2"]) == 0
    assert {"001.png", "002.png"} <= {p.name for p in (tiny["run"] / "renders" / "no-background").iterdir()}


def test_bench(tiny, capsys):
    assert main(["bench", "--config", str(tiny["cfg"]), "--scene", str(tiny["scene"]), "--out", str(tiny["run"]),
                 "--rays", "64"]) == 0
    row = P.read_csv(tiny["run"] / "bench.csv")[0]
    assert 0 <= float(row["retained_fraction"]) <= 1
    sweep = [float(r["retained_fraction"]) for r in P.read_csv(tiny["run"] / "bench_sweep.csv")]
    assert sweep == sorted(sweep)
    assert "speedup" in capsys.readouterr().out


def test_missing_checkpoint_is_one_line_error(tiny, tmp_path, capsys):
    code = main(["eval", "--config", str(tiny["cfg"]), "--scene", str(tiny["scene"]), "--out", str(tmp_path)])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 1 and len(err) == 1
    assert err[0].startswith("error: MissingCheckpointError:") and "field_none.ckpt" in err[0]


def test_bad_scene_path_is_one_line_error(tmp_path, capsys):
    assert main(["bench", "--scene", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err.count("\n") == 1


def test_upsample_and_pairs_commands(tiny, tmp_path):
    prior = tiny["scene"] / "prior.ply"
    assert main(["upsample", "--config", str(tiny["cfg"]), "--checkpoint", str(tiny["run"] / "diffusion.ckpt"),
                 "--input", str(prior), "--out", str(tmp_path / "d.ply"), "--factor", "3"]) == 0
    assert len(load_ply(tmp_path / "d.ply")) == 3 * len(load_ply(prior))
    assert main(["prepare-pairs", "--input", str(prior), "--out", str(tmp_path / "pairs"), "--count", "3"]) == 0
    pair = load_pair(tmp_path / "pairs" / "pair_002")
    assert 0.2 <= pair.r1 < 1 and 0.2 <= pair.r2 < 1


def test_stage2_nan_aborts_with_checkpoint(tiny, tmp_path, monkeypatch):
    cfg = P.load_config(tiny["cfg"])
    scene = load_scene(tiny["scene"])
    (tmp_path / "dense.ply").write_bytes(tiny["dense_bytes"])
    monkeypatch.setattr(P, "render_loss", lambda pred, gt: Tensor(np.nan))
    with pytest.raises(TrainingDiverged):
        P.run_stage2(scene, cfg, tmp_path, "neither")
    assert (tmp_path / "field_neither.ckpt").exists()


def test_stage2_requires_stage1(tiny, tmp_path):
    cfg = P.load_config(tiny["cfg"])
    with pytest.raises(P.MissingCheckpointError, match="dense"):
        P.run_stage2(load_scene(tiny["scene"]), cfg, tmp_path, "none")


def test_unknown_mode():
    with pytest.raises(ValueError):
        P.mode_flags("half")


def test_stage2_loss_decreases(tmp_path):
    cfg = P.load_config()
    cfg.scene = P.SceneConfig(preset="unit-sphere", n_views=3, width=16, height=16, n_surface_points=600)
    cfg.render = P.RenderConfig(n_fg_samples=16, n_bg_samples=8, near=2.0, far=5.0, bg_far=100.0)
    cfg.field = P.FieldConfig(feat_dim=16, hidden=32, pos_freqs=3, bg_freqs=2)
    cfg.stage2 = P.Stage2Config(steps=120, batch_rays=64, lr=2e-3, log_every=0)
    P.make_scene(cfg, tmp_path / "scene")
    scene = load_scene(tmp_path / "scene")
    from pdfield.geometry import save_ply
    save_ply(scene.analytic, tmp_path / "dense.ply")
    res = P.run_stage2(scene, cfg, tmp_path, "none")
    k = len(res.losses) // 10
    assert np.mean(res.losses[-k:]) < np.mean(res.losses[:k])
