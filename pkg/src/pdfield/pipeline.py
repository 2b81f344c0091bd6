"""Two-stage orchestration: densify the prior cloud, then fit the radiance field.

A run directory holds everything one (config, seed) produces::

    diffusion.ckpt  stage1_loss.csv  dense.ply
    field_<mode>.ckpt  stage2_loss_<mode>.csv
    renders/<mode>/NNN.png  metrics.csv  summary.csv  bench.csv  bench_sweep.csv

Stage 2 only reads stage-1 outputs. Every ablation mode gets its own field,
trained against the cloud that mode allows, with the radius derived once
from the dense cloud so modes differ only in the ablated module.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffusion import DiffusionConfig, TrainingDiverged, load_denoiser, train_diffusion, upsample_cloud
from .geometry import PointCloud, chamfer, load_ply, make_training_pair, normalize, sample_retentions, save_pair, save_ply
from .metrics import psnr, ssim
from .renderer import PDFField, RenderConfig, camera_rays, render_image, render_loss, render_rays, sample_fg
from .scene import PRESETS, Scene, SyntheticSceneSpec, gen_scene, save_png
from .spatial import SpatialIndex, default_radius

log = logging.getLogger(__name__)

MODES = ("none", "no-diffusion", "no-background", "neither")


class MissingCheckpointError(FileNotFoundError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class FieldConfig:
    geo_dim: int = 8
    feat_dim: int = 128
    hidden: int = 128
    fusion_layers: int = 4
    pos_freqs: int = 6
    dir_freqs: int = 3
    bg_freqs: int = 6


@dataclass
class Stage2Config:
    lr: float = 5e-4
    steps: int = 2000
    batch_rays: int = 256
    radius_factor: float = 2.0  # R = factor * mean NN spacing of the dense cloud
    log_every: int = 100


@dataclass
class SceneConfig:
    preset: str = "sphere-plane"
    n_views: int = 10
    width: int = 64
    height: int = 64
    n_surface_points: int = 4096
    subsample: float = 0.25
    jitter: float = 0.005

    def spec(self) -> SyntheticSceneSpec:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown scene preset {self.preset!r} (known: {', '.join(sorted(PRESETS))})")
        return PRESETS[self.preset](n_views=self.n_views, width=self.width, height=self.height,
                                    n_surface_points=self.n_surface_points, subsample=self.subsample,
                                    jitter=self.jitter)


@dataclass
class RunConfig:
    seed: int = 0
    diffusion: DiffusionConfig = dataclasses.field(default_factory=DiffusionConfig)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    stage2: Stage2Config = dataclasses.field(default_factory=Stage2Config)
    scene: SceneConfig = dataclasses.field(default_factory=SceneConfig)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = ("diffusion", "render", "field", "stage2", "scene")


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False, "1": True, "0": False}[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (ValueError, KeyError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def _override(obj, values: dict[str, str], section: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        changes[key] = _coerce(raw, getattr(obj, key), f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **changes)
    except ValueError as err:
        raise ConfigError(f"[{section}] {err}") from None


def load_config(path: str | Path | None = None, seed: int | None = None) -> RunConfig:
    """Defaults overridden by an INI file; ``seed`` overrides the file."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str  # keys are field names: T, K are case-sensitive
        if not parser.read(path):
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS + ("run",):
                raise ConfigError(f"unknown config section [{section}]")
        if parser.has_section("run"):
            cfg = _override(cfg, dict(parser["run"]), "run")
        for section in _SECTIONS:
            if parser.has_section(section):
                sub = _override(getattr(cfg, section), dict(parser[section]), section)
                cfg = dataclasses.replace(cfg, **{section: sub})
    if seed is not None:
        cfg.seed = seed
    cfg.diffusion = dataclasses.replace(cfg.diffusion, seed=cfg.seed)
    return cfg


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingCheckpointError(f"missing {what}: {path}")
    return path


# ---------------------------------------------------------------------------
# scene + stage 1


def make_scene(cfg: RunConfig, out: str | Path) -> Path:
    return gen_scene(cfg.scene.spec(), cfg.seed, out)


def prepare_pairs(cloud: PointCloud, count: int, out: str | Path, seed: int = 0,
                  low: float = 0.2, high: float = 1.0) -> list[Path]:
    """Write ``count`` nested-downsample pairs of the normalized ``cloud``."""
    rng = np.random.default_rng(seed)
    norm, _ = normalize(cloud)
    dirs = []
    for i in range(count):
        r1, r2 = sample_retentions(rng, low, high)
        d = Path(out) / f"pair_{i:03d}"
        save_pair(make_training_pair(norm, r1, r2, rng), d)
        dirs.append(d)
    return dirs


@dataclass
class Stage1Result:
    dense: PointCloud
    losses: list[float]
    chamfer_prior: float | None = None
    chamfer_dense: float | None = None


def run_stage1(scene: Scene, cfg: RunConfig, out: str | Path) -> Stage1Result:
    """Train the denoiser on the scene prior and write the upsampled cloud."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    norm, _ = normalize(scene.prior)
    res = train_diffusion(norm, cfg.diffusion, checkpoint=out / "diffusion.ckpt")
    _write_csv(out / "stage1_loss.csv", ["step", "loss"], enumerate(res.losses))
    dense = upsample_cloud(res.model, res.schedule, scene.prior, cfg.diffusion.upsample_factor,
                           seed=cfg.seed, chunk_size=cfg.diffusion.chunk_size or None)
    save_ply(dense, out / "dense.ply")
    result = Stage1Result(dense, res.losses)
    if scene.analytic is not None:
        result.chamfer_prior = chamfer(scene.prior.points, scene.analytic.points)
        result.chamfer_dense = chamfer(dense.points, scene.analytic.points)
        log.info("chamfer to surface: prior %.3g dense %.3g", result.chamfer_prior, result.chamfer_dense)
    return result


def upsample_file(checkpoint: str | Path, src: str | Path, dst: str | Path, factor: int = 4,
                  seed: int = 0, chunk_size: int | None = None) -> PointCloud:
    model, schedule, _ = load_denoiser(_require(Path(checkpoint), "diffusion checkpoint"))
    dense = upsample_cloud(model, schedule, load_ply(src), factor, seed, chunk_size)
    save_ply(dense, dst)
    return dense


# ---------------------------------------------------------------------------
# stage 2


def mode_flags(mode: str) -> tuple[bool, bool]:
    """(uses the dense cloud, uses the background branch) for an ablation mode."""
    if mode not in MODES:
        raise ValueError(f"unknown ablation mode {mode!r} (expected one of {', '.join(MODES)})")
    return mode in ("none", "no-background"), mode in ("none", "no-diffusion")


def shared_radius(cfg: RunConfig, run_dir: Path) -> float:
    if cfg.render.radius > 0:
        return cfg.render.radius
    dense = load_ply(_require(run_dir / "dense.ply", "dense cloud (run train-diffusion first)"))
    return default_radius(dense.points, cfg.stage2.radius_factor)


def mode_cloud(scene: Scene, run_dir: Path, mode: str) -> PointCloud:
    use_dense, _ = mode_flags(mode)
    if use_dense:
        return load_ply(_require(run_dir / "dense.ply", "dense cloud (run train-diffusion first)"))
    return scene.prior


def training_rays(scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    origins, dirs, colors = [], [], []
    for i in scene.train_ids:
        o, d = camera_rays(scene.cameras[i])
        origins.append(o)
        dirs.append(d)
        colors.append(scene.images[i].reshape(-1, 3))
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(colors)


def build_field(cfg: RunConfig, rng: np.random.Generator) -> PDFField:
    f = cfg.field
    return PDFField(rng, geo_dim=f.geo_dim, feat_dim=f.feat_dim, hidden=f.hidden, fusion_hidden=f.hidden,
                    fusion_layers=f.fusion_layers, pos_freqs=f.pos_freqs, dir_freqs=f.dir_freqs,
                    bg_freqs=f.bg_freqs)


def save_field(path: Path, fld: PDFField, meta: dict, state: dict | None = None) -> None:
    dc.save_checkpoint(path, state or fld.state_dict(), {"kind": "field", "arch": fld.arch, **meta})


def load_field(path: str | Path) -> tuple[PDFField, dict]:
    tensors, meta = dc.load_checkpoint(_require(Path(path), "field checkpoint"))
    if meta.get("kind") != "field":
        raise dc.CheckpointError(f"{path}: not a field checkpoint (kind={meta.get('kind')!r})")
    fld = PDFField(np.random.default_rng(0), **meta["arch"])
    fld.load_state_dict(tensors)
    return fld, meta


@dataclass
class Stage2Result:
    field: PDFField
    losses: list[float]
    radius: float
    retained: list[float]


def run_stage2(scene: Scene, cfg: RunConfig, run_dir: str | Path, mode: str = "none") -> Stage2Result:
    """Fit a field for one ablation mode; writes ``field_<mode>.ckpt`` and its loss CSV."""
    run_dir = Path(run_dir)
    use_dense, use_bg = mode_flags(mode)
    radius = shared_radius(cfg, run_dir)
    cloud = mode_cloud(scene, run_dir, mode)
    index = SpatialIndex(cloud.points)
    origins, dirs, colors = training_rays(scene)
    colors = colors.astype(np.float32)
    fld = build_field(cfg, np.random.default_rng([cfg.seed, 1]))
    params = fld.parameters()
    opt = dc.Adam(params, lr=cfg.stage2.lr)
    s2 = cfg.stage2
    meta = {"mode": mode, "radius": radius, "cloud": "dense.ply" if use_dense else "prior",
            "use_background": use_bg, "render": asdict(cfg.render), "seed": cfg.seed}
    ckpt = run_dir / f"field_{mode}.ckpt"
    losses, retained = [], []
    last_good = {k: p.data.copy() for k, p in params.items()}
    for step in range(s2.steps):
        # one generator per step keeps batches reproducible independent of history
        rng = np.random.default_rng([cfg.seed, 2, step])
        batch = rng.integers(0, len(origins), s2.batch_rays)
        opt.zero_grad()
        out = render_rays(fld, index, radius, origins[batch], dirs[batch], cfg.render, rng, use_background=use_bg)
        loss = render_loss(out.rgb, colors[batch])
        value = loss.item()
        if not math.isfinite(value):
            save_field(ckpt, fld, meta, state=last_good)
            raise TrainingDiverged(f"non-finite render loss at step {step} (mode {mode})")
        loss.backward()
        opt.step()
        last_good = {k: p.data.copy() for k, p in params.items()}
        losses.append(value)
        retained.append(out.retained_fraction)
        if s2.log_every and (step + 1) % s2.log_every == 0:
            log.info("field[%s] step %d/%d loss %.5f retained %.3f", mode, step + 1, s2.steps,
                     float(np.mean(losses[-s2.log_every:])), out.retained_fraction)
    save_field(ckpt, fld, meta)
    _write_csv(run_dir / f"stage2_loss_{mode}.csv", ["step", "loss", "retained_fraction"],
               ((i, f"{l:.8g}", f"{r:.6g}") for i, (l, r) in enumerate(zip(losses, retained))))
    return Stage2Result(fld, losses, radius, retained)


# ---------------------------------------------------------------------------
# render / eval / bench


def _loaded_mode(scene: Scene, run_dir: Path, mode: str):
    fld, meta = load_field(run_dir / f"field_{mode}.ckpt")
    cloud = mode_cloud(scene, run_dir, mode)
    rcfg = RenderConfig(**meta["render"])
    return fld, SpatialIndex(cloud.points), meta["radius"], rcfg, meta["use_background"]


def render_views(scene: Scene, run_dir: str | Path, mode: str = "none", views: list[int] | None = None
                 ) -> dict[int, np.ndarray]:
    run_dir = Path(run_dir)
    fld, index, radius, rcfg, use_bg = _loaded_mode(scene, run_dir, mode)
    views = scene.test_ids if views is None else views
    out_dir = run_dir / "renders" / mode
    out_dir.mkdir(parents=True, exist_ok=True)
    images = {}
    for v in views:
        if not 0 <= v < len(scene.cameras):
            raise IndexError(f"view {v} out of range (scene has {len(scene.cameras)})")
        img = render_image(fld, index, radius, scene.cameras[v], rcfg, use_background=use_bg)
        save_png(out_dir / f"{v:03d}.png", img)
        images[v] = img
    return images


def mean_color_baseline(scene: Scene) -> float:
    """Mean test PSNR of a constant image filled with the mean training colour."""
    mean = np.mean([scene.images[i].reshape(-1, 3).mean(axis=0) for i in scene.train_ids], axis=0)
    return float(np.mean([psnr(np.broadcast_to(mean, scene.images[i].shape), scene.images[i])
                          for i in scene.test_ids]))


@dataclass
class EvalResult:
    rows: list[dict]
    summary: dict[str, dict[str, float]]
    baseline_psnr: float


def evaluate(scene: Scene, run_dir: str | Path, modes=MODES) -> EvalResult:
    """Render every test view per mode; writes ``metrics.csv`` and ``summary.csv``."""
    run_dir = Path(run_dir)
    for mode in modes:
        mode_flags(mode)
        _require(run_dir / f"field_{mode}.ckpt", f"field checkpoint for mode {mode!r}")
    rows = []
    for mode in modes:
        for v, img in render_views(scene, run_dir, mode).items():
            rows.append({"view": v, "mode": mode, "psnr": psnr(img, scene.images[v]),
                         "ssim": ssim(img, scene.images[v])})
    summary = {m: {"psnr": float(np.mean([r["psnr"] for r in rows if r["mode"] == m])),
                   "ssim": float(np.mean([r["ssim"] for r in rows if r["mode"] == m]))} for m in modes}
    baseline = mean_color_baseline(scene)
    _write_csv(run_dir / "metrics.csv", ["view", "mode", "psnr", "ssim"],
               ([r["view"], r["mode"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}"] for r in rows))
    _write_csv(run_dir / "summary.csv", ["mode", "mean_psnr", "mean_ssim"],
               [[m, f"{s['psnr']:.6f}", f"{s['ssim']:.6f}"] for m, s in summary.items()]
               + [["mean-color-baseline", f"{baseline:.6f}", ""]])
    return EvalResult(rows, summary, baseline)


@dataclass
class BenchResult:
    radius: float
    retained_fraction: float
    queries_per_s: float
    rays_per_s_pruned: float
    rays_per_s_unpruned: float
    sweep: list[tuple[float, float]]

    @property
    def speedup(self) -> float:
        return self.rays_per_s_pruned / self.rays_per_s_unpruned


def _timed(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(scene: Scene, cfg: RunConfig, run_dir: str | Path, n_rays: int = 1024, repeats: int = 3,
          sweep_factors=(0.25, 0.5, 1.0, 2.0, 4.0)) -> BenchResult:
    """Sampling-space reduction and throughput on the test views.

    Uses the trained full-mode field when present; throughput does not
    depend on the weights, so a fresh field stands in otherwise.
    """
    run_dir = Path(run_dir)
    radius = shared_radius(cfg, run_dir)
    cloud = mode_cloud(scene, run_dir, "none")
    index = SpatialIndex(cloud.points)
    ckpt = run_dir / "field_none.ckpt"
    fld = load_field(ckpt)[0] if ckpt.exists() else build_field(cfg, np.random.default_rng(cfg.seed))
    rays = [camera_rays(scene.cameras[i]) for i in scene.test_ids]
    origins = np.concatenate([r[0] for r in rays])
    dirs = np.concatenate([r[1] for r in rays])
    rcfg = cfg.render

    retained = sample_fg(origins, dirs, rcfg, index, radius).retained_fraction
    sweep = [(f * radius, sample_fg(origins, dirs, rcfg, index, f * radius).retained_fraction)
             for f in sweep_factors]

    pick = np.random.default_rng(cfg.seed).choice(len(origins), min(n_rays, len(origins)), replace=False)
    o, d = origins[pick], dirs[pick]
    queries = (o[:, None, :] + d[:, None, :] * np.linspace(rcfg.near, rcfg.far, rcfg.n_fg_samples)[:, None]).reshape(-1, 3)
    q_time = _timed(lambda: index.query_radius(queries, radius, rcfg.K), repeats)
    with dc.no_grad():
        t_pruned = _timed(lambda: render_rays(fld, index, radius, o, d, rcfg, prune=True), repeats)
        t_full = _timed(lambda: render_rays(fld, index, radius, o, d, rcfg, prune=False), repeats)
    result = BenchResult(radius, retained, len(queries) / q_time, len(o) / t_pruned, len(o) / t_full, sweep)
    _write_csv(run_dir / "bench.csv",
               ["radius", "retained_fraction", "queries_per_s", "rays_per_s_pruned", "rays_per_s_unpruned", "speedup"],
               [[f"{radius:.6g}", f"{retained:.6f}", f"{result.queries_per_s:.1f}", f"{result.rays_per_s_pruned:.1f}",
                 f"{result.rays_per_s_unpruned:.1f}", f"{result.speedup:.3f}"]])
    _write_csv(run_dir / "bench_sweep.csv", ["radius", "retained_fraction"],
               ([f"{r:.6g}", f"{f:.6f}"] for r, f in sweep))
    return result
