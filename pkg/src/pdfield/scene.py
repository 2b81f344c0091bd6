"""Synthetic oracle scenes and the on-disk scene layout.

A scene directory holds::

    cameras.json    list of {fx, fy, cx, cy, width, height, c2w (3x4), image}
    images/*.png    8-bit ground-truth views
    analytic.ply    dense samples of the true surfaces (synthetic scenes only)
    prior.ply       sparse, jittered cloud standing in for an SfM reconstruction
    scene.json      generator parameters and bounds (synthetic scenes only)

Real captures only need ``cameras.json``, the images and ``prior.ply``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import PointCloud, load_ply, random_downsample, save_ply
from .renderer import Camera, camera_rays, look_at


@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]


@dataclass
class Box:
    center: tuple[float, float, float]
    half_size: tuple[float, float, float]
    albedo: tuple[float, float, float]


@dataclass
class GroundPlane:
    height: float = 0.0
    albedo: tuple[float, float, float] = (0.55, 0.55, 0.5)
    # checker texture on the sampled patch only; the plane itself is infinite
    checker_size: float = 0.25
    checker_albedo: tuple[float, float, float] = (0.85, 0.82, 0.7)
    patch_half_extent: float = 1.0


@dataclass
class SyntheticSceneSpec:
    spheres: list[Sphere] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    ground: GroundPlane | None = None
    light_dir: tuple[float, float, float] = (0.4, -0.3, 0.85)
    ambient: float = 0.3
    sky_horizon: tuple[float, float, float] = (0.85, 0.9, 1.0)
    sky_zenith: tuple[float, float, float] = (0.3, 0.5, 0.9)
    n_views: int = 10
    orbit_radius: float = 2.2
    orbit_height: float = 0.9
    look_target: tuple[float, float, float] = (0.0, 0.0, 0.3)
    fov_deg: float = 50.0
    width: int = 64
    height: int = 64
    n_surface_points: int = 4096
    subsample: float = 0.25
    jitter: float = 0.005
    bound: float = 1.5  # primitives must fit in [-bound, bound]^3

    def validate(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ValueError("image resolution must be at least 16x16")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample fraction must lie in (0, 1]")
        for s in self.spheres:
            if np.any(np.abs(np.asarray(s.center)) + s.radius > self.bound):
                raise ValueError(f"sphere {s} extends outside the scene bounds")
        for b in self.boxes:
            if np.any(np.abs(np.asarray(b.center)) + np.asarray(b.half_size) > self.bound):
                raise ValueError(f"box {b} extends outside the scene bounds")
        if self.ground is not None and (self.ground.patch_half_extent > self.bound
                                        or abs(self.ground.height) > self.bound):
            raise ValueError("ground patch extends outside the scene bounds")
        if not (self.spheres or self.boxes or self.ground):
            raise ValueError("scene has no primitives")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        def tup(x: dict) -> dict:
            # JSON has no tuples; restore them so round-trips compare equal
            return {k: tuple(v) if isinstance(v, list) else v for k, v in x.items()}

        d = tup(d)
        d["spheres"] = [Sphere(**tup(s)) for s in d.get("spheres", ())]
        d["boxes"] = [Box(**tup(b)) for b in d.get("boxes", ())]
        d["ground"] = GroundPlane(**tup(d["ground"])) if d.get("ground") else None
        return cls(**d)


def sphere_plane_scene(**overrides) -> SyntheticSceneSpec:
    """Default toy scene: two spheres resting on a textured ground plane."""
    spec = SyntheticSceneSpec(
        spheres=[Sphere((0.0, 0.0, 0.4), 0.4, (0.85, 0.35, 0.25)),
                 Sphere((0.5, -0.45, 0.15), 0.15, (0.25, 0.4, 0.85))],
        ground=GroundPlane())
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def unit_sphere_scene(**overrides) -> SyntheticSceneSpec:
    spec = SyntheticSceneSpec(spheres=[Sphere((0.0, 0.0, 0.0), 1.0, (0.8, 0.5, 0.3))],
                              orbit_radius=3.5, orbit_height=1.0, look_target=(0.0, 0.0, 0.0))
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


PRESETS = {"sphere-plane": sphere_plane_scene, "unit-sphere": unit_sphere_scene}


# ---------------------------------------------------------------------------
# ray tracing


def _hit_sphere(o, d, s: Sphere):
    oc = o - np.asarray(s.center)
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - s.radius ** 2
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = np.where(-b - sq > 1e-6, -b - sq, -b + sq)
    t = np.where((disc >= 0) & (t > 1e-6), t, np.inf)
    p = o + d * t[:, None]
    n = (p - np.asarray(s.center)) / s.radius
    return t, n


def _hit_box(o, d, b: Box):
    lo = np.asarray(b.center) - np.asarray(b.half_size)
    hi = np.asarray(b.center) + np.asarray(b.half_size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1, t2 = (lo - o) * inv, (hi - o) * inv
    tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
    t_near, t_far = np.nanmax(tmin, axis=1), np.nanmin(tmax, axis=1)
    t = np.where(t_near > 1e-6, t_near, t_far)
    t = np.where((t_near <= t_far) & (t > 1e-6), t, np.inf)
    p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
    rel = (p - np.asarray(b.center)) / np.asarray(b.half_size)
    axis = np.argmax(np.abs(rel), axis=1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), axis] = np.sign(rel[np.arange(len(p)), axis])
    return t, n


def _hit_ground(o, d, g: GroundPlane):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (g.height - o[:, 2]) / d[:, 2]
    t = np.where((t > 1e-6) & (o[:, 2] > g.height), t, np.inf)
    n = np.zeros_like(o)
    n[:, 2] = 1.0
    return t, n


def _ground_albedo(p, g: GroundPlane) -> np.ndarray:
    inside = np.all(np.abs(p[:, :2]) <= g.patch_half_extent, axis=1)
    cell = np.floor(p[:, :2] / g.checker_size).astype(np.int64).sum(axis=1) % 2 == 0
    out = np.broadcast_to(np.asarray(g.albedo), p.shape).copy()
    out[inside & cell] = g.checker_albedo
    return out


def trace(spec: SyntheticSceneSpec, o: np.ndarray, d: np.ndarray, shadows: bool = True):
    """Closest hit per ray: (t, normal, albedo); misses have t = inf."""
    n_rays = len(o)
    best_t = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    albedo = np.zeros((n_rays, 3))
    hits = [(_hit_sphere(o, d, s), s.albedo) for s in spec.spheres]
    hits += [(_hit_box(o, d, b), b.albedo) for b in spec.boxes]
    for (t, n), a in hits:
        closer = t < best_t
        best_t[closer], normal[closer], albedo[closer] = t[closer], n[closer], a
    if spec.ground is not None:
        t, n = _hit_ground(o, d, spec.ground)
        closer = t < best_t
        best_t[closer], normal[closer] = t[closer], n[closer]
        albedo[closer] = _ground_albedo(o[closer] + d[closer] * t[closer, None], spec.ground)
    return best_t, normal, albedo


def sky_color(spec: SyntheticSceneSpec, d: np.ndarray) -> np.ndarray:
    up = np.clip(d[:, 2], 0.0, 1.0)[:, None] ** 0.5
    base = (1 - up) * np.asarray(spec.sky_horizon) + up * np.asarray(spec.sky_zenith)
    light = np.asarray(spec.light_dir) / np.linalg.norm(spec.light_dir)
    glow = np.clip(d @ light, 0.0, 1.0) ** 8
    return np.clip(base + 0.25 * glow[:, None], 0.0, 1.0)


def shade(spec: SyntheticSceneSpec, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Lambertian shading with hard shadows; rays that escape see the sky."""
    t, n, a = trace(spec, o, d)
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    rgb = sky_color(spec, d)
    hit = np.isfinite(t)
    if hit.any():
        p = o[hit] + d[hit] * t[hit, None] + n[hit] * 1e-4
        occl_spec = SyntheticSceneSpec(spheres=spec.spheres, boxes=spec.boxes, ground=None)
        st, _, _ = trace(occl_spec, p, np.broadcast_to(light, p.shape).copy())
        lit = np.isinf(st)
        lam = np.clip(n[hit] @ light, 0.0, 1.0) * lit
        rgb[hit] = a[hit] * (spec.ambient + (1 - spec.ambient) * lam)[:, None]
    return np.clip(rgb, 0.0, 1.0)


# ---------------------------------------------------------------------------
# surface sampling


def _sample_sphere(s: Sphere, n: int, rng) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(s.center) + s.radius * v


def _sample_box(b: Box, n: int, rng) -> np.ndarray:
    h = np.asarray(b.half_size)
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
    face = rng.choice(6, n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, (n, 3))
    axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
    u[np.arange(n), axis] = sign
    return np.asarray(b.center) + u * h


def _sample_ground(g: GroundPlane, n: int, rng) -> np.ndarray:
    xy = rng.uniform(-g.patch_half_extent, g.patch_half_extent, (n, 2))
    return np.concatenate([xy, np.full((n, 1), g.height)], axis=1)


def _inside_solid(spec: SyntheticSceneSpec, p: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    inside = np.zeros(len(p), dtype=bool)
    for s in spec.spheres:
        inside |= np.linalg.norm(p - np.asarray(s.center), axis=1) < s.radius - eps
    for b in spec.boxes:
        inside |= np.all(np.abs(p - np.asarray(b.center)) < np.asarray(b.half_size) - eps, axis=1)
    if spec.ground is not None:
        inside |= p[:, 2] < spec.ground.height - eps
    return inside


def sample_surface(spec: SyntheticSceneSpec, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted uniform samples of all exposed primitive surfaces."""
    parts, areas = [], []
    for s in spec.spheres:
        parts.append(lambda k, s=s: _sample_sphere(s, k, rng))
        areas.append(4 * math.pi * s.radius ** 2)
    for b in spec.boxes:
        h = b.half_size
        parts.append(lambda k, b=b: _sample_box(b, k, rng))
        areas.append(8 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]))
    if spec.ground is not None:
        parts.append(lambda k: _sample_ground(spec.ground, k, rng))
        areas.append((2 * spec.ground.patch_half_extent) ** 2)
    areas = np.asarray(areas)
    out = np.zeros((0, 3))
    # rejection of points buried in other solids, topped up until n remain
    while len(out) < n:
        counts = rng.multinomial(n - len(out), areas / areas.sum())
        batch = np.concatenate([f(int(c)) for f, c in zip(parts, counts) if c > 0])
        out = np.concatenate([out, batch[~_inside_solid(spec, batch)]])
    return PointCloud(out[:n])


def corrupt(cloud: PointCloud, subsample: float, jitter: float, rng: np.random.Generator) -> PointCloud:
    """Random subset plus Gaussian jitter whose norm is clipped at 3 sigma."""
    sub = random_downsample(cloud, subsample, rng)
    if jitter <= 0:
        return sub
    noise = rng.standard_normal(sub.points.shape) * jitter
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    noise *= np.minimum(1.0, 3.0 * jitter / np.maximum(norms, 1e-300))
    return PointCloud(sub.points + noise)


def orbit_cameras(spec: SyntheticSceneSpec) -> list[Camera]:
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_deg) / 2)
    cams = []
    for i in range(spec.n_views):
        a = 2 * math.pi * i / spec.n_views
        eye = (spec.orbit_radius * math.cos(a), spec.orbit_radius * math.sin(a), spec.orbit_height)
        cams.append(Camera(f, f, spec.width / 2, spec.height / 2, spec.width, spec.height,
                           look_at(eye, spec.look_target), f"images/{i:03d}.png"))
    return cams


# ---------------------------------------------------------------------------
# scene on disk


def save_png(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


def load_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def gen_scene(spec: SyntheticSceneSpec, seed: int, out: str | Path) -> Path:
    """Render ground-truth views and write clouds and cameras for ``spec``."""
    spec.validate()
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cams = orbit_cameras(spec)
    for cam in cams:
        o, d = camera_rays(cam)
        save_png(out / cam.image, shade(spec, o, d).reshape(cam.height, cam.width, 3))
    analytic = sample_surface(spec, spec.n_surface_points, rng)
    prior = corrupt(analytic, spec.subsample, spec.jitter, rng)
    save_ply(analytic, out / "analytic.ply")
    save_ply(prior, out / "prior.ply")
    (out / "cameras.json").write_text(json.dumps([c.to_json() for c in cams], indent=1))
    (out / "scene.json").write_text(json.dumps({"seed": seed, "spec": asdict(spec)}, indent=1))
    return out


@dataclass
class Scene:
    root: Path
    cameras: list[Camera]
    images: list[np.ndarray]
    train_ids: list[int]
    test_ids: list[int]
    prior: PointCloud
    analytic: PointCloud | None = None

    @property
    def train_cameras(self) -> list[Camera]:
        return [self.cameras[i] for i in self.train_ids]

    @property
    def test_cameras(self) -> list[Camera]:
        return [self.cameras[i] for i in self.test_ids]


def split_views(n: int, hold_every: int = 8) -> tuple[list[int], list[int]]:
    """Every ``hold_every``-th view (0, 8, 16, ...) is held out for testing."""
    test = [i for i in range(n) if i % hold_every == 0]
    return [i for i in range(n) if i % hold_every != 0], test


def load_scene(root: str | Path, hold_every: int = 8) -> Scene:
    root = Path(root)
    cams = [Camera.from_json(c) for c in json.loads((root / "cameras.json").read_text())]
    images = []
    for c in cams:
        if c.image is None or not (root / c.image).exists():
            raise FileNotFoundError(f"camera image {c.image!r} not found under {root}")
        img = load_png(root / c.image)
        if img.shape[:2] != (c.height, c.width):
            raise ValueError(f"{c.image}: image is {img.shape[1]}x{img.shape[0]}, camera says {c.width}x{c.height}")
        images.append(img)
    train, test = split_views(len(cams), hold_every)
    analytic = load_ply(root / "analytic.ply") if (root / "analytic.ply").exists() else None
    return Scene(root, cams, images, train, test, load_ply(root / "prior.ply"), analytic)
