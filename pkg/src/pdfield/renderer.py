"""Point-prior radiance field with a contracted background branch.

Per ray:

* foreground: stratified samples in ``[near, far]``; only samples with a
  prior point within ``R`` are kept. Each kept sample encodes its ``K``
  nearest neighbours (within ``R``), aggregates them with a per-dimension
  softmax, and a point field maps (position, direction, aggregate) to a
  density and a 128-d feature. Features are alpha-composited along the ray.
* background: disparity-spaced intervals over ``[near, inf)`` represented
  by their contracted midpoints and an interval-size-attenuated frequency
  encoding; per-sample densities/features are composited the same way.
* fusion: an MLP maps the two composited features to RGB.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import diffcore as dc
from .diffcore import MLP, Linear, Module, ShapeError, Tensor
from .spatial import NeighborSet, SpatialIndex


# ---------------------------------------------------------------------------
# cameras and rays


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    ``c2w`` is the 3x4 camera-to-world matrix ``[R | t]``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray
    image: str | None = None

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(3, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        rot = self.c2w[:, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:, 3]

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "c2w": self.c2w.tolist(), "image": self.image}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d["c2w"]), d.get("image"))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix looking from ``eye`` at ``target`` (OpenCV axes)."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.concatenate([np.stack([x, y, z], axis=1), eye[:, None]], axis=1)


def pixel_directions(camera: Camera, xs, ys) -> np.ndarray:
    """Unit world-space directions through continuous pixel coordinates."""
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    cam = np.stack([(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy, np.ones_like(xs)], axis=-1)
    d = cam @ camera.c2w[:, :3].T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(camera: Camera, x: float, y: float) -> Ray:
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise ValueError(f"pixel ({x}, {y}) outside {camera.width}x{camera.height} image")
    return Ray(camera.origin.copy(), pixel_directions(camera, x, y))


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rays through all pixel centres, row-major: (H*W, 3) origins and directions."""
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    d = pixel_directions(camera, xs.ravel() + 0.5, ys.ravel() + 0.5)
    return np.broadcast_to(camera.origin, d.shape).copy(), d


def project(camera: Camera, points) -> np.ndarray:
    """World points to continuous pixel coordinates (N, 2)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot, t = camera.c2w[:, :3], camera.c2w[:, 3]
    cam = (p - t) @ rot
    return np.stack([camera.fx * cam[:, 0] / cam[:, 2] + camera.cx,
                     camera.fy * cam[:, 1] / cam[:, 2] + camera.cy], axis=1)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class RenderConfig:
    radius: float = 0.0  # 0 -> 2x mean NN spacing of the cloud in use
    K: int = 8
    n_fg_samples: int = 64
    n_bg_samples: int = 64
    near: float = 1.0
    far: float = 4.0
    bg_far: float = 1000.0
    chunk: int = 4096

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.near < self.far:
            raise ValueError("need near < far")
        if not self.bg_far > self.near * self.n_bg_samples:
            raise ValueError("bg_far must exceed near * n_bg_samples")


@dataclass
class SamplePoint:
    position: np.ndarray
    t: float
    kind: Literal["foreground", "background"]
    branch: Literal["fg", "bg"]
    neighbors: NeighborSet | None = None


def stratified_t(n_rays: int, cfg: RenderConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """(n_rays, n_fg) sample depths, one per equal bin; bin centres without ``rng``."""
    edges = np.linspace(cfg.near, cfg.far, cfg.n_fg_samples + 1)
    lo, width = edges[:-1], np.diff(edges)
    u = np.full((n_rays, cfg.n_fg_samples), 0.5) if rng is None else rng.random((n_rays, cfg.n_fg_samples))
    return lo + u * width


def sample_deltas(t: np.ndarray) -> np.ndarray:
    """Gaps to the next sample; the last sample gets the mean of the others."""
    d = np.diff(t, axis=-1)
    last = d.mean(axis=-1, keepdims=True) if d.shape[-1] else np.ones(t.shape[:-1] + (1,))
    return np.concatenate([d, last], axis=-1)


def bg_edges(cfg: RenderConfig) -> np.ndarray:
    """Interval edges with uniform disparity steps from ``near``; the final
    interval is capped at ``bg_far`` (the only one that depends on it)."""
    n = cfg.n_bg_samples
    k = np.arange(n)
    return np.concatenate([cfg.near * n / (n - k), [cfg.bg_far]])


def contract(x) -> np.ndarray:
    """Identity inside the unit ball, ``(2 - 1/|x|) x/|x|`` outside."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(n, 1.0)
    return np.where(n <= 1.0, x, (2.0 - 1.0 / safe) * (x / safe))


def attenuation_weights(lengths, n_freqs: int) -> np.ndarray:
    """Per-band weights ``exp(-0.5 * 4^l * L^2 / 12)`` for an interval of
    contracted length ``L`` (variance of a uniform segment)."""
    L = np.asarray(lengths, dtype=np.float64)[..., None]
    return np.exp(-0.5 * (4.0 ** np.arange(n_freqs)) * L * L / 12.0)


def background_samples(origins: np.ndarray, dirs: np.ndarray, cfg: RenderConfig):
    """Contracted midpoints (B, M, 3) and contracted interval lengths (B, M)."""
    edges = bg_edges(cfg)
    pts = origins[:, None, :] + dirs[:, None, :] * edges[None, :, None]
    cpts = contract(pts)
    mids = contract(origins[:, None, :] + dirs[:, None, :] * (0.5 * (edges[:-1] + edges[1:]))[None, :, None])
    lengths = np.linalg.norm(np.diff(cpts, axis=1), axis=-1)
    return mids, lengths


@dataclass
class RaySamples:
    t: np.ndarray  # (B, N) foreground depths
    delta: np.ndarray  # (B, N)
    positions: np.ndarray  # (B, N, 3)
    retained: np.ndarray  # (S,) flat indices into B*N
    neighbor_idx: np.ndarray  # (S, K), -1 padded
    neighbor_mask: np.ndarray  # (S, K) bool

    @property
    def n_rays(self) -> int:
        return self.t.shape[0]

    @property
    def retained_fraction(self) -> float:
        return len(self.retained) / max(self.t.size, 1)


def sample_fg(origins: np.ndarray, dirs: np.ndarray, cfg: RenderConfig, index: SpatialIndex, radius: float,
              rng: np.random.Generator | None = None, prune: bool = True) -> RaySamples:
    t = stratified_t(len(origins), cfg, rng)
    pos = origins[:, None, :] + dirs[:, None, :] * t[..., None]
    idx, _ = index.query_radius(pos.reshape(-1, 3), radius, cfg.K)
    mask = idx >= 0
    keep = np.flatnonzero(mask[:, 0]) if prune else np.arange(len(idx))
    return RaySamples(t, sample_deltas(t), pos, keep, idx[keep], mask[keep])


def sample_ray(ray: Ray, cfg: RenderConfig, index: SpatialIndex, radius: float,
               seed: int | None = None) -> list[SamplePoint]:
    """Foreground samples (classified by the radius test) followed by background samples."""
    rng = None if seed is None else np.random.default_rng(seed)
    o, d = ray.origin[None], ray.direction[None]
    rs = sample_fg(o, d, cfg, index, radius, rng, prune=False)
    out = []
    for i in range(cfg.n_fg_samples):
        found = rs.neighbor_mask[i]
        nb = NeighborSet(rs.neighbor_idx[i][found],
                         np.linalg.norm(index.points[rs.neighbor_idx[i][found]] - rs.positions[0, i], axis=1))
        kind = "foreground" if len(nb) else "background"
        out.append(SamplePoint(rs.positions[0, i], float(rs.t[0, i]), kind, "fg", nb if len(nb) else None))
    edges = bg_edges(cfg)
    for tm in 0.5 * (edges[:-1] + edges[1:]):
        out.append(SamplePoint(ray.origin + ray.direction * tm, float(tm), "background", "bg"))
    return out


# ---------------------------------------------------------------------------
# networks


class PDFField(Module):
    """All learnable parts of the second stage.

    ``geo_encoder`` (neighbour geometry, 10 -> 8), ``scorer`` (per-dimension
    attention logits), foreground trunk/heads, background trunk/heads and
    the fusion MLP.
    """

    def __init__(self, rng: np.random.Generator, geo_dim: int = 8, geo_hidden: int = 32, feat_dim: int = 128,
                 hidden: int = 128, fusion_hidden: int = 128, fusion_layers: int = 4, pos_freqs: int = 6,
                 dir_freqs: int = 3, bg_freqs: int = 6, dtype=np.float32):
        self.arch = dict(geo_dim=geo_dim, geo_hidden=geo_hidden, feat_dim=feat_dim, hidden=hidden,
                         fusion_hidden=fusion_hidden, fusion_layers=fusion_layers, pos_freqs=pos_freqs,
                         dir_freqs=dir_freqs, bg_freqs=bg_freqs)
        self.dtype = np.dtype(dtype)
        self.geo_dim, self.feat_dim = geo_dim, feat_dim
        self.pos_freqs, self.dir_freqs, self.bg_freqs = pos_freqs, dir_freqs, bg_freqs
        dir_dim = dc.encoding_dim(3, dir_freqs)
        self.geo_encoder = MLP([10, geo_hidden, geo_dim], rng, dtype=dtype)
        self.scorer = MLP([geo_dim, geo_hidden, geo_dim], rng, dtype=dtype)
        self.fg_trunk = MLP([dc.encoding_dim(3, pos_freqs) + geo_dim, hidden, hidden], rng, dtype=dtype)
        self.fg_sigma = Linear(hidden, 1, rng, dtype)
        self.fg_feature = Linear(hidden + dir_dim, feat_dim, rng, dtype)
        self.bg_trunk = MLP([dc.encoding_dim(3, bg_freqs), hidden, hidden], rng, dtype=dtype)
        self.bg_sigma = Linear(hidden, 1, rng, dtype)
        self.bg_feature = Linear(hidden + dir_dim, feat_dim, rng, dtype)
        self.fusion = MLP([2 * feat_dim] + [fusion_hidden] * fusion_layers + [3], rng, dtype=dtype)

    def const(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))


def encode_neighbor_geometry(field: PDFField, c_i, c_j) -> Tensor:
    """``MLP(c_i, c_j, c_i - c_j, |c_i - c_j|)`` for every neighbour.

    ``c_i`` is (..., 3) and ``c_j`` (..., K, 3); returns (..., K, geo_dim).
    """
    c_i, c_j = field.const(c_i), field.const(c_j)
    if c_j.ndim == c_i.ndim + 1:
        c_i = dc.broadcast_to(dc.reshape(c_i, c_i.shape[:-1] + (1, 3)), c_j.shape)
    diff = dc.sub(c_i, c_j)
    return field.geo_encoder(geometry_input(c_i, c_j, diff))


def geometry_input(c_i: Tensor, c_j: Tensor, diff: Tensor | None = None) -> Tensor:
    diff = dc.sub(c_i, c_j) if diff is None else diff
    return dc.concat([c_i, c_j, diff, dc.norm(diff)], axis=-1)


def aggregate_features(field: PDFField, kg, mask=None) -> Tensor:
    """Per-dimension softmax over neighbours of ``scorer(kg)``, weighted sum of ``kg``.

    ``kg`` is (S, K, D); ``mask`` (S, K) marks real neighbours, every row
    needs at least one.
    """
    kg = field.const(kg)
    scores = field.scorer(kg)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("every sample needs at least one neighbour to aggregate")
        scores = scores + np.where(mask, 0.0, -1e9).astype(field.dtype)[..., None]
    elif kg.shape[-2] == 0:
        raise ValueError("every sample needs at least one neighbour to aggregate")
    w = dc.softmax(scores, axis=-2)
    return dc.tsum(w * kg, axis=-2)


def aggregation_weights(field: PDFField, kg, mask=None) -> np.ndarray:
    kg = field.const(kg)
    with dc.no_grad():
        scores = field.scorer(kg).data
    if mask is not None:
        scores = scores + np.where(mask, 0.0, -1e9)[..., None]
    return dc.softmax(scores, axis=-2).data


def foreground_field(field: PDFField, c, d, f) -> tuple[Tensor, Tensor]:
    """Density (S,) and feature (S, feat_dim) at positions ``c`` seen along ``d``."""
    c = np.asarray(c)
    x = dc.concat([field.const(dc.positional_encoding(c, field.pos_freqs)), field.const(f)], axis=-1)
    h = dc.silu(field.fg_trunk(x))
    sigma = dc.softplus(field.fg_sigma(h))
    denc = field.const(dc.positional_encoding(np.asarray(d), field.dir_freqs))
    feat = field.fg_feature(dc.concat([h, denc], axis=-1))
    return dc.reshape(sigma, sigma.shape[:-1]), feat


def background_field(field: PDFField, mids, lengths, d) -> tuple[Tensor, Tensor]:
    """Density (B, M) and feature (B, M, feat_dim) per background interval."""
    enc = dc.positional_encoding(np.asarray(mids), field.bg_freqs, attenuation_weights(lengths, field.bg_freqs))
    h = dc.silu(field.bg_trunk(field.const(enc)))
    sigma = dc.softplus(field.bg_sigma(h))
    d = np.asarray(d)
    denc = dc.positional_encoding(np.broadcast_to(d[:, None, :], np.asarray(mids).shape), field.dir_freqs)
    feat = field.bg_feature(dc.concat([h, field.const(denc)], axis=-1))
    return dc.reshape(sigma, sigma.shape[:-1]), feat


def composite_weights(sigma, delta) -> Tensor:
    """``w_i = T_i (1 - exp(-sigma_i delta_i))`` with ``T_i = exp(-sum_{j<i} sigma_j delta_j)``."""
    tau = dc.mul(sigma, delta)
    trans = dc.exp(dc.neg(dc.cumsum(tau, axis=-1, exclusive=True)))
    return trans * (1.0 - dc.exp(dc.neg(tau)))


def composite(sigma, values, delta) -> tuple[Tensor, Tensor]:
    """Emission-absorption quadrature along the last sample axis.

    ``sigma``/``delta`` are (..., N), ``values`` (..., N, C). Returns the
    accumulated value (..., C) and alpha (...).
    """
    sigma, values, delta = dc.as_tensor(sigma), dc.as_tensor(values), dc.as_tensor(delta)
    if sigma.shape != delta.shape or values.shape[:-1] != sigma.shape:
        raise ShapeError(f"composite: sigma {sigma.shape}, values {values.shape}, delta {delta.shape}")
    w = composite_weights(sigma, delta)
    acc = dc.tsum(dc.reshape(w, w.shape + (1,)) * values, axis=-2)
    return acc, dc.tsum(w, axis=-1)


def background_features(field: PDFField, origins, dirs, cfg: RenderConfig) -> tuple[Tensor, Tensor]:
    mids, lengths = background_samples(np.asarray(origins), np.asarray(dirs), cfg)
    sigma, feat = background_field(field, mids, lengths, dirs)
    return composite(sigma, feat, field.const(lengths))


def fuse(field: PDFField, fg_feature, bg_feature) -> Tensor:
    """RGB in [0, 1] from the concatenated fore/background features."""
    x = dc.concat([field.const(fg_feature), field.const(bg_feature)], axis=-1)
    return dc.sigmoid(field.fusion(x))


def render_loss(pred, gt) -> Tensor:
    pred, gt = dc.as_tensor(pred), dc.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"render_loss: prediction {pred.shape} vs target {gt.shape}")
    return dc.mean(dc.square(dc.sub(pred, gt)))


# ---------------------------------------------------------------------------
# full ray rendering


@dataclass
class RenderOutput:
    rgb: Tensor
    fg_alpha: Tensor
    bg_alpha: Tensor | None
    retained_fraction: float
    n_fg_evaluated: int


def foreground_features(field: PDFField, samples: RaySamples, dirs: np.ndarray, points: np.ndarray
                        ) -> tuple[Tensor, Tensor, int]:
    """Composited foreground feature per ray, evaluating only ``samples.retained``."""
    B, N = samples.t.shape
    S = len(samples.retained)
    if S == 0:
        zero = Tensor(np.zeros((B, field.feat_dim), dtype=field.dtype))
        return zero, Tensor(np.zeros(B, dtype=field.dtype)), 0
    flat_pos = samples.positions.reshape(-1, 3)
    c = flat_pos[samples.retained]
    ray_of = samples.retained // N
    has = samples.neighbor_mask.any(axis=1)
    nbr = np.where(samples.neighbor_mask, samples.neighbor_idx, 0)
    c_j = np.where(samples.neighbor_mask[..., None], points[nbr], c[:, None, :])
    kg = encode_neighbor_geometry(field, c, c_j)
    # rows without neighbours only occur with pruning disabled; give them a zero aggregate
    mask = samples.neighbor_mask | ~has[:, None]
    f = aggregate_features(field, kg, mask)
    if not has.all():
        f = f * has[:, None].astype(field.dtype)
    sigma, feat = foreground_field(field, c, dirs[ray_of], f)
    sigma_full = dc.reshape(dc.scatter_add(sigma, samples.retained, B * N), (B, N))
    w = composite_weights(sigma_full, field.const(samples.delta))
    w_s = dc.take(dc.reshape(w, (B * N,)), samples.retained)
    fg = dc.scatter_add(dc.reshape(w_s, (S, 1)) * feat, ray_of, B)
    return fg, dc.tsum(w, axis=-1), S


def render_rays(field: PDFField, index: SpatialIndex, radius: float, origins: np.ndarray, dirs: np.ndarray,
                cfg: RenderConfig, rng: np.random.Generator | None = None, use_background: bool = True,
                prune: bool = True) -> RenderOutput:
    samples = sample_fg(origins, dirs, cfg, index, radius, rng, prune=prune)
    fg, fg_alpha, S = foreground_features(field, samples, dirs, index.points)
    if use_background:
        bg, bg_alpha = background_features(field, origins, dirs, cfg)
    else:
        bg, bg_alpha = Tensor(np.zeros((len(origins), field.feat_dim), dtype=field.dtype)), None
    rgb = fuse(field, fg, bg)
    return RenderOutput(rgb, fg_alpha, bg_alpha, samples.retained_fraction if prune else 1.0, S)


def render_image(field: PDFField, index: SpatialIndex, radius: float, camera: Camera, cfg: RenderConfig,
                 use_background: bool = True) -> np.ndarray:
    """Deterministic (bin-centre samples) render of a full view, (H, W, 3) float64."""
    origins, dirs = camera_rays(camera)
    out = np.empty((len(origins), 3))
    with dc.no_grad():
        for s in range(0, len(origins), cfg.chunk):
            sl = slice(s, s + cfg.chunk)
            out[sl] = render_rays(field, index, radius, origins[sl], dirs[sl], cfg, None, use_background).rgb.data
    return out.reshape(camera.height, camera.width, 3)
