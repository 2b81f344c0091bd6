"""Point clouds: PLY I/O, normalization, nested downsampling, Chamfer distance."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .spatial import SpatialIndex


class PLYError(ValueError):
    """Malformed or unsupported PLY input; the message carries the location."""


class DegeneratePairError(ValueError):
    """Retentions produced an empty condition or an empty target set."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"point cloud must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    def subset(self, indices) -> "PointCloud":
        return PointCloud(self.points[np.asarray(indices, dtype=np.int64)])

    @staticmethod
    def concat(*clouds: "PointCloud") -> "PointCloud":
        return PointCloud(np.concatenate([c.points for c in clouds], axis=0))


@dataclass(frozen=True)
class CloudPair:
    """A training pair: sparse ``condition`` plus the ``target_extra`` points to generate.

    ``full_target`` lists the condition first, then the extra points.
    Index arrays refer to the source cloud the pair was drawn from.
    """

    condition: PointCloud
    target_extra: PointCloud
    condition_idx: np.ndarray
    extra_idx: np.ndarray
    r1: float = float("nan")
    r2: float = float("nan")
    seed: int | None = None

    @property
    def full_target(self) -> PointCloud:
        return PointCloud.concat(self.condition, self.target_extra)


@dataclass(frozen=True)
class NormalizeTransform:
    center: np.ndarray
    scale: float

    def apply(self, cloud: PointCloud) -> PointCloud:
        return PointCloud((cloud.points - self.center) / self.scale)

    def invert(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(cloud.points * self.scale + self.center)


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(buf: bytes):
    end = re.search(rb"end_header\r?\n", buf)
    if not buf.startswith(b"ply"):
        raise PLYError("line 1: missing 'ply' magic")
    if end is None:
        raise PLYError("header: no 'end_header' line found")
    lines = buf[: end.start()].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[dict] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise PLYError(f"line {lineno}: malformed format line {raw!r}")
            fmt = tok[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise PLYError(f"line {lineno}: unsupported format {fmt!r}")
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PLYError(f"line {lineno}: malformed element line {raw!r}")
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise PLYError(f"line {lineno}: property before any element")
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise PLYError(f"line {lineno}: unknown list types in {raw!r}")
                elements[-1]["props"].append((tok[4], "list", (_PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            elif len(tok) == 3:
                if tok[1] not in _PLY_TYPES:
                    raise PLYError(f"line {lineno}: unsupported property type {tok[1]!r}")
                elements[-1]["props"].append((tok[2], "scalar", _PLY_TYPES[tok[1]]))
            else:
                raise PLYError(f"line {lineno}: malformed property line {raw!r}")
        else:
            raise PLYError(f"line {lineno}: unexpected header keyword {tok[0]!r}")
    if fmt is None:
        raise PLYError("header: missing format line")
    return fmt, elements, end.end(), len(lines) + 1


def _check_vertex(elements: list[dict]) -> tuple[int, dict]:
    for pos, el in enumerate(elements):
        if el["name"] == "vertex":
            break
    else:
        raise PLYError("header: no 'vertex' element")
    names = {p[0]: p for p in el["props"]}
    for axis in "xyz":
        if axis not in names:
            raise PLYError(f"header: vertex element lacks property {axis!r}")
        kind, typ = names[axis][1], names[axis][2]
        if kind != "scalar" or typ not in ("f4", "f8"):
            raise PLYError(f"header: vertex property {axis!r} must be float or double")
    if any(p[1] == "list" for p in el["props"]):
        raise PLYError("header: list properties on vertex elements are not supported")
    return pos, el


def load_ply(path: str | Path) -> PointCloud:
    """Read vertex x/y/z from an ASCII or binary little-endian PLY file."""
    buf = Path(path).read_bytes()
    fmt, elements, data_start, header_lines = _parse_header(buf)
    vpos, vertex = _check_vertex(elements)
    names = [p[0] for p in vertex["props"]]
    n = vertex["count"]
    if fmt == "ascii":
        body = buf[data_start:].decode("ascii", errors="replace").splitlines()
        skip = sum(el["count"] for el in elements[:vpos])
        rows = body[skip: skip + n]
        if len(rows) < n:
            raise PLYError(f"line {header_lines + skip + len(rows) + 1}: expected {n} vertex rows, file ends early")
        width = len(names)
        try:
            vals = np.array(" ".join(rows).split(), dtype=np.float64)
        except ValueError as exc:
            raise PLYError(f"vertex data starting at line {header_lines + skip + 1}: {exc}") from None
        if vals.size != n * width:
            counts = [len(r.split()) for r in rows]
            bad = next(i for i, c in enumerate(counts) if c != width)
            raise PLYError(f"line {header_lines + skip + bad + 1}: expected {width} values, found {counts[bad]}")
        table = vals.reshape(n, width)
        # round through the declared type so ASCII and binary files agree
        ptypes = {q[0]: q[2] for q in vertex["props"]}
        cols = [table[:, names.index(a)].astype(ptypes[a]).astype(np.float64) for a in "xyz"]
    else:
        offset = data_start
        for el in elements[:vpos]:
            if any(p[1] == "list" for p in el["props"]):
                raise PLYError(f"byte {offset}: list element {el['name']!r} before vertex data is not supported")
            offset += el["count"] * np.dtype([(p[0], "<" + p[2]) for p in el["props"]]).itemsize
        dt = np.dtype([(p[0], "<" + p[2]) for p in vertex["props"]])
        need = offset + n * dt.itemsize
        if need > len(buf):
            raise PLYError(f"byte {len(buf)}: vertex data truncated, expected {need} bytes")
        table = np.frombuffer(buf, dtype=dt, count=n, offset=offset)
        cols = [table[a].astype(np.float64) for a in "xyz"]
    try:
        return PointCloud(np.stack(cols, axis=1))
    except ValueError as exc:
        raise PLYError(f"vertex data: {exc}") from None


def save_ply(cloud: PointCloud, path: str | Path, binary: bool = True, dtype: str = "f8") -> None:
    if dtype not in ("f4", "f8"):
        raise ValueError("dtype must be 'f4' or 'f8'")
    pts = np.asarray(cloud.points)
    ptype = "double" if dtype == "f8" else "float"
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
              f"property {ptype} x\nproperty {ptype} y\nproperty {ptype} z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(pts, dtype="<" + dtype).tobytes())
        else:
            spec = "%.17g" if dtype == "f8" else "%.9g"
            np.savetxt(fh, pts.astype(dtype), fmt=spec)


# ---------------------------------------------------------------------------
# sampling and pairs


def _keep_count(n: int, retention: float) -> int:
    return int(np.floor(retention * n + 0.5))


def downsample_indices(n: int, retention: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < retention <= 1.0:
        raise ValueError(f"retention must lie in (0, 1], got {retention}")
    keep = _keep_count(n, retention)
    if keep >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, keep, replace=False))


def random_downsample(cloud: PointCloud, retention: float, seed: int | np.random.Generator) -> PointCloud:
    """Uniform random subset of ``round(retention * |cloud|)`` points, input order kept."""
    rng = np.random.default_rng(seed)
    return cloud.subset(downsample_indices(len(cloud), retention, rng))


def make_training_pair(source: PointCloud, r1: float, r2: float, seed: int | np.random.Generator) -> CloudPair:
    """Downsample twice: ``z = sub(source, r1)``, ``x = sub(z, r2)``.

    The sparsest level ``x`` is the condition and ``z \\ x`` (by index) is
    what the generator must recover.
    """
    if len(source) < 10:
        raise ValueError(f"source cloud needs at least 10 points, got {len(source)}")
    rng = np.random.default_rng(seed)
    z_idx = downsample_indices(len(source), r1, rng)
    keep = downsample_indices(len(z_idx), r2, rng)
    cond_idx = z_idx[keep]
    mask = np.ones(len(z_idx), dtype=bool)
    mask[keep] = False
    extra_idx = z_idx[mask]
    if len(cond_idx) == 0 or len(extra_idx) == 0:
        raise DegeneratePairError(
            f"retentions r1={r1:.4f}, r2={r2:.4f} on {len(source)} points give "
            f"{len(cond_idx)} condition / {len(extra_idx)} target points")
    return CloudPair(source.subset(cond_idx), source.subset(extra_idx), cond_idx, extra_idx,
                     float(r1), float(r2), seed if isinstance(seed, (int, np.integer)) else None)


def sample_retentions(rng: np.random.Generator, low: float = 0.2, high: float = 1.0) -> tuple[float, float]:
    return float(rng.uniform(low, high)), float(rng.uniform(low, high))


def save_pair(pair: CloudPair, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_ply(pair.condition, d / "condition.ply")
    save_ply(pair.target_extra, d / "target_extra.ply")
    (d / "pair.txt").write_text(f"r1 = {pair.r1!r}\nr2 = {pair.r2!r}\nseed = {pair.seed}\n"
                                f"n_condition = {len(pair.condition)}\nn_extra = {len(pair.target_extra)}\n")


def load_pair(directory: str | Path) -> CloudPair:
    d = Path(directory)
    meta = {}
    for line in (d / "pair.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    cond, extra = load_ply(d / "condition.ply"), load_ply(d / "target_extra.ply")
    seed = None if meta.get("seed") in (None, "None") else int(meta["seed"])
    return CloudPair(cond, extra, np.arange(len(cond)), np.arange(len(cond), len(cond) + len(extra)),
                     float(meta["r1"]), float(meta["r2"]), seed)


# ---------------------------------------------------------------------------
# normalization and metrics


def normalize(cloud: PointCloud) -> tuple[PointCloud, NormalizeTransform]:
    """Center on the centroid and scale so the farthest point sits at radius 1."""
    if len(cloud) == 0:
        raise ValueError("cannot normalize an empty cloud")
    center = cloud.points.mean(axis=0)
    radius = float(np.max(np.linalg.norm(cloud.points - center, axis=1)))
    tf = NormalizeTransform(center, radius if radius > 0 else 1.0)
    return tf.apply(cloud), tf


def denormalize(cloud: PointCloud, transform: NormalizeTransform) -> PointCloud:
    return transform.invert(cloud)


def nearest_sq_dists(src, dst) -> np.ndarray:
    """Squared distance from every point of ``src`` to its nearest point in ``dst``."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    idx, _ = SpatialIndex(dst).query_knn(src, 1)
    diff = src - dst[idx[:, 0]]
    return np.einsum("ij,ij->i", diff, diff)


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance: mean squared NN distance a->b plus b->a."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty clouds")
    return float(nearest_sq_dists(a, b).mean() + nearest_sq_dists(b, a).mean())
