import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdfield import geometry as g
from pdfield.geometry import PointCloud


def cloud(n, seed=0):
    return PointCloud(np.random.default_rng(seed).standard_normal((n, 3)))


def test_ascii_ply_three_vertices(tmp_path):
    path = tmp_path / "tri.ply"
    path.write_text("ply\nformat ascii 1.0\ncomment tiny\nelement vertex 3\n"
                    "property float x\nproperty float y\nproperty float z\nproperty uchar red\n"
                    "end_header\n0 0 0 255\n1 0 0 0\n0 1 0.5 7\n")
    c = g.load_ply(path)
    assert len(c) == 3
    np.testing.assert_array_equal(c.points[2], [0.0, 1.0, 0.5])


@pytest.mark.parametrize("binary", [True, False])
@pytest.mark.parametrize("dtype", ["f4", "f8"])
def test_ply_roundtrip(tmp_path, binary, dtype):
    c = cloud(200)
    g.save_ply(c, tmp_path / "c.ply", binary=binary, dtype=dtype)
    back = g.load_ply(tmp_path / "c.ply")
    expect = c.points.astype(dtype).astype(np.float64)
    np.testing.assert_array_equal(back.points, expect)


def test_ply_large_binary(tmp_path):
    c = cloud(60_000, seed=4)
    g.save_ply(c, tmp_path / "big.ply")
    assert np.array_equal(g.load_ply(tmp_path / "big.ply").points, c.points)


@pytest.mark.parametrize("text, where", [
    ("plx\n", "line 1"),
    ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nend_header\n0 0\n0 0\n", "z"),
    ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
     "end_header\n0 0 0\n", "vertex"),
])
def test_ply_errors_are_located(tmp_path, text, where):
    (tmp_path / "bad.ply").write_text(text)
    with pytest.raises(g.PLYError, match=where):
        g.load_ply(tmp_path / "bad.ply")


def test_truncated_binary_ply(tmp_path):
    g.save_ply(cloud(10), tmp_path / "c.ply")
    data = (tmp_path / "c.ply").read_bytes()
    (tmp_path / "cut.ply").write_bytes(data[:-5])
    with pytest.raises(g.PLYError):
        g.load_ply(tmp_path / "cut.ply")


def test_pointcloud_rejects_bad_input():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))


def test_downsample_identity_and_counts():
    c = cloud(1000)
    assert np.array_equal(g.random_downsample(c, 1.0, 0).points, c.points)
    half = g.random_downsample(c, 0.5, 1)
    assert len(half) == 500
    rows = {tuple(p) for p in c.points}
    assert all(tuple(p) in rows for p in half.points)


def test_nested_downsample_chain():
    c = cloud(800)
    z = g.random_downsample(c, 0.6, 1)
    x = g.random_downsample(z, 0.4, 2)
    zs = {tuple(p) for p in z.points}
    assert all(tuple(p) in zs for p in x.points)
    assert len(x) < len(z) < len(c)


def test_training_pair_sizes():
    pair = g.make_training_pair(cloud(1000), 0.5, 0.5, 0)
    assert (len(pair.condition), len(pair.target_extra), len(pair.full_target)) == (250, 250, 500)


def test_training_pair_rejects_empty_extra():
    with pytest.raises(g.DegeneratePairError):
        g.make_training_pair(cloud(100), 0.5, 0.9999, 0)


def test_training_pairs_disjoint_sweep():
    c = cloud(300)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r1, r2 = g.sample_retentions(rng)
        try:
            pair = g.make_training_pair(c, r1, r2, rng)
        except g.DegeneratePairError:
            continue
        assert not set(pair.condition_idx) & set(pair.extra_idx)
        assert np.array_equal(pair.condition.points, c.points[pair.condition_idx])


def test_pair_roundtrip(tmp_path):
    pair = g.make_training_pair(cloud(100), 0.7, 0.5, 3)
    g.save_pair(pair, tmp_path / "p")
    back = g.load_pair(tmp_path / "p")
    assert np.array_equal(back.condition.points, pair.condition.points)
    assert np.array_equal(back.target_extra.points, pair.target_extra.points)
    assert (back.r1, back.r2, back.seed) == (pair.r1, pair.r2, 3)


def test_normalize_unit_ball_is_identity():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 0.5, 0], [0, -0.5, 0]])
    out, tf = g.normalize(PointCloud(pts))
    np.testing.assert_allclose(tf.center, 0.0)
    assert tf.scale == 1.0
    np.testing.assert_allclose(out.points, pts)


def test_normalize_single_point():
    out, tf = g.normalize(PointCloud([[3.0, -2.0, 1.0]]))
    np.testing.assert_array_equal(out.points, [[0.0, 0.0, 0.0]])
    assert tf.scale == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 200), shift=st.floats(-100, 100), spread=st.floats(1e-3, 1e3))
def test_normalize_roundtrip(seed, n, shift, spread):
    pts = np.random.default_rng(seed).standard_normal((n, 3)) * spread + shift
    out, tf = g.normalize(PointCloud(pts))
    assert np.max(np.linalg.norm(out.points, axis=1)) == pytest.approx(1.0)
    np.testing.assert_allclose(g.denormalize(out, tf).points, pts, atol=1e-6 * max(1.0, abs(shift) + spread))


def brute_chamfer(a, b):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return d.min(1).mean() + d.min(0).mean()


def test_chamfer_examples():
    a = cloud(50, 1).points
    assert g.chamfer(a, a) == 0.0
    assert g.chamfer([[0.0, 0, 0]], [[1.0, 0, 0]]) == 2.0


def test_chamfer_matches_double_loop():
    rng = np.random.default_rng(7)
    a, b = rng.random((50, 3)), rng.random((50, 3))
    assert abs(g.chamfer(a, b) - brute_chamfer(a, b)) < 1e-9


def test_chamfer_symmetric_and_rigid_invariant():
    rng = np.random.default_rng(8)
    a, b = rng.random((40, 3)), rng.random((70, 3))
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    t = rng.standard_normal(3)
    assert g.chamfer(a, b) == pytest.approx(g.chamfer(b, a), abs=1e-15)
    assert abs(g.chamfer(a @ q.T + t, b @ q.T + t) - g.chamfer(a, b)) < 1e-9
