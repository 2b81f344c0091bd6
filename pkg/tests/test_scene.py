import json

import numpy as np
import pytest

from pdfield import scene as sc
from pdfield.geometry import PointCloud
from pdfield.renderer import camera_rays, project


@pytest.fixture(scope="module")
def sphere_dir(tmp_path_factory):
    spec = sc.unit_sphere_scene(n_views=8, width=64, height=64, n_surface_points=2000)
    return sc.gen_scene(spec, 3, tmp_path_factory.mktemp("sphere")), spec


def test_unit_sphere_scene_on_disk(sphere_dir):
    root, spec = sphere_dir
    assert sorted(p.name for p in (root / "images").iterdir()) == [f"{i:03d}.png" for i in range(8)]
    for name in ("analytic.ply", "prior.ply", "cameras.json", "scene.json"):
        assert (root / name).exists()
    scene = sc.load_scene(root)
    assert len(scene.cameras) == 8 and scene.images[0].shape == (64, 64, 3)
    assert len(scene.prior) == round(2000 * spec.subsample)


def test_prior_within_three_sigma_of_surface(sphere_dir):
    root, spec = sphere_dir
    scene = sc.load_scene(root)
    radial = np.abs(np.linalg.norm(scene.prior.points, axis=1) - 1.0)
    assert radial.max() <= 3 * spec.jitter + 1e-12
    np.testing.assert_allclose(np.linalg.norm(scene.analytic.points, axis=1), 1.0, atol=1e-12)


def test_corruption_identity():
    cloud = PointCloud(np.random.default_rng(0).random((100, 3)))
    out = sc.corrupt(cloud, 1.0, 0.0, np.random.default_rng(1))
    assert np.array_equal(out.points, cloud.points)


def test_images_show_the_object(sphere_dir):
    root, _ = sphere_dir
    scene = sc.load_scene(root)
    cam, img = scene.cameras[0], scene.images[0]
    o, d = camera_rays(cam)
    t, _, _ = sc.trace(sc.unit_sphere_scene(), o, d)
    hit = np.isfinite(t).reshape(64, 64)
    assert 0.1 < hit.mean() < 0.9
    # sphere centre projects to the middle of the frame
    np.testing.assert_allclose(project(cam, [[0.0, 0.0, 0.0]])[0], [32, 32], atol=1e-6)
    sky = sc.sky_color(sc.unit_sphere_scene(), d).reshape(64, 64, 3)
    assert np.abs(img[~hit] - sky[~hit]).max() < 1 / 255 + 1e-9


def test_analytic_trace_sphere():
    spec = sc.unit_sphere_scene()
    t, n, _ = sc.trace(spec, np.array([[0.0, -3.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    assert t[0] == pytest.approx(2.0)
    np.testing.assert_allclose(n[0], [0, -1, 0])


def test_trace_box_and_ground():
    spec = sc.SyntheticSceneSpec(boxes=[sc.Box((0, 0, 0.5), (0.5, 0.5, 0.5), (1, 1, 1))], ground=sc.GroundPlane())
    t, n, _ = sc.trace(spec, np.array([[0.0, -3.0, 0.5], [0.8, 0.8, 2.0]]), np.array([[0.0, 1.0, 0.0], [0, 0, -1.0]]))
    assert t[0] == pytest.approx(2.5) and np.allclose(n[0], [0, -1, 0])
    assert t[1] == pytest.approx(2.0) and np.allclose(n[1], [0, 0, 1])


def test_surface_samples_not_buried():
    spec = sc.sphere_plane_scene()
    pts = sc.sample_surface(spec, 3000, np.random.default_rng(0)).points
    assert not sc._inside_solid(spec, pts).any()
    assert np.all(np.abs(pts) <= spec.bound + 1e-12)


@pytest.mark.parametrize("change", [
    dict(width=8),
    dict(spheres=[sc.Sphere((1.4, 0, 0), 0.5, (1, 1, 1))]),
    dict(subsample=0.0),
])
def test_invalid_specs_rejected(change, tmp_path):
    spec = sc.sphere_plane_scene(**change)
    with pytest.raises(ValueError):
        sc.gen_scene(spec, 0, tmp_path)


def test_split_every_eighth():
    train, test = sc.split_views(10)
    assert test == [0, 8] and train == [1, 2, 3, 4, 5, 6, 7, 9]
    assert not set(train) & set(test)


def test_scene_json_roundtrip(sphere_dir):
    root, spec = sphere_dir
    back = sc.SyntheticSceneSpec.from_dict(json.loads((root / "scene.json").read_text())["spec"])
    assert back == spec


def test_missing_image_is_reported(sphere_dir, tmp_path):
    root, _ = sphere_dir
    cams = json.loads((root / "cameras.json").read_text())
    cams[0]["image"] = "images/nope.png"
    (tmp_path / "cameras.json").write_text(json.dumps(cams))
    (tmp_path / "prior.ply").write_bytes((root / "prior.ply").read_bytes())
    with pytest.raises(FileNotFoundError, match="nope.png"):
        sc.load_scene(tmp_path)


def test_gen_scene_deterministic(tmp_path):
    spec = sc.unit_sphere_scene(n_views=2, width=16, height=16, n_surface_points=200)
    a, b = sc.gen_scene(spec, 5, tmp_path / "a"), sc.gen_scene(spec, 5, tmp_path / "b")
    for name in ("prior.ply", "analytic.ply", "images/000.png", "cameras.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
