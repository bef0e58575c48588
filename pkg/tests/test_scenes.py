import numpy as np
import pytest

from ppnesf.geometry import Camera, generate_rays
from ppnesf.scenes import (
    BACKGROUND,
    DEPTH_PNG_SCALE,
    Scene,
    SceneSpec,
    TrajectorySpec,
    generate_scene,
    generate_trajectory,
    load_scene,
    load_viewset,
    oracle_render,
    oracle_render_rays,
    save_scene,
    save_viewset,
)

SMALL = SceneSpec(resolution=32, n_primitives=4)
TRAJ = TrajectorySpec(width=16, height=16)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(3, SMALL)


@pytest.fixture(scope="module")
def views(scene):
    return generate_trajectory(scene, 10, seed=3, spec=TRAJ, n_samples=300)


def test_generation_is_deterministic(scene):
    again = generate_scene(3, SMALL)
    assert np.array_equal(scene.density, again.density)
    assert np.array_equal(scene.albedo, again.albedo)
    assert not np.array_equal(scene.labels, generate_scene(4, SMALL).labels)
    assert scene.scene_id == "scene-3"


def test_labels_and_density_agree(scene):
    occupied = scene.density > 0
    assert np.array_equal(occupied, scene.labels != BACKGROUND)
    assert scene.labels.max() < scene.n_classes
    assert 0.0 <= scene.albedo.min() and scene.albedo.max() <= 1.0


def test_room_is_closed(views):
    for v in views.views:
        assert np.isfinite(v.depth).all()
        assert (v.labels >= 0).all()


def test_split_holds_out_every_fifth_view(views):
    assert len(views.test) == 2 and len(views.train) == 8


def test_oracle_matches_closed_form_on_a_slab():
    v = 16
    density = np.zeros((v, v, v), np.float32)
    density[:, :, 8:] = 40.0  # half-space z >= 0.5
    labels = np.where(density > 0, 2, BACKGROUND).astype(np.int16)
    albedo = np.full((v, v, v), 0.5, np.float32)
    slab = Scene(density, labels, albedo, 4, "slab")
    o = np.array([[0.5, 0.5, 0.1]])
    d = np.array([[0.0, 0.0, 1.0]])
    gray, depth, lab, opacity = oracle_render_rays(slab, o, d, np.array([0.0]), np.array([0.9]), 20000)
    # Exponential termination past the entry point at distance 0.4, truncated at 0.8.
    s, length = 40.0, 0.4
    acc = 1 - np.exp(-s * length)
    mean = 0.4 + (1 / s - np.exp(-s * length) * (length + 1 / s)) / acc
    assert opacity[0] == pytest.approx(acc, rel=1e-4)
    assert depth[0] == pytest.approx(mean, rel=1e-4)
    assert lab[0] == 2


def test_oracle_misses_get_background():
    empty = Scene(np.zeros((8, 8, 8), np.float32), np.full((8, 8, 8), BACKGROUND, np.int16),
                  np.zeros((8, 8, 8), np.float32), 2, "empty")
    _, depth, lab, opacity = oracle_render_rays(empty, np.array([[0.5, 0.5, 0.5]]), np.array([[1.0, 0, 0]]),
                                                np.array([0.0]), np.array([0.5]), 100)
    assert np.isinf(depth[0]) and lab[0] == BACKGROUND and opacity[0] == 0.0


def test_scene_file_roundtrip(tmp_path, scene):
    path = save_scene(scene, tmp_path / "s.bin")
    back = load_scene(path)
    assert back.scene_id == scene.scene_id and back.n_classes == scene.n_classes
    assert np.array_equal(back.density, scene.density)
    assert np.array_equal(back.labels, scene.labels)
    (tmp_path / "bad.bin").write_bytes(b"nope" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        load_scene(tmp_path / "bad.bin")


def test_viewset_roundtrip_within_quantisation(tmp_path, views):
    back = load_viewset(save_viewset(views, tmp_path / "views"))
    assert back.scene_id == views.scene_id
    assert [v.split for v in back.views] == [v.split for v in views.views]
    for a, b in zip(views.views, back.views):
        assert np.abs(a.image - b.image).max() <= 0.5 / 65535 + 1e-7
        assert np.abs(a.depth - b.depth).max() <= 0.5 / DEPTH_PNG_SCALE + 1e-6
        assert np.array_equal(a.labels, b.labels)
        assert np.allclose(a.camera.pose.matrix(), b.camera.pose.matrix())


def test_oracle_render_shapes(scene):
    cam = generate_trajectory(scene, 1, seed=0, spec=TRAJ, n_samples=50).views[0].camera
    img, depth, lab = oracle_render(scene, cam, 50)
    assert img.shape == depth.shape == lab.shape == (16, 16)
