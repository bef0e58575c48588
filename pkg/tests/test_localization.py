import math

import numpy as np
import pytest
import torch

from ppnesf.diffcore import gradient_probe_errors
from ppnesf.encoder2d import EncoderOutput
from ppnesf.fields import FieldConfig, FieldModel, render_view
from ppnesf.geometry import Camera, Pose, generate_rays, look_at, pose_error, se3_exp_torch
from ppnesf.localization import (
    LocalizationResult,
    RefineConfig,
    label_histogram,
    perturb_pose,
    refine_pose,
    refinement_loss,
    retrieve_initial_pose,
    summarize,
    uncertainty_weights,
)

SMALL = FieldConfig(n_coarse=4, n_fine=8, geo_dim=6, feature_dim=4, hidden=16, grid_levels=3,
                    grid_features=2, log2_table=10, grid_min_res=4, grid_max_res=16)


@pytest.fixture(scope="module")
def model():
    m = FieldModel(SMALL, with_feature_field=False, seed=2).double()
    # Larger table values give the random field visible structure.
    with torch.no_grad():
        m.psi_grid.table.normal_(0.0, 1.0, generator=torch.Generator().manual_seed(0))
    return m


def camera():
    # Generic coordinates: a camera at x = 0.5 would put samples exactly on
    # grid-cell faces, where the piecewise-trilinear encoding has kinks and
    # central differences stop being a valid oracle.
    return Camera.from_fov(16, 16, 60.0, look_at([0.513, 0.217, 0.447], [0.481, 0.793, 0.352]))


def test_refine_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(coarse_iters=0, fine_iters=0)
    with pytest.raises(ValueError):
        RefineConfig(decay=0.0)
    with pytest.raises(TypeError):
        RefineConfig.from_dict({"bogus": 1})


def test_label_histogram_and_retrieval():
    h = label_histogram([[0, 1, 1], [-1, 2, 2]], 4)
    assert np.allclose(h, [0.2, 0.4, 0.4, 0.0])
    a, b = Pose.identity(), Pose(np.eye(3), np.array([1.0, 0, 0]))
    db = [(a, np.array([0.5, 0.5, 0.0])), (b, np.array([0.0, 0.5, 0.5]))]
    assert retrieve_initial_pose(np.array([0.0, 0.5, 0.5]), db) is b
    assert retrieve_initial_pose(db[0][1], db) is a
    with pytest.raises(ValueError):
        retrieve_initial_pose(h, [])


def test_perturbation_has_requested_magnitude(rng):
    pose = look_at([0.3, 0.4, 0.5], [0.6, 0.6, 0.3])
    for rot, trans in [(5.0, 0.05), (10.0, 0.1), (0.0, 0.0)]:
        te, re = pose_error(perturb_pose(pose, rot, trans, rng), pose)
        assert te == pytest.approx(trans, abs=1e-12)
        assert re == pytest.approx(rot, abs=1e-6)


def test_uncertainty_weights_drop_lowest_decile():
    unc = torch.linspace(0.1, 2.0, 20, dtype=torch.float64)[:, None].expand(20, 3)
    w = uncertainty_weights(unc, 0.1)
    assert int((w == 0).sum()) == 2
    assert torch.allclose(w[0], torch.exp(torch.tensor(-0.1, dtype=torch.float64)))
    assert bool((uncertainty_weights(unc, 0.0) > 0).all())


def test_pose_chart_gradient_matches_finite_differences(model):
    cam = camera()
    p_wc = cam.pose.inverse()
    px = np.random.default_rng(0).uniform(0, 16, size=(32, 2))
    d = cam.camera_directions(px)
    dirs = torch.from_numpy(d / np.linalg.norm(d, axis=1, keepdims=True))
    rays = generate_rays(cam, px)
    interval = (rays.near, rays.far)
    target = torch.softmax(torch.randn(32, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1)), 1)
    weights = torch.rand(32, dtype=torch.float64, generator=torch.Generator().manual_seed(2)) + 0.5
    delta = torch.zeros(6, dtype=torch.float64, requires_grad=True)
    r0, t0 = torch.tensor(p_wc.rotation), torch.tensor(p_wc.translation)

    def loss():
        dr, dt = se3_exp_torch(delta)
        return refinement_loss(model, dirs, dr @ r0, dr @ t0 + dt, target, weights, "coarse", 24, 0,
                               interval=interval)

    errs = gradient_probe_errors(loss, [delta], n_probes=50, eps=1e-6)
    assert errs.max() < 1e-4


def self_query(model, cam):
    """Encoder-shaped output whose segmentation is the field's own rendering."""
    lc = torch.from_numpy(render_view(model, cam, None, "seg_coarse", 24, 0))[None]
    lf = torch.from_numpy(render_view(model, cam, None, "seg_fine", 24, 0))[None]
    return EncoderOutput(torch.zeros(1, 1, 16, 16), lc, lf, torch.full_like(lc, 1e-3), torch.full_like(lf, 1e-3))


def test_ground_truth_is_a_fixed_point(model):
    cam = camera()
    # Adam's first steps have size ~lr whatever the gradient scale, so the
    # pose wanders before settling; the default iteration counts bring it back.
    cfg = RefineConfig(rays_per_iter=64, n_samples=24, n_importance=0)
    res = refine_pose(model, self_query(model, cam), cam, cam.pose, cfg, gt=cam.pose)
    assert res.converged and len(res.losses) == 300
    assert res.rotation_error < 0.1 and res.translation_error < 0.001


def test_refinement_leaves_model_untouched(model):
    cam = camera()
    before = [p.detach().clone() for p in model.parameters()]
    init = perturb_pose(cam.pose, 3.0, 0.02, np.random.default_rng(0))
    res = refine_pose(model, self_query(model, cam), cam, init,
                      RefineConfig(coarse_iters=3, fine_iters=0, rays_per_iter=32, n_samples=16, n_importance=0))
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
    assert all(p.grad is None for p in model.parameters())
    assert math.isnan(res.translation_error)
    assert res.pose.is_valid()
    with pytest.raises(ValueError):
        refine_pose(model, self_query(model, cam), cam, Pose(2 * np.eye(3), np.zeros(3)))


def test_summary_recall_keys():
    results = [LocalizationResult(Pose.identity(), 0.005, 0.5), LocalizationResult(Pose.identity(), 0.2, 20.0)]
    s = summarize(results, [(0.01, 1.0)])
    assert s["recall@0.01/1deg"] == 0.5 and s["n"] == 2
    assert s["median_translation"] == pytest.approx(0.1025)
