import numpy as np
import pytest
import torch

from ppnesf.diffcore import gradient_probe_errors
from ppnesf.fields import (
    FieldConfig,
    FieldModel,
    RaySampleBatch,
    render,
    render_rays,
    render_view,
    render_weights,
    sample_pdf,
    sample_ray,
)
from ppnesf.geometry import Camera, look_at

SMALL = FieldConfig(n_coarse=4, n_fine=8, geo_dim=6, feature_dim=5, hidden=16, grid_levels=2,
                    grid_features=2, log2_table=8, grid_min_res=4, grid_max_res=8)


def small_model(**kw):
    return FieldModel(SMALL, **kw).double()


def rays(n=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    o = torch.full((n, 3), 0.5, dtype=torch.float64) + 0.05 * torch.randn(n, 3, generator=g, dtype=torch.float64)
    d = torch.randn(n, 3, generator=g, dtype=torch.float64)
    d = d / d.norm(dim=1, keepdim=True)
    return o, d, torch.zeros(n, dtype=torch.float64), torch.full((n,), 0.4, dtype=torch.float64)


def test_render_weights_constant_density_closed_form():
    sigma, delta, s = 3.0, 0.1, 12
    w = render_weights(torch.full((1, s), sigma, dtype=torch.float64), torch.full((1, s), delta, dtype=torch.float64))
    i = np.arange(s)
    expected = np.exp(-sigma * delta * i) * (1 - np.exp(-sigma * delta))
    assert np.allclose(w.numpy()[0], expected, rtol=1e-14)
    assert float(w.sum()) == pytest.approx(1 - np.exp(-sigma * delta * s), rel=1e-14)


def test_render_composites_payload_and_depth():
    t = torch.tensor([[0.1, 0.2, 0.3]], dtype=torch.float64)
    deltas = torch.full_like(t, 0.1)
    sigma = torch.tensor([[0.0, 1e6, 0.0]], dtype=torch.float64)
    payload = torch.tensor([[[1.0], [2.0], [3.0]]], dtype=torch.float64)
    rgb, acc, depth, _ = render(RaySampleBatch(t, deltas), payload, sigma)
    assert float(acc) == pytest.approx(1.0)
    assert float(rgb) == pytest.approx(2.0)
    assert float(depth) == pytest.approx(0.2)


def test_sample_pdf_concentrates_on_heavy_bin():
    edges = torch.linspace(0, 1, 11, dtype=torch.float64).expand(1, 11).contiguous()
    w = torch.zeros(1, 10, dtype=torch.float64)
    w[0, 7] = 1.0
    t = sample_pdf(edges, w, 2000, torch.Generator().manual_seed(0))
    inside = ((t >= 0.7) & (t <= 0.8)).double().mean()
    assert float(inside) > 0.99
    assert float(t.min()) >= 0.0 and float(t.max()) <= 1.0


def test_sample_ray_sorted_and_within_bounds():
    model = small_model()
    o, d, n, f = rays()
    batch = sample_ray(o, d, n, f, 8, 4, model.density, torch.Generator().manual_seed(0))
    assert batch.t.shape == (16, 12)
    assert bool((torch.diff(batch.t, dim=1) >= 0).all())
    assert bool((batch.t >= 0).all()) and bool((batch.t <= 0.4).all())
    with pytest.raises(ValueError):
        sample_ray(o, d, n, f, 8, 4, None)


def test_render_rays_gradients_match_finite_differences():
    # The segmentation heads read the position encoding detached, so finite
    # differences through the grid only agree with autograd on depth and rgb.
    model = small_model(with_rgb=True)
    o, d, n, f = rays(8)

    def run(kinds):
        return render_rays(model, o, d, n, f, kinds, 6, 0, torch.Generator().manual_seed(5))

    def geometric():
        out = run(("rgb",))
        return out["depth"].pow(2).sum() + out["rgb"].sum()

    def segmentation():
        return run(("seg_coarse",))["seg_coarse"].pow(2).sum()

    geo_params = [model.psi_grid.table, *model.psi_mlp.parameters(), *model.rgb_head.parameters()]
    assert gradient_probe_errors(geometric, geo_params, n_probes=15).max() < 1e-6
    assert gradient_probe_errors(segmentation, list(model.omega_coarse.parameters()), n_probes=15).max() < 1e-6


def test_feature_rendering_leaves_geometry_untouched():
    model = small_model()
    o, d, n, f = rays(8)
    out = render_rays(model, o, d, n, f, ("feature",), 6, 0, torch.Generator().manual_seed(0))
    out["feature"].sum().backward()
    assert model.psi_grid.table.grad is None or float(model.psi_grid.table.grad.abs().max()) == 0.0
    assert float(model.gamma_grid.table.grad.abs().max()) > 0.0


def test_segmentation_does_not_train_position_encoding_directly():
    model = small_model()
    pts = torch.rand(10, 3, dtype=torch.float64)
    _, g, enc = model.geometry(pts)
    lc, _ = model.segmentation(g.detach(), enc)
    lc.sum().backward()
    assert model.psi_grid.table.grad is None


def test_stripping_branches():
    model = small_model(with_rgb=True)
    assert model.has_feature_field and model.has_rgb
    model.strip_feature_field().strip_rgb()
    assert not model.has_feature_field and not model.has_rgb
    o, d, n, f = rays(4)
    with pytest.raises(ValueError):
        render_rays(model, o, d, n, f, ("feature",))
    with pytest.raises(ValueError):
        render_rays(model, o, d, n, f, ("rgb",))
    with pytest.raises(ValueError):
        render_rays(model, o, d, n, f, ("colour",))


def test_core_init_independent_of_optional_branches():
    a = FieldModel(SMALL, with_feature_field=False, seed=3)
    b = FieldModel(SMALL, with_feature_field=True, with_rgb=True, seed=3)
    for pa, pb in zip(a.core_parameters(), b.core_parameters()):
        assert torch.equal(pa, pb)


def test_render_view_shapes():
    model = small_model()
    cam = Camera.from_fov(8, 4, 60.0, look_at([0.5, 0.5, 0.2], [0.5, 0.5, 0.8]))
    assert render_view(model, cam, None, "seg_coarse", 8, 4).shape == (4, 4, 8)
    assert render_view(model, cam, None, "depth", 8, 4).shape == (4, 8)
    assert render_view(model, cam, [[1.5, 1.5]], "seg_fine", 8, 4).shape == (1, 8)
