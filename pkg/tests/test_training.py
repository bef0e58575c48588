import dataclasses
import logging
import math

import numpy as np
import pytest
import torch

import ppnesf.training as training
from ppnesf.diffcore import load_checkpoint
from ppnesf.scenes import SceneSpec, TrajectorySpec, generate_scene, generate_trajectory
from ppnesf.training import (
    TrainConfig,
    build_state,
    finalize,
    load_state,
    save_state,
    train_scene,
    train_step,
)

TINY_FIELD = {"geo_dim": 8, "feature_dim": 8, "hidden": 16, "grid_levels": 3, "grid_features": 2,
              "log2_table": 10, "grid_min_res": 4, "grid_max_res": 16}


def tiny_config(**kw) -> TrainConfig:
    base = dict(rays_per_step=64, total_steps=6, n_coarse=4, n_sub=2, n_fine=8, n_samples=8, n_importance=4,
                sinkhorn_iters=20, field=TINY_FIELD, encoder_widths=(4, 8, 8, 8), encoder_head_hidden=8, seed=3)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def views():
    scene = generate_scene(5, SceneSpec(n_primitives=3, n_classes=4, resolution=24))
    return generate_trajectory(scene, 6, seed=5, spec=TrajectorySpec(width=16, height=16), n_samples=200)


def params(state):
    out = [p.detach().clone() for p in state.model.parameters()]
    if state.encoder is not None:
        out += [p.detach().clone() for p in state.encoder.parameters()]
    return out


def test_config_validation():
    with pytest.raises(ValueError, match="n_fine"):
        tiny_config(n_fine=9)
    with pytest.raises(ValueError):
        tiny_config(lr_field=(0.0, 1e-4))
    with pytest.raises(ValueError):
        tiny_config(variant="depth-only")
    with pytest.raises(ValueError):
        tiny_config(loss_weights={"bogus": 1.0})
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"n_classes": 3})
    cfg = tiny_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_variant_weights():
    assert tiny_config().weights().get("rgb", 0.0) == 0.0
    rgb = tiny_config(variant="rgb").weights()
    assert rgb["rgb"] > 0 and rgb["nce"] == rgb["ce_coarse"] == rgb["hierar"] == 0.0
    both = tiny_config(variant="rgb+seg").weights()
    assert both["rgb"] > 0 and both["nce"] > 0


def test_mlp_lr_scale_splits_field_groups(views):
    plain = build_state(tiny_config(variant="rgb+seg"))
    assert len(plain.optimizer.optimizer.param_groups) == 2
    st = build_state(tiny_config(variant="rgb+seg", mlp_lr_scale=0.1))
    groups = st.optimizer.optimizer.param_groups
    assert len(groups) == 3 and groups[2]["lr"] == pytest.approx(0.1 * groups[0]["lr"])
    grid = {id(p) for n, p in st.model.named_parameters() if "grid" in n}
    assert {id(p) for p in groups[0]["params"]} == grid
    n_field = sum(1 for _ in st.model.parameters())
    assert len(groups[0]["params"]) + len(groups[2]["params"]) == n_field
    train_scene(tiny_config(variant="rgb", mlp_lr_scale=0.1, total_steps=2), views.train)
    with pytest.raises(ValueError):
        tiny_config(mlp_lr_scale=0.0)


def test_empty_views_rejected():
    with pytest.raises(ValueError, match="no training views"):
        train_scene(tiny_config(), [])


def test_runs_are_deterministic(views):
    a = train_scene(tiny_config(), views)
    b = train_scene(tiny_config(), views)
    assert [r["total"] for r in a.log] == [r["total"] for r in b.log]
    assert all(torch.equal(x, y) for x, y in zip(params(a), params(b)))
    assert torch.equal(a.bank.p2d_coarse, b.bank.p2d_coarse)


def test_resume_matches_uninterrupted_run(views, tmp_path):
    cfg = tiny_config()
    full = train_scene(cfg, views)
    half = train_scene(cfg, views, stop_at=3)
    save_state(half, tmp_path / "half.nesf")
    resumed = train_scene(cfg, views, state=load_state(tmp_path / "half.nesf"))
    assert resumed.step == full.step == cfg.total_steps
    assert all(torch.equal(x, y) for x, y in zip(params(full), params(resumed)))
    assert torch.equal(full.bank.p3d_fine, resumed.bank.p3d_fine)


def test_containment_logged_every_step(views):
    state = train_scene(tiny_config(), views)
    assert len(state.log) == 6
    assert all(row["containment"] == 1.0 for row in state.log)


def test_final_checkpoint_drops_feature_field(views, tmp_path):
    state = train_scene(tiny_config(), views, out_dir=tmp_path)
    final, meta = load_checkpoint(tmp_path / "final.nesf")
    assert meta["tag"] == "final" and not meta["has_feature_field"]
    assert not any(k.startswith("field.gamma") for k in final)
    assert not any(k.startswith("optim.") for k in final)
    assert (tmp_path / "train_log.csv").exists()
    save_state(state, tmp_path / "artifact.nesf", tag="training-artifact")
    artifact, _ = load_checkpoint(tmp_path / "artifact.nesf")
    assert any(k.startswith("field.gamma") for k in artifact)
    reloaded = load_state(tmp_path / "final.nesf")
    assert not reloaded.model.has_feature_field
    for a, b in zip(state.model.psi_mlp.parameters(), reloaded.model.psi_mlp.parameters()):
        assert torch.equal(a, b)


def test_rgb_variant_and_finalize(views):
    state = train_scene(tiny_config(variant="rgb", total_steps=3), views)
    assert state.encoder is None and state.bank is None and state.model.has_rgb
    assert math.isnan(state.log[-1]["containment"])
    final = finalize(state)
    assert state.model.has_rgb and not final.model.has_rgb and not final.model.has_feature_field


def test_missing_depth_disables_depth_term(views, caplog):
    no_depth = [dataclasses.replace(v, depth=None) for v in views.train]
    with caplog.at_level(logging.WARNING, logger="ppnesf.training"):
        state = train_scene(tiny_config(total_steps=2), no_depth)
    assert state.weights["depth"] == 0.0
    assert "no depth" in caplog.text
    assert all(row["depth"] == 0.0 for row in state.log)


def test_nan_loss_rolls_back(views, monkeypatch, caplog):
    state = build_state(tiny_config())
    train_step(state, views.train[0])
    before, bank = params(state), state.bank
    opt_state = {k: v.clone() for k, v in state.optimizer.state_arrays().items()}
    monkeypatch.setattr(training, "loss_nce", lambda *a, **k: torch.tensor(float("nan"), dtype=torch.float64))
    with caplog.at_level(logging.WARNING, logger="ppnesf.training"):
        assert train_step(state, views.train[1]) is None
    assert "step skipped" in caplog.text
    assert state.step == 2 and len(state.log) == 1
    assert state.bank is bank
    assert all(torch.equal(x, y) for x, y in zip(before, params(state)))
    assert all(torch.equal(opt_state[k], v) for k, v in state.optimizer.state_arrays().items())


def test_loss_decreases_on_depth(views):
    state = train_scene(tiny_config(total_steps=40, rays_per_step=128), views)
    depth = np.array([r["depth"] for r in state.log])
    assert depth[-10:].mean() < depth[:10].mean()
