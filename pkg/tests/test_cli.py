import json

import pytest

from ppnesf.cli import EXIT_CONFIG, EXIT_MISSING, main
from ppnesf.config import DEFAULT_CONFIG, ConfigError, load_config, merge, run_dir, train_config, validate
from ppnesf.scenes import load_scene, load_viewset

TINY_SCENE = {"scene": {"spec": {"n_primitives": 1, "n_classes": 3, "resolution": 16},
                        "trajectory": {"width": 16, "height": 16}, "n_views": 5}}


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def test_defaults_validate():
    assert validate(json.loads(json.dumps(DEFAULT_CONFIG))) is not None
    cfg = load_config()
    assert cfg["train"]["total_steps"] == 1500
    assert train_config(cfg).seed == cfg["seed"]


def test_unknown_key_reports_pointer(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"rays_per_stepz": 5}}))
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert exc.value.pointer == "/train"
    with pytest.raises(ConfigError) as exc:
        load_config(None, {"localize": {"n_queries": 0}})
    assert exc.value.pointer == "/localize/n_queries"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_merge_is_deep_and_pure():
    base = {"a": {"b": 1, "c": 2}, "d": [1]}
    out = merge(base, {"a": {"b": 5}, "d": [2]})
    assert out == {"a": {"b": 5, "c": 2}, "d": [2]}
    assert base == {"a": {"b": 1, "c": 2}, "d": [1]}


def test_run_dir_records_config(tmp_path):
    cfg = load_config()
    path = run_dir(tmp_path, cfg, "train")
    assert path.name.startswith("train-") and json.loads((path / "config.json").read_text()) == cfg


def test_verify_passes(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and out.count("[PASS]") >= 5
    assert last_json(out)["status"] == "ok"


def test_localize_missing_checkpoint(tmp_path, capsys):
    code = main(["localize", "--checkpoint", str(tmp_path / "nope.nesf"), "--out", str(tmp_path)])
    assert code == EXIT_MISSING
    err = last_json(capsys.readouterr().err)
    assert err["error"] == "checkpoint not found" and err["code"] == 2


def test_config_error_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"privacy": {"seeds": "zero"}}))
    assert main(["attack", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG
    err = last_json(capsys.readouterr().err)
    assert err["error"] == "config" and err["pointer"] == "/privacy/seeds"
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_MISSING


def test_scene_gen_writes_loadable_files(tmp_path, capsys):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_SCENE))
    assert main(["scene-gen", "--config", str(path), "--seed", "4", "--out", str(tmp_path)]) == 0
    res = last_json(capsys.readouterr().out)
    assert res["n_train"] + res["n_test"] == 5
    scene = load_scene(res["scene"])
    views = load_viewset(res["views"])
    assert scene.resolution == 16 and len(views.views) == 5


def test_infeasible_scene_is_reported(tmp_path, capsys):
    path = tmp_path / "crowded.json"
    path.write_text(json.dumps({"scene": {"spec": {"n_primitives": 50, "resolution": 16}}}))
    assert main(["scene-gen", "--config", str(path), "--out", str(tmp_path)]) == 1
    assert last_json(capsys.readouterr().err)["error"] == "invalid input"


def test_tiny_recipe_end_to_end(tmp_path, capsys):
    field = {"geo_dim": 8, "feature_dim": 8, "hidden": 16, "grid_levels": 3, "grid_features": 2,
             "log2_table": 10, "grid_min_res": 4, "grid_max_res": 16}
    train = {"rays_per_step": 64, "total_steps": 4, "n_coarse": 4, "n_sub": 2, "n_fine": 8, "n_samples": 8,
             "n_importance": 4, "field": field, "encoder_widths": [4, 8, 8, 8], "encoder_head_hidden": 8}
    cfg = {**TINY_SCENE, "train": train,
           "localize": {"refine": {"coarse_iters": 2, "fine_iters": 2, "rays_per_iter": 16, "n_samples": 8,
                                   "n_importance": 0}, "n_queries": 1},
           "privacy": {"seeds": [0], "n_views": 5, "trajectory": {"width": 16, "height": 16},
                       "train": {"total_steps": 2, "n_samples": 8, "n_importance": 4}, "attack_views": 1,
                       "decoder": {"width": 4, "depth": 2, "epochs": 1, "iters_per_epoch": 2, "views_per_scene": 2,
                                   "n_samples": 8, "n_importance": 0}}}
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg))
    common = ["--config", str(path), "--out", str(tmp_path)]
    assert main(["scene-gen", *common]) == 0
    scene_dir = last_json(capsys.readouterr().out)["run_dir"]
    assert main(["train", "--scene", scene_dir, *common]) == 0
    trained = last_json(capsys.readouterr().out)
    assert trained["steps"] == 4 and 0.0 <= trained["coarse_agreement"] <= 1.0
    assert main(["localize", "--checkpoint", trained["checkpoint"], "--scene", scene_dir, *common]) == 0
    loc = last_json(capsys.readouterr().out)
    assert loc["n"] == 1 and "recall@0.01/1deg" in loc
    assert main(["attack", *common]) == 0
    attacked = last_json(capsys.readouterr().out)
    assert set(attacked["seeds"][0]) >= {"seed", "rgb", "rgb+seg", "ppnesf"}
    assert main(["localize", "--checkpoint", trained["checkpoint"], "--scene", str(tmp_path / "nowhere"),
                 *common]) == EXIT_MISSING
