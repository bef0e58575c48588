"""Command-line entry point: ``ppnesf {scene-gen,train,localize,attack,verify}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .config import ConfigError, load_config, run_dir, scene_specs, train_config
from .localization import summarize
from .privacy import write_contact_sheet, write_report_csv
from .scenes import generate_scene, generate_trajectory, load_viewset, save_scene, save_viewset
from .training import coarse_agreement, load_state, save_state, train_scene
from .verify import run_all

logger = logging.getLogger("ppnesf")

EXIT_FAILURE, EXIT_MISSING, EXIT_CONFIG = 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


def _emit(payload: dict, stream=None):
    print(json.dumps(payload, sort_keys=True), file=stream or sys.stdout)


def _views_for(args, cfg):
    if args.scene:
        path = Path(args.scene)
        if not (path / "index.json").exists():
            path = path / "views"
        if not (path / "index.json").exists():
            raise CliError(EXIT_MISSING, "scene not found", f"scene not found: {args.scene}", path=str(args.scene))
        return load_viewset(path)
    return pipeline.make_views(cfg)


def _require_checkpoint(path):
    if path is None or not Path(path).exists():
        raise CliError(EXIT_MISSING, "checkpoint not found", f"checkpoint not found: {path}", path=str(path))
    return load_state(path)


def cmd_scene_gen(args, cfg, out: Path) -> dict:
    spec, traj = scene_specs(cfg)
    scene = generate_scene(cfg["seed"], spec)
    views = generate_trajectory(scene, cfg["scene"]["n_views"], seed=cfg["seed"], spec=traj)
    save_scene(scene, out / "scene.bin")
    save_viewset(views, out / "views")
    return {"scene": str(out / "scene.bin"), "views": str(out / "views"), "n_train": len(views.train),
            "n_test": len(views.test)}


def cmd_train(args, cfg, out: Path) -> dict:
    views = _views_for(args, cfg)
    tcfg = train_config(cfg)
    t0 = time.time()
    state = train_scene(tcfg, views, out_dir=out)
    save_state(state, out / "training_artifact.nesf", keep_feature_field=True, tag="training-artifact")
    summary = {"checkpoint": str(out / "final.nesf"), "steps": state.step, "seconds": round(time.time() - t0, 1),
               "final_loss": state.log[-1]["total"] if state.log else None}
    if state.encoder is not None:
        summary["coarse_agreement"] = coarse_agreement(state.model, state.encoder, views.train[:10],
                                                       tcfg.n_samples, tcfg.n_importance)
    return summary


def cmd_localize(args, cfg, out: Path) -> dict:
    state = _require_checkpoint(args.checkpoint)
    if state.encoder is None:
        raise CliError(EXIT_FAILURE, "unsupported checkpoint", "checkpoint has no image encoder")
    views = _views_for(args, cfg)
    results = pipeline.run_localization(cfg, state, views)
    thresholds = [tuple(t) for t in cfg["localize"]["thresholds"]]
    with (out / "localization.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "translation_error", "rotation_error_deg", "converged", "final_loss"])
        for i, r in enumerate(results):
            w.writerow([i, f"{r.translation_error:.6f}", f"{r.rotation_error:.4f}", int(r.converged),
                        f"{r.losses[-1]:.6f}" if r.losses else ""])
    summary = summarize(results, thresholds)
    (out / "summary.txt").write_text("\n".join(f"{k}: {v}" for k, v in summary.items()) + "\n")
    return summary


def cmd_attack(args, cfg, out: Path) -> dict:
    runs = [pipeline.run_privacy_seed(cfg, s, keep_images=True) for s in cfg["privacy"]["seeds"]]
    reports = [r for run in runs for r in run.reports.values()]
    write_report_csv(reports, out / "privacy.csv")
    for run in runs:
        write_contact_sheet(list(run.reports.values()), out / f"contact_seed{run.seed}.png")
    return {"seeds": [{"seed": run.seed, "mean_image_psnr": run.mean_baseline,
                       **{v: rep.summary() for v, rep in run.reports.items()}} for run in runs]}


def cmd_verify(args, cfg, out: Path) -> dict:
    results = run_all()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError(EXIT_FAILURE, "verification failed", f"{len(failed)} check(s) failed", failed=failed)
    return {"checks": len(results), "failed": 0}


COMMANDS = {
    "scene-gen": cmd_scene_gen,
    "train": cmd_train,
    "localize": cmd_localize,
    "attack": cmd_attack,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppnesf", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config merged over the defaults")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--out", type=Path, default=Path("runs"), help="root for run directories")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("scene-gen", parents=[common], help="generate a synthetic scene and its views")
    p = sub.add_parser("train", parents=[common], help="train a field on a scene")
    p.add_argument("--scene", help="directory written by scene-gen (default: regenerate from config)")
    p = sub.add_parser("localize", parents=[common], help="localize the test views of a scene")
    p.add_argument("--checkpoint", help="checkpoint written by train")
    p.add_argument("--scene", help="directory written by scene-gen (default: regenerate from config)")
    sub.add_parser("attack", parents=[common], help="run the inversion-attack protocol")
    sub.add_parser("verify", parents=[common], help="run the built-in oracle checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    if args.precision == "f64":
        torch.set_default_dtype(torch.float64)
    try:
        cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
    except ConfigError as exc:
        _emit({"status": "error", "code": EXIT_CONFIG, "error": "config", "pointer": exc.pointer,
               "message": exc.detail}, sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        _emit({"status": "error", "code": EXIT_MISSING, "error": "config not found", "message": str(exc)}, sys.stderr)
        return EXIT_MISSING
    out = run_dir(args.out, cfg, args.command)
    try:
        summary = COMMANDS[args.command](args, cfg, out)
    except CliError as exc:
        _emit({"status": "error", "code": exc.code, "error": exc.kind, "message": str(exc), **exc.extra}, sys.stderr)
        return exc.code
    except ValueError as exc:  # infeasible scene specs, bad view sets and the like
        _emit({"status": "error", "code": EXIT_FAILURE, "error": "invalid input", "message": str(exc)}, sys.stderr)
        return EXIT_FAILURE
    summary = {"status": "ok", "command": args.command, "run_dir": str(out), **summary}
    (out / "result.json").write_text(json.dumps(summary, indent=2, default=_jsonable))
    _emit(json.loads(json.dumps(summary, default=_jsonable)))
    return 0


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return str(x)


if __name__ == "__main__":
    sys.exit(main())
