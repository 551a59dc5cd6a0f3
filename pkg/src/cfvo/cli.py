"""Command-line entry point.

Subcommands follow the pipeline order: ``synth`` writes a synthetic
dataset, ``calibrate`` estimates per-frame depth-scale factors against
the LiDAR projections, ``train`` runs stage 1, stage 2 or a single-stage
ablation, ``eval`` scores trajectories and depths, ``render`` dumps
depth/warp visualizations, and ``gradcheck`` audits the analytic
gradients against finite differences.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric
divergence.  Failures print a machine-readable JSON object on stderr.
Set CFVO_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import pathlib
import sys
from dataclasses import replace

import numpy as np

from . import dataio, synth
from .config import ConfigError, config_hash, load_config, merge_config
from .dataio import LoadError
from .depthfield import write_depth_pgm
from .estimator import frames_from_sequence, intrinsics_from_sequence
from .evaluation import (
    EvalReport,
    Trajectory,
    ate_rmse,
    depth_metrics,
    emit_report,
    kitti_segment_errors,
)
from .geometry import compose, inverse, se3_exp
from .losses import LossWeights, SequenceWindow, synthesize
from .scale import CalibrationError, apply_scale, estimate_scale, scale_statistics
from .trainer import (
    DivergenceError,
    SequenceData,
    TrainConfig,
    gradient_check,
    init_fields,
    load_checkpoint,
    run_single_stage_ablation,
    run_stage1,
    run_stage2,
    save_checkpoint,
)

log = logging.getLogger("cfvo")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

GRADCHECK_SELECTORS = ("photometric", "gc", "smoothness", "forward",
                       "backward", "refine")


def _setup_logging():
    level = os.environ.get("CFVO_LOG", "warning").upper()
    logging.basicConfig(stream=sys.stderr,
                        level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _scene_spec(cfg: dict, seed: int) -> synth.SyntheticSceneSpec:
    fields = dict(cfg["synth"])
    fields["step_translation"] = tuple(fields["step_translation"])
    return synth.SyntheticSceneSpec(seed=seed, **fields)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    fields = dict(cfg["train"])
    weights = LossWeights(**fields.pop("loss_weights"))
    return TrainConfig(seed=seed, weights=weights, **fields)


def _load_cfg(args) -> tuple:
    cfg = load_config(args.config) if args.config else merge_config(None)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg, config_hash(cfg), cfg["seed"]


def _sequence_inputs(data_dir, cfg):
    """Load a sequence and derive everything training needs from it."""
    seq = dataio.load_sequence(data_dir)
    intr = intrinsics_from_sequence(seq)
    frames = frames_from_sequence(seq)
    scale_factors = [
        estimate_scale(f.sparse, f.pretrained,
                       estimator=cfg["calibrate"]["estimator"],
                       min_valid=cfg["calibrate"]["min_valid"])
        for f in frames
    ]
    coarse = [apply_scale(sf, f.pretrained)
              for sf, f in zip(scale_factors, frames)]
    data = SequenceData(images=[f.image for f in frames], intrinsics=intr,
                        coarse_depths=coarse)
    return seq, frames, intr, scale_factors, data


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg, chash, seed = _load_cfg(args)
    spec = _scene_spec(cfg, seed)
    if args.frames is not None:
        spec = replace(spec, frames=args.frames)
    frames = synth.generate(spec)
    synth.write_dataset(frames, spec, args.out,
                        metadata={"config_hash": chash, "seed": seed})
    log.info("wrote %d frames to %s", len(frames), args.out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg, chash, seed = _load_cfg(args)
    if args.estimator:
        cfg["calibrate"]["estimator"] = args.estimator
    _, frames, _, scale_factors, _ = _sequence_inputs(args.data, cfg)
    doc = {
        "config_hash": chash,
        "seed": seed,
        "frames": [
            {"frame_id": i, "epsilon": sf.epsilon, "n_valid": sf.n_valid}
            for i, sf in enumerate(scale_factors)
        ],
    }
    stats = scale_statistics([sf.epsilon for sf in scale_factors])
    doc["aggregate"] = {"mu": stats.mu, "sigma": stats.sigma}
    payload = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        pathlib.Path(args.out).write_text(payload)
    else:
        sys.stdout.write(payload)
    return EXIT_OK


def _logs_dict(result) -> dict:
    return {
        "epoch_losses": result.epoch_losses,
        "translation_norms": result.translation_norms,
        "epochs_run": result.epochs_run,
        "switched": result.switched,
        "incidents": result.incidents,
        "skipped_windows": result.skipped_windows,
        "completed": True,
    }


def _resume_dict(doc) -> dict:
    logs = doc.get("logs") or {}
    return {
        "twists": doc["twists"],
        "fields": doc.get("fields"),
        "adam": doc.get("adam"),
        "epoch": doc.get("epoch", 0),
        "epoch_losses": logs.get("epoch_losses", []),
        "translation_norms": logs.get("translation_norms", []),
        "skipped_windows": logs.get("skipped_windows", 0),
        "incidents": logs.get("incidents", 0),
    }


def cmd_train(args) -> int:
    cfg, chash, seed = _load_cfg(args)
    tconf = _train_config(cfg, seed)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, frames, intr, scale_factors, data = _sequence_inputs(args.data, cfg)

    if args.stage == "1":
        resume = None
        if args.resume:
            doc = load_checkpoint(args.resume)
            if doc["stage"] != 1:
                raise ConfigError("--resume checkpoint is not a stage-1 state")
            if doc["logs"].get("completed"):
                log.info("stage 1 already completed; nothing to do")
                return EXIT_OK
            resume = _resume_dict(doc)
        result = run_stage1(data, tconf, resume=resume)
        save_checkpoint(out / "stage1.json", config_hash=chash, stage=1,
                        epoch=result.epochs_run, twists=result.twists,
                        adam=result.adam, logs=_logs_dict(result), seed=seed)
        _export_trajectory(out / "poses_stage1.txt", result.twists)
        log.info("stage 1 done after %d epochs", result.epochs_run)
        return EXIT_OK

    if args.stage == "2":
        resume_path = args.resume or (out / "stage1.json")
        doc = load_checkpoint(resume_path)
        from .trainer import StageResult

        if doc["stage"] == 1:
            if not doc["logs"].get("completed"):
                raise ConfigError("stage-1 checkpoint is incomplete; finish stage 1")
            stage1 = StageResult(
                twists=np.array(doc["twists"]), fields=None,
                epoch_losses=doc["logs"].get("epoch_losses", []),
                translation_norms=doc["logs"].get("translation_norms", []),
                epochs_run=doc["logs"].get("epochs_run", doc["epoch"]),
                switched=doc["logs"].get("switched", False),
                incidents=0, skipped_windows=0)
            result = run_stage2(data, tconf, stage1)
        else:
            # resuming an interrupted stage 2: the paired stage-1 state
            # sits next to it and supplies the epoch budget split
            stage1_doc = load_checkpoint(out / "stage1.json")
            stage1 = StageResult(
                twists=np.array(stage1_doc["twists"]), fields=None,
                epoch_losses=[], translation_norms=[],
                epochs_run=stage1_doc["logs"].get("epochs_run",
                                                  stage1_doc["epoch"]),
                switched=False, incidents=0, skipped_windows=0)
            result = run_stage2(data, tconf, stage1, resume=_resume_dict(doc))
        save_checkpoint(out / "stage2.json", config_hash=chash, stage=2,
                        epoch=result.epochs_run, twists=result.twists,
                        fields=result.fields, adam=result.adam,
                        logs=_logs_dict(result), seed=seed)
        _export_trajectory(out / "poses_stage2.txt", result.twists)
        _export_depths(out / "depth_stage2", result.fields)
        log.info("stage 2 done after %d epochs", result.epochs_run)
        return EXIT_OK

    # single-stage ablation
    if not args.mode:
        raise ConfigError("--stage single requires --mode")
    result = run_single_stage_ablation(data, tconf, args.mode)
    save_checkpoint(out / f"single_{args.mode}.json", config_hash=chash,
                    stage=2, epoch=result.epochs_run, twists=result.twists,
                    fields=result.fields, adam=result.adam,
                    logs=_logs_dict(result), seed=seed)
    _export_trajectory(out / f"poses_single_{args.mode}.txt", result.twists)
    if result.fields is not None:
        _export_depths(out / f"depth_single_{args.mode}", result.fields)
    log.info("single-stage (%s) done after %d epochs", args.mode,
             result.epochs_run)
    return EXIT_OK


def _export_trajectory(path, twists) -> None:
    from .evaluation import trajectory_from_twists

    dataio.write_poses(path, trajectory_from_twists(twists).poses)


def _export_depths(out_dir, fields) -> None:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, field in enumerate(fields):
        write_depth_pgm(out / f"{i:06d}.pgm", field.evaluate())


def _sparse_from_pgm(path):
    from .depthfield import DEPTH_PGM_SCALE, SparseDepthImage
    from .dataio import read_pgm_raw

    raw, maxval = read_pgm_raw(path)
    if maxval != 65535:
        raise LoadError(path, "sparse depth PGM must have maxval 65535")
    depth = raw.astype(float) / DEPTH_PGM_SCALE
    return SparseDepthImage(depth=depth, mask=raw > 0)


def cmd_eval(args) -> int:
    cfg, chash, seed = _load_cfg(args)
    if args.align:
        cfg["eval"]["align"] = args.align
    est_poses = dataio.read_poses(args.est)
    gt_poses = dataio.read_poses(args.gt)
    if len(est_poses) != len(gt_poses):
        raise LoadError(args.est,
                        f"{len(est_poses)} poses vs {len(gt_poses)} in GT")
    est = Trajectory(poses=est_poses)
    gt = Trajectory(poses=gt_poses)

    report = EvalReport(config={"config_hash": chash, "seed": seed,
                                "align": cfg["eval"]["align"]})
    report.ate_rmse = ate_rmse(est, gt, alignment=cfg["eval"]["align"])
    try:
        t_rel, r_rel = kitti_segment_errors(est, gt,
                                            step=cfg["eval"]["segment_step"])
        report.t_rel, report.r_rel = t_rel, r_rel
    except ValueError as exc:
        log.warning("segment errors unavailable: %s", exc)

    if args.depth_dir:
        if not args.depth_gt_dir:
            raise ConfigError("--depth-dir requires --depth-gt-dir")
        pred_dir = pathlib.Path(args.depth_dir)
        gt_dir = pathlib.Path(args.depth_gt_dir)
        preds = sorted(list(pred_dir.glob("*.pgm")) + list(pred_dir.glob("*.f32")))
        gts = sorted(gt_dir.glob("*.pgm"))
        if not preds or len(preds) != len(gts):
            raise LoadError(pred_dir,
                            f"{len(preds)} predictions vs {len(gts)} GT files")
        metric_sets = []
        ratios = []
        for p_path, g_path in zip(preds, gts):
            if str(p_path).endswith(".pgm"):
                from .depthfield import read_depth_pgm
                pred = read_depth_pgm(p_path)
            else:
                from .depthfield import read_depth_raw
                pred = read_depth_raw(p_path)
            sparse = _sparse_from_pgm(g_path)
            metric_sets.append(depth_metrics(pred, sparse,
                                             cap=cfg["eval"]["depth_cap"]))
            ratios.append(estimate_scale(sparse, pred).epsilon)
        report.depth = {
            key: float(np.mean([m[key] for m in metric_sets]))
            for key in metric_sets[0]
        }
        if len(ratios) >= 2:
            report.scale_stats = scale_statistics(ratios)

    paths = emit_report(report, args.out, est, gt)
    log.info("wrote %s", paths["report"])
    return EXIT_OK


def cmd_render(args) -> int:
    cfg, chash, seed = _load_cfg(args)
    seq, frames, intr, _, data = _sequence_inputs(args.data, cfg)
    n = len(frames)
    idx = args.frame
    if not (0 <= idx < n - 1):
        raise ConfigError(f"--frame must be in [0, {n - 2}]")

    if args.checkpoint:
        doc = load_checkpoint(args.checkpoint)
        pose = se3_exp(np.array(doc["twists"][idx]))
        if doc.get("fields"):
            depth_t = doc["fields"][idx].evaluate()
        else:
            depth_t = data.coarse_depths[idx]
    else:
        pose = se3_exp(np.zeros(6))
        depth_t = data.coarse_depths[idx]

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth_img, mask, z, _ = synthesize(data.images[idx + 1], depth_t, pose, intr)
    write_depth_pgm(out / f"depth_{idx:06d}.pgm", np.clip(depth_t, 0, 255))
    dataio.write_pgm(out / f"warp_{idx:06d}.pgm", np.clip(synth_img, 0, 1))
    dataio.write_pgm(out / f"mask_{idx:06d}.pgm", mask.astype(float), maxval=255)
    diff = np.abs(np.where(mask, synth_img - data.images[idx], 0.0))
    dataio.write_pgm(out / f"residual_{idx:06d}.pgm", np.clip(diff * 4, 0, 1))
    meta = {"config_hash": chash, "seed": seed, "frame": idx,
            "valid_fraction": float(mask.mean())}
    (out / f"render_{idx:06d}.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg, chash, seed = _load_cfg(args)
    spec = synth.oracle_scene_spec(
        frames=3, width=args.size, height=args.size,
        fx=args.size * 0.75, fy=args.size * 0.75,
        cx=(args.size - 1) / 2.0, cy=(args.size - 1) / 2.0,
        surface_min_period=4.0, texture_min_period=3.0,
        texture_amplitude=0.4, seed=seed)
    frames = synth.generate(spec)
    intr = spec.intrinsics()
    rng = np.random.default_rng(seed)
    gt = [compose(inverse(frames[i + 1].pose), frames[i].pose)
          for i in range(2)]
    poses = [compose(se3_exp(rng.normal(0.0, 0.01, 6)), p) for p in gt]
    data = SequenceData(images=[f.image for f in frames], intrinsics=intr,
                        coarse_depths=[f.depth for f in frames])
    tconf = _train_config(cfg, seed)
    fields = init_fields(data, tconf)
    for f in fields:
        f.params = f.params + rng.normal(0.0, 0.05, f.params.shape)
    window = SequenceWindow(images=data.images, intrinsics=intr, poses=poses,
                            coarse_depths=data.coarse_depths, fields=fields)

    reports = {}
    worst = 1.0
    for selector in GRADCHECK_SELECTORS:
        rep = gradient_check(selector, window, weights=tconf.weights)
        reports[selector] = rep.to_dict()
        reports[selector]["pass_fraction"] = rep.pass_fraction
        worst = min(worst, rep.pass_fraction)
        log.info("%s: %d/%d within tolerance", selector,
                 rep.n_checked - rep.n_failed, rep.n_checked)
    doc = {"config_hash": chash, "seed": seed, "reports": reports,
           "pass": worst >= 0.99}
    payload = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        pathlib.Path(args.out).write_text(payload)
    else:
        sys.stdout.write(payload)
    return EXIT_OK if doc["pass"] else 1


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfvo",
        description="Metric-scale monocular odometry and depth via "
                    "coarse-to-fine scale recovery.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--frames", type=int, help="override the frame count")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="per-frame depth-scale factors")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--estimator", choices=["median", "mean"])
    p.add_argument("--out", help="output JSON path (default stdout)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="run the optimization stages")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--stage", choices=["1", "2", "single"], required=True)
    p.add_argument("--mode", choices=["fixed_supervision", "no_supervision"],
                   help="ablation mode for --stage single")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score trajectories and depths")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--gt", required=True, help="ground-truth pose file")
    p.add_argument("--est", required=True, help="estimated pose file")
    p.add_argument("--align", choices=["none", "scale_only"])
    p.add_argument("--depth-dir", help="directory of predicted depth maps")
    p.add_argument("--depth-gt-dir",
                   help="directory of sparse GT depth PGMs (0 = invalid)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="write depth/warp visualizations")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--checkpoint", help="trained checkpoint to visualize")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, default=32,
                   help="instance side length (16-64)")
    p.add_argument("--out", help="output JSON path (default stdout)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _fail(kind: str, exc: Exception, code: int) -> int:
    doc = {"error": {"kind": kind, "message": str(exc), "exit_code": code}}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (LoadError, CalibrationError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except DivergenceError as exc:
        return _fail("divergence", exc, EXIT_DIVERGED)
    except ValueError as exc:
        return _fail("data", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
