"""Command line: synth, train-stage1, train-stage2, eval, predict, info.

Exit codes: 0 ok, 2 I/O error, 3 missing input artifact, 4 config or shape mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import PipelineConfig, preset
from .data import CLASS_NAMES, FormatError, SceneFormatError, read_scene, write_voxel_grid
from .geometry import voxel_center
from .numerics import CheckpointError, no_grad
from .pipeline import (
    ConfigMismatch,
    MissingArtifact,
    check_scene_compat,
    info_report,
    load_model,
    load_split,
    save_model,
    shape_probe,
    synthesize,
)
from .stage1 import Stage1Model, evaluate_stage1, make_optimizer, predict_occupancy, stage1_example, train_stage1
from .stage2 import (
    Stage2Model,
    class_weights_from_scenes,
    predict_with_uncertainty,
    stage2_example,
    stage2_forward,
    train_stage2,
)

EXIT_OK, EXIT_IO, EXIT_MISSING, EXIT_MISMATCH = 0, 2, 3, 4

logger = logging.getLogger("triplane_ssc")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _load_config(args):
    cfg = preset(args.preset)
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc}") from exc
        try:
            base = cfg.to_dict()
            base.update(json.loads(text))
            cfg = PipelineConfig.from_dict(base)
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_MISMATCH, f"invalid config {args.config}: {exc}") from exc
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.updated(**overrides)


def _prepare_out(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_IO, f"output directory {out} is not writable: {exc}") from exc
    return out


def _echo_config(cfg, out, extra=None):
    payload = {"config": cfg.to_dict()}
    if extra:
        payload.update(extra)
    (out / "effective_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_synth(args):
    cfg = _load_config(args)
    if args.count < 0 or args.val_count < 0:
        raise CliError(EXIT_MISMATCH, "scene counts must be non-negative")
    out = _prepare_out(args.out)
    _echo_config(cfg, out, {"count": args.count, "val_count": args.val_count, "seed": args.seed or 0})
    manifest = synthesize(cfg, out, args.count, args.seed or 0, args.val_count)
    print(f"wrote {len(manifest['scenes'])} scenes to {out}")
    return EXIT_OK


def _scenes(args, cfg, split="train"):
    scenes = load_split(args.data, split)
    check_scene_compat(cfg, scenes)
    return scenes


def cmd_train_stage1(args):
    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.updated(steps_stage1=args.steps)
    out = _prepare_out(args.out or Path(args.out_checkpoint).parent)
    scenes = _scenes(args, cfg)
    if not scenes:
        raise CliError(EXIT_MISSING, f"no training scenes in {args.data}")
    val = load_split(args.data, "val")
    _echo_config(cfg, out, {"command": "train-stage1"})
    rng = np.random.default_rng(cfg.seed + 7)
    examples = [stage1_example(s, cfg, rng) for s in scenes]
    val_examples = [stage1_example(s, cfg, rng) for s in val]
    model = Stage1Model(cfg)
    steps = cfg.steps_stage1
    log_path = out / "stage1_loss.log"
    with open(log_path, "w") as fh:

        def log(step, loss):
            fh.write(f"step={step} L_ce={loss:.10g} total={loss:.10g}\n")
            if args.eval_every and (step + 1) % args.eval_every == 0:
                iou, recall = evaluate_stage1(model, val_examples or examples)
                print(f"step={step + 1} IoU={iou:.4f} Recall={recall:.4f}", flush=True)

        train_stage1(model, examples, steps, log=log, optimizer=make_optimizer(model))
    save_model(model, args.out_checkpoint, stage=1)
    print(f"stage-1 checkpoint written to {args.out_checkpoint}")
    return EXIT_OK


def cmd_train_stage2(args):
    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.updated(steps_stage2=args.steps)
    s1 = None
    if args.teacher_forcing:
        cfg = cfg.updated(teacher_forcing=1.0)
    elif not args.checkpoint_s1:
        raise CliError(EXIT_MISSING, "stage 2 needs --checkpoint-s1 or --teacher-forcing")
    else:
        s1 = load_model(args.checkpoint_s1, 1)
        if s1.cfg.stage1_grid.shape != cfg.stage1_grid.shape:
            raise CliError(EXIT_MISMATCH, "stage-1 checkpoint grid differs from the stage-2 config")
    out = _prepare_out(args.out or Path(args.out_checkpoint).parent)
    scenes = _scenes(args, cfg)
    if not scenes:
        raise CliError(EXIT_MISSING, f"no training scenes in {args.data}")
    _echo_config(cfg, out, {"command": "train-stage2"})
    examples = [stage2_example(s, cfg, s1) for s in scenes]
    weights = class_weights_from_scenes([e.target for e in examples], cfg.num_classes, cfg.class_weights)
    model = Stage2Model(cfg)
    with open(out / "stage2_loss.log", "w") as fh:
        train_stage2(model, examples, cfg.steps_stage2, weights, log=lambda step, parts: fh.write(parts.line(step) + "\n"))
    save_model(model, args.out_checkpoint, stage=2)
    print(f"stage-2 checkpoint written to {args.out_checkpoint}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    out = _prepare_out(args.out)
    if args.oracle:
        scenes = _scenes(args, cfg, args.split)
        sem = occ = None
        for s in scenes:
            a = metrics.confusion_matrix(s.gt_semantic, s.gt_semantic, s.valid_mask, cfg.num_classes)
            b = metrics.confusion_matrix(s.gt_occupancy.astype(np.uint8), s.gt_occupancy.astype(np.uint8), s.valid_mask, 2)
            sem = a if sem is None else sem + a
            occ = b if occ is None else occ + b
        report = "mode=oracle\n" + metrics.format_report(sem, _class_names(cfg), occ, args.zero_absent)
    else:
        if not args.checkpoint_s1 or not args.checkpoint_s2:
            raise CliError(EXIT_MISSING, "eval needs --checkpoint-s1 and --checkpoint-s2 (or --oracle)")
        s1 = load_model(args.checkpoint_s1, 1)
        s2 = load_model(args.checkpoint_s2, 2)
        scenes = load_split(args.data, args.split)
        check_scene_compat(s2.cfg, scenes)
        sem = occ = None
        for s in scenes:
            ex1 = stage1_example(s, s1.cfg)
            m_o = predict_occupancy(s1, ex1)
            b = metrics.confusion_matrix(m_o.labels, ex1.target, ex1.mask, 2)
            ex2 = stage2_example(s, s2.cfg, s1)
            with no_grad():
                pred = stage2_forward(s2, ex2.stage1_queries, ex2.image, "mean")
            a = metrics.confusion_matrix(pred.labels, ex2.target, ex2.mask, s2.cfg.num_classes)
            sem = a if sem is None else sem + a
            occ = b if occ is None else occ + b
        report = "mode=model\n" + metrics.format_report(sem, _class_names(s2.cfg), occ, args.zero_absent)
    (out / "report.txt").write_text(report + "\n")
    print(report)
    return EXIT_OK


def _class_names(cfg):
    if cfg.num_classes == len(CLASS_NAMES):
        return list(CLASS_NAMES)
    return [f"class{k}" for k in range(cfg.num_classes)]


def cmd_predict(args):
    s1 = load_model(args.checkpoint_s1, 1)
    s2 = load_model(args.checkpoint_s2, 2)
    try:
        scene = read_scene(args.scene)
    except SceneFormatError as exc:
        raise CliError(EXIT_MISSING, str(exc)) from exc
    check_scene_compat(s2.cfg, [scene])
    out = _prepare_out(args.out_dir)
    _echo_config(s2.cfg, out, {"command": "predict", "samples": args.samples, "seed": args.seed or 0})
    labels, m_u, ensemble = predict_with_uncertainty(s1, s2, scene, args.samples, args.seed or 0)
    write_voxel_grid(labels, out / "semantic.vg3d", s2.cfg.num_classes)
    write_voxel_grid(m_u.astype(np.float32), out / "uncertainty.vg3d")
    write_voxel_grid(ensemble.astype(np.float32), out / "ensemble_variance.vg3d")
    # point cloud of predicted non-free voxels; uncertainty from the enclosing stage-1 cell
    idx = np.argwhere(labels != 0)
    xyz = voxel_center(idx, s2.cfg.stage2_grid)
    unc = m_u[tuple((idx // 2).T)] if idx.size else np.zeros(0)
    with open(out / "points.txt", "w") as fh:
        for (x, y, z), lab, u in zip(xyz, labels[tuple(idx.T)], unc):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {int(lab)} {u:.9g}\n")
    print(f"predicted {idx.shape[0]} occupied voxels; outputs in {out}")
    return EXIT_OK


def cmd_info(args):
    models = []
    if args.checkpoint:
        for stage in (1, 2):
            try:
                models.append((f"stage{stage}", load_model(args.checkpoint, stage)))
                break
            except ConfigMismatch:
                continue
        if not models:
            raise CliError(EXIT_MISMATCH, f"{args.checkpoint} matches neither stage")
        cfg = models[0][1].cfg
    else:
        cfg = _load_config(args)
        models = [("stage1", Stage1Model(cfg)), ("stage2", Stage2Model(cfg))] if args.params else []
    print(info_report(cfg, models))
    if args.forward:
        probe = shape_probe(cfg, args.seed or 0)
        print(
            f"forward stage1_logits={probe['stage1_logits']} stage2_logits={probe['stage2_logits']} "
            f"uncertainty={probe['uncertainty']} queries={probe['queries']} "
            f"decoded_triplane={probe['triplane_queries']} decoded_dense_equivalent={probe['dense_equivalent']} seconds={probe['seconds']:.2f} "
            f"peak_rss_mb={probe['peak_rss_mb']:.1f}"
        )
    return EXIT_OK


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config; keys override the preset")
    shared.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    shared.add_argument("--preset", default="desk", choices=["desk", "paper-shape"])
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="triplane-ssc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[shared], help="generate synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--val-count", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-stage1", parents=[shared], help="train the occupancy stage")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--eval-every", type=int, default=0)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", parents=[shared], help="train the semantic stage")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint-s1")
    p.add_argument("--teacher-forcing", action="store_true", help="ground-truth occupancy queries for every step")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", parents=[shared], help="IoU / mIoU / Recall report")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--checkpoint-s1")
    p.add_argument("--checkpoint-s2")
    p.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    p.add_argument("--zero-absent", action="store_true", help="count classes absent from both sides as IoU 0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[shared], help="semantic and uncertainty maps for one scene")
    p.add_argument("--checkpoint-s1", required=True)
    p.add_argument("--checkpoint-s2", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--out-dir", "--out", dest="out_dir", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("info", parents=[shared], help="grid specs, parameter and query counts")
    p.add_argument("--checkpoint")
    p.add_argument("--params", action="store_true", help="build the models to count parameters")
    p.add_argument("--forward", action="store_true", help="run a batch-1 forward pass and log peak memory")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must fit in an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_MISMATCH
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigMismatch, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (CheckpointError, FormatError, SceneFormatError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
