"""Glue shared by the command line and the experiments: datasets, model files, shape probes."""
from __future__ import annotations

import json
import resource
import time
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .data import SceneRecipe, generate_scene, make_scene, read_scene, scene_hash, write_scene
from .numerics import load_checkpoint, no_grad, save_checkpoint
from .stage1 import QuerySet, Stage1Model, pool_any, stage1_forward
from .stage2 import Stage2Model, stage2_forward
from .triplane import cubic_query_counts, query_counts


class MissingArtifact(FileNotFoundError):
    pass


class ConfigMismatch(ValueError):
    pass


def scene_recipes(cfg, count, seed, offset=0):
    return [
        SceneRecipe(
            seed=int(seed) * 100003 + offset + i,
            grid=cfg.stage2_grid,
            intrinsics=cfg.intrinsics,
            pose=cfg.pose,
            num_classes=cfg.num_classes,
        )
        for i in range(count)
    ]


def synthesize(cfg, out_dir, count, seed, val_count=0):
    """Write ``count`` training and ``val_count`` validation scenes plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for split, n, offset in (("train", count, 0), ("val", val_count, 50000)):
        for i, recipe in enumerate(scene_recipes(cfg, n, seed, offset)):
            rel = f"{split}/scene_{i:04d}"
            write_scene(make_scene(recipe), out / rel)
            rows.append({"scene": rel, "split": split, "seed": recipe.seed, "sha256": scene_hash(out / rel)})
    manifest = {"seed": int(seed), "scenes": rows}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_split(data_dir, split="train"):
    data = Path(data_dir)
    manifest = data / "manifest.json"
    if not manifest.is_file():
        raise MissingArtifact(f"{manifest} missing")
    rows = json.loads(manifest.read_text())["scenes"]
    return [read_scene(data / r["scene"]) for r in rows if r["split"] == split]


def check_scene_compat(cfg, scenes):
    for s in scenes:
        if s.recipe.num_classes != cfg.num_classes:
            raise ConfigMismatch(f"scene has {s.recipe.num_classes} classes, model {cfg.num_classes}")
        if tuple(s.gt_semantic.shape) != cfg.stage2_grid.shape:
            raise ConfigMismatch(f"scene grid {s.gt_semantic.shape} differs from config {cfg.stage2_grid.shape}")


def save_model(model, path, stage):
    """Parameters go to ``path`` (ETFW), the config and stage to ``path.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.state_dict(), path)
    meta = {"stage": int(stage), "config": model.cfg.to_dict()}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path, stage):
    path = Path(path)
    side = Path(str(path) + ".json")
    if not path.is_file():
        raise MissingArtifact(f"checkpoint {path} missing")
    if not side.is_file():
        raise MissingArtifact(f"checkpoint metadata {side} missing")
    meta = json.loads(side.read_text())
    if meta.get("stage") != stage:
        raise ConfigMismatch(f"{path} is a stage-{meta.get('stage')} checkpoint, expected stage {stage}")
    cfg = PipelineConfig.from_dict(meta["config"])
    model = Stage1Model(cfg) if stage == 1 else Stage2Model(cfg)
    model.load_state_dict(load_checkpoint(path))
    return model


def info_report(cfg, models=()):
    """Grid specs, parameter counts and triplane-versus-dense query counts."""
    lat = cfg.stage1_grid.extents
    counts = query_counts(lat)
    side = int(cfg.stage1_grid.extents[0])
    cubic = cubic_query_counts(side)
    lines = [
        f"stage2_grid={list(cfg.stage2_grid.extents)} voxel={[round(float(v), 6) for v in cfg.stage2_grid.voxel_size]}",
        f"stage1_grid={list(lat)}",
        f"image={cfg.intrinsics.width}x{cfg.intrinsics.height} features={cfg.feature_extent[1]}x{cfg.feature_extent[0]}x{cfg.dim}",
        f"classes={cfg.num_classes} heads={cfg.heads} offsets={cfg.offsets} ref_grid={list(cfg.ref_grid)}",
        f"lattice_queries dense={counts['dense']} triplane={counts['triplane']} ratio={counts['ratio']:.2f}x",
        f"cubic_S={side} dense=S^3={cubic['dense']} triplane=3S^2={cubic['triplane']} ratio={cubic['ratio']:.2f}x",
        f"stage2_grid_queries dense={query_counts(cfg.stage2_grid.extents)['dense']} "
        f"triplane={query_counts(cfg.stage2_grid.extents)['triplane']}",
    ]
    for name, model in models:
        lines.append(f"{name}_parameters={model.num_parameters()}")
    return "\n".join(lines)


def peak_rss_mb():
    # ru_maxrss is in KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def shape_probe(cfg, seed=0):
    """Batch-1 forward pass of both stages without a graph; returns shapes, time and peak RSS.

    Untrained weights give an arbitrary occupancy map, so stage 2 is fed the
    ground-truth occupancy of a generated scene to carry a realistic query load.
    """
    t0 = time.perf_counter()
    scene = generate_scene(scene_recipes(cfg, 1, seed)[0])
    queries = QuerySet.from_mask(pool_any(scene.gt_occupancy), cfg.dim)
    image = np.random.default_rng(seed).random((3, cfg.intrinsics.height, cfg.intrinsics.width))
    s1, s2 = Stage1Model(cfg), Stage2Model(cfg)
    with no_grad():
        m_o = stage1_forward(s1, image, queries)
        out = stage2_forward(s2, queries, image, "mean")
        m_u = out.uncertainty()
    return {
        "stage1_logits": list(m_o.logits.shape),
        "stage2_logits": list(out.logits.shape),
        "uncertainty": list(m_u.shape),
        "queries": len(queries),
        "triplane_queries": s1.triplane.counter.triplane + s2.triplane.counter.triplane,
        "dense_equivalent": s1.triplane.counter.dense_equivalent + s2.triplane.counter.dense_equivalent,
        "seconds": time.perf_counter() - t0,
        "peak_rss_mb": peak_rss_mb(),
    }
