"""Scene directories: ``scene.json`` plus one binary file per array."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .formats import read_depth, read_rgb, read_voxel_grid, write_depth, write_rgb, write_voxel_grid
from .synth import SceneRecipe, SceneSample

MEMBERS = (
    "scene.json",
    "rgb.rgb8",
    "depth.f32",
    "gt_semantic.vg3d",
    "gt_occupancy.vg3d",
    "valid_mask.vg3d",
    "fov_mask.vg3d",
)


class SceneFormatError(ValueError):
    pass


def write_scene(scene, directory):
    if scene.rgb is None or scene.depth is None or scene.fov_mask is None:
        raise ValueError("scene must be rendered before it can be written")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n = scene.recipe.num_classes
    meta = {"format": "scene", "version": 1, "recipe": scene.recipe.to_dict()}
    (d / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_rgb(scene.rgb, d / "rgb.rgb8")
    write_depth(scene.depth, d / "depth.f32")
    write_voxel_grid(scene.gt_semantic.astype(np.uint8), d / "gt_semantic.vg3d", n)
    write_voxel_grid(scene.gt_occupancy, d / "gt_occupancy.vg3d", 2)
    write_voxel_grid(scene.valid_mask, d / "valid_mask.vg3d", 2)
    write_voxel_grid(scene.fov_mask, d / "fov_mask.vg3d", 2)
    return d


def read_scene(directory):
    d = Path(directory)
    missing = [m for m in MEMBERS if not (d / m).is_file()]
    if missing:
        raise SceneFormatError(", ".join(f"{m} missing" for m in missing) + f" in {d}")
    meta = json.loads((d / "scene.json").read_text())
    recipe = SceneRecipe.from_dict(meta["recipe"])
    sem, n = read_voxel_grid(d / "gt_semantic.vg3d")
    occ, _ = read_voxel_grid(d / "gt_occupancy.vg3d")
    if n != recipe.num_classes:
        raise SceneFormatError(f"gt_semantic declares {n} classes, scene.json {recipe.num_classes}")
    if not np.array_equal(occ.astype(bool), sem != 0):
        raise SceneFormatError("gt_occupancy disagrees with gt_semantic")
    if sem.shape != recipe.grid.shape:
        raise SceneFormatError(f"gt_semantic extents {sem.shape} differ from grid {recipe.grid.shape}")
    scene = SceneSample(
        gt_semantic=sem,
        valid_mask=read_voxel_grid(d / "valid_mask.vg3d")[0].astype(bool),
        recipe=recipe,
        rgb=read_rgb(d / "rgb.rgb8"),
        depth=read_depth(d / "depth.f32").astype(np.float64),
        fov_mask=read_voxel_grid(d / "fov_mask.vg3d")[0].astype(bool),
    )
    return scene


def scene_hash(directory):
    """SHA-256 over the member files in a fixed order."""
    h = hashlib.sha256()
    for m in MEMBERS:
        h.update(m.encode())
        h.update((Path(directory) / m).read_bytes())
    return h.hexdigest()
