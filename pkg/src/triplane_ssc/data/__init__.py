"""Synthetic scenes, rendering and on-disk formats."""
from .formats import (
    FormatError,
    decode_voxel_grid,
    encode_voxel_grid,
    read_depth,
    read_rgb,
    read_voxel_grid,
    write_depth,
    write_rgb,
    write_voxel_grid,
)
from .synth import (
    CLASS_NAMES,
    DESK_CAMERA,
    DESK_GRID,
    DESK_POSE,
    Primitive,
    SceneRecipe,
    SceneSample,
    desk_recipes,
    generate_scene,
    make_scene,
    render_views,
)
from .scene_io import MEMBERS, SceneFormatError, read_scene, scene_hash, write_scene
from .semantickitti import read_semantickitti_frame
