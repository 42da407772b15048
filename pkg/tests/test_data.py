import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from triplane_ssc.data import (
    CLASS_NAMES,
    FormatError,
    MEMBERS,
    Primitive,
    SceneFormatError,
    SceneRecipe,
    decode_voxel_grid,
    desk_recipes,
    encode_voxel_grid,
    generate_scene,
    make_scene,
    read_depth,
    read_rgb,
    read_scene,
    read_semantickitti_frame,
    read_voxel_grid,
    render_views,
    scene_hash,
    write_depth,
    write_rgb,
    write_scene,
    write_voxel_grid,
)
from triplane_ssc.geometry import (
    CameraIntrinsics,
    lattice_indices,
    pixel_to_point,
    project_point_to_image,
    voxel_center,
    world_to_voxel,
)

WALL = Primitive("box", 2, ((10.0, -25.6, -2.0), (12.0, 25.6, 4.4)))


# --- formats ---------------------------------------------------------------


def test_vg3d_paper_grid_file_size(tmp_path):
    grid = np.zeros((256, 256, 32), dtype=np.uint8)
    write_voxel_grid(grid, tmp_path / "g.vg3d", 20)
    assert (tmp_path / "g.vg3d").stat().st_size == 32 + 2_097_152


@pytest.mark.parametrize("dtype", ["u1", "<f4", "<f8"])
def test_vg3d_round_trip(tmp_path, dtype):
    rng = np.random.default_rng(0)
    grid = (rng.random((5, 4, 3)) * 200).astype(dtype)
    write_voxel_grid(grid, tmp_path / "g.vg3d", 7)
    back, n = read_voxel_grid(tmp_path / "g.vg3d")
    assert n == 7 and back.dtype == grid.dtype and np.array_equal(back, grid)
    assert back.tobytes() == grid.tobytes()


@given(arrays(np.uint8, st.tuples(*[st.integers(1, 6)] * 3)))
def test_vg3d_round_trip_property(grid):
    back, _ = decode_voxel_grid(encode_voxel_grid(grid))
    assert np.array_equal(back, grid)


def test_vg3d_header_layout():
    buf = encode_voxel_grid(np.zeros((2, 3, 4), np.uint8), 6)
    assert buf[:4] == b"VG3D"
    assert int.from_bytes(buf[4:6], "little") == 1
    assert buf[6] == 0
    assert int.from_bytes(buf[7:9], "little") == 6
    assert [int.from_bytes(buf[9 + 4 * i : 13 + 4 * i], "little") for i in range(3)] == [2, 3, 4]
    assert buf[21:32] == bytes(11) and len(buf) == 32 + 24


def test_vg3d_payload_is_x_major():
    grid = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    assert encode_voxel_grid(grid)[32:] == bytes(range(24))


def test_vg3d_corruption_errors():
    buf = bytearray(encode_voxel_grid(np.ones((2, 2, 2), np.uint8), 2))
    bad = bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="offset 0"):
        decode_voxel_grid(bad)
    v2 = bytearray(buf)
    v2[4] = 9
    with pytest.raises(FormatError, match="offset 4"):
        decode_voxel_grid(bytes(v2))
    with pytest.raises(FormatError, match="offset 32"):
        decode_voxel_grid(bytes(buf[:-1]))
    with pytest.raises(FormatError, match="offset 0"):
        decode_voxel_grid(bytes(buf[:10]))
    with pytest.raises(FormatError, match="offset 40"):
        decode_voxel_grid(bytes(buf) + b"\0")


def test_vg3d_rejects_non_3d():
    with pytest.raises(ValueError):
        encode_voxel_grid(np.zeros((2, 2)))


def test_depth_and_rgb_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    depth = rng.uniform(0, 50, (6, 9)).astype(np.float32)
    write_depth(depth, tmp_path / "d.f32")
    assert np.array_equal(read_depth(tmp_path / "d.f32"), depth)
    assert (tmp_path / "d.f32").stat().st_size == 8 + 6 * 9 * 4
    rgb = rng.integers(0, 256, (3, 6, 9)) / 255.0
    write_rgb(rgb, tmp_path / "c.rgb8")
    assert np.array_equal(read_rgb(tmp_path / "c.rgb8"), rgb)
    assert (tmp_path / "c.rgb8").stat().st_size == 8 + 6 * 9 * 3


def test_image_truncation(tmp_path):
    write_depth(np.zeros((3, 3)), tmp_path / "d.f32")
    (tmp_path / "d.f32").write_bytes((tmp_path / "d.f32").read_bytes()[:-2])
    with pytest.raises(FormatError, match="offset 8"):
        read_depth(tmp_path / "d.f32")


# --- generation ------------------------------------------------------------


def test_one_box_labels_exactly_its_cells():
    # cells x 2..3, y 3..4, z 1..2 on the 1.6 x 1.6 x 0.8 m desk lattice
    box = Primitive("box", 5, ((3.2, -20.8, -1.2), (6.4, -17.6, 0.4)))
    scene = generate_scene(SceneRecipe(primitives=(box,)))
    expected = np.zeros(scene.spec.shape, dtype=np.uint8)
    expected[2:4, 3:5, 1:3] = 5
    assert np.array_equal(scene.gt_semantic, expected)


def test_later_primitives_overwrite():
    a = Primitive("box", 1, ((0.0, -25.6, -2.0), (51.2, 25.6, 4.4)))
    b = Primitive("sphere", 4, (20.0, 0.0, 1.0, 2.0))
    sem = generate_scene(SceneRecipe(primitives=(a, b))).gt_semantic
    assert set(np.unique(sem)) == {1, 4}


def test_empty_recipe_is_all_free():
    scene = generate_scene(SceneRecipe(primitives=()))
    assert not scene.gt_semantic.any() and not scene.gt_occupancy.any()
    assert scene.valid_mask.all()


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError):
        generate_scene(SceneRecipe(primitives=(Primitive("box", 6, ((0, 0, 0), (1, 1, 1))),)))


@pytest.mark.parametrize("seed", range(4))
def test_random_scenes_valid(seed):
    scene = generate_scene(SceneRecipe(seed=seed))
    assert scene.gt_semantic.max() < len(CLASS_NAMES)
    assert np.array_equal(scene.gt_occupancy, scene.gt_semantic != 0)
    assert scene.gt_occupancy.any()


def test_generation_deterministic():
    a, b = make_scene(SceneRecipe(seed=3)), make_scene(SceneRecipe(seed=3))
    for f in ("gt_semantic", "rgb", "depth", "fov_mask"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(a.gt_semantic, make_scene(SceneRecipe(seed=4)).gt_semantic)


def test_recipe_dict_round_trip():
    r = desk_recipes(1, seed=2)[0]
    assert SceneRecipe.from_dict(r.to_dict()) == r
    r = SceneRecipe(primitives=(WALL,))
    assert SceneRecipe.from_dict(r.to_dict()).primitives == (WALL,)


# --- rendering -------------------------------------------------------------


def _corner_visible(scene, cam):
    spec = scene.spec
    centers = voxel_center(lattice_indices(spec.extents), spec)
    seen = np.zeros(spec.shape, bool)
    for corner in np.array(np.meshgrid([-0.5, 0.5], [-0.5, 0.5], [-0.5, 0.5])).reshape(3, -1).T:
        _, _, ok = project_point_to_image(scene.pose.world_to_cam(centers + corner * spec.voxel_size), cam)
        seen |= ok.reshape(spec.shape)
    return seen


def test_empty_scene_renders_zero_depth_and_frustum_fov():
    scene = make_scene(SceneRecipe(primitives=()))
    assert np.all(scene.depth == 0)
    spec = scene.spec
    centers = voxel_center(lattice_indices(spec.extents), spec)
    _, _, center_in = project_point_to_image(scene.pose.world_to_cam(centers), scene.intrinsics)
    center_in = center_in.reshape(spec.shape)
    # near the camera rays are denser than voxels, so every voxel whose center is in view is hit
    assert np.all(scene.fov_mask[:20][center_in[:20]])
    # nothing outside the viewing frustum is ever flagged
    assert not np.any(scene.fov_mask & ~_corner_visible(scene, scene.intrinsics))


def test_wall_depth():
    scene = make_scene(SceneRecipe(primitives=(WALL,)))
    half = scene.spec.voxel_size[0] / 2
    assert abs(scene.depth[32, 32] - 10.0) <= half
    # rays through the central rows stay inside the grid's height until the wall
    assert np.all(scene.depth[22:42] > 0)
    assert np.all(np.abs(scene.depth[22:42] - 10.0) <= half)


def test_fov_stops_at_first_hit():
    scene = make_scene(SceneRecipe(primitives=(WALL,)))
    first = np.flatnonzero(scene.gt_occupancy.any(axis=(1, 2)))
    assert first.tolist() == [6]
    assert scene.fov_mask[6].any() and not scene.fov_mask[7:].any()


def test_rgb_range_and_background():
    scene = make_scene(SceneRecipe(primitives=(WALL,)))
    assert scene.rgb.shape == (3, 64, 64)
    assert np.all((scene.rgb >= 0) & (scene.rgb <= 1))
    hit = scene.depth > 0
    assert not np.allclose(scene.rgb[:, hit].mean(axis=1), scene.rgb[:, ~hit].mean(axis=1))


def test_depth_back_projects_into_occupied_voxels(desk_scenes):
    for scene in desk_scenes:
        cam, spec = scene.intrinsics, scene.spec
        i, j = np.nonzero(scene.depth)
        p = scene.pose.cam_to_world(pixel_to_point(j + 0.5, i + 0.5, scene.depth[i, j], cam))
        idx, ok = world_to_voxel(p, spec)
        assert ok.all()
        occ = np.pad(scene.gt_occupancy, 1)
        near = np.zeros(len(i), bool)
        for d in np.array(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1])).reshape(3, -1).T:
            near |= occ[tuple((idx + 1 + d).T)]
        assert near.all()
        assert occ[tuple((idx + 1).T)].mean() > 0.99


def test_fov_monotone_in_image_size(desk_scenes):
    scene = desk_scenes[0]
    cam = scene.intrinsics
    big = CameraIntrinsics(cam.fx, cam.fy, cam.cx + 16, cam.cy + 8, cam.width + 32, cam.height + 16)
    _, _, fov_big = render_views(scene, big)
    assert np.all(fov_big >= scene.fov_mask) and fov_big.sum() > scene.fov_mask.sum()


def test_render_deterministic(desk_scenes):
    a = render_views(desk_scenes[1])
    b = render_views(desk_scenes[1])
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


# --- scene directories -----------------------------------------------------


def test_scene_round_trip(tmp_path, desk_scenes):
    scene = desk_scenes[0]
    write_scene(scene, tmp_path / "s")
    back = read_scene(tmp_path / "s")
    assert back.recipe == scene.recipe
    for f in ("gt_semantic", "gt_occupancy", "valid_mask", "fov_mask", "rgb"):
        assert np.array_equal(getattr(back, f), getattr(scene, f)), f
    assert np.array_equal(back.depth, scene.depth)
    assert sorted(p.name for p in (tmp_path / "s").iterdir()) == sorted(MEMBERS)


def test_missing_member_is_named(tmp_path, desk_scenes):
    write_scene(desk_scenes[0], tmp_path / "s")
    (tmp_path / "s" / "depth.f32").unlink()
    with pytest.raises(SceneFormatError, match="depth.f32 missing"):
        read_scene(tmp_path / "s")


def test_inconsistent_occupancy_rejected(tmp_path, desk_scenes):
    write_scene(desk_scenes[0], tmp_path / "s")
    write_voxel_grid(np.zeros(desk_scenes[0].spec.shape, np.uint8), tmp_path / "s" / "gt_occupancy.vg3d", 2)
    with pytest.raises(SceneFormatError):
        read_scene(tmp_path / "s")


def test_scene_hash_tracks_seed(tmp_path):
    a, b = desk_recipes(2, seed=5)
    write_scene(make_scene(a), tmp_path / "a")
    write_scene(make_scene(a), tmp_path / "a2")
    write_scene(make_scene(b), tmp_path / "b")
    assert scene_hash(tmp_path / "a") == scene_hash(tmp_path / "a2")
    assert scene_hash(tmp_path / "a") != scene_hash(tmp_path / "b")


def test_unrendered_scene_cannot_be_written(tmp_path):
    with pytest.raises(ValueError):
        write_scene(generate_scene(SceneRecipe(primitives=())), tmp_path / "s")


def test_desk_recipe_overrides():
    rs = desk_recipes(3, seed=1, snap=1)
    assert [r.seed for r in rs] == [1000, 1001, 1002] and all(r.snap == 1 for r in rs)
    assert dataclasses.replace(rs[0], snap=2) != rs[0]


def test_semantickitti_stub_raises():
    with pytest.raises(NotImplementedError):
        read_semantickitti_frame("/nonexistent", "00", "000000")
