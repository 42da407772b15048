"""Procedural voxel worlds and a ray-marched RGB-D camera.

Scenes are built from boxes, vertical cylinders and spheres rasterized by
testing voxel centers. Randomly placed primitives are snapped to a coarse
lattice (``snap`` fine voxels per cell) so every label boundary also lies on
the coarse lattice.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import CameraIntrinsics, CameraPose, GridSpec, lattice_indices, voxel_center, world_to_voxel

CLASS_NAMES = ("free", "ground", "building", "trunk", "vegetation", "vehicle")
FREE, GROUND, BUILDING, TRUNK, VEGETATION, VEHICLE = range(6)
PALETTE = np.array(
    [
        [0.62, 0.78, 0.95],  # sky, for pixels that hit nothing
        [0.45, 0.42, 0.38],
        [0.75, 0.35, 0.25],
        [0.45, 0.28, 0.12],
        [0.20, 0.65, 0.22],
        [0.20, 0.30, 0.85],
    ]
)
LIGHT_DIR = np.array([-0.4, 0.3, 0.866]) / np.linalg.norm([-0.4, 0.3, 0.866])

DESK_GRID = GridSpec((32, 32, 8), (0.0, -25.6, -2.0), (51.2, 25.6, 4.4))
DESK_CAMERA = CameraIntrinsics(40.0, 40.0, 32.0, 32.0, 64, 64)
DESK_POSE = CameraPose((0.0, 0.0, 1.2))


@dataclass(frozen=True)
class Primitive:
    kind: str  # "box" | "cylinder" | "sphere"
    label: int
    params: tuple  # box: (lo3, hi3); cylinder: (cx, cy, radius, z0, z1); sphere: (cx, cy, cz, radius)

    def contains(self, p):
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "box":
            lo, hi = (np.asarray(v, dtype=np.float64) for v in self.params)
            return np.all((p >= lo) & (p < hi), axis=-1)
        if self.kind == "cylinder":
            cx, cy, r, z0, z1 = self.params
            rr = (p[..., 0] - cx) ** 2 + (p[..., 1] - cy) ** 2
            return (rr <= r * r) & (p[..., 2] >= z0) & (p[..., 2] < z1)
        if self.kind == "sphere":
            cx, cy, cz, r = self.params
            return np.sum((p - np.array([cx, cy, cz])) ** 2, axis=-1) <= r * r
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def to_dict(self):
        flat = [list(map(float, v)) if np.ndim(v) else float(v) for v in self.params]
        return {"kind": self.kind, "label": int(self.label), "params": flat}

    @classmethod
    def from_dict(cls, d):
        params = tuple(tuple(v) if isinstance(v, list) else v for v in d["params"])
        return cls(d["kind"], int(d["label"]), params)


@dataclass(frozen=True)
class SceneRecipe:
    seed: int = 0
    grid: GridSpec = DESK_GRID
    intrinsics: CameraIntrinsics = DESK_CAMERA
    pose: CameraPose = DESK_POSE
    num_classes: int = len(CLASS_NAMES)
    snap: int = 2
    ground: bool = True
    buildings: tuple = (1, 3)  # inclusive count range
    trees: tuple = (1, 3)
    bushes: tuple = (0, 2)
    vehicles: tuple = (0, 2)
    frustum_slope: float = 0.6  # objects keep |y| <= slope * x
    primitives: tuple | None = None  # explicit list overrides random placement

    def to_dict(self):
        d = {
            "seed": int(self.seed),
            "grid": self.grid.to_dict(),
            "intrinsics": self.intrinsics.to_dict(),
            "pose": self.pose.to_dict(),
            "num_classes": self.num_classes,
            "snap": self.snap,
            "ground": self.ground,
            "buildings": list(self.buildings),
            "trees": list(self.trees),
            "bushes": list(self.bushes),
            "vehicles": list(self.vehicles),
            "frustum_slope": self.frustum_slope,
        }
        if self.primitives is not None:
            d["primitives"] = [p.to_dict() for p in self.primitives]
        return d

    @classmethod
    def from_dict(cls, d):
        prims = d.get("primitives")
        return cls(
            seed=int(d["seed"]),
            grid=GridSpec.from_dict(d["grid"]),
            intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
            pose=CameraPose.from_dict(d["pose"]),
            num_classes=int(d["num_classes"]),
            snap=int(d["snap"]),
            ground=bool(d["ground"]),
            buildings=tuple(d["buildings"]),
            trees=tuple(d["trees"]),
            bushes=tuple(d["bushes"]),
            vehicles=tuple(d["vehicles"]),
            frustum_slope=float(d["frustum_slope"]),
            primitives=None if prims is None else tuple(Primitive.from_dict(p) for p in prims),
        )


@dataclass
class SceneSample:
    gt_semantic: np.ndarray  # [L, V, D] uint8
    valid_mask: np.ndarray  # [L, V, D] bool
    recipe: SceneRecipe
    rgb: np.ndarray | None = None  # [3, H, W] in [0, 1]
    depth: np.ndarray | None = None  # [H, W] meters, 0 = no hit
    fov_mask: np.ndarray | None = None  # [L, V, D] bool
    primitives: tuple = field(default_factory=tuple)

    @property
    def gt_occupancy(self):
        return self.gt_semantic != FREE

    @property
    def spec(self):
        return self.recipe.grid

    @property
    def intrinsics(self):
        return self.recipe.intrinsics

    @property
    def pose(self):
        return self.recipe.pose


def _random_primitives(recipe, rng):
    spec = recipe.grid
    cell = spec.voxel_size * recipe.snap
    lo = np.asarray(spec.world_min, dtype=np.float64)
    coarse = np.asarray(spec.extents) // recipe.snap
    ground_top = lo[2] + cell[2]
    prims = []
    if recipe.ground:
        prims.append(Primitive("box", GROUND, (tuple(lo), (spec.world_max[0], spec.world_max[1], ground_top))))

    def place(span_x, span_y):
        # coarse footprint origin inside the frustum wedge in front of the camera
        for _ in range(100):
            ix = int(rng.integers(1, coarse[0] - span_x))
            iy = int(rng.integers(0, coarse[1] - span_y + 1))
            x0 = lo[0] + ix * cell[0]
            y0, y1 = lo[1] + iy * cell[1], lo[1] + (iy + span_y) * cell[1]
            if max(abs(y0), abs(y1)) <= recipe.frustum_slope * x0 + cell[1]:
                return ix, iy
        return int(coarse[0] // 2), int(coarse[1] // 2 - span_y // 2)

    def box(ix, iy, sx, sy, z_cells, label):
        b_lo = (lo[0] + ix * cell[0], lo[1] + iy * cell[1], ground_top)
        b_hi = (b_lo[0] + sx * cell[0], b_lo[1] + sy * cell[1], ground_top + z_cells * cell[2])
        return Primitive("box", label, (b_lo, b_hi))

    n_levels = int(coarse[2]) - 1
    for _ in range(int(rng.integers(recipe.buildings[0], recipe.buildings[1] + 1))):
        sx, sy = (int(v) for v in rng.integers(1, 4, size=2))
        ix, iy = place(sx, sy)
        prims.append(box(ix, iy, sx, sy, int(rng.integers(1, n_levels + 1)), BUILDING))
    for _ in range(int(rng.integers(recipe.vehicles[0], recipe.vehicles[1] + 1))):
        sx, sy = (int(v) for v in rng.integers(1, 3, size=2))
        ix, iy = place(sx, sy)
        prims.append(box(ix, iy, sx, sy, 1, VEHICLE))
    # radii chosen so each cylinder / sphere covers exactly one coarse column / cell
    r_min = 0.5 * np.hypot(cell[0] / 2, cell[1] / 2) + 1e-6
    r_max = np.hypot(cell[0] * 0.75, cell[1] / 4) - 1e-6
    for _ in range(int(rng.integers(recipe.trees[0], recipe.trees[1] + 1))):
        ix, iy = place(1, 1)
        cx, cy = lo[0] + (ix + 0.5) * cell[0], lo[1] + (iy + 0.5) * cell[1]
        trunk_cells = int(rng.integers(1, max(n_levels - 1, 1) + 1))
        z1 = ground_top + trunk_cells * cell[2]
        prims.append(Primitive("cylinder", TRUNK, (cx, cy, float(rng.uniform(r_min, r_max)), ground_top, z1)))
        if z1 + cell[2] <= spec.world_max[2] + 1e-9:
            prims.append(Primitive("sphere", VEGETATION, (cx, cy, z1 + cell[2] / 2, _sphere_radius(cell, rng))))
    for _ in range(int(rng.integers(recipe.bushes[0], recipe.bushes[1] + 1))):
        ix, iy = place(1, 1)
        cx, cy = lo[0] + (ix + 0.5) * cell[0], lo[1] + (iy + 0.5) * cell[1]
        prims.append(Primitive("sphere", VEGETATION, (cx, cy, ground_top + cell[2] / 2, _sphere_radius(cell, rng))))
    return prims


def _sphere_radius(cell, rng):
    inner = np.linalg.norm(cell / 4) + 1e-6
    outer = np.linalg.norm(cell * np.array([0.75, 0.25, 0.25])) - 1e-6
    return float(rng.uniform(inner, min(outer, np.linalg.norm(cell * np.array([0.25, 0.25, 0.75])) - 1e-6)))


def generate_scene(recipe):
    """Rasterize the recipe's primitives; later primitives overwrite earlier ones."""
    spec = recipe.grid
    rng = np.random.default_rng(recipe.seed)
    prims = list(recipe.primitives) if recipe.primitives is not None else _random_primitives(recipe, rng)
    centers = voxel_center(lattice_indices(spec.extents), spec).reshape(*spec.shape, 3)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    for prim in prims:
        if not 0 <= prim.label < recipe.num_classes:
            raise ValueError(f"primitive label {prim.label} outside [0, {recipe.num_classes})")
        labels[prim.contains(centers)] = prim.label
    return SceneSample(labels, np.ones(spec.shape, dtype=bool), recipe, primitives=tuple(prims))


def _ray_directions(cam, pose):
    j, i = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    d_cam = np.stack([(j - cam.cx) / cam.fx, (i - cam.cy) / cam.fy, np.ones_like(j)], axis=-1)
    return d_cam @ pose.rotation.T  # world frame, camera-z component == 1 per unit t


def render_views(scene, cam=None, pose=None):
    """Ray-march every pixel center. Returns ``(rgb [3,H,W], depth [H,W], fov_mask)``.

    Depth is the camera-frame z of the entry point into the first occupied
    voxel (0 when the ray leaves the grid). ``fov_mask`` flags every voxel a
    ray passes through up to and including its first hit.
    """
    cam = cam or scene.intrinsics
    pose = pose or scene.pose
    spec = scene.spec
    occ = scene.gt_semantic != FREE
    origin = np.asarray(pose.position, dtype=np.float64)
    dirs = _ray_directions(cam, pose).reshape(-1, 3)
    n_rays = dirs.shape[0]
    vs = spec.voxel_size
    lo = np.asarray(spec.world_min, dtype=np.float64)
    hi = np.asarray(spec.world_max, dtype=np.float64)
    # march in camera-z units; world step per unit t is |dir|
    norms = np.linalg.norm(dirs, axis=1)
    step = 0.25 * vs.min() / norms
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = np.where(dirs != 0, (lo - origin) * inv, -np.inf)
        t1 = np.where(dirs != 0, (hi - origin) * inv, np.inf)
    t_in = np.maximum(np.max(np.minimum(t0, t1), axis=1), 0.0)
    t_out = np.min(np.maximum(t0, t1), axis=1)
    n_steps = int(np.ceil(np.max((t_out - t_in) / step))) + 2 if n_rays else 0

    hit_t = np.full(n_rays, np.inf)
    hit_idx = np.zeros((n_rays, 3), dtype=np.int64)
    alive = t_out > t_in
    fov = np.zeros(spec.shape, dtype=bool)
    for s in range(n_steps):
        t = t_in + (s + 0.5) * step
        active = alive & (t < t_out)
        if not active.any():
            break
        rays = np.flatnonzero(active)
        pts = origin + t[rays, None] * dirs[rays]
        idx, ok = world_to_voxel(pts, spec)
        rays, idx = rays[ok], idx[ok]
        fov[tuple(idx.T)] = True
        hit = occ[tuple(idx.T)]
        hit_idx[rays[hit]] = idx[hit]
        hit_t[rays[hit]] = t[rays[hit]]
        alive[rays[hit]] = False

    has_hit = np.isfinite(hit_t)
    depth = np.zeros(n_rays)
    shade = np.ones(n_rays)
    color_idx = np.zeros(n_rays, dtype=np.int64)
    if has_hit.any():
        r = np.flatnonzero(has_hit)
        v_lo = lo + hit_idx[r] * vs
        v_hi = v_lo + vs
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(dirs[r] != 0, (v_lo - origin) * inv[r], -np.inf)
            b = np.where(dirs[r] != 0, (v_hi - origin) * inv[r], -np.inf)
        enter = np.minimum(a, b)
        face = np.argmax(enter, axis=1)
        t_enter = np.clip(enter[np.arange(r.size), face], t_in[r], hit_t[r])
        # nudge inside the voxel so the back-projected point lands in it
        depth[r] = t_enter + 0.01 * vs.min() / norms[r]
        normal = np.zeros((r.size, 3))
        normal[np.arange(r.size), face] = -np.sign(dirs[r, face])
        shade[r] = 0.35 + 0.65 * np.clip(normal @ LIGHT_DIR, 0.0, 1.0)
        color_idx[r] = scene.gt_semantic[tuple(hit_idx[r].T)]
    rgb = PALETTE[color_idx] * shade[:, None]
    rgb = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    rgb = rgb.reshape(cam.height, cam.width, 3).transpose(2, 0, 1)
    depth = depth.astype(np.float32).astype(np.float64).reshape(cam.height, cam.width)
    return rgb, depth, fov


def make_scene(recipe):
    """Generate and render in one call."""
    scene = generate_scene(recipe)
    scene.rgb, scene.depth, scene.fov_mask = render_views(scene)
    return scene


def desk_recipes(count, seed=0, **overrides):
    return [replace(SceneRecipe(seed=int(seed) * 1000 + i), **overrides) for i in range(count)]
