"""Occupancy prediction: depth -> raw occupancy queries -> triplane decoder -> free/occupied logits."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cvae import weighted_cross_entropy
from .encoder import ImageEncoder, encode_image
from .geometry import normalized_position, pixel_to_point, positional_embedding, world_to_voxel
from .metrics import confusion_matrix, occupancy_iou_recall
from .numerics import SGD, Adam, Linear, Module, Tensor, as_tensor, cosine_lr, no_grad, softmax
from .triplane import TriplaneDecoder, build_reference_grid

logger = logging.getLogger(__name__)


@dataclass
class QuerySet:
    indices: np.ndarray  # [n, 3] distinct lattice indices, x-major order
    features: np.ndarray  # [n, dim] positional embeddings of the voxel centers
    extents: tuple

    def __len__(self):
        return self.indices.shape[0]

    @classmethod
    def from_mask(cls, mask, dim):
        mask = np.asarray(mask, dtype=bool)
        idx = np.argwhere(mask).astype(np.int64)
        return cls.from_indices(idx, mask.shape, dim)

    @classmethod
    def from_indices(cls, indices, extents, dim):
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        feats = positional_embedding(normalized_position(idx, extents), dim) if len(idx) else np.zeros((0, dim))
        return cls(idx, feats, tuple(int(e) for e in extents))


@dataclass
class OccupancyMap:
    logits: Tensor  # [L, V, D, 2]
    spec: object

    @property
    def labels(self):
        # ties go to free (index 0)
        return np.argmax(self.logits.data, axis=-1).astype(np.uint8)


def depth_to_raw_occupancy(depth, cam, pose, spec, dim=None):
    """Back-project every pixel with depth > 0 and mark the voxels the points land in.

    Returns the occupancy grid and, when ``dim`` is given, the raw query set.
    """
    depth = np.asarray(depth, dtype=np.float64)
    rows, cols = np.nonzero(depth > 0)
    occ = np.zeros(spec.shape, dtype=bool)
    if rows.size:
        pts = pose.cam_to_world(pixel_to_point(cols + 0.5, rows + 0.5, depth[rows, cols], cam))
        idx, ok = world_to_voxel(pts, spec)
        occ[tuple(idx[ok].T)] = True
    if dim is None:
        return occ
    return occ, QuerySet.from_mask(occ, dim)


def pool_any(grid, factor=2):
    """Block-wise logical OR: a coarse cell is set when any fine voxel inside it is."""
    g = np.asarray(grid, dtype=bool)
    l, v, d = g.shape
    if l % factor or v % factor or d % factor:
        raise ValueError(f"grid {g.shape} not divisible by {factor}")
    return g.reshape(l // factor, factor, v // factor, factor, d // factor, factor).any(axis=(1, 3, 5))


def noisy_depth(depth, sigma, rng):
    """Multiplicative Gaussian noise on valid pixels, emulating an estimated depth map."""
    if sigma <= 0:
        return depth
    noise = 1.0 + sigma * rng.standard_normal(depth.shape)
    return np.where(depth > 0, np.maximum(depth * noise, 1e-3), 0.0)


class Stage1Model(Module):
    def __init__(self, cfg, rng=None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.encoder = ImageEncoder(rng, cfg.dim, cfg.encoder_width)
        self.query_proj = Linear(rng, cfg.dim, cfg.dim)
        self.triplane = TriplaneDecoder(rng, cfg.triplane, cfg.stage1_grid.extents, 2, kind="occupancy")
        fh, fw = cfg.feature_extent
        self.ref_grid = build_reference_grid(cfg.stage1_grid, *cfg.ref_grid, cfg.intrinsics, cfg.pose, fh, fw)

    def __call__(self, image, queries):
        return stage1_forward(self, image, queries)


def stage1_forward(model, image, queries):
    """``image [3, H, W]`` plus raw occupancy queries -> OccupancyMap on the stage-1 lattice."""
    f_r = encode_image(as_tensor(image), model.encoder)
    feats = model.query_proj(Tensor(queries.features))
    logits = model.triplane(queries.indices, feats, model.ref_grid, f_r)
    return OccupancyMap(logits, model.cfg.stage1_grid)


def occupancy_to_queries(m_o, dim, threshold=None):
    """Occupied voxels of an occupancy map (argmax, or occupied probability > threshold) as queries."""
    logits = m_o.logits.data if isinstance(m_o, OccupancyMap) else np.asarray(m_o)
    if threshold is None:
        occ = np.argmax(logits, axis=-1) == 1
    else:
        occ = softmax(Tensor(logits), axis=-1).data[..., 1] > threshold
    if not occ.any():
        logger.warning("occupancy map has no occupied voxel; stage 2 will see no queries")
    return QuerySet.from_mask(occ, dim)


@dataclass
class Stage1Example:
    image: np.ndarray
    queries: QuerySet
    target: np.ndarray  # [L1, V1, D1] 0/1
    mask: np.ndarray


def stage1_example(scene, cfg, rng=None):
    spec1 = cfg.stage1_grid
    depth = scene.depth
    if cfg.depth_noise > 0:
        depth = noisy_depth(depth, cfg.depth_noise, rng if rng is not None else np.random.default_rng(cfg.seed))
    _, queries = depth_to_raw_occupancy(depth, cfg.intrinsics, cfg.pose, spec1, cfg.dim)
    target = pool_any(scene.gt_occupancy).astype(np.int64)
    mask = pool_any(scene.valid_mask)
    return Stage1Example(np.asarray(scene.rgb, dtype=np.float64), queries, target, mask)


def stage1_loss(model, ex):
    m_o = stage1_forward(model, ex.image, ex.queries)
    return weighted_cross_entropy(m_o.logits, ex.target, None, ex.mask), m_o


def train_stage1_step(model, optimizer, batch, step, total_steps):
    """Masked two-class cross entropy averaged over ``batch``, then one update. Returns the loss."""
    cfg = model.cfg
    optimizer.zero_grad()
    total = 0.0
    for ex in batch:
        loss, _ = stage1_loss(model, ex)
        (loss * (1.0 / len(batch))).backward()
        total += loss.item() / len(batch)
    optimizer.step(cosine_lr(step, total_steps, cfg.lr, cfg.min_lr, min(cfg.warmup, total_steps // 10)))
    return total


def make_optimizer(model):
    cfg = model.cfg
    if cfg.optimizer == "sgd":
        return SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    return Adam(model.parameters(), lr=cfg.lr, betas=(cfg.momentum, 0.999))


def train_stage1(model, examples, steps, batch_size=1, log=None, optimizer=None):
    """Round-robin over ``examples``; ``log(step, loss)`` is called after every step."""
    optimizer = optimizer or make_optimizer(model)
    losses = []
    n = len(examples)
    for step in range(steps):
        batch = [examples[(step * batch_size + j) % n] for j in range(batch_size)]
        loss = train_stage1_step(model, optimizer, batch, step, steps)
        losses.append(loss)
        if log is not None:
            log(step, loss)
    return losses


def predict_occupancy(model, ex):
    with no_grad():
        return stage1_forward(model, ex.image, ex.queries)


def evaluate_stage1(model, examples):
    """Pooled occupancy IoU and recall over ``examples``."""
    cm = None
    for ex in examples:
        pred = predict_occupancy(model, ex).labels
        c = confusion_matrix(pred, ex.target, ex.mask, num_classes=2)
        cm = c if cm is None else cm + c
    return occupancy_iou_recall(cm)
