"""Semantic generation: occupancy queries + image -> cross attention -> Gaussian latent -> triplane decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import VoxelDeformableCrossAttention
from .cvae import LossBreakdown, beta_schedule, elbo_loss, reparameterize, to_gaussian, uncertainty_map
from .encoder import ImageEncoder, encode_image
from .geometry import project_world_to_feature_plane, voxel_center
from .metrics import confusion_matrix, semantic_miou
from .numerics import Linear, Module, Tensor, as_tensor, cosine_lr, no_grad, softmax
from .stage1 import QuerySet, make_optimizer, occupancy_to_queries, pool_any, predict_occupancy, stage1_example
from .triplane import TriplaneDecoder, build_reference_grid

__all__ = [
    "Stage2Model",
    "Stage2Output",
    "class_weights_from_scenes",
    "encode_image",
    "evaluate_stage2",
    "predict_with_uncertainty",
    "stage2_example",
    "stage2_forward",
    "train_stage2",
    "train_stage2_step",
]


class Stage2Model(Module):
    def __init__(self, cfg, rng=None):
        rng = np.random.default_rng(cfg.seed + 1) if rng is None else rng
        d = cfg.dim
        self.cfg = cfg
        self.encoder = ImageEncoder(rng, d, cfg.encoder_width)
        self.attn = {"voxel": VoxelDeformableCrossAttention(rng, cfg.deformable)}
        if cfg.latent == "gaussian":
            self.l_m = Linear(rng, d, d)
            self.l_v = Linear(rng, d, d)
        self.triplane = TriplaneDecoder(rng, cfg.triplane, cfg.stage1_grid.extents, cfg.num_classes, upsample=2)
        fh, fw = cfg.feature_extent
        self.ref_grid = build_reference_grid(cfg.stage1_grid, *cfg.ref_grid, cfg.intrinsics, cfg.pose, fh, fw)

    @property
    def stochastic(self):
        return self.cfg.latent == "gaussian"


@dataclass
class Stage2Output:
    logits: Tensor  # [L, V, D, N] on the stage-2 grid
    latent: object  # GaussianLatent, or None without a latent
    queries: QuerySet
    eps: np.ndarray | None = None

    @property
    def labels(self):
        return np.argmax(self.logits.data, axis=-1).astype(np.uint8)

    def uncertainty(self):
        """Latent variance per stage-1 lattice cell (None without a latent)."""
        if self.latent is None:
            return None
        return uncertainty_map(self.latent, self.queries.indices, self.queries.extents)


def query_reference_points(queries, cfg):
    """Projected feature-map coordinates and in-view flags of the query voxel centers."""
    if len(queries) == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    centers = voxel_center(queries.indices, cfg.stage1_grid)
    fh, fw = cfg.feature_extent
    return project_world_to_feature_plane(centers, cfg.intrinsics, cfg.pose, fh, fw)


def stage2_forward(model, queries, image, mode="mean", rng=None, f_r=None):
    """``mode``: "mean" feeds the latent mean to the decoder, "sample" a reparameterized draw.

    Models without a latent ignore ``mode``.
    """
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if f_r is None:
        f_r = encode_image(as_tensor(image), model.encoder)
    ref, valid = query_reference_points(queries, model.cfg)
    f_o = model.attn["voxel"](Tensor(queries.features), ref, f_r, valid)
    g, eps = None, None
    f_hat = f_o
    if model.stochastic:
        g = to_gaussian(f_o, model.l_m, model.l_v)
        if mode == "sample":
            f_hat, eps = reparameterize(g, rng if rng is not None else np.random.default_rng(0))
        else:
            f_hat = g.mu
    logits = model.triplane(queries.indices, f_hat, model.ref_grid, f_r)
    return Stage2Output(logits, g, queries, eps)


@dataclass
class Stage2Example:
    image: np.ndarray
    gt_queries: QuerySet
    target: np.ndarray  # [L, V, D] class ids
    mask: np.ndarray
    fov_mask: np.ndarray
    stage1_queries: QuerySet | None = None


def stage2_example(scene, cfg, stage1_model=None):
    """Inputs and targets of one scene; stage-1 queries are attached when a model is given."""
    occ = pool_any(scene.gt_occupancy)
    ex = Stage2Example(
        np.asarray(scene.rgb, dtype=np.float64),
        QuerySet.from_mask(occ, cfg.dim),
        scene.gt_semantic.astype(np.int64),
        scene.valid_mask.copy(),
        None if scene.fov_mask is None else scene.fov_mask.copy(),
    )
    if stage1_model is not None:
        m_o = predict_occupancy(stage1_model, stage1_example(scene, stage1_model.cfg))
        ex.stage1_queries = occupancy_to_queries(m_o, cfg.dim)
    return ex


def class_weights_from_scenes(labels_list, num_classes, mode="inverse_log"):
    """``1 / ln(1.02 + frequency)`` per class, from the masked-in training labels."""
    if mode == "uniform":
        return np.ones(num_classes)
    counts = np.zeros(num_classes)
    for labels in labels_list:
        counts += np.bincount(np.asarray(labels).ravel(), minlength=num_classes)[:num_classes]
    freq = counts / max(counts.sum(), 1.0)
    return 1.0 / np.log(1.02 + freq)


def _pick_queries(ex, teacher_forced):
    if teacher_forced or ex.stage1_queries is None:
        return ex.gt_queries
    return ex.stage1_queries


def train_stage2_step(model, optimizer, batch, step, total_steps, class_weights=None, rng=None, teacher_forced=True):
    """One CVAE update on ``batch`` (sampled latent); returns the batch-averaged LossBreakdown."""
    cfg = model.cfg
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    beta = beta_schedule(step, total_steps, cfg.beta, cfg.beta_warmup) if model.stochastic else 0.0
    optimizer.zero_grad()
    acc = np.zeros(5)
    for ex in batch:
        out = stage2_forward(model, _pick_queries(ex, teacher_forced), ex.image, "sample", rng)
        total, parts = elbo_loss(out.logits, ex.target, ex.mask, out.latent, beta, class_weights)
        (total * (1.0 / len(batch))).backward()
        acc += np.array([parts.ce, parts.scal_sem, parts.scal_geo, parts.kl, parts.total]) / len(batch)
    optimizer.step(cosine_lr(step, total_steps, cfg.lr, cfg.min_lr, min(cfg.warmup, total_steps // 10)))
    return LossBreakdown(*acc.tolist())


def train_stage2(model, examples, steps, class_weights=None, batch_size=1, log=None, optimizer=None, rng=None):
    """Round-robin training; ground-truth queries for the first ``teacher_forcing`` fraction of steps."""
    optimizer = optimizer or make_optimizer(model)
    rng = rng if rng is not None else np.random.default_rng(model.cfg.seed + 2)
    forced_until = int(round(model.cfg.teacher_forcing * steps))
    history = []
    n = len(examples)
    for step in range(steps):
        batch = [examples[(step * batch_size + j) % n] for j in range(batch_size)]
        parts = train_stage2_step(model, optimizer, batch, step, steps, class_weights, rng, step < forced_until)
        history.append(parts)
        if log is not None:
            log(step, parts)
    return history


def evaluate_stage2(model, examples, source="gt", queries=None):
    """Pooled confusion matrix and mIoU over ``examples`` in mean mode.

    ``source`` selects ground-truth ("gt") or stage-1 ("stage1") queries;
    ``queries`` (one QuerySet per example) overrides both.
    """
    cm = None
    n = model.cfg.num_classes
    for i, ex in enumerate(examples):
        q = queries[i] if queries is not None else _pick_queries(ex, source == "gt")
        with no_grad():
            out = stage2_forward(model, q, ex.image, "mean")
        c = confusion_matrix(out.labels, ex.target, ex.mask, num_classes=n)
        cm = c if cm is None else cm + c
    return cm, semantic_miou(cm)[1]


def predict_with_uncertainty(stage1_model, model, scene, samples=1, seed=0):
    """Labels (mean mode), latent-variance map on the stage-1 grid, and the per-voxel
    class-probability variance over ``samples`` draws on the stage-2 grid."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    cfg = model.cfg
    with no_grad():
        m_o = predict_occupancy(stage1_model, stage1_example(scene, stage1_model.cfg))
        queries = occupancy_to_queries(m_o, cfg.dim)
        f_r = encode_image(as_tensor(np.asarray(scene.rgb, dtype=np.float64)), model.encoder)
        det = stage2_forward(model, queries, None, "mean", f_r=f_r)
        rng = np.random.default_rng(seed)
        probs = []
        for _ in range(samples):
            out = stage2_forward(model, queries, None, "sample", rng, f_r=f_r)
            probs.append(softmax(out.logits, axis=-1).data)
    probs = np.stack(probs)
    ensemble = probs.var(axis=0).mean(axis=-1) if samples > 1 else np.zeros(probs.shape[1:4])
    m_u = det.uncertainty()
    if m_u is None:
        m_u = np.zeros(queries.extents)
    return det.labels, m_u, ensemble
