"""Multi-head attention and deformable cross attention from voxel queries to an image feature map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Linear, Module, Tensor, bilinear_sample, concat, param, softmax, where
from .numerics import functional as F
from .numerics.tensor import is_grad_enabled

# inference-only attention is evaluated in query blocks of at most this many scores per head
SCORE_BLOCK = 1 << 22


@dataclass(frozen=True)
class DeformableAttnConfig:
    heads: int = 2
    offsets_per_head: int = 4
    feature_dim: int = 24

    def __post_init__(self):
        if self.heads < 1 or self.offsets_per_head < 1:
            raise ValueError("heads and offsets_per_head must be >= 1")
        if self.feature_dim % self.heads:
            raise ValueError(f"feature_dim {self.feature_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self):
        return self.feature_dim // self.heads


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head slices of shared projections."""

    def __init__(self, rng, dim, heads, identity=False):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(rng, dim, dim)
        self.k_proj = Linear(rng, dim, dim)
        self.v_proj = Linear(rng, dim, dim)
        self.out_proj = Linear(rng, dim, dim)
        if identity:
            for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
                lin.weight.data = np.eye(dim)

    def __call__(self, q, k, v):
        return multi_head_attention(q, k, v, self)


def scaled_dot_attention(q, k_t, v, scale):
    """``softmax(q @ k_t * scale) @ v`` with queries on axis -2 and keys on the last axis of ``k_t``."""
    nq, nk = q.shape[-2], k_t.shape[-1]
    block = max(SCORE_BLOCK // max(nk, 1), 1)
    if is_grad_enabled() or nq <= block:
        return softmax((q @ k_t) * scale, axis=-1) @ v
    # softmax rows are independent, so blocking changes nothing but peak memory
    parts = []
    for i in range(0, nq, block):
        parts.append(softmax((q[..., i : i + block, :] @ k_t) * scale, axis=-1) @ v)
    return concat(parts, axis=-2)


def multi_head_attention(q, k, v, mha):
    """``q [Nq, d]`` attends over ``k, v [Nk, d]``; returns ``[Nq, d]``."""
    if k.shape[0] == 0:
        raise ValueError("multi_head_attention: no keys")
    heads = mha.heads
    nq, d = q.shape
    nk = k.shape[0]
    dh = d // heads
    qh = mha.q_proj(q).reshape(nq, heads, dh).transpose(1, 0, 2)
    kh = mha.k_proj(k).reshape(nk, heads, dh).transpose(1, 2, 0)
    vh = mha.v_proj(v).reshape(nk, heads, dh).transpose(1, 0, 2)
    out = scaled_dot_attention(qh, kh, vh, 1.0 / np.sqrt(dh))
    return mha.out_proj(out.transpose(1, 0, 2).reshape(nq, d))


def deformable_offsets_and_weights(z_q, heads):
    """``z_q [Nq, d]`` -> offsets ``[Nq, M, K, 2]`` (feature cells) and weights ``[Nq, M, K]``.

    ``heads`` is any module carrying ``cfg``, ``offset_head`` and ``weight_head``.
    """
    cfg = heads.cfg
    nq = z_q.shape[0]
    m, k = cfg.heads, cfg.offsets_per_head
    offsets = heads.offset_head(z_q).reshape(nq, m, k, 2)
    weights = softmax(heads.weight_head(z_q).reshape(nq, m, k), axis=-1)
    return offsets, weights


class VoxelDeformableCrossAttention(Module):
    """Per query: ``sum_m W_m sum_k A_mqk W'_m f_r(ref_q + offset_mqk)``.

    ``w_m_prime`` is bias-free so projecting the feature map before sampling
    equals sampling then projecting, zero padding included. Queries flagged
    invalid (behind or outside the camera) take ``mask_embed`` instead.
    """

    def __init__(self, rng, cfg):
        self.cfg = cfg
        d = cfg.feature_dim
        self.w_m = Linear(rng, d, d)
        self.w_m_prime = Linear(rng, d, d, bias=False)
        self.offset_head = Linear(rng, d, cfg.heads * cfg.offsets_per_head * 2, zero=True)
        self.weight_head = Linear(rng, d, cfg.heads * cfg.offsets_per_head, zero=True)
        self.mask_embed = param(rng.normal(0.0, 0.02, size=d))

    def __call__(self, z_q, ref_points, f_r, valid=None):
        return voxel_deformable_cross_attention(z_q, ref_points, f_r, self, valid)


def voxel_deformable_cross_attention(z_q, ref_points, f_r, attn, valid=None):
    cfg = attn.cfg
    nq, d = z_q.shape
    if d != cfg.feature_dim or f_r.shape[0] != d:
        raise ValueError(f"voxel deformable attention: query dim {d}, map channels {f_r.shape[0]}, config {cfg.feature_dim}")
    m, k, dh = cfg.heads, cfg.offsets_per_head, cfg.head_dim
    _, h, w = f_r.shape
    offsets, weights = deformable_offsets_and_weights(z_q, attn)
    ref = Tensor(np.asarray(ref_points, dtype=np.float64).reshape(nq, 1, 1, 2))
    locs = offsets + ref  # [Nq, M, K, 2]
    # W'_m applied per pixel, then each head samples its own channel slice
    value_map = F.linear(f_r.reshape(d, h * w).transpose(1, 0), attn.w_m_prime.weight)
    value_map = value_map.transpose(1, 0).reshape(m, dh, h, w)
    per_head = []
    for head in range(m):
        pts = locs[:, head].reshape(nq * k, 2)
        samples = bilinear_sample(value_map[head], pts).reshape(nq, k, dh)
        per_head.append((samples * weights[:, head].reshape(nq, k, 1)).sum(axis=1))
    f_o = attn.w_m(concat(per_head, axis=-1))
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if not valid.all():
            f_o = where(valid[:, None], f_o, attn.mask_embed.reshape(1, d))
    return f_o
