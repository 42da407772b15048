"""Deformable triplane decoder.

Voxel query features are collapsed onto the XY, XZ and YZ planes, completed by
deformable self-attention over a strided reference set (ESDA), conditioned on
image features sampled at a projected 3D reference grid (ECDA), then decoded
per voxel from the three plane cells it projects to.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .attention import MultiHeadAttention, scaled_dot_attention
from .geometry import normalized_position, positional_embedding, project_world_to_feature_plane
from .numerics import (
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    bilinear_sample,
    concat,
    gelu,
    index_add,
    param,
    take_rows,
    upsample_nearest3d,
    where,
)

logger = logging.getLogger(__name__)

PLANES = ("xy", "xz", "yz")
# (first plane axis, second plane axis, dropped axis)
PLANE_AXES = {"xy": (0, 1, 2), "xz": (0, 2, 1), "yz": (1, 2, 0)}
# permutation taking an (a, b, dropped) array back to (x, y, z) order
_TO_XYZ = {"xy": (0, 1, 2), "xz": (0, 2, 1), "yz": (2, 0, 1)}


def plane_shape(plane, extents):
    a, b, _ = PLANE_AXES[plane]
    return int(extents[a]), int(extents[b])


def plane_cell_index(indices, plane, extents):
    a, b, _ = PLANE_AXES[plane]
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    return indices[:, a] * int(extents[b]) + indices[:, b]


@dataclass
class PlaneFeatureSet:
    planes: dict
    masks: dict
    extents: tuple

    def __getitem__(self, plane):
        return self.planes[plane]


class QueryCounter:
    """Running tally of attention queries issued by triplane decoding."""

    def __init__(self):
        self.triplane = 0
        self.dense_equivalent = 0

    def record(self, extents):
        counts = query_counts(extents)
        self.triplane += counts["triplane"]
        self.dense_equivalent += counts["dense"]


def query_counts(extents):
    """Plane-cell queries versus per-voxel queries for one lattice."""
    l, v, d = (int(e) for e in extents)
    tri = l * v + l * d + v * d
    dense = l * v * d
    return {"triplane": tri, "dense": dense, "ratio": dense / tri}


def cubic_query_counts(side):
    """An S x S x S lattice: 3 S^2 plane queries against S^3 voxel queries (ratio S/3)."""
    side = int(side)
    return {"triplane": 3 * side * side, "dense": side**3, "ratio": side**3 / (3 * side * side)}


def aggregate_to_planes(indices, features, extents, weights=None):
    """Sum ``weights * features`` along each plane's dropped axis.

    ``weights`` defaults to the positional embedding of each voxel's normalized
    center and must match the feature width. Within a plane cell contributions
    are accumulated in ascending dropped-axis index.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    extents = tuple(int(e) for e in extents)
    n, d = indices.shape[0], features.shape[1] if features.ndim == 2 else 0
    if n:
        if np.any(indices < 0) or np.any(indices >= np.asarray(extents)):
            raise ValueError("query index outside the lattice")
        flat = np.ravel_multi_index(indices.T, extents)
        if np.unique(flat).size != n:
            raise ValueError("duplicate lattice indices in query set")
    if weights is None:
        weights = positional_embedding(normalized_position(indices, extents), d) if n else np.zeros((0, d))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n, d):
        raise ValueError(f"aggregation weights {weights.shape} do not match features {(n, d)}")
    planes, masks = {}, {}
    if n:
        order = np.lexsort((indices[:, 2], indices[:, 1], indices[:, 0]))
        weighted = take_rows(features * weights, order)
        sorted_idx = indices[order]
    for plane in PLANES:
        a_ext, b_ext = plane_shape(plane, extents)
        mask = np.zeros(a_ext * b_ext, dtype=bool)
        if n:
            cells = plane_cell_index(sorted_idx, plane, extents)
            planes[plane] = index_add(cells, weighted, a_ext * b_ext).reshape(a_ext, b_ext, d)
            mask[cells] = True
        else:
            planes[plane] = Tensor(np.zeros((a_ext, b_ext, d)))
        masks[plane] = mask.reshape(a_ext, b_ext)
    return PlaneFeatureSet(planes, masks, extents)


def plane_positional_embedding(plane, extents, dim):
    """Embedding of plane cell centers with the dropped axis at mid-range."""
    a_ext, b_ext = plane_shape(plane, extents)
    a, b, c = PLANE_AXES[plane]
    ia, ib = np.meshgrid(np.arange(a_ext), np.arange(b_ext), indexing="ij")
    p = np.full((a_ext, b_ext, 3), 0.5)
    p[..., a] = (ia + 0.5) / extents[a]
    p[..., b] = (ib + 0.5) / extents[b]
    return positional_embedding(p, dim)


class FeedForward(Module):
    def __init__(self, rng, dim, hidden):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


def _esda_reference_centers(a_ext, b_ext, stride):
    na, nb = a_ext // stride, b_ext // stride
    ra = np.arange(na) * stride + (stride - 1) / 2.0
    rb = np.arange(nb) * stride + (stride - 1) / 2.0
    grid = np.stack(np.meshgrid(ra, rb, indexing="ij"), axis=-1)
    return grid.reshape(-1, 2), na, nb


def effective_stride(a_ext, b_ext, stride):
    if min(a_ext, b_ext) < stride:
        logger.warning("plane %dx%d smaller than ESDA stride %d; using stride 1", a_ext, b_ext, stride)
        return 1
    return stride


class ESDALayer(Module):
    """Pre-norm block: deformable self-attention over strided plane references, then a feed-forward."""

    def __init__(self, rng, dim, heads, offsets, stride, ffn_hidden, plane_extents=None):
        self.heads = heads
        self.offsets = offsets
        if plane_extents is not None:
            stride = effective_stride(*plane_extents, stride)
        self.stride = stride
        self.norm1 = LayerNorm(dim)
        self.offset_conv = Conv2d(rng, dim, heads * offsets * 2, stride, stride=stride, zero=True)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_hidden)

    def __call__(self, x, residual=True):
        h = deformable_self_attention(self.norm1(x), self)
        x = x + h if residual else h
        return x + self.ffn(self.norm2(x))


def deformable_self_attention(x, layer):
    """Every cell of ``x [A, B, d]`` attends to the plane sampled at deformed strided references.

    Head ``m`` sees the ``K`` samples of every reference point as its keys and values.
    """
    a_ext, b_ext, d = x.shape
    if min(a_ext, b_ext) < layer.stride:
        raise ValueError(f"plane {a_ext}x{b_ext} smaller than layer stride {layer.stride}")
    refs, na, nb = _esda_reference_centers(a_ext, b_ext, layer.stride)
    m, k = layer.heads, layer.offsets
    chw = x.transpose(2, 0, 1)
    raw = layer.offset_conv(chw)
    # [M*K*2, na, nb] -> [R, M, K, 2]
    offsets = raw.reshape(m, k, 2, na * nb).transpose(3, 0, 1, 2)
    locs = offsets + Tensor(refs.reshape(-1, 1, 1, 2))
    n_ref = na * nb
    queries = x.reshape(a_ext * b_ext, d)
    mha = layer.attn
    dh = d // m
    qh = mha.q_proj(queries).reshape(a_ext * b_ext, m, dh)
    outs = []
    for head in range(m):
        samples = bilinear_sample(chw, locs[:, head].reshape(n_ref * k, 2))
        kk = mha.k_proj(samples).reshape(n_ref * k, m, dh)[:, head]
        vv = mha.v_proj(samples).reshape(n_ref * k, m, dh)[:, head]
        outs.append(scaled_dot_attention(qh[:, head], kk.transpose(1, 0), vv, 1.0 / np.sqrt(dh)))
    return mha.out_proj(concat(outs, axis=-1)).reshape(a_ext, b_ext, d)


@dataclass
class ReferenceGrid3D:
    """Cell centers of an ``l x v x d3`` partition of the grid box, projected onto the feature map."""

    points: np.ndarray  # [l, v, d3, 3] world frame
    image_points: np.ndarray  # [l*v*d3, 2] fractional (row, col) on the feature map
    valid: np.ndarray  # [l*v*d3]

    @property
    def counts(self):
        return self.points.shape[:3]


def build_reference_grid(spec, l, v, d3, cam, pose, feat_h, feat_w):
    counts = (int(l), int(v), int(d3))
    if any(c < 1 or c > e for c, e in zip(counts, spec.extents)):
        raise ValueError(f"reference grid {counts} must be within 1..{spec.extents}")
    lo = np.asarray(spec.world_min, dtype=np.float64)
    size = (np.asarray(spec.world_max, dtype=np.float64) - lo) / np.asarray(counts)
    axes = [lo[i] + (np.arange(counts[i]) + 0.5) * size[i] for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    coords, valid = project_world_to_feature_plane(pts.reshape(-1, 3), cam, pose, feat_h, feat_w)
    return ReferenceGrid3D(pts, coords, valid)


class ECDALayer(Module):
    """Pre-norm block: plane cells cross-attend to image features at deformed 3D reference points."""

    def __init__(self, rng, dim, heads, plane, extents, ref_counts, ffn_hidden):
        a, b, c = PLANE_AXES[plane]
        a_ext, b_ext = plane_shape(plane, extents)
        n_a, n_b, n_c = ref_counts[a], ref_counts[b], ref_counts[c]
        if a_ext % n_a or b_ext % n_b:
            raise ValueError(f"plane {plane} {a_ext}x{b_ext} not divisible by reference grid {n_a}x{n_b}")
        self.plane = plane
        self.ref_counts = tuple(int(r) for r in ref_counts)
        self.norm1 = LayerNorm(dim)
        kernel = (a_ext // n_a, b_ext // n_b)
        self.offset_conv = Conv2d(rng, dim, n_c * 2, kernel, stride=kernel, zero=True)
        self.l_r = Linear(rng, 2, 2)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_hidden)

    def __call__(self, x, ref_grid, f_r):
        x = ecda(x, ref_grid, f_r, self, norm=True)
        return x + self.ffn(self.norm2(x))


def ecda_offsets(xn, layer):
    """Offsets ``[l*v*d3, 2]`` (feature cells) for every reference point, from a plane."""
    a, b, c = PLANE_AXES[layer.plane]
    n_a, n_b, n_c = (layer.ref_counts[i] for i in (a, b, c))
    raw = layer.offset_conv(xn.transpose(2, 0, 1))  # [n_c * 2, n_a, n_b]
    separated = raw.reshape(n_c, 2, n_a, n_b).transpose(2, 3, 0, 1)  # [n_a, n_b, n_c, 2]
    delta = layer.l_r(separated)
    perm = _TO_XYZ[layer.plane] + (3,)
    return delta.transpose(perm).reshape(-1, 2)


def ecda(x, ref_grid, f_r, layer, norm=True):
    """Residual cross-attention of plane ``x [A, B, d]`` onto sampled image features.

    With no valid reference point the plane passes through unchanged.
    """
    valid_idx = np.flatnonzero(ref_grid.valid)
    if valid_idx.size == 0:
        return x
    a_ext, b_ext, d = x.shape
    xn = layer.norm1(x) if norm else x
    delta = take_rows(ecda_offsets(xn, layer), valid_idx)
    pts = delta + Tensor(ref_grid.image_points[valid_idx])
    kv = bilinear_sample(f_r, pts)
    out = layer.attn(xn.reshape(a_ext * b_ext, d), kv, kv)
    return x + out.reshape(a_ext, b_ext, d)


class PlaneBranch(Module):
    def __init__(self, rng, plane, dim, extents, cfg):
        self.fill_embed = param(rng.normal(0.0, 0.02, size=dim))
        shape = plane_shape(plane, extents)
        self.esda = [
            ESDALayer(rng, dim, cfg.heads, cfg.offsets, cfg.esda_stride, cfg.ffn_hidden, shape)
            for _ in range(cfg.esda_layers)
        ]
        self.ecda = [
            ECDALayer(rng, dim, cfg.heads, plane, extents, cfg.ref_grid, cfg.ffn_hidden) for _ in range(cfg.ecda_layers)
        ]


@dataclass(frozen=True)
class TriplaneConfig:
    dim: int = 24
    heads: int = 2
    offsets: int = 4
    esda_stride: int = 4
    esda_layers: int = 2
    ecda_layers: int = 2
    ref_grid: tuple = (4, 4, 2)
    ffn_hidden: int = 48
    head_hidden: int = 64
    plane_residual: bool = True


def fill_planes(planes, branches, dim):
    """Empty cells get the plane's learned fill embedding plus their positional embedding."""
    out = {}
    for plane in PLANES:
        pos = plane_positional_embedding(plane, planes.extents, dim)
        fill = branches[plane].fill_embed.reshape(1, 1, dim) + Tensor(pos)
        out[plane] = where(planes.masks[plane][..., None], planes[plane], fill)
    return out


def esda_complete(planes, branches, dim, residual=True):
    """ESDA over each (filled) plane; returns dense planes keyed by name."""
    filled = fill_planes(planes, branches, dim)
    out = {}
    for plane in PLANES:
        x = filled[plane]
        for i, layer in enumerate(branches[plane].esda):
            x = layer(x, residual=residual or i > 0)
        out[plane] = x
    return out


def ecda_condition(f_self, branches, ref_grid, f_r):
    out = {}
    for plane in PLANES:
        x = f_self[plane]
        for layer in branches[plane].ecda:
            x = layer(x, ref_grid, f_r)
        out[plane] = x
    return out


def gather_voxel_features(f_xy, f_xz, f_yz):
    """Concatenate, for every voxel in x-major order, its three plane cells -> ``[L*V*D, 3d]``."""
    l, v, d_feat = f_xy.shape
    l2, dz, _ = f_xz.shape
    v2, dz2, _ = f_yz.shape
    if l != l2 or v != v2 or dz != dz2 or f_xz.shape[2] != d_feat or f_yz.shape[2] != d_feat:
        raise ValueError(f"inconsistent plane extents {f_xy.shape}, {f_xz.shape}, {f_yz.shape}")
    extents = (l, v, dz)
    ix, iy, iz = np.meshgrid(np.arange(l), np.arange(v), np.arange(dz), indexing="ij")
    ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()
    parts = [
        take_rows(f_xy.reshape(l * v, d_feat), ix * v + iy),
        take_rows(f_xz.reshape(l * dz, d_feat), ix * dz + iz),
        take_rows(f_yz.reshape(v * dz, d_feat), iy * dz + iz),
    ]
    return concat(parts, axis=-1), extents


def decode_semantic_map(f_xy, f_xz, f_yz, factor, l_c, l_s, activation=None):
    """Per-voxel ``l_s(UpSample(l_c([xy, xz, yz])))`` -> logits ``[fL, fV, fD, N]``; ``activation`` optionally follows ``l_c``.

    Nearest upsampling commutes with the per-voxel ``l_s``, so ``l_s`` runs on
    the coarse lattice and the logits are replicated.
    """
    feats, (l, v, d) = gather_voxel_features(f_xy, f_xz, f_yz)
    hidden = l_c(feats)
    if activation is not None:
        hidden = activation(hidden)
    logits = l_s(hidden)
    n = logits.shape[-1]
    grid = logits.transpose(1, 0).reshape(n, l, v, d)
    return upsample_nearest3d(grid, factor).transpose(1, 2, 3, 0)


def decode_occupancy_map(f_xy, f_xz, f_yz, l_o, hidden=None, activation=gelu):
    """Per-voxel free/occupied logits ``[L, V, D, 2]`` from the three plane cells."""
    feats, (l, v, d) = gather_voxel_features(f_xy, f_xz, f_yz)
    if hidden is not None:
        feats = activation(hidden(feats))
    return l_o(feats).reshape(l, v, d, 2)


class TriplaneDecoder(Module):
    """Aggregation, ESDA, ECDA and per-voxel decoding on one lattice."""

    def __init__(self, rng, cfg, extents, out_classes, upsample=1, kind="semantic"):
        if kind not in ("semantic", "occupancy"):
            raise ValueError(f"unknown decoder kind {kind!r}")
        self.kind = kind
        self.cfg = cfg
        self.extents = tuple(int(e) for e in extents)
        self.upsample = int(upsample)
        self.branches = {plane: PlaneBranch(rng, plane, cfg.dim, self.extents, cfg) for plane in PLANES}
        if kind == "semantic":
            self.l_c = Linear(rng, 3 * cfg.dim, cfg.head_hidden)
            self.l_s = Linear(rng, cfg.head_hidden, out_classes)
        else:
            self.l_o = Linear(rng, 3 * cfg.dim, out_classes)
        self.counter = QueryCounter()

    def named_parameters(self, prefix=""):
        for plane in PLANES:
            yield from self.branches[plane].named_parameters(f"{prefix}{plane}.")
        heads = ("l_c", "l_s") if self.kind == "semantic" else ("l_o",)
        for name in heads:
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")

    def planes_from_queries(self, indices, features, weights=None):
        return aggregate_to_planes(indices, features, self.extents, weights)

    def __call__(self, indices, features, ref_grid, f_r):
        planes = self.planes_from_queries(indices, features)
        f_self = esda_complete(planes, self.branches, self.cfg.dim, residual=self.cfg.plane_residual)
        f_cross = ecda_condition(f_self, self.branches, ref_grid, f_r)
        self.counter.record(self.extents)
        if self.kind == "semantic":
            return decode_semantic_map(f_cross["xy"], f_cross["xz"], f_cross["yz"], self.upsample, self.l_c, self.l_s)
        return decode_occupancy_map(f_cross["xy"], f_cross["xz"], f_cross["yz"], self.l_o)
