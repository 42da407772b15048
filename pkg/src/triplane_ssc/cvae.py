"""Gaussian latent of the query features, CVAE losses and the uncertainty map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, clamp_min, exp, log, log_softmax, softmax, take_rows


@dataclass
class GaussianLatent:
    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError(f"mu {self.mu.shape} and logvar {self.logvar.shape} differ in shape")

    @property
    def variance(self):
        return np.exp(self.logvar.data)


def to_gaussian(f_o, l_m, l_v):
    return GaussianLatent(l_m(f_o), l_v(f_o))


def reparameterize(g, rng):
    """``mu + exp(logvar / 2) * eps``; ``rng`` is a numpy Generator (or an int seed).

    Returns ``(sample, eps)`` so callers can replay the noise.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    eps = rng.standard_normal(g.mu.shape)
    return g.mu + exp(g.logvar * 0.5) * eps, eps


def kl_divergence(g):
    """Mean over queries of KL(N(mu, e^logvar) || N(0, 1)), summed over latent dims."""
    if g.mu.shape[0] == 0:
        return Tensor(0.0)
    per = (g.mu * g.mu + exp(g.logvar) - g.logvar - 1.0) * 0.5
    return per.sum(axis=-1).mean()


def _flatten(logits, labels, mask):
    n = logits.shape[-1]
    logits = logits.reshape(-1, n)
    labels = np.asarray(labels).reshape(-1)
    mask = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    return logits, labels, mask


def weighted_cross_entropy(logits, labels, class_weights=None, mask=None):
    """Mean over masked-in voxels of ``-w[label] * log_softmax(logits)[label]``."""
    logits, labels, mask = _flatten(logits, labels, mask)
    n = logits.shape[-1]
    keep = np.flatnonzero(mask)
    if keep.size == 0:
        raise ValueError("cross entropy: every voxel is masked out")
    lab = labels[keep].astype(np.int64)
    if np.any(lab < 0) or np.any(lab >= n):
        raise ValueError("cross entropy: label outside [0, N) on a masked-in voxel")
    weights = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    logp = log_softmax(take_rows(logits, keep), axis=-1)
    picked = (logp * np.eye(n)[lab]).sum(axis=-1)
    return -(picked * weights[lab]).mean()


def scal_loss(probs, labels, mask=None, variant="semantic", free_class=0, floor=1e-8):
    """Precision / recall / specificity affinity loss over classes present in the batch.

    ``probs [..., N]`` are per-voxel class probabilities. The geometric variant
    scores the occupied-vs-free split with ``1 - p_free`` as the occupied
    probability.
    """
    probs, labels, mask = _flatten(probs, labels, mask)
    keep = np.flatnonzero(mask)
    if keep.size == 0:
        raise ValueError("scal loss: every voxel is masked out")
    p = take_rows(probs, keep)
    lab = labels[keep].astype(np.int64)
    if variant == "geometric":
        occ = 1.0 - p[:, free_class]
        p = occ.reshape(-1, 1)
        targets = (lab != free_class).astype(np.float64).reshape(-1, 1)
        classes = [0]
    elif variant == "semantic":
        n = p.shape[-1]
        targets = np.eye(n)[lab]
        classes = [c for c in range(n) if c != free_class]
    else:
        raise ValueError(f"unknown scal variant {variant!r}")
    terms = []
    for c in classes:
        t = targets[:, c]
        if not t.any():
            continue
        pc = p[:, c]
        tp = (pc * t).sum()
        psum = pc.sum()
        term = None
        if psum.data > 0:
            term = log(clamp_min(tp / psum, floor))
        recall = log(clamp_min(tp * (1.0 / t.sum()), floor))
        term = recall if term is None else term + recall
        neg = 1.0 - t
        if neg.sum() > 0:
            spec = ((1.0 - pc) * neg).sum() * (1.0 / neg.sum())
            term = term + log(clamp_min(spec, floor))
        terms.append(term)
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return -total * (1.0 / len(terms))


@dataclass
class LossBreakdown:
    ce: float
    scal_sem: float
    scal_geo: float
    kl: float
    total: float

    def line(self, step):
        return (
            f"step={step} L_ce={self.ce:.10g} L_scal_sem={self.scal_sem:.10g} "
            f"L_scal_geo={self.scal_geo:.10g} KL={self.kl:.10g} total={self.total:.10g}"
        )


def elbo_loss(logits, labels, mask, g, beta, class_weights=None):
    """Negative lower bound: reconstruction terms plus ``beta * KL``.

    Returns ``(total, LossBreakdown)``.
    """
    ce = weighted_cross_entropy(logits, labels, class_weights, mask)
    probs = softmax(logits, axis=-1)
    sem = scal_loss(probs, labels, mask, "semantic")
    geo = scal_loss(probs, labels, mask, "geometric")
    kl = kl_divergence(g) if g is not None else Tensor(0.0)
    total = ce + sem + geo + kl * float(beta)
    parts = LossBreakdown(ce.item(), sem.item(), geo.item(), kl.item(), total.item())
    return total, parts


def beta_schedule(step, total_steps, beta=0.01, warmup_frac=0.1):
    warm = max(int(round(total_steps * warmup_frac)), 1)
    return beta * min(1.0, (step + 1) / warm)


def uncertainty_map(g, indices, extents):
    """Per queried voxel mean latent variance; unqueried voxels take the maximum observed value."""
    extents = tuple(int(e) for e in extents)
    out = np.zeros(extents)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    if indices.shape[0] == 0:
        return np.ones(extents)
    var = np.exp(g.logvar.data).mean(axis=-1)
    filled = np.zeros(extents, dtype=bool)
    out[tuple(indices.T)] = var
    filled[tuple(indices.T)] = True
    out[~filled] = var.max()
    return out


__all__ = [
    "GaussianLatent",
    "LossBreakdown",
    "beta_schedule",
    "elbo_loss",
    "kl_divergence",
    "reparameterize",
    "scal_loss",
    "to_gaussian",
    "uncertainty_map",
    "weighted_cross_entropy",
]
