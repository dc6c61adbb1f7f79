"""Part manipulation on trained models: swapping parts between objects,
latent interpolation, and random shape generation from per-slot Gaussian
mixtures fitted to reconstructed latents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .part_vae import PartVae
from .recon import PartSet


def swap_parts(a: PartSet, b: PartSet, indices) -> PartSet:
    """Replace the parts of ``a`` at ``indices`` with ``b``'s."""
    if a.k != b.k:
        raise ValueError("part sets must have the same number of slots")
    indices = sorted(set(int(i) for i in indices))
    if any(i < 0 or i >= a.k for i in indices):
        raise ValueError("part index out of range")
    take_b = torch.zeros(a.k, dtype=torch.bool)
    take_b[indices] = True
    latents = torch.where(take_b[:, None], b.latents, a.latents)
    centroids = torch.where(take_b[:, None], b.centroids, a.centroids)
    meshes = [(b if take_b[i] else a).meshes[i].copy() for i in range(a.k)]
    textures = None
    if a.textures is not None and b.textures is not None:
        ta = torch.as_tensor(np.stack([np.asarray(t) for t in a.textures]))
        tb = torch.as_tensor(np.stack([np.asarray(t) for t in b.textures]))
        textures = torch.where(take_b[:, None, None, None], tb, ta)
    return PartSet(latents=latents, centroids=centroids, meshes=meshes,
                   textures=textures, class_label=a.class_label)


def interpolate(a: PartSet, b: PartSet, lam: float, vae: PartVae,
                indices=None) -> PartSet:
    """Linear latent interpolation lam*u_a + (1-lam)*u_b on selected slots.

    lam=1 reproduces ``a``, lam=0 reproduces ``b``; centroids interpolate the
    same way and the result is decoded through the shape prior.  Unselected
    slots stay ``a``'s; textures carry over from ``a``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("interpolation weight must lie in [0, 1]")
    if a.k != b.k:
        raise ValueError("part sets must have the same number of slots")
    indices = range(a.k) if indices is None else sorted(set(int(i) for i in indices))
    if any(i < 0 or i >= a.k for i in indices):
        raise ValueError("part index out of range")
    sel = torch.zeros(a.k, dtype=torch.bool)
    sel[list(indices)] = True
    mixed_lat = lam * a.latents + (1.0 - lam) * b.latents
    mixed_cen = lam * a.centroids + (1.0 - lam) * b.centroids
    latents = torch.where(sel[:, None], mixed_lat, a.latents)
    centroids = torch.where(sel[:, None], mixed_cen, a.centroids)
    meshes = []
    for i in range(a.k):
        meshes.append(vae.decode_mesh(latents[i]) if sel[i] else a.meshes[i].copy())
    return PartSet(latents=latents, centroids=centroids, meshes=meshes,
                   textures=a.textures, class_label=a.class_label)


# ---------------------------------------------------------------------------
# per-slot Gaussian mixtures

@dataclass
class PartGmm:
    """Diagonal GMM per part slot, plus slot centroid means for assembly."""

    weights: np.ndarray        # (slots, components)
    means: np.ndarray          # (slots, components, d)
    variances: np.ndarray      # (slots, components, d)
    slot_centroids: np.ndarray  # (slots, 3)
    class_name: str = ""
    sample_count: int = 0
    log_likelihoods: list = field(default_factory=list)  # per slot, per EM step

    def __post_init__(self):
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(1), 1.0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def slots(self) -> int:
        return self.weights.shape[0]

    def slot_mean(self, slot: int) -> np.ndarray:
        return (self.weights[slot][:, None] * self.means[slot]).sum(0)


def _fit_diag_gmm(x: np.ndarray, components: int, rng: np.random.Generator,
                  iters: int = 100, tol: float = 1e-7, reg: float = 1e-6):
    """EM for a diagonal-covariance mixture; returns params + LL history."""
    n, d = x.shape
    means = x[rng.choice(n, size=components, replace=False)].copy()
    variances = np.tile(x.var(0) + reg, (components, 1))
    weights = np.full(components, 1.0 / components)
    history = []
    for _ in range(iters):
        # E step in log space
        log_det = np.log(variances).sum(1)
        diff2 = ((x[:, None, :] - means[None]) ** 2 / variances[None]).sum(2)
        log_prob = -0.5 * (diff2 + log_det[None] + d * math.log(2 * math.pi))
        log_weighted = log_prob + np.log(weights)[None]
        norm = np.logaddexp.reduce(log_weighted, axis=1)
        history.append(float(norm.mean()))
        resp = np.exp(log_weighted - norm[:, None])
        # M step
        nk = resp.sum(0) + 1e-12
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        variances = (resp.T @ (x ** 2)) / nk[:, None] - means ** 2 + reg
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            break
    return weights, means, variances, history


def fit_gmm(latents_per_slot, components: int = 3, seed: int = 0,
            iters: int = 100, slot_centroids=None, class_name: str = "") -> PartGmm:
    """Fit one diagonal GMM per part slot on collected latent vectors.

    Requires at least 10x components samples per slot; the EM log-likelihood
    history is kept for each slot (non-decreasing by construction).
    """
    slots = [np.asarray(s, dtype=np.float64) for s in latents_per_slot]
    for s in slots:
        if len(s) < 10 * components:
            raise ValueError(f"need >= {10 * components} samples per slot, got {len(s)}")
    rng = np.random.default_rng(seed)
    weights, means, variances, histories = [], [], [], []
    for s in slots:
        w, m, v, h = _fit_diag_gmm(s, components, rng, iters=iters)
        weights.append(w)
        means.append(m)
        variances.append(v)
        histories.append(h)
    if slot_centroids is None:
        slot_centroids = np.zeros((len(slots), 3))
    return PartGmm(weights=np.stack(weights), means=np.stack(means),
                   variances=np.stack(variances),
                   slot_centroids=np.asarray(slot_centroids, dtype=np.float64),
                   class_name=class_name, sample_count=sum(len(s) for s in slots),
                   log_likelihoods=histories)


def fit_part_gmm(part_sets: list[PartSet], components: int = 3, seed: int = 0,
                 class_name: str = "") -> PartGmm:
    """Convenience: collect latents and centroid means from reconstructions."""
    k = part_sets[0].k
    latents = [np.stack([ps.latents[i].numpy() for ps in part_sets]) for i in range(k)]
    centroids = np.stack([np.mean([ps.centroids[i].numpy() for ps in part_sets], axis=0)
                          for i in range(k)])
    return fit_gmm(latents, components=components, seed=seed,
                   slot_centroids=centroids, class_name=class_name)


def sample_latents(gmm: PartGmm, rng: np.random.Generator) -> np.ndarray:
    """One latent per slot: pick a component, then draw from its Gaussian."""
    out = []
    for slot in range(gmm.slots):
        comp = rng.choice(len(gmm.weights[slot]), p=gmm.weights[slot])
        mu, var = gmm.means[slot, comp], gmm.variances[slot, comp]
        out.append(mu + np.sqrt(var) * rng.standard_normal(len(mu)))
    return np.stack(out)


def generate_shape(gmm: PartGmm, rng: np.random.Generator, vae: PartVae) -> PartSet:
    """Random object: per-slot GMM latents decoded and placed at the slot
    centroid means.  Output is validated finite and inside [-1, 1]^3."""
    latents = torch.as_tensor(sample_latents(gmm, rng), dtype=torch.float32)
    meshes = [vae.decode_mesh(latents[i]) for i in range(gmm.slots)]
    centroids = torch.as_tensor(gmm.slot_centroids, dtype=torch.float32)
    parts = PartSet(latents=latents, centroids=centroids, meshes=meshes)
    for i, m in enumerate(meshes):
        v = m.vertices + gmm.slot_centroids[i]
        if not np.isfinite(v).all():
            raise ValueError("generated shape contains non-finite vertices")
        if np.abs(v).max() > 1.0:
            raise ValueError("generated shape leaves the [-1, 1]^3 bound")
    return parts
