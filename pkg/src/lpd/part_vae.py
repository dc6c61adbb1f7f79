"""Variational prior over part shapes.

A permutation-invariant point-set encoder maps a shape to a latent Gaussian;
the decoder predicts bounded per-vertex offsets of the spherical template.
Pretraining on random geometric primitives gives the reconstruction network a
regularized shape space to predict into.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .mesh import TriangleMesh, chamfer_distance, template_sphere

CHECKPOINT_VERSION = 1
LOG_VAR_CLAMP = 20.0


@dataclass
class VaeConfig:
    latent_dim: int = 64
    kl_weight: float = 1e-3
    encoder_point_count: int = 512
    # empirical smoothness bound asserted by regression tests: the max vertex
    # displacement per unit latent step after training
    lipschitz_bound: float = 10.0

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")


@dataclass
class PartLatent:
    mean: torch.Tensor
    log_variance: torch.Tensor
    sample: torch.Tensor

    def __post_init__(self):
        for t in (self.mean, self.log_variance, self.sample):
            if not torch.isfinite(t).all():
                raise ValueError("latent contains non-finite values")


def kl_loss(latent: PartLatent) -> torch.Tensor:
    """Closed-form KL(N(mean, diag(exp(log_var))) || N(0, I)), batch-averaged."""
    mu, lv = latent.mean, latent.log_variance
    per = 0.5 * (torch.exp(lv) + mu * mu - 1.0 - lv).sum(-1)
    return per.mean()


class PointSetEncoder(nn.Module):
    """Shared per-point MLP, max pool, then mean / log-variance heads."""

    def __init__(self, latent_dim: int):
        super().__init__()
        self.point_mlp = nn.Sequential(
            nn.Linear(3, 64), nn.ReLU(),
            nn.Linear(64, 128), nn.ReLU(),
            nn.Linear(128, 256), nn.ReLU(),
        )
        self.trunk = nn.Sequential(nn.Linear(256, 256), nn.ReLU())
        self.head_mean = nn.Linear(256, latent_dim)
        self.head_log_var = nn.Linear(256, latent_dim)

    def forward(self, points: torch.Tensor):
        feat = self.point_mlp(points).max(dim=-2).values
        feat = self.trunk(feat)
        mean = self.head_mean(feat)
        log_var = self.head_log_var(feat).clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        return mean, log_var


class ShapeDecoder(nn.Module):
    """Latent -> bounded vertex offsets of the template sphere.

    The output layer is zero-initialized so an untrained decoder reproduces
    the template exactly; offsets saturate at +-0.5 and the result is
    re-centered (placement belongs to the reconstructor's centroids).
    """

    def __init__(self, latent_dim: int):
        super().__init__()
        template = template_sphere()
        self.register_buffer("template_verts",
                             torch.as_tensor(template.vertices, dtype=torch.float32))
        self.num_vertices = template.num_vertices
        self.net = nn.Sequential(
            nn.Linear(latent_dim, 256), nn.ReLU(),
            nn.Linear(256, 512), nn.ReLU(),
        )
        self.out = nn.Linear(512, self.num_vertices * 3)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        raw = self.out(self.net(latent))
        offsets = 0.5 * torch.tanh(raw.reshape(*latent.shape[:-1], self.num_vertices, 3))
        verts = self.template_verts + offsets
        verts = verts - verts.mean(dim=-2, keepdim=True)
        return verts.clamp(-1.0, 1.0)


class PartVae(nn.Module):
    def __init__(self, config: VaeConfig | None = None):
        super().__init__()
        self.config = config or VaeConfig()
        self.encoder = PointSetEncoder(self.config.latent_dim)
        self.decoder = ShapeDecoder(self.config.latent_dim)

    def encode(self, points, sample: bool = True,
               generator: torch.Generator | None = None) -> PartLatent:
        """Latent distribution of a point set; points are centered first.

        With ``sample=False`` the reparameterized draw equals the mean.
        """
        if isinstance(points, np.ndarray):
            points = torch.as_tensor(points, dtype=torch.float32)
        if not torch.isfinite(points).all():
            raise ValueError("input points contain NaN/inf")
        points = points - points.mean(dim=-2, keepdim=True)
        mean, log_var = self.encoder(points)
        if sample:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            draw = mean + torch.exp(0.5 * log_var) * eps
        else:
            draw = mean
        return PartLatent(mean, log_var, draw)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Template vertices plus predicted offsets, (..., 642, 3)."""
        if isinstance(latent, np.ndarray):
            latent = torch.as_tensor(latent, dtype=torch.float32)
        if not torch.isfinite(latent).all():
            raise ValueError("latent contains NaN/inf")
        return self.decoder(latent)

    def decode_mesh(self, latent) -> TriangleMesh:
        with torch.no_grad():
            verts = self.decode(latent)
        return TriangleMesh(verts.detach().cpu().numpy(),
                            template_sphere().faces.copy())

    def vae_loss(self, points: torch.Tensor, sample: bool = True,
                 generator: torch.Generator | None = None):
        """Chamfer reconstruction + weighted KL; returns (total, parts dict)."""
        latent = self.encode(points, sample=sample, generator=generator)
        decoded = self.decode(latent.sample)
        chamfer = chamfer_distance(decoded, points).mean()
        kl = kl_loss(latent)
        total = chamfer + self.config.kl_weight * kl
        return total, {"chamfer": chamfer, "kl": kl}


def save_checkpoint(path, model: PartVae, step: int, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "part_vae",
        "config": asdict(model.config),
        "state": model.state_dict(),
        "step": step,
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[PartVae, int]:
    payload = torch.load(path, weights_only=False)
    if "version" not in payload:
        raise ValueError("checkpoint missing mandatory version field")
    model = PartVae(VaeConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    return model, payload["step"]
