"""Part and view adversarial regularization.

Novel shapes are assembled by mixing parts from two same-class
reconstructions and rendered from a fresh viewpoint; a class-conditioned
discriminator scores renders real (original reconstruction, training view)
vs fake (remix, novel view).  A gradient reversal layer in front of the
discriminator turns its objective into an adversarial signal for the
reconstructor within a single backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .recon import PartSet
from .render import Viewpoint


@dataclass
class RemixPlan:
    """Which parts come from object A (True) vs object B, plus the view for
    the fake render.  A remix must actually mix."""

    selector: tuple
    novel_view: Viewpoint

    def __post_init__(self):
        sel = tuple(bool(s) for s in self.selector)
        if all(sel) or not any(sel):
            raise ValueError("degenerate selector: remix must take parts from both objects")
        self.selector = sel


@dataclass
class DiscriminatorConfig:
    class_count: int = 2
    input_size: int = 64
    grl_scale: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.grl_scale <= 1.0:
            raise ValueError("grl_scale must lie in [0, 1]")


def remix(parts_a: PartSet, parts_b: PartSet, plan: RemixPlan) -> PartSet:
    """Per-slot selection of (latent, centroid, mesh, texture) from A or B."""
    if parts_a.class_label != parts_b.class_label:
        raise ValueError("remix requires objects of the same class")
    if parts_a.k != parts_b.k or len(plan.selector) != parts_a.k:
        raise ValueError("part counts must match the selector length")
    sel = torch.as_tensor(plan.selector)
    latents = torch.where(sel[:, None], parts_a.latents, parts_b.latents)
    centroids = torch.where(sel[:, None], parts_a.centroids, parts_b.centroids)
    meshes = [(parts_a if s else parts_b).meshes[i].copy()
              for i, s in enumerate(plan.selector)]
    textures = None
    if parts_a.textures is not None and parts_b.textures is not None:
        ta = torch.as_tensor(np.stack([np.asarray(t) for t in parts_a.textures]))
        tb = torch.as_tensor(np.stack([np.asarray(t) for t in parts_b.textures]))
        textures = torch.where(sel[:, None, None, None], ta, tb)
    return PartSet(latents=latents, centroids=centroids, meshes=meshes,
                   textures=textures, class_label=parts_a.class_label)


def sample_novel_view(rng: np.random.Generator, view_stats) -> Viewpoint:
    """Azimuth uniform over the circle, elevation uniform over the dataset
    range, distance/fov fixed to the dataset values."""
    lo, hi = view_stats.elevation_range
    return Viewpoint(
        azimuth=float(rng.uniform(0.0, 360.0)),
        elevation=float(rng.uniform(lo, hi)),
        distance=float(view_stats.distance),
        field_of_view=float(getattr(view_stats, "field_of_view", 30.0)),
    )


# ---------------------------------------------------------------------------
# gradient reversal

class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


def gradient_reversal(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by -scale."""
    return _GradReverse.apply(x, scale)


# ---------------------------------------------------------------------------
# discriminator

class Discriminator(nn.Module):
    """Conv net on silhouette+RGB renders with projection class conditioning.

    The logit is w.phi(x) + b + embed(y).phi(x): distinct class embeddings
    make the score class-dependent from initialization.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        widths = [4, 32, 64, 128, 256]
        blocks = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            blocks += [nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                       nn.GroupNorm(8, cout), nn.LeakyReLU(0.2, inplace=True)]
        self.backbone = nn.Sequential(*blocks)
        self.fc = nn.Linear(widths[-1], 1)
        self.class_embed = nn.Embedding(config.class_count, widths[-1])
        # mean-pooled features with a small projection keep initial logits
        # near zero so neither player saturates at the start
        nn.init.normal_(self.class_embed.weight, std=0.05)

    def forward(self, renders: torch.Tensor, class_labels: torch.Tensor) -> torch.Tensor:
        """renders: (B,4,S,S); returns raw logits (B,)."""
        phi = self.backbone(renders).mean(dim=(2, 3))
        logit = self.fc(phi).squeeze(-1)
        proj = (self.class_embed(class_labels) * phi).sum(-1)
        return logit + proj

    def probability(self, renders, class_labels):
        return torch.sigmoid(self(renders, class_labels))


def adversarial_loss(real_render: torch.Tensor, fake_render: torch.Tensor,
                     class_label: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    """-log D(real) - log(1 - D(fake)), class-conditioned.

    Computed from logits (softplus form), which equals the clamped-log
    formulation but stays finite for saturated discriminators.
    """
    if real_render.dim() == 3:
        real_render = real_render.unsqueeze(0)
    if fake_render.dim() == 3:
        fake_render = fake_render.unsqueeze(0)
    labels = torch.as_tensor(class_label).reshape(-1)
    real_logit = disc(real_render, labels.expand(real_render.shape[0]))
    fake_logit = disc(fake_render, labels.expand(fake_render.shape[0]))
    return F.softplus(-real_logit).mean() + F.softplus(fake_logit).mean()


def grl_warmup(step: int, total_steps: int, target_scale: float,
               warmup_fraction: float = 0.1) -> float:
    """Reversal scale ramped linearly from 0 over the first fraction of
    training to keep early shape learning stable."""
    horizon = max(1, int(total_steps * warmup_fraction))
    return target_scale * min(1.0, step / horizon)
