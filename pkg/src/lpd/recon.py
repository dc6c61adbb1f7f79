"""Single-view part reconstruction.

An image encoder predicts, for each of k part slots, a latent shape code, a
3D centroid, and a texture flow that warps input-image pixels into the part's
UV texture.  Latents decode to meshes through the shared part prior; parts
are assembled by shifting each decoded mesh to its centroid and concatenating.
Supervision is weak: a silhouette IoU loss on differentiable renders plus a
perceptual color loss through a fixed feature extractor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .mesh import TriangleMesh, merge_meshes, template_sphere
from .part_vae import PartVae
from .render import RenderSettings, Viewpoint, face_uv_table, soft_render

TEXTURE_SIZE = 64
FLOW_GRID = 8
IMAGE_SIZE = 224


@dataclass
class PartSet:
    """k predicted parts: latents (k,d), centroids (k,3), decoded meshes,
    per-part textures (k,T,T,3 in [0,1])."""

    latents: torch.Tensor
    centroids: torch.Tensor
    meshes: list
    textures: torch.Tensor | None = None
    class_label: int | None = None

    def __post_init__(self):
        k = self.latents.shape[0]
        if self.centroids.shape != (k, 3):
            raise ValueError("centroid count does not match latent count")
        if len(self.meshes) != k:
            raise ValueError("mesh count does not match latent count")
        if self.textures is not None and len(self.textures) != k:
            raise ValueError("texture count does not match latent count")
        if self.centroids.abs().max() > 0.5 + 1e-6:
            raise ValueError("centroids must lie in [-0.5, 0.5]^3")

    @property
    def k(self) -> int:
        return self.latents.shape[0]


@dataclass
class TrainingSample:
    """RGB image + binary silhouette + camera + class id."""

    image: np.ndarray          # (H,W,3) in [0,1]
    silhouette: np.ndarray     # (H,W) bool
    viewpoint: Viewpoint
    class_label: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.silhouette = np.asarray(self.silhouette).astype(bool)
        if self.silhouette.mean() < 0.01:
            raise ValueError("silhouette has less than 1% foreground")


class ReconstructionNet(nn.Module):
    """Convolutional encoder with k per-part heads.

    ``part_prior=False`` is the free-form ablation: part vertices come from an
    unconstrained offset head instead of the latent shape decoder.
    """

    def __init__(self, k: int = 3, latent_dim: int = 64, part_prior: bool = True,
                 texture_size: int = TEXTURE_SIZE):
        super().__init__()
        self.k = k
        self.latent_dim = latent_dim
        self.part_prior = part_prior
        self.texture_size = texture_size
        widths = [3, 32, 64, 128, 256, 256]
        blocks = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            blocks += [nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                       nn.GroupNorm(8, cout), nn.ReLU(inplace=True)]
        self.backbone = nn.Sequential(*blocks)
        self.trunk = nn.Sequential(nn.Linear(widths[-1], 256), nn.ReLU(inplace=True))
        self.head_latent = nn.Linear(256, k * latent_dim)
        self.head_centroid = nn.Linear(256, k * 3)
        self.head_flow = nn.Linear(256, k * FLOW_GRID * FLOW_GRID * 2)
        # identity sampling grid at initialization avoids texture collapse
        nn.init.zeros_(self.head_flow.weight)
        nn.init.zeros_(self.head_flow.bias)
        if not part_prior:
            template = template_sphere()
            self.register_buffer("template_verts",
                                 torch.as_tensor(template.vertices, dtype=torch.float32))
            self.head_offsets = nn.Linear(256, k * template.num_vertices * 3)
            nn.init.zeros_(self.head_offsets.weight)
            nn.init.zeros_(self.head_offsets.bias)

    def forward(self, images: torch.Tensor) -> dict:
        """images: (B,3,H,W) in [0,1] -> per-part predictions."""
        b = images.shape[0]
        feat = self.backbone(images - 0.5).mean(dim=(2, 3))
        feat = self.trunk(feat)
        latents = self.head_latent(feat).reshape(b, self.k, self.latent_dim)
        centroids = 0.5 * torch.tanh(self.head_centroid(feat).reshape(b, self.k, 3))
        flow_coarse = self.head_flow(feat).reshape(b * self.k, FLOW_GRID, FLOW_GRID, 2)
        flow = F.interpolate(flow_coarse.permute(0, 3, 1, 2), size=self.texture_size,
                             mode="bilinear", align_corners=True)
        flow = flow.permute(0, 2, 3, 1).reshape(b, self.k, self.texture_size, self.texture_size, 2)
        flow = (identity_flow(self.texture_size, flow.dtype) + flow).clamp(-1.0, 1.0)
        out = {"latents": latents, "centroids": centroids, "flow": flow}
        if not self.part_prior:
            off = self.head_offsets(feat).reshape(b, self.k, -1, 3)
            verts = self.template_verts + 0.5 * torch.tanh(off)
            verts = verts - verts.mean(dim=-2, keepdim=True)
            out["verts"] = verts.clamp(-1.0, 1.0)
        return out

    def part_vertices(self, out: dict, vae: PartVae | None) -> torch.Tensor:
        """(B,k,V,3) part vertices from the forward output."""
        if self.part_prior:
            if vae is None:
                raise ValueError("part-prior model needs the shape decoder")
            b, k, d = out["latents"].shape
            return vae.decode(out["latents"].reshape(b * k, d)).reshape(b, k, -1, 3)
        return out["verts"]


def identity_flow(size: int, dtype=torch.float32) -> torch.Tensor:
    """Sampling grid that reproduces the input image (grid_sample convention)."""
    lin = torch.linspace(-1.0, 1.0, size, dtype=dtype)
    gy, gx = torch.meshgrid(lin, lin, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def sample_textures_from_image(images: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear image sampling at the predicted flow: (B,k,T,T,3) textures.

    images: (B,3,H,W); flow: (B,k,T,T,2) in [-1,1].
    """
    b, k, t = flow.shape[0], flow.shape[1], flow.shape[2]
    rep = images.repeat_interleave(k, dim=0)
    grid = flow.reshape(b * k, t, t, 2)
    tex = F.grid_sample(rep, grid, mode="bilinear", padding_mode="border",
                        align_corners=False)
    return tex.permute(0, 2, 3, 1).reshape(b, k, t, t, 3)


def reconstruct(net: ReconstructionNet, vae: PartVae | None, image, k: int | None = None,
                class_label: int | None = None) -> PartSet:
    """Single-image inference to a PartSet (deterministic, no gradients)."""
    if k is not None and k != net.k:
        raise ValueError(f"model predicts {net.k} parts, requested {k}")
    img = np.asarray(image, dtype=np.float32)
    tensor = torch.as_tensor(img).permute(2, 0, 1).unsqueeze(0)
    net.eval()
    with torch.no_grad():
        out = net(tensor)
        verts = net.part_vertices(out, vae)[0]
        textures = sample_textures_from_image(tensor, out["flow"])[0]
    faces = template_sphere().faces
    meshes = [TriangleMesh(verts[i].numpy(), faces.copy()) for i in range(net.k)]
    return PartSet(latents=out["latents"][0], centroids=out["centroids"][0],
                   meshes=meshes, textures=textures, class_label=class_label)


def assemble(parts: PartSet) -> TriangleMesh:
    """Whole-object mesh: each part shifted to its centroid, then concatenated."""
    shifted = []
    for i, m in enumerate(parts.meshes):
        c = parts.centroids[i].detach().cpu().numpy()
        shifted.append(TriangleMesh(m.vertices + c, m.faces))
    return merge_meshes(shifted)


def assembled_vertices(verts: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    """Differentiable assembly: (B,k,V,3) + (B,k,3) -> (B,k*V,3)."""
    v = verts + centroids.unsqueeze(-2)
    return v.reshape(v.shape[0], -1, 3)


# ---------------------------------------------------------------------------
# losses

def silhouette_iou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - soft IoU between rendered and reference silhouettes.

    Intersection is the elementwise product; union is sum minus intersection.
    """
    if float(target.sum()) <= 0:
        raise ValueError("reference silhouette is empty")
    dims = tuple(range(pred.dim()))[-2:]
    inter = (pred * target).sum(dim=dims)
    union = (pred + target).sum(dim=dims) - inter
    return (1.0 - inter / union).mean()


def silhouette_loss(sample: TrainingSample, parts: PartSet,
                    settings: RenderSettings) -> torch.Tensor:
    """Render the assembled parts from the sample's viewpoint and compare."""
    mesh = assemble(parts)
    verts = torch.cat([torch.as_tensor(m.vertices, dtype=torch.float64) +
                       parts.centroids[i].double()
                       for i, m in enumerate(parts.meshes)])
    faces = torch.as_tensor(mesh.faces)
    sil, _ = soft_render(verts.unsqueeze(0), faces, [sample.viewpoint], settings)
    target = downsample_mask(sample.silhouette, settings.image_size).to(sil.dtype)
    return silhouette_iou_loss(sil[0], target)


def downsample_mask(mask: np.ndarray, size: int) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(mask, dtype=np.float32))[None, None]
    if t.shape[-1] == size:
        return t[0, 0]
    return F.adaptive_avg_pool2d(t, size)[0, 0]


def downsample_image(image: np.ndarray, size: int) -> torch.Tensor:
    """(H,W,3) numpy -> (3,size,size) tensor, area-averaged."""
    t = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    if t.shape[-1] != size:
        t = F.adaptive_avg_pool2d(t, size)
    return t[0]


class IdentityExtractor(nn.Module):
    """Raw pixels as the single feature map."""

    layer_names = ("pixels",)

    def forward(self, images: torch.Tensor):
        return [images]


class RandomConvPyramid(nn.Module):
    """Fixed random conv stack; multi-scale features from frozen weights.

    The seed is recorded so extracted features are reproducible across runs.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = w
        self.convs = nn.ModuleList(layers)
        self.layer_names = tuple(f"conv{i}" for i in range(len(widths)))
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images: torch.Tensor):
        feats = []
        x = images
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def make_extractor(name: str, seed: int = 0) -> nn.Module:
    if name == "identity":
        return IdentityExtractor()
    if name == "random_pyramid":
        return RandomConvPyramid(seed=seed)
    raise ValueError(f"unknown feature extractor {name!r}")


def color_feature_loss(img_a: torch.Tensor, img_b: torch.Tensor, extractor) -> torch.Tensor:
    """Sum over extractor layers of mean squared feature difference.

    Both images are (B,3,H,W) or (3,H,W); the identity extractor reduces this
    to plain mean squared pixel error.
    """
    if img_a.dim() == 3:
        img_a, img_b = img_a.unsqueeze(0), img_b.unsqueeze(0)
    fa, fb = extractor(img_a), extractor(img_b)
    if len(fa) != len(fb) or any(x.shape != y.shape for x, y in zip(fa, fb)):
        raise ValueError("feature extractor layer mismatch between the two images")
    return sum(((x - y) ** 2).mean() for x, y in zip(fa, fb))


def color_loss(sample: TrainingSample, parts: PartSet, extractor,
               settings: RenderSettings) -> torch.Tensor:
    """Perceptual distance between the input image and the textured render."""
    if parts.textures is None:
        raise ValueError("color loss requires part textures")
    template = template_sphere()
    verts = torch.cat([torch.as_tensor(m.vertices, dtype=torch.float64) +
                       parts.centroids[i].double()
                       for i, m in enumerate(parts.meshes)])
    faces = torch.as_tensor(np.concatenate(
        [m.faces + i * template.num_vertices for i, m in enumerate(parts.meshes)]))
    k = parts.k
    face_part = torch.repeat_interleave(torch.arange(k), template.num_faces)
    face_uv = face_uv_table(template).repeat(k, 1, 1)
    tex = torch.as_tensor(np.stack([np.asarray(t) for t in parts.textures]),
                          dtype=torch.float64)
    _, img = soft_render(verts.unsqueeze(0), faces, [sample.viewpoint], settings,
                         textures=tex.unsqueeze(0), face_part=face_part, face_uv=face_uv)
    rendered = img[0].permute(2, 0, 1).float()
    target = downsample_image(sample.image, settings.image_size)
    return color_feature_loss(target, rendered, extractor)
