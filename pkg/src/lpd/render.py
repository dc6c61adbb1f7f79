"""Differentiable camera projection and soft rasterization.

The soft silhouette assigns every pixel an occupancy probability
1 - prod_f (1 - sigmoid(sign * d^2 / sigma)) where d is the screen-space
distance from the pixel to face f's edges and sign is positive inside the
projected triangle.  Color rendering blends per-face texture samples with
weights that combine the same face probabilities with a softmax over depth
(temperature gamma) and composites over the background.

Screen-space distances are measured in normalized device coordinates
(half the image width == 1), so the usual sigma ~ 1e-4 gives a falloff of
about one pixel at 64 x 64.  Contributions further than sqrt(cutoff*sigma)
from a face are exactly zero, which keeps the pixel/face pair lists sparse.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .mesh import TriangleMesh, template_sphere

log = logging.getLogger(__name__)

# sigmoid(-14) ~ 8e-7: beyond this logit faces contribute nothing visible
PAIR_LOGIT_CUTOFF = 14.0
NEAR_CLIP = 0.05


@dataclass
class Viewpoint:
    """Camera on a sphere around the origin, up = +y."""

    azimuth: float = 0.0       # degrees, 0 looks down -z from +z
    elevation: float = 0.0     # degrees in [-90, 90]
    distance: float = 2.0      # object units
    field_of_view: float = 30.0  # full vertical angle, degrees

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError("camera distance must be positive")
        if not -90.0 <= self.elevation <= 90.0:
            raise ValueError("elevation must lie in [-90, 90]")


@dataclass
class RenderSettings:
    image_size: int = 64
    sigma: float = 1e-4
    gamma: float = 1e-4
    background_color: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.sigma <= 0 or self.gamma <= 0:
            raise ValueError("sigma and gamma must be positive")
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")


@dataclass
class TextureImage:
    """Square RGB texture with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("texture must be HxWx3")
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError("texture must be square")


# ---------------------------------------------------------------------------
# camera

def camera_basis(view: Viewpoint):
    """Rows (right, up, forward) of the world->camera rotation, and position."""
    a, e = math.radians(view.azimuth), math.radians(view.elevation)
    pos = view.distance * np.array([
        math.cos(e) * math.sin(a), math.sin(e), math.cos(e) * math.cos(a)])
    fwd = -pos / np.linalg.norm(pos)
    up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up_hint)
    if np.linalg.norm(right) < 1e-8:  # looking straight up/down the y axis
        up_hint = np.array([0.0, 0.0, -math.copysign(1.0, e)])
        right = np.cross(fwd, up_hint)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    return np.stack([right, up, fwd]), pos


def camera_batch(views, dtype=torch.float32):
    rs, cs = zip(*(camera_basis(v) for v in views))
    r = torch.as_tensor(np.stack(rs), dtype=dtype)
    c = torch.as_tensor(np.stack(cs), dtype=dtype)
    tanf = torch.as_tensor(
        [math.tan(math.radians(v.field_of_view) / 2) for v in views], dtype=dtype)
    return r, c, tanf


def project_points(verts: torch.Tensor, rot: torch.Tensor, pos: torch.Tensor,
                   tan_half_fov: torch.Tensor):
    """Perspective projection of (B,V,3) vertices into NDC.

    Returns (ndc (B,V,2) with y up, depth (B,V) along the view direction,
    behind (B,V) flags for vertices at or past the near plane).
    """
    rel = verts - pos[:, None, :]
    cam = torch.einsum("bij,bvj->bvi", rot, rel)
    depth = cam[..., 2]
    behind = depth < NEAR_CLIP
    safe = depth.clamp_min(NEAR_CLIP)
    ndc = cam[..., :2] / (safe * tan_half_fov[:, None]).unsqueeze(-1)
    return ndc, depth, behind


def ndc_to_pixels(ndc: torch.Tensor, image_size: int) -> torch.Tensor:
    """NDC (y up) -> pixel coordinates (x right, y down, origin top-left)."""
    x = (ndc[..., 0] + 1.0) * 0.5 * image_size
    y = (1.0 - ndc[..., 1]) * 0.5 * image_size
    return torch.stack([x, y], dim=-1)


def project_vertices(mesh: TriangleMesh, view: Viewpoint, settings: RenderSettings):
    """Screen-space vertices (x, y in pixels, z view depth) for a mesh.

    Vertices behind the camera get clamped depth; a warning is logged.
    """
    verts = torch.as_tensor(mesh.vertices, dtype=torch.float64).unsqueeze(0)
    rot, pos, tanf = camera_batch([view], dtype=torch.float64)
    ndc, depth, behind = project_points(verts, rot, pos, tanf)
    if bool(behind.any()):
        log.warning("%d vertices at/behind the near plane were clamped",
                    int(behind.sum()))
    pix = ndc_to_pixels(ndc, settings.image_size)
    out = torch.cat([pix, depth.clamp_min(NEAR_CLIP).unsqueeze(-1)], dim=-1)
    return out[0].numpy()


# ---------------------------------------------------------------------------
# pixel/face candidate pairs

def _pixel_rect_pairs(tri: torch.Tensor, margin: float, image_size: int):
    """Candidate (face, row, col) pairs from per-face bounding rectangles.

    ``tri`` is (N,3,2) detached NDC corner coordinates.  Pixel (row, col) has
    NDC center x = 2*(col+0.5)/S - 1, y = 1 - 2*(row+0.5)/S.
    """
    s = image_size
    xmin = tri[:, :, 0].min(1).values - margin
    xmax = tri[:, :, 0].max(1).values + margin
    ymin = tri[:, :, 1].min(1).values - margin
    ymax = tri[:, :, 1].max(1).values + margin
    col_lo = torch.ceil((xmin + 1.0) * 0.5 * s - 0.5).long().clamp(0, s - 1)
    col_hi = torch.floor((xmax + 1.0) * 0.5 * s - 0.5).long().clamp(0, s - 1)
    row_lo = torch.ceil((1.0 - ymax) * 0.5 * s - 0.5).long().clamp(0, s - 1)
    row_hi = torch.floor((1.0 - ymin) * 0.5 * s - 0.5).long().clamp(0, s - 1)
    # faces fully outside the viewport produce empty ranges after clamping
    outside = (xmax < -1.0) | (xmin > 1.0) | (ymax < -1.0) | (ymin > 1.0)
    wx = (col_hi - col_lo + 1).clamp_min(0)
    wy = (row_hi - row_lo + 1).clamp_min(0)
    wx[outside] = 0
    counts = wx * wy
    total = int(counts.sum())
    if total == 0:
        z = torch.zeros(0, dtype=torch.long)
        return z, z, z
    face = torch.repeat_interleave(torch.arange(len(tri)), counts)
    start = torch.cumsum(counts, 0) - counts
    offset = torch.arange(total) - start[face]
    col = col_lo[face] + offset % wx[face]
    row = row_lo[face] + offset // wx[face]
    return face, row, col


class _EdgeDistanceSign(torch.autograd.Function):
    """Fused signed squared edge distance for pixel/triangle pairs.

    Forward returns (d2, sign); backward routes the d2 gradient to the two
    endpoints of the nearest edge: with clamped projection parameter t and
    offset diff = px - ((1-t)A + tB), grad_A = -2(1-t) diff and
    grad_B = -2t diff (the envelope theorem removes the dependence through
    t at the optimum).  Collapsing this chain into one autograd node is what
    keeps CPU training fast.
    """

    @staticmethod
    def forward(ctx, tri, px):
        eps = 1e-12
        d2 = None
        best_edge = None
        best_t = None
        crosses = []
        for i in range(3):
            a = tri[:, i]
            b = tri[:, (i + 1) % 3]
            e = b - a
            r = px - a
            t = ((r * e).sum(-1) / (e * e).sum(-1).clamp_min(eps)).clamp(0.0, 1.0)
            closest = a + t.unsqueeze(-1) * e
            dist = ((px - closest) ** 2).sum(-1)
            if d2 is None:
                d2, best_edge, best_t = dist, torch.zeros_like(t, dtype=torch.long), t
            else:
                better = dist < d2
                d2 = torch.where(better, dist, d2)
                best_edge = torch.where(better, i, best_edge)
                best_t = torch.where(better, t, best_t)
            crosses.append(e[:, 0] * r[:, 1] - e[:, 1] * r[:, 0])
        c = torch.stack(crosses, dim=-1)
        inside = (c >= 0).all(-1) | (c <= 0).all(-1)
        sign = torch.where(inside, 1.0, -1.0).to(tri.dtype)
        ctx.save_for_backward(tri, px, best_edge, best_t)
        return d2, sign

    @staticmethod
    def backward(ctx, grad_d2, grad_sign):
        tri, px, edge, t = ctx.saved_tensors
        k = tri.shape[0]
        idx_a = edge
        idx_b = (edge + 1) % 3
        rows = torch.arange(k)
        a = tri[rows, idx_a]
        b = tri[rows, idx_b]
        diff = px - ((1.0 - t).unsqueeze(-1) * a + t.unsqueeze(-1) * b)
        ga = (-2.0 * (1.0 - t) * grad_d2).unsqueeze(-1) * diff
        gb = (-2.0 * t * grad_d2).unsqueeze(-1) * diff
        grad_tri = torch.zeros_like(tri)
        grad_tri[rows, idx_a] = ga
        grad_tri.index_put_((rows, idx_b), gb, accumulate=True)
        return grad_tri, None


def _edge_distance_and_sign(tri: torch.Tensor, px: torch.Tensor):
    """Squared distance from points to triangle edges, and +-1 inside sign.

    ``tri`` is (K,3,2) per-pair triangle corners, ``px`` (K,2) pixel centers.
    """
    return _EdgeDistanceSign.apply(tri, px)


def _clipped_barycentric(tri: torch.Tensor, px: torch.Tensor):
    """Barycentric weights clipped to [0,1] and renormalized (K,3)."""
    eps = 1e-12
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, px - a
    d00 = (v0 * v0).sum(-1)
    d01 = (v0 * v1).sum(-1)
    d11 = (v1 * v1).sum(-1)
    d20 = (v2 * v0).sum(-1)
    d21 = (v2 * v1).sum(-1)
    denom = d00 * d11 - d01 * d01
    denom = torch.where(denom.abs() < eps, torch.full_like(denom, eps), denom)
    w1 = (d11 * d20 - d01 * d21) / denom
    w2 = (d00 * d21 - d01 * d20) / denom
    bary = torch.stack([1.0 - w1 - w2, w1, w2], dim=-1).clamp(0.0, 1.0)
    return bary / bary.sum(-1, keepdim=True).clamp_min(eps)


def _sample_textures(textures: torch.Tensor, tex_index: torch.Tensor, uv: torch.Tensor):
    """Bilinear texel fetch; u wraps (spherical seam), v clamps.

    ``textures`` is (N,T,T,3) with row index ~ v, ``tex_index`` (K,) selects
    the texture per pair, ``uv`` (K,2) in [0,1] (u may exceed 1 after seam
    unwrapping).
    """
    n, t = textures.shape[0], textures.shape[1]
    flat = textures.reshape(n * t * t, 3)
    x = uv[:, 0] * t - 0.5
    y = (uv[:, 1] * t - 0.5).clamp(0.0, t - 1.0)
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = (x - x0).unsqueeze(-1)
    fy = (y - y0).unsqueeze(-1)
    x0l = x0.long() % t
    x1l = (x0.long() + 1) % t
    y0l = y0.long().clamp(0, t - 1)
    y1l = (y0.long() + 1).clamp(0, t - 1)
    base = tex_index * (t * t)

    def fetch(yy, xx):
        return flat[base + yy * t + xx]

    c00, c01 = fetch(y0l, x0l), fetch(y0l, x1l)
    c10, c11 = fetch(y1l, x0l), fetch(y1l, x1l)
    top = c00 * (1 - fx) + c01 * fx
    bot = c10 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# soft rasterization

def soft_render(verts: torch.Tensor, faces: torch.Tensor, views,
                settings: RenderSettings, textures: torch.Tensor | None = None,
                face_part: torch.Tensor | None = None,
                face_uv: torch.Tensor | None = None):
    """Render soft silhouettes (and optionally colors) for a batch of meshes.

    verts: (B,V,3) differentiable vertex positions sharing one topology.
    faces: (F,3) long tensor.
    views: list of B Viewpoints.
    textures: (B,P,T,T,3) per-part textures; requires face_part (F,) part ids
        and face_uv (F,3,2) per-corner UVs.

    Returns (silhouette (B,H,W), color (B,H,W,3) or None).
    """
    if verts.dim() == 2:
        verts = verts.unsqueeze(0)
    b, v = verts.shape[0], verts.shape[1]
    s = settings.image_size
    dtype = verts.dtype
    want_color = textures is not None
    rot, pos, tanf = camera_batch(views, dtype=dtype)
    ndc, depth, _ = project_points(verts, rot, pos, tanf)

    nf = faces.shape[0]
    tri = ndc[:, faces]                      # (B,F,3,2)
    tri_flat = tri.reshape(b * nf, 3, 2)
    margin = math.sqrt(PAIR_LOGIT_CUTOFF * settings.sigma)
    with torch.no_grad():
        pair_face, row, col = _pixel_rect_pairs(tri_flat.detach(), margin, s)
    sil = verts.new_zeros(b * s * s)
    if len(pair_face) == 0:
        silhouette = sil.reshape(b, s, s)
        if not want_color:
            return silhouette, None
        bg = torch.as_tensor(settings.background_color, dtype=dtype)
        return silhouette, bg.expand(b, s, s, 3).clone()

    px = torch.stack([2.0 * (col.to(dtype) + 0.5) / s - 1.0,
                      1.0 - 2.0 * (row.to(dtype) + 0.5) / s], dim=-1)
    tri_pair = tri_flat[pair_face]
    d2, sign = _edge_distance_and_sign(tri_pair, px)
    logits = sign * d2 / settings.sigma
    sample = pair_face // nf
    face_id = pair_face % nf
    pix = sample * (s * s) + row * s + col

    # occupancy = 1 - prod(1 - p): accumulate -log(1-p) = softplus(logit)
    sil.index_add_(0, pix, F.softplus(logits))
    silhouette = (1.0 - torch.exp(-sil)).reshape(b, s, s)
    if not want_color:
        return silhouette, None

    dist0 = views[0].distance
    near, far = dist0 - 0.9, dist0 + 0.9
    depth_flat = depth[:, faces].reshape(b * nf, 3)

    # The depth softmax at small gamma concentrates the blend weight on a
    # few front pairs per pixel; pairs more than EXP_CUT below the per-pixel
    # maximum carry weights beyond floating-point relevance and are dropped
    # before the expensive texture work.  The filter uses detached copies of
    # the same quantities, so kept pairs are computed identically.
    EXP_CUT = 80.0
    with torch.no_grad():
        bary0 = _clipped_barycentric(tri_pair.detach(), px)
        z0 = (bary0 * depth_flat.detach()[pair_face]).sum(-1)
        zn0 = ((far - z0) / (far - near)).clamp(0.0, 1.0)
        logw0 = -F.softplus(-logits.detach()) + zn0 / settings.gamma
        wmax = torch.full((b * s * s,), -1e30, dtype=dtype)
        wmax.scatter_reduce_(0, pix, logw0, reduce="amax")
        keep = (logw0 - wmax[pix]) > -EXP_CUT

    kp_pix = pix[keep]
    bary = _clipped_barycentric(tri_pair[keep], px[keep])
    z = (bary * depth_flat[pair_face[keep]]).sum(-1)
    z_norm = ((far - z) / (far - near)).clamp(0.0, 1.0)
    uv = (bary.unsqueeze(-1) * face_uv[face_id[keep]].to(dtype)).sum(1)
    part = face_part[face_id[keep]]
    tex_index = sample[keep] * textures.shape[1] + part
    colors = _sample_textures(textures.reshape(-1, *textures.shape[2:]), tex_index, uv)

    # per-pixel softmax over kept pairs of log(p) + z_norm / gamma
    logw = -F.softplus(-logits[keep]) + z_norm / settings.gamma
    wexp = torch.exp(logw - wmax[kp_pix])
    denom = verts.new_zeros(b * s * s).index_add_(0, kp_pix, wexp)
    fg = verts.new_zeros(b * s * s, 3).index_add_(0, kp_pix, wexp.unsqueeze(-1) * colors)
    fg = fg / denom.clamp_min(1e-30).unsqueeze(-1)
    covered = (denom > 0).to(dtype).unsqueeze(-1)
    occ = silhouette.reshape(-1, 1) * covered
    bg = torch.as_tensor(settings.background_color, dtype=dtype)
    img = occ * fg + (1.0 - occ) * bg
    return silhouette, img.reshape(b, s, s, 3)


def render_silhouette(mesh: TriangleMesh, view: Viewpoint,
                      settings: RenderSettings) -> np.ndarray:
    """Soft occupancy image in [0,1] for a single mesh (numpy convenience)."""
    if mesh.num_faces == 0:
        raise ValueError("cannot render an empty mesh")
    verts = torch.as_tensor(mesh.vertices, dtype=torch.float64)
    faces = torch.as_tensor(mesh.faces)
    sil, _ = soft_render(verts, faces, [view], settings)
    return sil[0].numpy()


def render_color(parts, view: Viewpoint, settings: RenderSettings) -> np.ndarray:
    """Textured render of a PartSet (duck-typed: meshes/centroids/textures)."""
    if parts.textures is None:
        raise ValueError("render_color requires part textures")
    k = len(parts.meshes)
    template = parts.meshes[0]
    verts = np.concatenate([m.vertices + c for m, c in zip(parts.meshes, parts.centroids)])
    faces = np.concatenate([m.faces + i * template.num_vertices for i, m in enumerate(parts.meshes)])
    face_part = torch.repeat_interleave(torch.arange(k),
                                        torch.as_tensor([m.num_faces for m in parts.meshes]))
    uv = face_uv_table(template)
    face_uv = uv.repeat(k, 1, 1)
    tex = torch.as_tensor(np.stack([np.asarray(t.pixels if isinstance(t, TextureImage) else t)
                                    for t in parts.textures]), dtype=torch.float64)
    _, img = soft_render(torch.as_tensor(verts, dtype=torch.float64),
                         torch.as_tensor(faces), [view], settings,
                         textures=tex.unsqueeze(0), face_part=face_part,
                         face_uv=face_uv)
    return img[0].numpy()


# ---------------------------------------------------------------------------
# hard rasterization (data generation and evaluation; not differentiable)

def rasterize_hard(verts: np.ndarray, faces: np.ndarray, view: Viewpoint,
                   settings: RenderSettings, face_color: np.ndarray | None = None,
                   background=None):
    """Z-buffered point-in-triangle rasterizer.

    Returns (mask (S,S) bool, image (S,S,3) float or None when no colors are
    given).  ``face_color`` is (F,3) flat per-face color.
    """
    s = settings.image_size
    vt = torch.as_tensor(verts, dtype=torch.float64).unsqueeze(0)
    rot, pos, tanf = camera_batch([view], dtype=torch.float64)
    ndc, depth, _ = project_points(vt, rot, pos, tanf)
    tri = ndc[0, faces]
    pair_face, row, col = _pixel_rect_pairs(tri, 0.0, s)
    mask = np.zeros((s, s), dtype=bool)
    img = None
    if face_color is not None:
        bg = np.asarray(background if background is not None else settings.background_color, dtype=np.float64)
        img = np.tile(bg, (s, s, 1))
    if len(pair_face) == 0:
        return mask, img
    px = torch.stack([2.0 * (col.double() + 0.5) / s - 1.0,
                      1.0 - 2.0 * (row.double() + 0.5) / s], dim=-1)
    tri_pair = tri[pair_face]
    d2, sign = _edge_distance_and_sign(tri_pair, px)
    inside = sign > 0
    pair_face, row, col = pair_face[inside], row[inside], col[inside]
    if len(pair_face) == 0:
        return mask, img
    px, tri_pair = px[inside], tri_pair[inside]
    pix = (row * s + col).numpy()
    mask.reshape(-1)[pix] = True
    if face_color is None:
        return mask, None
    bary = _clipped_barycentric(tri_pair, px)
    z = (bary * depth[0, faces].squeeze(0)[pair_face]).sum(-1).numpy()
    order = np.lexsort((z, pix))
    pix_sorted = pix[order]
    first = np.ones(len(pix_sorted), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = order[first]
    img.reshape(-1, 3)[pix[winners]] = face_color[pair_face.numpy()[winners]]
    return mask, img


# ---------------------------------------------------------------------------
# UV template

def uv_template(mesh: TriangleMesh) -> np.ndarray:
    """Fixed spherical UVs of the undeformed template: u = azimuth / 2pi
    (seam at +x), v = (elevation + pi/2) / pi (north pole at v = 1).

    Rejects meshes whose vertex count does not match an icosphere template;
    UVs are computed from the canonical template coordinates so deformed
    copies keep their texture parameterization.
    """
    counts = {10 * 4 ** lvl + 2: lvl for lvl in range(6)}
    if mesh.num_vertices not in counts:
        raise ValueError(f"{mesh.num_vertices} vertices does not match any sphere template")
    ref = template_sphere(counts[mesh.num_vertices]).vertices
    r = np.linalg.norm(ref, axis=1)
    u = np.arctan2(ref[:, 2], ref[:, 0]) / (2 * np.pi)
    u = np.where(u < 0, u + 1.0, u)
    v = (np.arcsin(np.clip(ref[:, 1] / r, -1.0, 1.0)) + np.pi / 2) / np.pi
    return np.stack([u, v], axis=1)


def face_uv_table(mesh: TriangleMesh) -> torch.Tensor:
    """Per-face corner UVs (F,3,2) with the seam unwrapped per face.

    Faces spanning the u = 0/1 seam get their low-u corners shifted by +1 so
    interpolation stays continuous; pole corners take the mean u of the other
    two corners of their face.
    """
    uv = uv_template(mesh)
    table = uv[mesh.faces].copy()           # (F,3,2)
    pole = np.isclose(uv[:, 1], 1.0) | np.isclose(uv[:, 1], 0.0)
    pole_corner = pole[mesh.faces]
    u = table[:, :, 0]
    # the pole's u is a placeholder, so base the wrap decision on the other
    # corners, then give the pole their mean
    u_valid = np.ma.masked_array(u, mask=pole_corner)
    span = u_valid.max(1) - u_valid.min(1)
    wrap = (span.filled(0.0) > 0.5)[:, None] & (u < 0.5) & ~pole_corner
    u[wrap] += 1.0
    u_valid = np.ma.masked_array(u, mask=pole_corner)
    has_pole = pole_corner.any(1)
    u[has_pole] = np.where(pole_corner[has_pole],
                           u_valid.mean(1).filled(0.0)[has_pole, None],
                           u[has_pole])
    table[:, :, 0] = u
    return torch.as_tensor(table)


# ---------------------------------------------------------------------------
# PNG I/O

def save_image(path, image: np.ndarray) -> None:
    """8-bit PNG; HxW arrays become grayscale, HxWx3 RGB."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path)


def load_image(path) -> np.ndarray:
    """RGB image as float HxWx3 in [0,1]."""
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def load_silhouette(path) -> np.ndarray:
    """Binary mask from an 8-bit grayscale PNG (threshold 128)."""
    return np.asarray(Image.open(path).convert("L")) >= 128
