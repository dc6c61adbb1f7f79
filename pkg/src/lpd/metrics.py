"""Evaluation metrics: 32^3 voxel IoU, 2D re-projection IoU, SSIM, Chamfer
distance on sampled surface points, and optimal part-to-reference matching.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, signal
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .mesh import TriangleMesh, sample_surface

log = logging.getLogger(__name__)

VOXEL_RESOLUTION = 32
CUBE_HALF = 0.5


@dataclass
class VoxelGrid:
    """Boolean occupancy over the canonical cube [-0.5, 0.5]^3."""

    occupancy: np.ndarray

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.shape != (VOXEL_RESOLUTION,) * 3:
            raise ValueError(f"voxel grids are fixed at {VOXEL_RESOLUTION}^3")

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())


def _surface_cells(mesh: TriangleMesh) -> np.ndarray:
    """Cells touched by the surface, via sub-voxel triangle supersampling."""
    res, pitch = VOXEL_RESOLUTION, 2 * CUBE_HALF / VOXEL_RESOLUTION
    marks = np.zeros((res, res, res), dtype=bool)
    if mesh.num_faces == 0:
        return marks
    v = mesh.vertices
    tri = v[mesh.faces]                                 # (F,3,3)
    edge = np.linalg.norm(np.diff(tri[:, [0, 1, 2, 0]], axis=1), axis=2).max(1)
    density = np.maximum(1, np.ceil(edge / (pitch / 2)).astype(int))
    clipped = False
    for n in np.unique(density):
        sel = tri[density == n]
        ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = (ii + jj) <= n
        a = (ii[keep] / n)[None, :, None]
        b = (jj[keep] / n)[None, :, None]
        pts = (sel[:, 0:1] * (1 - a - b) + sel[:, 1:2] * a + sel[:, 2:3] * b)
        pts = pts.reshape(-1, 3)
        idx = np.floor((pts + CUBE_HALF) / pitch).astype(int)
        inside = np.all((idx >= 0) & (idx < res), axis=1)
        # points exactly on the +0.5 boundary belong to the last cell
        boundary = np.all((pts >= -CUBE_HALF) & (pts <= CUBE_HALF), axis=1) & ~inside
        idx[boundary] = np.clip(idx[boundary], 0, res - 1)
        inside |= boundary
        if not inside.all():
            clipped = True
        idx = idx[inside]
        marks[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    if clipped:
        log.warning("mesh extends outside the canonical cube; clipped during voxelization")
    return marks


def voxelize(mesh: TriangleMesh) -> VoxelGrid:
    """Surface cells plus interior, where interior is everything unreachable
    by a flood fill of empty cells from the grid boundary."""
    surface = _surface_cells(mesh)
    if not surface.any():
        return VoxelGrid(surface)
    free = ~surface
    seeds = np.zeros_like(free)
    seeds[[0, -1], :, :] = seeds[:, [0, -1], :] = seeds[:, :, [0, -1]] = True
    seeds &= free
    exterior = ndimage.binary_propagation(seeds, mask=free)
    return VoxelGrid(~exterior)


def voxel_iou(a: VoxelGrid, b: VoxelGrid) -> float:
    """Intersection over union; empty-vs-empty counts as a perfect match."""
    union = np.logical_or(a.occupancy, b.occupancy).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.occupancy, b.occupancy).sum() / union)


def iou_2d(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two binary masks (threshold 0.5 for float inputs)."""
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------------------
# SSIM

def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(x: np.ndarray, y: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         dynamic_range: float = 1.0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    RGB inputs are converted to luminance first; images must match in size.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("ssim requires equal image sizes")
    if x.ndim == 3:
        lum = np.array([0.299, 0.587, 0.114])
        x, y = x @ lum, y @ lum
    win = _gaussian_kernel()
    c1, c2 = (k1 * dynamic_range) ** 2, (k2 * dynamic_range) ** 2

    def f(img):
        return signal.convolve2d(img, win, mode="valid")

    mx, my = f(x), f(y)
    vx = f(x * x) - mx * mx
    vy = f(y * y) - my * my
    cxy = f(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# sampled Chamfer distance

def chamfer_eval(pred: TriangleMesh, gt: TriangleMesh, samples: int = 10_000,
                 seed: int = 0) -> float:
    """Symmetric squared Chamfer between area-weighted surface samples.

    Both meshes are sampled with identically seeded generators, so an exact
    copy of the reference scores exactly zero.
    """
    if samples < 1000:
        raise ValueError("use at least 1000 samples for a stable estimate")
    p = sample_surface(pred, samples, np.random.default_rng(seed))
    q = sample_surface(gt, samples, np.random.default_rng(seed))
    d_pq = cKDTree(q).query(p, workers=-1)[0]
    d_qp = cKDTree(p).query(q, workers=-1)[0]
    return float(np.mean(d_pq ** 2) + np.mean(d_qp ** 2))


# ---------------------------------------------------------------------------
# part matching

def match_parts(pred_parts: list[VoxelGrid], ref_parts: list[VoxelGrid]):
    """Assignment between predicted and reference parts maximizing total
    voxel IoU.

    Returns (pairs, per-pair IoU, mean IoU); ``pairs`` is a list of
    (pred_index, ref_index).
    """
    if not pred_parts or not ref_parts:
        raise ValueError("part lists must be non-empty")
    iou = np.array([[voxel_iou(p, r) for r in ref_parts] for p in pred_parts])
    rows, cols = linear_sum_assignment(-iou)
    pairs = list(zip(rows.tolist(), cols.tolist()))
    scores = iou[rows, cols]
    return pairs, scores, float(scores.mean())


# ---------------------------------------------------------------------------
# persistence helpers

def save_voxels(path, grid: VoxelGrid) -> None:
    """Run-length encoding: 'count value' per line over the flattened grid."""
    flat = grid.occupancy.reshape(-1)
    change = np.flatnonzero(np.diff(flat.astype(np.int8)))
    starts = np.concatenate([[0], change + 1])
    ends = np.concatenate([change + 1, [len(flat)]])
    lines = [f"{e - s} {int(flat[s])}" for s, e in zip(starts, ends)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_voxels(path) -> VoxelGrid:
    flat = []
    for line in Path(path).read_text().splitlines():
        count, value = line.split()
        flat.extend([bool(int(value))] * int(count))
    arr = np.array(flat, dtype=bool).reshape((VOXEL_RESOLUTION,) * 3)
    return VoxelGrid(arr)


def write_metric_report(path, rows: list[dict]) -> None:
    """CSV rows with the header class,metric,value,n."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["class", "metric", "value", "n"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def format_metric_table(rows: list[dict]) -> str:
    """Human-readable aligned table of a metrics report."""
    header = f"{'class':<12} {'metric':<12} {'value':>10} {'n':>6}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['class']:<12} {r['metric']:<12} {float(r['value']):>10.4f} {r['n']:>6}")
    return "\n".join(lines)
