"""Datasets: random primitives for shape-prior training, a synthetic
composed-primitive benchmark with ground-truth parts, and a loader for
ShapeNet-style directory layouts.

Directory layout (schema version 1):
    <root>/<class>/<object_id>/rgb_<v>.png     8-bit RGB, image_size^2
    <root>/<class>/<object_id>/sil_<v>.png     8-bit grayscale mask
    <root>/<class>/<object_id>/views.txt       one line per view:
                                               "azimuth elevation distance"
    <root>/<class>/<object_id>/gt_parts/part_<i>.obj   (synthetic only)
    <root>/manifest.json
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .mesh import (PrimitiveSpec, SimilarityTransform, TriangleMesh,
                   apply_transform, make_primitive, merge_meshes,
                   quat_from_axis_angle, random_rotation, sample_surface,
                   load_obj, save_obj)
from .recon import TrainingSample
from .render import (RenderSettings, Viewpoint, load_image, load_silhouette,
                     rasterize_hard, save_image)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHANNEL_PERMUTATIONS = list(itertools.permutations(range(3)))


# ---------------------------------------------------------------------------
# primitive sampling (shape-prior training data)

def sample_primitive(rng: np.random.Generator, point_count: int = 512,
                     resolution: int = 16):
    """Random primitive: uniform kind, per-axis scale in [0.1, 0.5], uniform
    rotation.  Returns (spec, surface points)."""
    kind = PrimitiveSpec.KINDS[rng.integers(len(PrimitiveSpec.KINDS))]
    scale = rng.uniform(0.1, 0.5, size=3)
    spec = PrimitiveSpec(kind, scale, random_rotation(rng))
    mesh = make_primitive(spec, resolution)
    return spec, sample_surface(mesh, point_count, rng).astype(np.float32)


def primitive_batch(rng: np.random.Generator, batch_size: int,
                    point_count: int = 512) -> np.ndarray:
    """(B, N, 3) float32 stack of resampled primitive surfaces."""
    return np.stack([sample_primitive(rng, point_count)[1] for _ in range(batch_size)])


# ---------------------------------------------------------------------------
# synthetic benchmark objects

@dataclass
class SyntheticObjectSpec:
    """Composed object: 2-4 (primitive, centroid) parts plus flat colors."""

    class_name: str
    class_id: int
    parts: list                      # list of (PrimitiveSpec, centroid)
    colors: list                     # per-part RGB

    def __post_init__(self):
        if not 2 <= len(self.parts) <= 4:
            raise ValueError("synthetic objects have 2-4 parts")

    def part_meshes(self, resolution: int = 16) -> list[TriangleMesh]:
        out = []
        for spec, centroid in self.parts:
            m = make_primitive(spec, resolution)
            out.append(TriangleMesh(m.vertices + np.asarray(centroid), m.faces))
        return out

    def whole_mesh(self, resolution: int = 16) -> TriangleMesh:
        return merge_meshes(self.part_meshes(resolution))


# y-up orientation for primitives whose canonical axis is +z
_UPRIGHT = quat_from_axis_angle([1.0, 0.0, 0.0], -math.pi / 2)

_PART_COLORS = {
    "table": [(0.80, 0.30, 0.20), (0.20, 0.40, 0.80), (0.25, 0.75, 0.35)],
    "lamp": [(0.75, 0.70, 0.20), (0.55, 0.30, 0.75), (0.90, 0.50, 0.15)],
}


def _jitter_colors(base, rng):
    out = []
    for c in base:
        col = np.clip(np.asarray(c) + rng.uniform(-0.15, 0.15, 3), 0.05, 1.0)
        out.append(tuple(col))
    return out


def make_table(rng: np.random.Generator) -> SyntheticObjectSpec:
    """Slab top on two box legs; all scale components within [0.1, 0.5]."""
    half_w = rng.uniform(0.36, 0.46)
    top_t = rng.uniform(0.10, 0.13)
    depth = rng.uniform(0.24, 0.34)
    top_y = rng.uniform(0.20, 0.28)
    leg_w = rng.uniform(0.10, 0.13)
    leg_h = (top_y - top_t + 0.42) / 2
    leg_y = top_y - top_t - leg_h
    leg_x = half_w - leg_w
    leg_d = max(0.1, depth - 0.08)
    parts = [
        (PrimitiveSpec("cuboid", (half_w, top_t, depth)), (0.0, top_y, 0.0)),
        (PrimitiveSpec("cuboid", (leg_w, leg_h, leg_d)), (-leg_x, leg_y, 0.0)),
        (PrimitiveSpec("cuboid", (leg_w, leg_h, leg_d)), (leg_x, leg_y, 0.0)),
    ]
    return SyntheticObjectSpec("table", 0, parts,
                               _jitter_colors(_PART_COLORS["table"], rng))


def make_lamp(rng: np.random.Generator) -> SyntheticObjectSpec:
    """Cylinder base, cylinder pole, cone shade stacked along +y."""
    base_r = rng.uniform(0.20, 0.27)
    base_h = 0.10
    base_y = -0.38
    pole_r = rng.uniform(0.10, 0.12)
    pole_h = rng.uniform(0.15, 0.20)
    shade_r = rng.uniform(0.17, 0.24)
    shade_h = rng.uniform(0.12, 0.16)
    pole_y = base_y + base_h + pole_h
    shade_y = pole_y + pole_h + shade_h
    parts = [
        (PrimitiveSpec("cylinder", (base_r, base_r, base_h), _UPRIGHT), (0.0, base_y, 0.0)),
        (PrimitiveSpec("cylinder", (pole_r, pole_r, pole_h), _UPRIGHT), (0.0, pole_y, 0.0)),
        (PrimitiveSpec("cone", (shade_r, shade_r, shade_h), _UPRIGHT), (0.0, shade_y, 0.0)),
    ]
    return SyntheticObjectSpec("lamp", 1, parts,
                               _jitter_colors(_PART_COLORS["lamp"], rng))


ARCHETYPES = (make_table, make_lamp)


# ---------------------------------------------------------------------------
# manifest

@dataclass
class DatasetManifest:
    root: str
    image_size: int
    views_per_object: int
    distance: float
    field_of_view: float
    elevation_range: tuple
    classes: list
    seed: int
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    skipped: int = 0                 # malformed/missing entries at load time

    def entry_key(self, entry):
        return (entry["class"], entry["object"], entry["view"])

    def validate(self) -> None:
        """No duplicates within a split, val disjoint from train/test, and
        every referenced file exists.

        Train views may appear in the test split: evaluation runs on all
        views of an object while training sees a single one.
        """
        for name, split in (("train", self.train), ("val", self.val), ("test", self.test)):
            keys = [self.entry_key(e) for e in split]
            if len(keys) != len(set(keys)):
                raise ValueError(f"duplicate entries in {name} split")
        val_keys = {self.entry_key(e) for e in self.val}
        for other in (self.train, self.test):
            if val_keys & {self.entry_key(e) for e in other}:
                raise ValueError("val split overlaps another split")
        root = Path(self.root)
        for e in self.train + self.val + self.test:
            for key in ("rgb", "sil"):
                if not (root / e[key]).exists():
                    raise FileNotFoundError(root / e[key])

    def to_json(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if k not in ("root", "skipped")}
        payload["elevation_range"] = list(self.elevation_range)
        return json.dumps(payload, sort_keys=True, indent=1)

    def save(self, path=None) -> Path:
        path = Path(path) if path else Path(self.root) / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        payload = json.loads((root / "manifest.json").read_text())
        payload["elevation_range"] = tuple(payload["elevation_range"])
        return cls(root=str(root), **payload)


def load_sample(manifest: DatasetManifest, entry: dict) -> TrainingSample:
    root = Path(manifest.root)
    view = Viewpoint(entry["azimuth"], entry["elevation"], entry["distance"],
                     manifest.field_of_view)
    return TrainingSample(image=load_image(root / entry["rgb"]),
                          silhouette=load_silhouette(root / entry["sil"]),
                          viewpoint=view,
                          class_label=entry["class_id"])


def load_gt_parts(manifest: DatasetManifest, entry: dict) -> list[TriangleMesh]:
    part_dir = Path(manifest.root) / entry["class"] / entry["object"] / "gt_parts"
    paths = sorted(part_dir.glob("part_*.obj"))
    if not paths:
        raise FileNotFoundError(f"no ground-truth parts under {part_dir}")
    return [load_obj(p) for p in paths]


# ---------------------------------------------------------------------------
# synthetic dataset generation

def generate_synthetic_dataset(out_dir, objects_per_template: int = 100,
                               views_per_object: int = 5, seed: int = 0,
                               image_size: int = 224, distance: float = 2.0,
                               field_of_view: float = 30.0,
                               elevation_range=(15.0, 45.0),
                               archetypes=ARCHETYPES,
                               resolution: int = 16) -> DatasetManifest:
    """Render composed-primitive objects to silhouette/RGB pairs on disk.

    One view per object goes to the train split; the test split carries all
    views.  Re-running with the same seed reproduces the manifest byte for
    byte.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    settings = RenderSettings(image_size=image_size)
    manifest = DatasetManifest(
        root=str(root), image_size=image_size, views_per_object=views_per_object,
        distance=distance, field_of_view=field_of_view,
        elevation_range=tuple(float(e) for e in elevation_range),
        classes=[a(np.random.default_rng(0)).class_name for a in archetypes],
        seed=seed)
    master = np.random.SeedSequence(seed)
    children = master.spawn(len(archetypes) * objects_per_template)
    for a_idx, archetype in enumerate(archetypes):
        for o_idx in range(objects_per_template):
            rng = np.random.default_rng(children[a_idx * objects_per_template + o_idx])
            spec = archetype(rng)
            object_id = f"{spec.class_name}_{o_idx:04d}"
            obj_dir = root / spec.class_name / object_id
            (obj_dir / "gt_parts").mkdir(parents=True, exist_ok=True)
            part_meshes = spec.part_meshes(resolution)
            for i, pm in enumerate(part_meshes):
                save_obj(obj_dir / "gt_parts" / f"part_{i}.obj", pm)
            whole = merge_meshes(part_meshes)
            face_color = np.concatenate([
                np.tile(spec.colors[i], (pm.num_faces, 1))
                for i, pm in enumerate(part_meshes)])
            views, lines = [], []
            for v_idx in range(views_per_object):
                view = Viewpoint(float(rng.uniform(0.0, 360.0)),
                                 float(rng.uniform(*manifest.elevation_range)),
                                 distance, field_of_view)
                views.append(view)
                lines.append(f"{view.azimuth:.9g} {view.elevation:.9g} {view.distance:.9g}")
                mask, img = rasterize_hard(whole.vertices, whole.faces, view,
                                           settings, face_color=face_color)
                save_image(obj_dir / f"sil_{v_idx}.png", mask.astype(np.float64))
                save_image(obj_dir / f"rgb_{v_idx}.png", img)
            (obj_dir / "views.txt").write_text("\n".join(lines) + "\n")
            train_view = int(rng.integers(views_per_object))
            for v_idx, view in enumerate(views):
                entry = {
                    "class": spec.class_name, "class_id": spec.class_id,
                    "object": object_id, "view": v_idx,
                    "azimuth": view.azimuth, "elevation": view.elevation,
                    "distance": view.distance,
                    "rgb": f"{spec.class_name}/{object_id}/rgb_{v_idx}.png",
                    "sil": f"{spec.class_name}/{object_id}/sil_{v_idx}.png",
                }
                manifest.test.append(entry)
                if v_idx == train_view:
                    manifest.train.append(dict(entry))
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# ShapeNet-style layout loader

def load_shapenet_layout(root, seed: int = 0, image_size: int = 224,
                         field_of_view: float = 30.0) -> DatasetManifest:
    """Scan a <root>/<class>/<object>/ directory tree into a manifest.

    One seeded view per object forms the train split; all readable views go
    to the test split.  Entries with missing files or malformed viewpoint
    rows are skipped and counted in ``manifest.skipped``.
    """
    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class directories under {root}")
    rng = np.random.default_rng(seed)
    manifest = DatasetManifest(root=str(root), image_size=image_size,
                               views_per_object=0, distance=0.0,
                               field_of_view=field_of_view,
                               elevation_range=(0.0, 0.0), classes=classes,
                               seed=seed)
    skipped = 0
    elevations, distances = [], []
    for class_id, class_name in enumerate(classes):
        for obj_dir in sorted((root / class_name).iterdir()):
            if not obj_dir.is_dir():
                continue
            views_file = obj_dir / "views.txt"
            if not views_file.exists():
                skipped += 1
                log.warning("missing views.txt in %s", obj_dir)
                continue
            entries = []
            for v_idx, line in enumerate(views_file.read_text().splitlines()):
                tok = line.split()
                try:
                    azimuth, elevation, dist = (float(t) for t in tok[:3])
                    if len(tok) < 3 or not -90 <= elevation <= 90 or dist <= 0:
                        raise ValueError(line)
                except ValueError:
                    skipped += 1
                    log.warning("malformed viewpoint row %d in %s", v_idx, views_file)
                    continue
                rgb = obj_dir / f"rgb_{v_idx}.png"
                sil = obj_dir / f"sil_{v_idx}.png"
                if not rgb.exists() or not sil.exists():
                    skipped += 1
                    log.warning("missing image for view %d in %s", v_idx, obj_dir)
                    continue
                entries.append({
                    "class": class_name, "class_id": class_id,
                    "object": obj_dir.name, "view": v_idx,
                    "azimuth": azimuth, "elevation": elevation, "distance": dist,
                    "rgb": str(rgb.relative_to(root)),
                    "sil": str(sil.relative_to(root)),
                })
                elevations.append(elevation)
                distances.append(dist)
            if not entries:
                continue
            train_entry = entries[int(rng.integers(len(entries)))]
            manifest.train.append(dict(train_entry))
            manifest.test.extend(entries)
            manifest.views_per_object = max(manifest.views_per_object, len(entries))
    if elevations:
        manifest.elevation_range = (float(min(elevations)), float(max(elevations)))
        manifest.distance = float(np.median(distances))
    manifest.skipped = skipped
    return manifest


# ---------------------------------------------------------------------------
# augmentation

def augment(sample: TrainingSample, rng: np.random.Generator,
            force_flip: bool | None = None,
            force_shuffle: bool | None = None) -> TrainingSample:
    """Random RGB channel shuffle and horizontal flip (each with prob 1/2).

    Flipping mirrors both image and silhouette and negates the camera azimuth
    so the pair stays geometrically consistent.
    """
    image, sil = sample.image, sample.silhouette
    view = sample.viewpoint
    do_shuffle = rng.random() < 0.5 if force_shuffle is None else force_shuffle
    if do_shuffle:
        perm = CHANNEL_PERMUTATIONS[rng.integers(len(CHANNEL_PERMUTATIONS))]
        image = image[:, :, perm]
    do_flip = rng.random() < 0.5 if force_flip is None else force_flip
    if do_flip:
        image = image[:, ::-1].copy()
        sil = sil[:, ::-1].copy()
        view = Viewpoint(-view.azimuth, view.elevation, view.distance,
                         view.field_of_view)
    return TrainingSample(image=image, silhouette=sil, viewpoint=view,
                          class_label=sample.class_label)
