"""Command line interface.

Subcommands: gen-data, train-vae, train-recon, eval, reconstruct,
interpolate, swap, generate.  Training commands read a key=value config file
and accept ``--set key=value`` overrides.
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import data as D
from . import metrics as MX
from . import partops as P
from .config import build_train_config
from .mesh import TriangleMesh, merge_meshes, save_obj
from .recon import reconstruct
from .render import RenderSettings, Viewpoint, load_image, rasterize_hard, save_image
from .trainer import JointTrainer, evaluate_checkpoint, load_models, \
    pretrain_partvae, train_joint


def _add_config_args(p):
    p.add_argument("--config", type=Path, default=None,
                   help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config entry")


def export_reconstruction(parts, out_dir, viewpoint=None, class_label=None):
    """OBJ with part groups + per-part texture PNGs + a JSON summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .recon import assemble
    mesh = assemble(parts)
    save_obj(out_dir / "object.obj", mesh)
    if parts.textures is not None:
        for i in range(parts.k):
            save_image(out_dir / f"texture_{i}.png", np.asarray(parts.textures[i]))
    summary = {
        "centroids": np.asarray(parts.centroids).tolist(),
        "latents": np.asarray(parts.latents).tolist(),
        "class_label": class_label if class_label is not None else parts.class_label,
        "viewpoint": None if viewpoint is None else {
            "azimuth": viewpoint.azimuth, "elevation": viewpoint.elevation,
            "distance": viewpoint.distance, "field_of_view": viewpoint.field_of_view,
        },
    }
    (out_dir / "reconstruction.json").write_text(json.dumps(summary, indent=1))
    return out_dir / "object.obj"


def _turntable(mesh, out_dir, prefix, frames=8, image_size=224,
               part_colors=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = RenderSettings(image_size=image_size)
    face_part = mesh.part_index[mesh.faces[:, 0]]
    palette = part_colors if part_colors is not None else [
        (0.85, 0.35, 0.25), (0.25, 0.55, 0.85), (0.35, 0.8, 0.4),
        (0.85, 0.75, 0.25), (0.6, 0.35, 0.8), (0.9, 0.55, 0.2)]
    face_color = np.array([palette[p % len(palette)] for p in face_part])
    for i in range(frames):
        view = Viewpoint(360.0 * i / frames, 25.0, 2.0)
        _, img = rasterize_hard(mesh.vertices, mesh.faces, view, settings,
                                face_color=face_color)
        save_image(out_dir / f"{prefix}_az{int(360 * i / frames):03d}.png", img)


def cmd_gen_data(args):
    manifest = D.generate_synthetic_dataset(
        args.out, objects_per_template=args.objects_per_template,
        views_per_object=args.views, seed=args.seed, image_size=args.image_size)
    print(f"wrote {len(manifest.train)} train / {len(manifest.test)} test entries"
          f" under {manifest.root}")


def cmd_train_vae(args):
    config = build_train_config(args.config, args.overrides)
    path = pretrain_partvae(config, args.out)
    print(f"shape-prior checkpoint: {path}")


def cmd_train_recon(args):
    config = build_train_config(args.config, args.overrides)
    manifest = D.DatasetManifest.load(args.data)
    path = train_joint(config, manifest, args.vae, args.out)
    print(f"joint checkpoint: {path}")


def cmd_eval(args):
    manifest = D.DatasetManifest.load(args.data)
    rows = evaluate_checkpoint(args.checkpoint, manifest,
                               metric_names=tuple(args.metrics.split(",")),
                               split=args.split, out_csv=args.out_csv)
    print(MX.format_metric_table(rows))


def cmd_reconstruct(args):
    net, vae, config, _ = load_models(args.checkpoint)
    image = load_image(args.image)
    parts = reconstruct(net, vae, image)
    path = export_reconstruction(parts, args.out)
    print(f"wrote {path}")


def cmd_interpolate(args):
    net, vae, config, _ = load_models(args.checkpoint)
    if vae is None:
        raise SystemExit("interpolation needs a part-prior checkpoint")
    a = reconstruct(net, vae, load_image(args.a))
    b = reconstruct(net, vae, load_image(args.b))
    indices = None if args.parts is None else [int(i) for i in args.parts.split(",")]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lams = [float(v) for v in args.lam.split(",")]
    from .recon import assemble
    for i, lam in enumerate(lams):
        mixed = P.interpolate(a, b, lam, vae, indices=indices)
        save_obj(out_dir / f"interp_{i:02d}_lambda{lam:.2f}.obj", assemble(mixed))
    print(f"wrote {len(lams)} meshes to {out_dir}")


def cmd_swap(args):
    net, vae, config, _ = load_models(args.checkpoint)
    a = reconstruct(net, vae, load_image(args.a))
    b = reconstruct(net, vae, load_image(args.b))
    indices = [int(i) for i in args.parts.split(",")]
    swapped = P.swap_parts(a, b, indices)
    path = export_reconstruction(swapped, args.out)
    print(f"wrote {path}")


def cmd_generate(args):
    net, vae, config, classes = load_models(args.checkpoint)
    if vae is None:
        raise SystemExit("generation needs a part-prior checkpoint")
    manifest = D.DatasetManifest.load(args.data)
    class_id = manifest.classes.index(args.class_name)
    entries = [e for e in manifest.train if e["class_id"] == class_id]
    parts_list = [reconstruct(net, vae, D.load_sample(manifest, e).image)
                  for e in entries]
    gmm = P.fit_part_gmm(parts_list, components=args.components, seed=args.seed,
                         class_name=args.class_name)
    rng = np.random.default_rng(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .recon import assemble
    for i in range(args.count):
        shape = P.generate_shape(gmm, rng, vae)
        mesh = assemble(shape)
        save_obj(out_dir / f"gen_{i:03d}.obj", mesh)
        _turntable(mesh, out_dir / "renders", f"gen_{i:03d}",
                   image_size=args.image_size)
    print(f"wrote {args.count} shapes to {out_dir}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lpd", description="latent part discovery: training and tools")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--objects-per-template", type=int, default=100)
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=224)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vae", help="pretrain the part shape prior")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-recon", help="joint training on a dataset")
    _add_config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--vae", type=Path, default=None,
                   help="pretrained shape-prior checkpoint")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_recon)

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--metrics", default="iou2d,voxel_iou,ssim,chamfer,part_iou")
    p.add_argument("--out-csv", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="single-image reconstruction bundle")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("interpolate", help="latent part interpolation sequence")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--b", type=Path, required=True)
    p.add_argument("--lambda", dest="lam", default="1.0,0.75,0.5,0.25,0.0",
                   help="comma-separated interpolation weights")
    p.add_argument("--parts", default=None, help="comma-separated slot indices")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("swap", help="swap parts between two reconstructions")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--b", type=Path, required=True)
    p.add_argument("--parts", required=True, help="comma-separated slot indices")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("generate", help="sample novel shapes from a fitted GMM")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)


if __name__ == "__main__":
    main()
