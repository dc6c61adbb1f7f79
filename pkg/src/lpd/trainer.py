"""Training: shape-prior pretraining on primitives, then joint optimization
of the reconstruction network with silhouette/Laplacian/color losses and the
part/view adversarial term, with interleaved primitive fine-tuning of the
shape prior.  Includes checkpoint/resume with exact RNG restoration and the
metrics-report evaluation entry point.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics as MX
from .adversarial import Discriminator, DiscriminatorConfig, gradient_reversal, \
    grl_warmup, sample_novel_view
from .data import DatasetManifest, augment, load_gt_parts, load_sample, \
    primitive_batch
from .mesh import TriangleMesh, VertexNeighborhood, merge_meshes, template_sphere
from .part_vae import PartVae, VaeConfig
from .recon import ReconstructionNet, TrainingSample, assembled_vertices, \
    color_feature_loss, downsample_image, downsample_mask, make_extractor, \
    reconstruct, sample_textures_from_image, silhouette_iou_loss
from .render import RenderSettings, Viewpoint, face_uv_table, rasterize_hard, \
    soft_render

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a loss component stops being finite."""

    def __init__(self, component: str, step: int, checkpoint=None):
        super().__init__(f"{component} became non-finite at step {step}")
        self.component = component
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    seed: int = 0
    k: int = 3
    latent_dim: int = 64
    lambda_kl: float = 1e-3
    lambda_lap: float = 0.01
    lambda_cr: float = 1.0
    lambda_adv: float = 0.1
    vae_steps: int = 2000
    vae_batch: int = 32
    vae_lr: float = 1e-4
    encoder_points: int = 512
    joint_steps: int = 5000
    joint_batch: int = 4
    vae_finetune_batch: int = 8
    recon_lr: float = 1e-4
    disc_lr: float = 1e-4
    render_size: int = 64
    sigma: float = 1e-4
    gamma: float = 1e-4
    grl_warmup_fraction: float = 0.1
    extractor: str = "identity"
    extractor_seed: int = 0
    part_prior: bool = True
    checkpoint_every: int = 1000

    def __post_init__(self):
        for name in ("lambda_kl", "lambda_lap", "lambda_cr", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.joint_batch % 2:
            raise ValueError("joint_batch must be even (remix pairing)")

    def vae_config(self) -> VaeConfig:
        return VaeConfig(latent_dim=self.latent_dim, kl_weight=self.lambda_kl,
                         encoder_point_count=self.encoder_points)

    def render_settings(self) -> RenderSettings:
        return RenderSettings(image_size=self.render_size, sigma=self.sigma,
                              gamma=self.gamma)


@dataclass
class TrainState:
    """Mutable bookkeeping for a training run."""

    step: int = 0
    losses: list = field(default_factory=list)


def _rng_payload(np_rng: np.random.Generator, torch_gen: torch.Generator) -> dict:
    return {"numpy": np_rng.bit_generator.state, "torch": torch_gen.get_state()}


def _restore_rng(payload, np_rng, torch_gen):
    np_rng.bit_generator.state = payload["numpy"]
    torch_gen.set_state(payload["torch"])


def _write_loss_log(path, rows, header):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# phase 1: shape-prior pretraining

def pretrain_partvae(config: TrainConfig, out_dir, steps: int | None = None,
                     resume_from=None) -> Path:
    """Adam on the prior's Chamfer+KL loss over random primitive batches.

    Writes ``vae.pt`` plus a one-row-per-step ``vae_loss.csv``; aborts with
    the last good checkpoint on divergence.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = config.vae_steps if steps is None else steps
    torch.manual_seed(config.seed)
    model = PartVae(config.vae_config())
    opt = torch.optim.Adam(model.parameters(), lr=config.vae_lr)
    np_rng = np.random.default_rng(config.seed)
    torch_gen = torch.Generator().manual_seed(config.seed)
    start = 0
    if resume_from is not None:
        payload = torch.load(resume_from, weights_only=False)
        model.load_state_dict(payload["state"])
        opt.load_state_dict(payload["extra"]["optimizer"])
        _restore_rng(payload["extra"]["rng"], np_rng, torch_gen)
        start = payload["step"]

    ckpt_path = out_dir / "vae.pt"
    rows = []
    last_good = None

    def save(step):
        from .part_vae import save_checkpoint
        save_checkpoint(ckpt_path, model, step,
                        extra={"optimizer": opt.state_dict(),
                               "rng": _rng_payload(np_rng, torch_gen),
                               "train_config": asdict(config)})
        return ckpt_path

    for step in range(start, steps):
        batch = torch.as_tensor(primitive_batch(np_rng, config.vae_batch,
                                                config.encoder_points))
        opt.zero_grad()
        total, parts = model.vae_loss(batch, generator=torch_gen)
        if not torch.isfinite(total):
            if last_good is not None:
                model.load_state_dict(last_good)
            save(step)
            _write_loss_log(out_dir / "vae_loss.csv", rows,
                            ["step", "total", "chamfer", "kl"])
            raise TrainingDiverged("vae_total", step, ckpt_path)
        total.backward()
        opt.step()
        rows.append([step, float(total.detach()), float(parts["chamfer"].detach()),
                     float(parts["kl"].detach())])
        if step % 100 == 0:
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            log.info("vae step %d loss %.5f", step, float(total))
    save(steps)
    _write_loss_log(out_dir / "vae_loss.csv", rows, ["step", "total", "chamfer", "kl"])
    return ckpt_path


# ---------------------------------------------------------------------------
# phase 2: joint training

class JointTrainer:
    """Owns the reconstruction net, shape prior, and discriminator for one
    training run; a single backward pass per step carries the adversarial
    gradient through the reversal layer."""

    LOG_HEADER = ["step", "total", "sil", "lap", "cr", "adv", "grl_scale",
                  "vae_total", "vae_chamfer", "vae_kl"]

    def __init__(self, config: TrainConfig, manifest: DatasetManifest,
                 vae_checkpoint=None):
        self.config = config
        self.manifest = manifest
        torch.manual_seed(config.seed)
        self.np_rng = np.random.default_rng(config.seed + 1)
        self.torch_gen = torch.Generator().manual_seed(config.seed + 2)
        if config.part_prior:
            if vae_checkpoint is not None:
                from .part_vae import load_checkpoint
                self.vae, _ = load_checkpoint(vae_checkpoint)
            else:
                self.vae = PartVae(config.vae_config())
        else:
            self.vae = None
        self.net = ReconstructionNet(k=config.k, latent_dim=config.latent_dim,
                                     part_prior=config.part_prior)
        self.disc = Discriminator(DiscriminatorConfig(
            class_count=max(1, len(manifest.classes)),
            input_size=config.render_size,
            grl_scale=min(1.0, config.lambda_adv)))
        gen_params = list(self.net.parameters())
        if self.vae is not None:
            gen_params += list(self.vae.parameters())
        self.opt_gen = torch.optim.Adam(gen_params, lr=config.recon_lr)
        self.opt_disc = torch.optim.Adam(self.disc.parameters(), lr=config.disc_lr)
        self.settings = config.render_settings()
        self.extractor = make_extractor(config.extractor, config.extractor_seed)
        self.state = TrainState()

        # fixed assembled topology: k copies of the template
        template = template_sphere()
        self.template_faces = template.faces
        nv = template.num_vertices
        faces = np.concatenate([template.faces + i * nv for i in range(config.k)])
        self.faces = torch.as_tensor(faces)
        self.neighborhood = VertexNeighborhood(faces, config.k * nv)
        self.face_part = torch.repeat_interleave(torch.arange(config.k),
                                                 template.num_faces)
        self.face_uv = face_uv_table(template).repeat(config.k, 1, 1).float()
        self.valid_selectors = [
            tuple(bool((m >> i) & 1) for i in range(config.k))
            for m in range(1, 2 ** config.k - 1)]

        # preload training samples (uint8 images to keep memory small)
        self.by_class = {}
        for entry in manifest.train:
            sample = load_sample(manifest, entry)
            packed = (entry["class_id"],
                      (sample.image * 255).astype(np.uint8),
                      sample.silhouette, sample.viewpoint)
            self.by_class.setdefault(entry["class_id"], []).append(packed)
        self.class_ids = sorted(self.by_class)

    # -- batching ---------------------------------------------------------

    def _draw_batch(self):
        cid = self.class_ids[self.state.step % len(self.class_ids)]
        pool = self.by_class[cid]
        replace = len(pool) < self.config.joint_batch
        idx = self.np_rng.choice(len(pool), size=self.config.joint_batch,
                                 replace=replace)
        samples = []
        for i in idx:
            class_id, img, sil, view = pool[i]
            sample = TrainingSample(image=img.astype(np.float32) / 255.0,
                                    silhouette=sil, viewpoint=view,
                                    class_label=class_id)
            samples.append(augment(sample, self.np_rng))
        images = torch.stack([torch.as_tensor(s.image).permute(2, 0, 1)
                              for s in samples])
        sils = torch.stack([downsample_mask(s.silhouette, self.config.render_size)
                            for s in samples])
        views = [s.viewpoint for s in samples]
        return cid, images, sils, views

    # -- one optimization step --------------------------------------------

    def step(self) -> dict:
        cfg = self.config
        cid, images, sils, views = self._draw_batch()
        self.opt_gen.zero_grad()
        self.opt_disc.zero_grad()

        out = self.net(images)
        verts = self.net.part_vertices(out, self.vae)          # (B,k,V,3)
        assembled = assembled_vertices(verts, out["centroids"])  # (B,kV,3)
        textures = sample_textures_from_image(images, out["flow"])

        # real (training view) and fake (remixed, novel view) renders share
        # one batched rasterization call
        b = assembled.shape[0]
        adversarial = cfg.lambda_adv > 0
        want_color = cfg.lambda_cr > 0 or adversarial
        render_verts, render_views, render_tex = assembled, list(views), textures
        if adversarial:
            mixed_v, mixed_t, novel_views = self._build_remix(
                verts, out["centroids"], textures)
            render_verts = torch.cat([assembled, mixed_v])
            render_views = render_views + novel_views
            render_tex = torch.cat([textures, mixed_t])
        sil_all, color_all = soft_render(
            render_verts, self.faces, render_views, self.settings,
            textures=render_tex if want_color else None,
            face_part=self.face_part, face_uv=self.face_uv)
        sil = sil_all[:b]
        loss_sil = silhouette_iou_loss(sil, sils)
        loss_lap = self.neighborhood.loss(assembled)
        if cfg.lambda_cr > 0:
            target = torch.stack([downsample_image(im.permute(1, 2, 0).numpy(),
                                                   cfg.render_size)
                                  for im in images])
            loss_cr = color_feature_loss(target, color_all[:b].permute(0, 3, 1, 2),
                                         self.extractor)
        else:
            loss_cr = torch.zeros(())

        grl_scale = grl_warmup(self.state.step, cfg.joint_steps, cfg.lambda_adv,
                               cfg.grl_warmup_fraction)
        if adversarial:
            real = torch.cat([sil.unsqueeze(1),
                              color_all[:b].permute(0, 3, 1, 2)], dim=1)
            fake = torch.cat([sil_all[b:].unsqueeze(1),
                              color_all[b:].permute(0, 3, 1, 2)], dim=1)
            labels = torch.full((1,), cid, dtype=torch.long)
            real_logit = self.disc(gradient_reversal(real, grl_scale),
                                   labels.expand(real.shape[0]))
            fake_logit = self.disc(gradient_reversal(fake, grl_scale),
                                   labels.expand(fake.shape[0]))
            loss_adv = F.softplus(-real_logit).mean() + F.softplus(fake_logit).mean()
        else:
            loss_adv = torch.zeros(())

        components = {"sil": loss_sil, "lap": loss_lap, "cr": loss_cr,
                      "adv": loss_adv}
        for name, value in components.items():
            if not torch.isfinite(value):
                raise TrainingDiverged(name, self.state.step)

        # discriminator minimizes loss_adv; the reversal layer hands the
        # reconstructor the -lambda_adv part of the objective
        objective = loss_sil + cfg.lambda_lap * loss_lap + cfg.lambda_cr * loss_cr \
            + loss_adv
        objective.backward()
        self.opt_gen.step()
        if adversarial:
            self.opt_disc.step()

        row = {"step": self.state.step,
               "sil": float(loss_sil.detach()), "lap": float(loss_lap.detach()),
               "cr": float(loss_cr.detach()), "adv": float(loss_adv.detach()),
               "grl_scale": grl_scale,
               "vae_total": "", "vae_chamfer": "", "vae_kl": ""}
        row["total"] = row["sil"] + cfg.lambda_lap * row["lap"] \
            + cfg.lambda_cr * row["cr"] - grl_scale * row["adv"]

        # interleaved primitive fine-tuning keeps the decoder regularized
        if self.vae is not None and self.state.step % 2 == 1:
            self.opt_gen.zero_grad()
            batch = torch.as_tensor(primitive_batch(self.np_rng,
                                                    cfg.vae_finetune_batch,
                                                    cfg.encoder_points))
            vae_total, vae_parts = self.vae.vae_loss(batch, generator=self.torch_gen)
            if not torch.isfinite(vae_total):
                raise TrainingDiverged("vae_total", self.state.step)
            vae_total.backward()
            self.opt_gen.step()
            row["vae_total"] = float(vae_total.detach())
            row["vae_chamfer"] = float(vae_parts["chamfer"].detach())
            row["vae_kl"] = float(vae_parts["kl"].detach())

        self.state.step += 1
        self.state.losses.append(row)
        return row

    def _build_remix(self, verts, centroids, textures):
        """Pair up the batch, mix parts per random valid selectors, and draw
        novel views for the fake renders."""
        half = verts.shape[0] // 2
        va, vb = verts[0::2], verts[1::2]
        ca, cb = centroids[0::2], centroids[1::2]
        ta, tb = textures[0::2], textures[1::2]
        sel_idx = self.np_rng.integers(len(self.valid_selectors), size=half)
        sel = torch.as_tensor(np.array([self.valid_selectors[i] for i in sel_idx]))
        mixed_v = torch.where(sel[:, :, None, None], va, vb)
        mixed_c = torch.where(sel[:, :, None], ca, cb)
        mixed_t = torch.where(sel[:, :, None, None, None], ta, tb)
        novel_views = [sample_novel_view(self.np_rng, self.manifest)
                       for _ in range(half)]
        return assembled_vertices(mixed_v, mixed_c), mixed_t, novel_views

    # -- run / persist ------------------------------------------------------

    def train(self, out_dir, steps: int | None = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        steps = self.config.joint_steps if steps is None else steps
        ckpt_path = out_dir / "joint.pt"
        while self.state.step < steps:
            row = self.step()
            if row["step"] % 200 == 0:
                log.info("joint step %d total %.4f sil %.4f", row["step"],
                         row["total"], row["sil"])
            if (row["step"] + 1) % self.config.checkpoint_every == 0:
                self.save(ckpt_path)
        self.save(ckpt_path)
        rows = [[r[k] for k in self.LOG_HEADER] for r in self.state.losses]
        _write_loss_log(out_dir / "joint_loss.csv", rows, self.LOG_HEADER)
        return ckpt_path

    def save(self, path) -> Path:
        payload = {
            "version": CHECKPOINT_VERSION,
            "kind": "joint",
            "config": asdict(self.config),
            "classes": self.manifest.classes,
            "step": self.state.step,
            "recon_state": self.net.state_dict(),
            "vae_state": None if self.vae is None else self.vae.state_dict(),
            "disc_state": self.disc.state_dict(),
            "opt_gen": self.opt_gen.state_dict(),
            "opt_disc": self.opt_disc.state_dict(),
            "rng": _rng_payload(self.np_rng, self.torch_gen),
            "torch_global_rng": torch.get_rng_state(),
        }
        torch.save(payload, path)
        return Path(path)

    @classmethod
    def load(cls, path, manifest: DatasetManifest) -> "JointTrainer":
        payload = torch.load(path, weights_only=False)
        if "version" not in payload:
            raise ValueError("checkpoint missing mandatory version field")
        config = TrainConfig(**payload["config"])
        trainer = cls(config, manifest)
        trainer.net.load_state_dict(payload["recon_state"])
        if trainer.vae is not None and payload["vae_state"] is not None:
            trainer.vae.load_state_dict(payload["vae_state"])
        trainer.disc.load_state_dict(payload["disc_state"])
        trainer.opt_gen.load_state_dict(payload["opt_gen"])
        trainer.opt_disc.load_state_dict(payload["opt_disc"])
        _restore_rng(payload["rng"], trainer.np_rng, trainer.torch_gen)
        torch.set_rng_state(payload["torch_global_rng"])
        trainer.state.step = payload["step"]
        return trainer


def train_joint(config: TrainConfig, manifest: DatasetManifest, vae_checkpoint,
                out_dir, steps: int | None = None) -> Path:
    trainer = JointTrainer(config, manifest, vae_checkpoint)
    return trainer.train(out_dir, steps=steps)


# ---------------------------------------------------------------------------
# evaluation

def load_models(checkpoint_path):
    """(net, vae, config, classes) from a joint checkpoint."""
    payload = torch.load(checkpoint_path, weights_only=False)
    if "version" not in payload:
        raise ValueError("checkpoint missing mandatory version field")
    config = TrainConfig(**payload["config"])
    net = ReconstructionNet(k=config.k, latent_dim=config.latent_dim,
                            part_prior=config.part_prior)
    net.load_state_dict(payload["recon_state"])
    net.eval()
    vae = None
    if payload["vae_state"] is not None:
        vae = PartVae(config.vae_config())
        vae.load_state_dict(payload["vae_state"])
        vae.eval()
    return net, vae, config, payload.get("classes", [])


def evaluate_entry(pred_parts_meshes, pred_centroids, sample: TrainingSample,
                   gt_parts, image_size: int, metric_names,
                   ssim_size: int = 64, pred_textures=None) -> dict:
    """Metric values for a single prediction against ground truth.

    ``pred_parts_meshes`` are centered part meshes; centroids place them.
    """
    shifted = [TriangleMesh(m.vertices + np.asarray(c), m.faces)
               for m, c in zip(pred_parts_meshes, pred_centroids)]
    pred_whole = merge_meshes(shifted)
    out = {}
    if "iou2d" in metric_names:
        mask, _ = rasterize_hard(pred_whole.vertices, pred_whole.faces,
                                 sample.viewpoint,
                                 RenderSettings(image_size=image_size))
        out["iou2d"] = MX.iou_2d(mask, sample.silhouette)
    gt_whole = merge_meshes(gt_parts) if gt_parts else None
    if gt_whole is not None and "voxel_iou" in metric_names:
        out["voxel_iou"] = MX.voxel_iou(MX.voxelize(pred_whole),
                                        MX.voxelize(gt_whole))
    if gt_whole is not None and "chamfer" in metric_names:
        out["chamfer"] = MX.chamfer_eval(pred_whole, gt_whole, samples=10_000)
    if gt_parts and "part_iou" in metric_names:
        pred_grids = [MX.voxelize(m) for m in shifted]
        gt_grids = [MX.voxelize(p) for p in gt_parts]
        _, _, mean_iou = MX.match_parts(pred_grids, gt_grids)
        out["part_iou"] = mean_iou
    if "ssim" in metric_names and pred_textures is not None:
        from .render import soft_render as _sr
        template = template_sphere()
        k = len(pred_parts_meshes)
        verts = torch.cat([torch.as_tensor(m.vertices, dtype=torch.float32)
                           for m in shifted])
        faces = torch.as_tensor(np.concatenate(
            [m.faces + i * template.num_vertices for i, m in enumerate(shifted)]))
        face_part = torch.repeat_interleave(torch.arange(k), template.num_faces)
        face_uv = face_uv_table(template).float().repeat(k, 1, 1)
        tex = torch.as_tensor(np.stack([np.asarray(t) for t in pred_textures]),
                              dtype=torch.float32)
        with torch.no_grad():
            _, img = _sr(verts.unsqueeze(0), faces, [sample.viewpoint],
                         RenderSettings(image_size=ssim_size),
                         textures=tex.unsqueeze(0), face_part=face_part,
                         face_uv=face_uv)
        target = downsample_image(sample.image, ssim_size).permute(1, 2, 0).numpy()
        out["ssim"] = MX.ssim(img[0].numpy(), target)
    return out


def evaluate_checkpoint(checkpoint_path, manifest: DatasetManifest,
                        metric_names=("iou2d", "voxel_iou", "ssim", "chamfer",
                                      "part_iou"),
                        split: str = "test", out_csv=None,
                        entries=None) -> list[dict]:
    """Run metrics over a split; returns CSV-ready rows (per class + "all")."""
    net, vae, config, classes = load_models(checkpoint_path)
    entries = list(getattr(manifest, split) if entries is None else entries)
    per_class: dict = {}
    gt_cache: dict = {}
    for entry in entries:
        sample = load_sample(manifest, entry)
        key = (entry["class"], entry["object"])
        if key not in gt_cache:
            try:
                gt_cache[key] = load_gt_parts(manifest, entry)
            except FileNotFoundError:
                gt_cache[key] = None
        parts = reconstruct(net, vae, sample.image, class_label=entry["class_id"])
        values = evaluate_entry(parts.meshes, parts.centroids.numpy(), sample,
                                gt_cache[key], manifest.image_size, metric_names,
                                pred_textures=parts.textures)
        for metric, value in values.items():
            per_class.setdefault((entry["class"], metric), []).append(value)
    rows = []
    for metric in metric_names:
        pooled = []
        for class_name in manifest.classes:
            vals = per_class.get((class_name, metric))
            if not vals:
                continue
            rows.append({"class": class_name, "metric": metric,
                         "value": float(np.mean(vals)), "n": len(vals)})
            pooled.extend(vals)
        if pooled:
            rows.append({"class": "all", "metric": metric,
                         "value": float(np.mean(pooled)), "n": len(pooled)})
    if out_csv is not None:
        MX.write_metric_report(out_csv, rows)
    return rows
