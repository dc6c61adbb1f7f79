"""Latent part discovery: self-supervised part-based single-view 3D reconstruction.

Objects are reconstructed as k latent parts: a shape prior (variational
autoencoder over geometric primitives) decodes per-part embeddings into
template-mesh deformations, a convolutional encoder predicts the embeddings,
centroids, and texture flows from one image, and training is supervised only
by silhouettes, viewpoints, and colors, with part/view adversarial
regularization.
"""

from .mesh import (PrimitiveSpec, SimilarityTransform, TriangleMesh,
                   apply_transform, chamfer_distance, laplacian_loss,
                   make_icosphere, make_primitive, merge_meshes)
from .part_vae import PartLatent, PartVae, VaeConfig, kl_loss
from .recon import PartSet, ReconstructionNet, TrainingSample, assemble, \
    color_loss, reconstruct, silhouette_loss
from .render import RenderSettings, TextureImage, Viewpoint, project_vertices, \
    render_color, render_silhouette, uv_template
from .trainer import TrainConfig, evaluate_checkpoint, pretrain_partvae, \
    train_joint

__version__ = "0.1.0"
