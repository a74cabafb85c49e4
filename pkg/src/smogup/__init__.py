"""Arbitrary-ratio point cloud upsampling with a spherical mixture of
Gaussians and a query-driven Transformer decoder, on a small numpy
autodiff engine."""

from .geometry import TriangleMesh, farthest_point_sample, knn, knn_indices, normalize
from .losses import acd, chamfer, evaluate, hausdorff, projection_loss
from .network import Model, ModelConfig, upsample
from .pipeline import upsample_cloud
from .smog import SmogParams, sample_smog
from .trainer import TrainConfig, Trainer, TrainingPair

__version__ = "0.1.0"
