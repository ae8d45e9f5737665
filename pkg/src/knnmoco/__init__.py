"""Desk-scale contrastive pretraining laboratory.

Momentum-contrast instance discrimination with dual aligned memory queues,
constrained multi-crop views, online nearest-neighbor mining, and frozen
feature evaluation, all on procedurally generated images.
"""
from .autodiff import Tensor, grad_check
from .bank import DualQueue
from .config import EvalConfig, GenConfig, TrainConfig
from .crops import CropRect, CropSpec, iou
from .encoder import EncoderConfig, EncoderPair, ema_update
from .evaluation import (
    PropagationConfig,
    jaccard_and_f,
    kmeans,
    linear_probe,
    propagate_labels,
    segment_retrieval,
)
from .losses import LossBatch, instance_loss, nn_loss, total_loss
from .optim import OptimizerState, cosine_lr, sgd_step
from .synthdata import LongTailSpec, SynthDataset, generate, generate_video, longtail_counts
from .trainer import Metrics, TrainState, make_views, pretrain, train_step

__all__ = [
    "Tensor", "grad_check", "DualQueue", "EvalConfig", "GenConfig", "TrainConfig",
    "CropRect", "CropSpec", "iou", "EncoderConfig", "EncoderPair", "ema_update",
    "PropagationConfig", "jaccard_and_f", "kmeans", "linear_probe",
    "propagate_labels", "segment_retrieval", "LossBatch", "instance_loss",
    "nn_loss", "total_loss", "OptimizerState", "cosine_lr", "sgd_step",
    "LongTailSpec", "SynthDataset", "generate", "generate_video", "longtail_counts",
    "Metrics", "TrainState", "make_views", "pretrain", "train_step",
]
