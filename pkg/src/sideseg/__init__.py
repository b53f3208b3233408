"""Two-stream side-network fine-tuning over a frozen ViT-style encoder.

A frozen transformer image encoder runs alongside a trainable convolutional
side adapter; tapped encoder activations feed a multi-scale refinement stream,
and a fusion decoder turns both streams into full-resolution mask logits.
Everything is plain numpy with a small reverse-mode autodiff tape, which keeps
gradient audits, freeze contracts and bit-identity checks first-party.
"""

from .backbone import Backbone, BackboneActivations, BackboneConfig
from .data import SegSample, generate_synthetic, high_freq_component, load_folder, resize_sample
from .fusion_decoder import FusionDecoder
from .losses import LossValue, bbce_loss, bce_iou_loss, bce_loss, iou_loss
from .metrics import (
    MetricReport,
    ber,
    e_measure,
    evaluate_mask_folders,
    evaluate_pairs,
    mae,
    s_measure,
    weighted_fbeta,
)
from .model import (
    Model,
    ModelConfig,
    build,
    count_parameters,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    tiny_config,
    toy_config,
)
from .refinement import Refiner, gate
from .side_adapter import SideAdapter
from .store import ParamStore, ParamView
from .trainer import TrainConfig, TrainLog, cosine_lr, evaluate, grad_check, train

__version__ = "0.1.0"
