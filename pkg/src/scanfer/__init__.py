"""Spatio-channel attention + complementary context network for facial expression recognition."""

from .attention import EcaBlock, ScanBlock, eca_forward, eca_kernel_size, scan_forward
from .data import LABELS, AugmentPolicy, DatasetManifest, ImbalancedSampler, load_manifest, synth_dataset
from .estimator import ScanFerClassifier
from .explain import Heatmap, gradcam, render_heatmap
from .metrics import EvalReport, accuracy, evaluate, f1_scores, overall_score
from .model import BackboneConfig, FerConfig, FerModel, ForwardOutput, model_forward, partition, predict
from .optim import SgdState, TrainConfig, fit, lr_at_epoch, sgd_step, train_epoch
from .tensor import Tensor, finite_diff_check

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy",
    "BackboneConfig",
    "DatasetManifest",
    "EcaBlock",
    "EvalReport",
    "FerConfig",
    "FerModel",
    "ForwardOutput",
    "Heatmap",
    "ImbalancedSampler",
    "LABELS",
    "ScanBlock",
    "ScanFerClassifier",
    "SgdState",
    "Tensor",
    "TrainConfig",
    "accuracy",
    "eca_forward",
    "eca_kernel_size",
    "evaluate",
    "f1_scores",
    "finite_diff_check",
    "fit",
    "gradcam",
    "load_manifest",
    "lr_at_epoch",
    "model_forward",
    "overall_score",
    "partition",
    "predict",
    "render_heatmap",
    "scan_forward",
    "sgd_step",
    "synth_dataset",
    "train_epoch",
]
