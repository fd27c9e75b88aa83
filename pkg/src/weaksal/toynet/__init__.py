from weaksal.toynet.config import NetConfig, TrainConfig
from weaksal.toynet.losses import LossBreakdown, classification_loss, label_target, saliency_loss
from weaksal.toynet.network import (
    ForwardOutputs,
    Gradients,
    backward,
    compute_cam,
    forward,
    raw_cam,
    top_classes,
    top_k_cam_mean,
)
from weaksal.toynet.params import (
    NetParams,
    init_params,
    load_checkpoint,
    save_checkpoint,
    zero_params,
)
from weaksal.toynet.train import (
    GradientAccumulator,
    SgdState,
    TrainSample,
    ValRecord,
    dataset_loss,
    sgd_step,
    train_round,
)

__all__ = [
    "ForwardOutputs", "GradientAccumulator", "Gradients", "LossBreakdown", "NetConfig", "NetParams",
    "SgdState", "TrainConfig", "TrainSample", "ValRecord", "backward", "classification_loss",
    "compute_cam", "dataset_loss", "forward", "init_params", "label_target", "load_checkpoint",
    "raw_cam", "saliency_loss", "save_checkpoint", "sgd_step", "top_classes", "top_k_cam_mean",
    "train_round", "zero_params",
]
