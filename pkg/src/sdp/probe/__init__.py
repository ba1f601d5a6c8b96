"""Fixed Transformer probe and its locked training procedure."""

from .checkpoint import (CHECKPOINT_MAGIC, load_checkpoint, read_train_log,
                         save_checkpoint, write_train_log)
from .model import (MacCounter, ModelConfig, SequenceTooLong, affine_flops,
                    backbone_forward, backward_pass, cross_entropy, embed,
                    encoder_layer, flops_estimate, forward_pass, head_forward,
                    init_params, loss_and_grads, loss_value, mse, param_layout,
                    tokenize)
from .training import (EmptySplit, NonFiniteLoss, TrainConfig, TrainResult,
                       adamw_init, adamw_step, cosine_lr, grad_check,
                       predict_classes, predict_outputs, predict_probs,
                       random_tiny_config, train)

__all__ = [
    "CHECKPOINT_MAGIC", "EmptySplit", "MacCounter", "ModelConfig",
    "NonFiniteLoss", "SequenceTooLong", "TrainConfig", "TrainResult",
    "adamw_init", "adamw_step", "affine_flops", "backbone_forward",
    "backward_pass", "cosine_lr", "cross_entropy", "embed", "encoder_layer",
    "flops_estimate", "forward_pass", "grad_check", "head_forward",
    "init_params", "load_checkpoint", "loss_and_grads", "loss_value", "mse",
    "param_layout", "predict_classes", "predict_outputs", "predict_probs",
    "random_tiny_config", "read_train_log", "save_checkpoint", "tokenize",
    "train", "write_train_log",
]
