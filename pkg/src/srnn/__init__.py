"""Scale recurrent neural networks on image pyramids."""
from .model import (BaseCnnConfig, EnsembleMode, ScaleClassifier, SrnnHalfGru, SrnnVanilla,
                    cnn_features, ensemble_forward, single_scale_forward, srnn_halfgru_forward,
                    srnn_forward, srnn_prefix_logits, srnn_vanilla_forward)
from .train import TrainConfig, evaluate, fit, lr_at_epoch, pretrain
from .vision import Pyramid, bicubic_resize, build_pyramid

__all__ = [
    "BaseCnnConfig", "EnsembleMode", "Pyramid", "ScaleClassifier", "SrnnHalfGru", "SrnnVanilla",
    "TrainConfig", "bicubic_resize", "build_pyramid", "cnn_features", "ensemble_forward", "evaluate",
    "fit", "lr_at_epoch", "pretrain", "single_scale_forward", "srnn_forward", "srnn_halfgru_forward",
    "srnn_prefix_logits", "srnn_vanilla_forward",
]
