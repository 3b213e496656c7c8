"""Dense float64 tensor engine: layers, MicroResNet, optimisers, checkpoints."""

from gslab.numerics.layers import (
    batchnorm2d_backward,
    batchnorm2d_forward,
    conv2d_backward,
    conv2d_forward,
)
from gslab.numerics.optim import SGD, Adam, CosineAnnealing, StepDecay, lr_at, make_optimizer
from gslab.numerics.resnet import ForwardOutput, MicroResNet, ModelConfig, extract


def micro_resnet_forward(model: MicroResNet, batch, train: bool = False):
    """Return ``(features, logits)``; logits is None without a classifier."""
    out = model.forward(batch, train=train, heads=("logits",))
    return out.features, out.logits


__all__ = [
    "Adam", "CosineAnnealing", "ForwardOutput", "MicroResNet", "ModelConfig", "SGD", "StepDecay",
    "batchnorm2d_backward", "batchnorm2d_forward", "conv2d_backward", "conv2d_forward",
    "extract", "lr_at", "make_optimizer", "micro_resnet_forward",
]
