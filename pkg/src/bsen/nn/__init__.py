"""Minimal reverse-mode numeric core for the 3D autoencoder.

Tensors are numpy arrays shaped ``(batch, channels, nx, ny, nz)``. Every
forward function returns ``(out, cache)`` and has a matching ``*_backward``
taking the upstream gradient and that cache.
"""
from .layers import (
    BatchNormLayer,
    ConvLayer,
    batchnorm3d_backward,
    batchnorm3d_backward_cm,
    batchnorm3d_forward,
    batchnorm3d_forward_cm,
    conv3d_backward,
    conv3d_backward_cm,
    conv3d_forward,
    conv3d_forward_cm,
    maxpool3d_backward,
    maxpool3d_forward,
    relu_backward,
    relu_forward,
    upsample_nearest_backward,
    upsample_nearest_forward,
)
from .optim import AdamState, adam_step
from .gradcheck import gradient_check, numerical_gradient

__all__ = [
    "AdamState",
    "BatchNormLayer",
    "ConvLayer",
    "adam_step",
    "batchnorm3d_backward",
    "batchnorm3d_forward",
    "conv3d_backward",
    "conv3d_forward",
    "gradient_check",
    "maxpool3d_backward",
    "maxpool3d_forward",
    "numerical_gradient",
    "relu_backward",
    "relu_forward",
    "upsample_nearest_backward",
    "upsample_nearest_forward",
]
