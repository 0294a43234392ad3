"""Minimal dense-tensor autodiff: exactly the layers, losses and optimizer the two networks use."""
from . import functional
from .checkpoint import decode_optimizer, decode_params, encode_optimizer, encode_params, \
    load_params, save_params
from .functional import box_mean, conv2d, conv_transpose2d, global_avg_pool, linear, maxpool2d
from .gradcheck import GradCheckReport, finite_diff_check
from .layers import Conv2d, ConvTranspose2d, Linear, Module
from .losses import bce_loss, mse_loss, ssim
from .optim import NAdam, OptimizerState, cosine_anneal_lr, nadam_step
from .tensor import Parameter, Tensor, backward, concat, no_grad, relu, sigmoid, softplus
