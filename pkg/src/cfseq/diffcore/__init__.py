from .gradcheck import grad_check
from .norms import power_iteration, spectral_norm_apply, spectral_normalize, weight_norm_apply
from .optim import OptimizerState, adamw_step, sgd_momentum_step
from .value import (
    PRIMITIVES, SELU_ALPHA, SELU_LAMBDA, Value, add, apply_primitive, as_value, backward,
    broadcast, concat, dot, exp, log, log_softmax, log_sum_exp, matmul, mean, mul, one_hot_gather,
    reshape, selu, sigmoid, slice_, softplus, stop_gradient, sub, sum_, take, tanh, transpose,
)
