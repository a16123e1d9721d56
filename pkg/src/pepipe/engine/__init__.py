from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, finite_difference_check
from .layers import LayerSpec, Network
from .ops import (
    conv2d,
    cross_entropy_with_l2,
    dense,
    dropout_apply,
    global_avg_pool,
    l2_penalty,
    maxpool2,
    relu,
    sigmoid,
    softmax,
)
from .optim import Optimizer, OptimizerState, adam_step, sgd_momentum_step
from .tensor import Tensor, no_grad
