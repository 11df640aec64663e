from pcmnet.numerics import ops
from pcmnet.numerics.gradcheck import GradCheckReport, check_gradients
from pcmnet.numerics.layers import (causal_mask, feed_forward, linear,
                                    multi_head_attention, sinusoidal_positions,
                                    uniform_init)
from pcmnet.numerics.ops import layer_norm, log_softmax, softmax
from pcmnet.numerics.tape import Tape, Var

__all__ = [
    "ops", "Tape", "Var", "softmax", "log_softmax", "layer_norm",
    "multi_head_attention", "linear", "feed_forward", "causal_mask",
    "sinusoidal_positions", "uniform_init", "check_gradients", "GradCheckReport",
]
