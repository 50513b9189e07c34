from .adam import AdamState, adam_step
from .autodiff import (
    NonFiniteValue,
    Parameter,
    Tensor,
    UnsupportedPrimitive,
    apply,
    grad_eval,
)
from .gradcheck import finite_diff_check
from .schedule import (
    OutOfRangeEpoch,
    OutOfRangeIteration,
    ScheduleConfig,
    poly_lr,
    scheduled_lr,
    warmup_lr,
)

__all__ = [
    "AdamState",
    "NonFiniteValue",
    "OutOfRangeEpoch",
    "OutOfRangeIteration",
    "Parameter",
    "ScheduleConfig",
    "Tensor",
    "UnsupportedPrimitive",
    "adam_step",
    "apply",
    "finite_diff_check",
    "grad_eval",
    "poly_lr",
    "scheduled_lr",
    "warmup_lr",
]
