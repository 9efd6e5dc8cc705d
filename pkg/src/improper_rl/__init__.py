"""Policy gradient over mixtures of fixed base controllers."""
from .mdp import (
    ControllerSet,
    FiniteMdp,
    MixtureState,
    PolicyEvaluation,
    evaluate_policy,
    induced_policy,
    softmax,
    state_visitation,
    value_difference_rhs,
    value_gradient_exact,
)

__all__ = [
    "ControllerSet",
    "FiniteMdp",
    "MixtureState",
    "PolicyEvaluation",
    "evaluate_policy",
    "induced_policy",
    "softmax",
    "state_visitation",
    "value_difference_rhs",
    "value_gradient_exact",
]
