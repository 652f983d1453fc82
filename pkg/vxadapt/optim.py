import copy
import logging

import numpy as np

from .exceptions import VxError

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8

# -----------------------------------------------------------------------------


class AdamState:
    """First and second moment estimates of Adam for one parameter set.

    The learning rate decays geometrically with the number of updates
    already applied: ``base_rate * decay ** (step // decay_every)``.
    """

    def __init__(
        self,
        params,
        base_rate,
        decay=1.0,
        *,
        decay_every=1,
        beta1=BETA1,
        beta2=BETA2,
        epsilon=EPSILON,
    ):
        if base_rate <= 0:
            raise VxError.data(
                "invalid_value.learning_rate",
                f"base rate must be positive, got {base_rate}",
            )
        if not 0 < decay <= 1:
            raise VxError.data(
                "invalid_value.decay", f"decay must be in (0, 1], got {decay}"
            )
        if decay_every < 1:
            raise VxError.data(
                "invalid_value.decay_every",
                f"decay interval must be >= 1, got {decay_every}",
            )

        self.base_rate = base_rate
        self.decay = decay
        self.decay_every = decay_every
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

        self.step = 0
        self.first_moment = {
            name: np.zeros_like(params[name])
            for name in params.trainable_names
        }
        self.second_moment = {
            name: np.zeros_like(params[name])
            for name in params.trainable_names
        }

    @property
    def learning_rate(self):
        return self.base_rate * self.decay ** (self.step // self.decay_every)

    def copy(self):
        """A copy whose moment maps can be rebound independently."""
        other = copy.copy(self)
        other.first_moment = dict(self.first_moment)
        other.second_moment = dict(self.second_moment)
        return other

    def __repr__(self):
        return (
            f"AdamState(step={self.step}, "
            f"learning_rate={self.learning_rate:.3g})"
        )


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update.

    :param ParameterSet params: Current parameters; left untouched.
    :param dict grads: A gradient for every trainable name of `params`.
    :param AdamState state: Advanced in place by one step.
    :return: The updated parameters.
    :rtype: ParameterSet
    :raises VxError: If a gradient is missing, misshapen or non-finite.
    """
    for name in params.trainable_names:
        if name not in grads:
            raise VxError.data(
                "invalid_gradient.missing", f"no gradient for {name}"
            )
        grad = grads[name]
        if grad.shape != params[name].shape:
            raise VxError.data(
                "invalid_gradient.shape",
                f"gradient of {name} has shape {grad.shape}, "
                f"expected {params[name].shape}",
            )
        if not np.isfinite(grad).all():
            raise VxError.data(
                "invalid_gradient.non_finite",
                f"gradient of {name} is not finite",
            )

    rate = state.learning_rate
    t = state.step + 1
    first_correction = 1.0 - state.beta1 ** t
    second_correction = 1.0 - state.beta2 ** t

    updates = {}
    for name in params.trainable_names:
        grad = grads[name]
        first = (
            state.beta1 * state.first_moment[name]
            + (1.0 - state.beta1) * grad
        )
        second = state.beta2 * state.second_moment[name] + (
            1.0 - state.beta2
        ) * np.square(grad)
        state.first_moment[name] = first
        state.second_moment[name] = second

        updates[name] = params[name] - rate * (first / first_correction) / (
            np.sqrt(second / second_correction) + state.epsilon
        )

    state.step = t
    return params.replace(updates)
