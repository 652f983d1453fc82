"""Reconstruction and adversarial objectives with their equilibrium terms.

Discriminators are autoencoders: the score of a batch is the mean L1 error
of its reconstruction. Each discriminator balances its attention between
true and generated samples with a scalar in ``[0, 1]`` (``k`` for the 2D
discriminator, ``s`` for the 3D one) that is nudged after every step.

Loss functions accept floats or scalar tensors; with tensors the result stays
on the tape so it can be differentiated.
"""

from dataclasses import dataclass, replace

from .exceptions import VxError
from .tensor import Tensor, l1_loss

# -----------------------------------------------------------------------------

DEFAULT_LAMBDA = 0.01
DEFAULT_GAMMA = 1.15

# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class EquilibriumState:
    k: float = 0.0
    s: float = 0.0
    lambda2: float = DEFAULT_LAMBDA
    lambda3: float = DEFAULT_LAMBDA
    gamma2: float = DEFAULT_GAMMA
    gamma3: float = DEFAULT_GAMMA
    lower: float = 0.0
    upper: float = 1.0

    def clamp(self, value):
        return min(max(value, self.lower), self.upper)

    def with_k(self, k):
        return replace(self, k=self.clamp(k))

    def with_s(self, s):
        return replace(self, s=self.clamp(s))


def _check_phi(name, value):
    if not 0 <= value <= 1:
        raise VxError.data(
            "invalid_value.phi", f"{name} must be in [0, 1], got {value}"
        )


@dataclass(frozen=True)
class LossConfig:
    phi2: float = 0.7
    phi3: float = 0.2

    def __post_init__(self):
        _check_phi("phi2", self.phi2)
        _check_phi("phi3", self.phi3)


@dataclass
class LossReport:
    """The scalar components of one training step.

    Components a phase does not compute stay ``None``. `lr_g` and `lr_d`
    are the rates of the networks a phase trains; the joint phase reports
    G2 and D2 there and G3 and D3 in `lr_g3` and `lr_d3`.
    """

    step: int
    phase: int
    rec2_w: float = None
    rec2_wv: float = None
    adv_g2: float = None
    g2: float = None
    d2: float = None
    k: float = None
    rec3: float = None
    adv_g3: float = None
    g3: float = None
    d3: float = None
    s: float = None
    total_g: float = None
    total_d: float = None
    m2: float = None
    m3: float = None
    lr_g: float = None
    lr_d: float = None
    lr_g3: float = None
    lr_d3: float = None

    def values(self):
        return {
            key: value
            for key, value in vars(self).items()
            if key not in ("step", "phase") and value is not None
        }


# -----------------------------------------------------------------------------


def _value(score):
    return float(score) if isinstance(score, Tensor) else score


def _check_scores(**scores):
    for name, score in scores.items():
        if _value(score) < 0:
            raise VxError.data(
                "invalid_score.negative",
                f"{name} must be non-negative, got {_value(score)}",
                score=name,
            )


def rec_loss_2d(x, output):
    """Mean L1 between images and their reconstruction."""
    return l1_loss(output, x)


def d2_losses(score_fake_domain, score_synth_domain, eq):
    """The 2D discriminator objective and the next ``k``.

    :param score_fake_domain: Discriminator score of reconstructions of
        real-style images.
    :param score_synth_domain: Discriminator score of reconstructions of
        synthesized renders, the side treated as true.
    :param EquilibriumState eq: The current state.
    :return: ``(loss, k_next)`` with ``k_next`` clamped to the state's
        bounds.
    """
    _check_scores(
        score_fake_domain=score_fake_domain,
        score_synth_domain=score_synth_domain,
    )
    loss = score_synth_domain - eq.k * score_fake_domain
    k_next = eq.clamp(
        eq.k
        + eq.lambda2
        * (eq.gamma2 * _value(score_synth_domain) - _value(score_fake_domain))
    )
    return loss, k_next


def g2_loss(rec_w, rec_wv, adv_w, cfg):
    _check_phi("phi2", cfg.phi2)
    _check_scores(rec_w=rec_w, rec_wv=rec_wv, adv_w=adv_w)
    return 0.5 * (1.0 - cfg.phi2) * (rec_w + rec_wv) + cfg.phi2 * adv_w


def rec_loss_3d(generated, ground_truth):
    """Mean L1 between generated voxel grids and their paired ground truth.

    :raises VxError: If no ground truth is paired with the batch.
    """
    if ground_truth is None:
        raise VxError.data(
            "invalid_dataset.missing_pair",
            "3D reconstruction needs voxels paired with the inputs",
        )
    return l1_loss(generated, ground_truth)


def d3_losses(score_real_voxel, score_gen_w, score_gen_wv, eq, literal=False):
    """The 3D discriminator objective and the next ``s``.

    The update moves ``s`` by ``lambda3 * (gamma3 * real - mean generated)``.
    With `literal` the first term uses the score of voxels generated from
    real-style images instead of the true voxels.

    :return: ``(loss, s_next)``.
    """
    _check_scores(
        score_real_voxel=score_real_voxel,
        score_gen_w=score_gen_w,
        score_gen_wv=score_gen_wv,
    )
    generated = 0.5 * (score_gen_w + score_gen_wv)
    loss = score_real_voxel - eq.s * generated

    generated_value = 0.5 * (_value(score_gen_w) + _value(score_gen_wv))
    anchor = _value(score_gen_w) if literal else _value(score_real_voxel)
    s_next = eq.clamp(
        eq.s + eq.lambda3 * (eq.gamma3 * anchor - generated_value)
    )
    return loss, s_next


def g3_loss(rec3, adv_mean, cfg):
    _check_phi("phi3", cfg.phi3)
    _check_scores(rec3=rec3, adv_mean=adv_mean)
    return (1.0 - cfg.phi3) * rec3 + cfg.phi3 * adv_mean


def _component(report, name):
    if isinstance(report, LossReport):
        value = getattr(report, name)
    else:
        value = report.get(name)
    if value is None:
        raise VxError.data(
            "invalid_value.missing_component",
            f"{name} is required for the joint losses",
            component=name,
        )
    return value


def total_losses(report):
    """Sum the per-network objectives into ``(L_G, L_D)``.

    :param report: A :py:class:`LossReport`, or a mapping with the keys
        ``g2``, ``g3``, ``d2`` and ``d3``.
    """
    total_g = _component(report, "g2") + _component(report, "g3")
    total_d = _component(report, "d2") + _component(report, "d3")
    return total_g, total_d


def convergence_measure(real_score, fake_score, gamma):
    """``real + |gamma * real - fake|``; lower means closer to equilibrium."""
    real_score = _value(real_score)
    return real_score + abs(gamma * real_score - _value(fake_score))
