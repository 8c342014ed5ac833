"""Dropout strategies and per-sample Bernoulli masks.

Retained activations are scaled by ``1 / max(p, RESCALE_EPS)`` so the
expected forward signal is unchanged and inference runs without masks.
"""

from dataclasses import dataclass
import enum
import math

import numpy as np

from .exceptions import ValidationError

RESCALE_EPS = 0.01


class Strategy(str, enum.Enum):
    NONE = "none"
    STANDARD = "standard"
    STANDARD_PER_IMAGE = "standard-per-image"
    CURRICULUM = "curriculum"
    EXCITATION = "excitation"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower().replace("_", "-"))
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ValidationError(f"unknown strategy {name!r} (expected one of {valid})") from None


@dataclass
class DropoutPlan:
    strategy: Strategy
    layer_index: int
    masks: np.ndarray
    rescale: np.ndarray
    base_p: float = 0.5
    gamma: float = 0.0

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.rescale = np.asarray(self.rescale, dtype=np.float32)
        if self.masks.shape != self.rescale.shape or self.masks.ndim != 2:
            raise ValidationError(f"masks {self.masks.shape} vs rescale {self.rescale.shape}")
        self.factor = self.masks * self.rescale

    @classmethod
    def identity(cls, layer_index, width, batch_size=1):
        ones = np.ones((batch_size, width))
        return cls(Strategy.NONE, layer_index, ones, ones, base_p=1.0)


def _check_eq3_domain(N, P):
    if N < 2:
        raise ValidationError(f"layer width must be >= 2, got {N}")
    if not 0.0 < P < 1.0:
        raise ValidationError(f"base retaining probability must lie in (0, 1), got {P}")


def _eq3(p_eb, N, P):
    denom = ((1.0 - P) * N - 1.0) * p_eb + P
    # Positive for p_eb in [0, 1], N >= 2, P in (0, 1): it is linear in p_eb
    # with endpoint values P and (1 - P) * (N - 1).
    assert np.all(denom > 0), "retaining-probability denominator must be positive"
    # 1 - (1-P)(N-1)p_eb / denom rewritten as P(1-p_eb) / denom, which is
    # exact at both ends of [0, 1].
    p = P * (1.0 - p_eb) / denom
    return np.clip(p, 0.0, 1.0)


def retain_prob_excitation(p_eb, N, P):
    """Retaining probability of a neuron holding saliency ``p_eb`` in a layer of ``N``.

    Equals 1 at zero saliency, 0 at full saliency and ``P`` when saliency is
    uniform (``p_eb = 1/N``).
    """
    _check_eq3_domain(N, P)
    if not 0.0 <= p_eb <= 1.0:
        raise ValidationError(f"p_eb must lie in [0, 1], got {p_eb}")
    return float(_eq3(float(p_eb), N, P))


def retention_vector(probs, P):
    """Elementwise retaining probabilities for one or more saliency distributions."""
    probs = np.asarray(getattr(probs, "probs", probs), dtype=np.float64)
    N = probs.shape[-1]
    _check_eq3_domain(N, P)
    if (probs < 0).any() or (probs > 1).any():
        raise ValidationError("saliency entries must lie in [0, 1]")
    return _eq3(probs, N, P)


def curriculum_retain(t, gamma, p_bar):
    """Retaining probability decaying from 1 at ``t = 0`` towards ``p_bar``."""
    if t < 0 or not 0.0 < p_bar <= 1.0:
        raise ValidationError(f"need t >= 0 and p_bar in (0, 1], got t={t}, p_bar={p_bar}")
    return (1.0 - p_bar) * math.exp(-gamma * t) + p_bar


def make_masks(retention, batch_size, rng, per_image, width=None):
    """Draw binary masks and inverted-dropout rescale factors.

    ``retention`` is a scalar, a length-``N`` vector shared by all samples,
    or a ``batch_size x N`` array. With ``per_image`` False a single mask row
    is drawn and shared across the batch.
    """
    r = np.asarray(retention, dtype=np.float64)
    if r.ndim == 0:
        if width is None:
            raise ValidationError("scalar retention needs the layer width")
        r = np.full((1, width), float(r))
    elif r.ndim == 1:
        r = r[None]
    if (r < 0).any() or (r > 1).any():
        raise ValidationError("retaining probabilities must lie in [0, 1]")
    rows = batch_size if per_image else 1
    if r.shape[0] not in (1, rows):
        raise ValidationError(f"retention for {r.shape[0]} samples, need {rows}")
    r = np.broadcast_to(r, (rows, r.shape[1]))
    masks = rng.bernoulli(r)
    rescale = np.where(masks, 1.0 / np.maximum(r, RESCALE_EPS), 1.0)
    return masks, rescale


def make_plan(strategy, layer_index, width, batch_size, rng, base_p=0.5, gamma=5e-4,
              iteration=0, saliency=None):
    """Dropout plan for one minibatch under ``strategy``.

    ``saliency`` (``batch_size x width``) is required for the excitation
    strategy and ignored otherwise.
    """
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.NONE:
        plan = DropoutPlan.identity(layer_index, width)
    elif strategy is Strategy.STANDARD:
        plan = DropoutPlan(strategy, layer_index,
                           *make_masks(base_p, batch_size, rng, False, width), base_p=base_p)
    elif strategy is Strategy.STANDARD_PER_IMAGE:
        plan = DropoutPlan(strategy, layer_index,
                           *make_masks(base_p, batch_size, rng, True, width), base_p=base_p)
    elif strategy is Strategy.CURRICULUM:
        p = curriculum_retain(iteration, gamma, base_p)
        plan = DropoutPlan(strategy, layer_index,
                           *make_masks(p, batch_size, rng, False, width),
                           base_p=base_p, gamma=gamma)
    else:
        if saliency is None:
            raise ValidationError("excitation dropout needs a saliency distribution")
        retention = retention_vector(saliency, base_p)
        plan = DropoutPlan(strategy, layer_index,
                           *make_masks(retention, batch_size, rng, True), base_p=base_p)
    return plan
