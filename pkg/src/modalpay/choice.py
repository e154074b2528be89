"""Binary-logit mode choice, generalized utilities, and price inversion."""

from __future__ import annotations

import math
from dataclasses import dataclass


class InversionError(ValueError):
    """Share on the choice boundary; clip before inverting."""


@dataclass(frozen=True)
class ModeUtilities:
    t_amod: float  # hours
    t_pt: float  # hours
    price: float  # currency
    fare: float  # currency
    vot: float  # currency/h

    @property
    def v_amod(self) -> float:
        return -self.vot * self.t_amod - self.price

    @property
    def v_pt(self) -> float:
        return -self.vot * self.t_pt - self.fare


@dataclass(frozen=True)
class ModeSplit:
    x_amod: float  # travelers/h
    x_pt: float
    total: float


def logit_split(v_amod: float, v_pt: float, alpha: float) -> ModeSplit:
    """Binary-logit split of alpha travelers; stable for utility gaps up to ~700."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not (math.isfinite(v_amod) and math.isfinite(v_pt)):
        raise ValueError("utilities must be finite")
    m = max(v_amod, v_pt)
    ea = math.exp(v_amod - m)
    ep = math.exp(v_pt - m)
    share = ea / (ea + ep)
    return ModeSplit(x_amod=alpha * share, x_pt=alpha * (1.0 - share), total=alpha)


def recover_price(
    t_amod: float,
    t_pt: float,
    x_amod: float,
    x_pt: float,
    fare: float,
    vot: float,
) -> float:
    """Invert the logit relation: the unique price rationalizing the given shares."""
    if x_amod <= 0 or x_pt <= 0:
        raise InversionError("shares must be strictly positive; clip them first")
    return vot * (t_pt - t_amod) + fare - math.log(x_amod / x_pt)


def clip_shares(split: ModeSplit, epsilon: float) -> ModeSplit:
    """Push both shares into [epsilon, total - epsilon], preserving the total."""
    if not (0 < epsilon < split.total / 2):
        raise ValueError("epsilon must lie in (0, total/2)")
    x_a = min(max(split.x_amod, epsilon), split.total - epsilon)
    return ModeSplit(x_amod=x_a, x_pt=split.total - x_a, total=split.total)


# Logit scale on currency-valued utilities; the model fixes this at 1 (any
# rescaling is absorbed by the entropy weight in the target problem).
LOGIT_SCALE = 1.0

# Default boundary clip applied before price recovery and entropy evaluation,
# as a fraction of OD volume.
DEFAULT_CLIP_FRACTION = 1e-6


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)
