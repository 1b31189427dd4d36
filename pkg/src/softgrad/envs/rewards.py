"""Reward shaping helpers shared by the soft-body tasks."""

from __future__ import annotations

import numpy as np

from softgrad import tape as T


def reward_normalized_improvement(r, r0):
    """clamp((r0 - r) / r0, -1, 1): how much ``r`` improved on its initial value."""
    if np.any(np.asarray(T.value(r0)) <= 0):
        raise ValueError("normalized improvement needs r0 > 0")
    return T.clamp((r0 - r) / r0, -1.0, 1.0)


def reward_distance_tiered(d, threshold, low_mult=1.0, high_mult=2.0):
    """(1/(1+d))^2 times ``high_mult`` when d <= threshold, else ``low_mult``.

    The tier is picked from the value of ``d`` and carries no gradient.
    """
    dv = T.value(d)
    if np.any(dv < 0):
        raise ValueError("distance must be >= 0")
    tier = np.where(dv <= threshold, high_mult, low_mult)
    base = 1.0 / (1.0 + d)
    return base * base * tier


def smooth_outside_fraction(points, lo, hi, temperature=0.01):
    """Sigmoid-smoothed fraction of points outside the box [lo, hi], per env.

    ``points`` (B, P, 3); ``lo``/``hi`` broadcast against (B, 1, 3).
    """
    centre = (hi + lo) * 0.5
    half = (hi - lo) * 0.5
    q = T.abs(points - centre) - half
    sd = T.maximum(T.maximum(q[..., 0], q[..., 1]), q[..., 2])
    return T.mean(T.sigmoid(sd / temperature), axis=-1)
