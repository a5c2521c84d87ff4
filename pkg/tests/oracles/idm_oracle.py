"""Direct transcription of the Intelligent Driver Model, kept independent of the package."""

import math


def idm(v, gap, v_lead, v0, T, a, b, s0, delta, b_emergency=9.0):
    if gap == math.inf:
        interaction = 0.0
    else:
        dv = v - v_lead
        s_star = s0 + max(0.0, v * T + v * dv / (2.0 * math.sqrt(a * b)))
        interaction = (s_star / gap) ** 2
    acc = a * (1.0 - (v / v0) ** delta - interaction)
    return max(acc, -b_emergency)


def integrate_follower(x_f, v_f, x_l, length, steps, dt, params):
    """Follower behind a leader standing still at front position x_l.

    Semi-implicit Euler, speed clamped at zero. Returns lists of (pos, speed).
    """
    out = []
    for _ in range(steps):
        gap = x_l - length - x_f
        acc = idm(v_f, gap, 0.0, **params)
        v_f = max(v_f + acc * dt, 0.0)
        x_f = x_f + v_f * dt
        out.append((x_f, v_f))
    return out
