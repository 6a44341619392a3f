"""Independent scalar oracles used by the test suite.

These are deliberately written without importing ``coars`` so that the
values they produce can be compared against the package's own code paths.
"""

import math


def rec_reward_oracle(hit, s, depth):
    sign = 1.0 if hit else -1.0
    magnitude = 0.5 + 0.5 * s
    return sign * magnitude * depth


def user_reward_oracle(hit, s, q, alpha):
    direction = 2.0 * s - 1.0
    sign = 1.0 if hit else -1.0
    modulation = 1.0 - alpha * q * direction
    return sign * direction * modulation


def depth_oracle(t, found, base):
    if found:
        return 1.0
    value = 1.0
    for _ in range(t - 1):
        value *= base
    return value


def kl_oracle(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0.0:
            total += pi * (math.log(pi) - math.log(qi))
    return total


def f1_oracle(tp, fp, fn):
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def central_difference(func, x, eps=1e-6):
    """Central finite-difference gradient of ``func`` at the list ``x``."""
    grad = []
    for j in range(len(x)):
        xp = list(x)
        xm = list(x)
        xp[j] += eps
        xm[j] -= eps
        grad.append((func(xp) - func(xm)) / (2 * eps))
    return grad
