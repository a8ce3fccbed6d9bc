"""Finite-difference checks of every differentiable building block.

Each case is small enough to run in seconds; ``run_suite`` is what the
``gradcheck`` subcommand executes.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .nn import LEAKY_SLOPE, loss, partial_conv3d
from .tensor import (
    GradCheckReport,
    Tensor,
    batch_norm,
    conv3d,
    gradient_check,
    leaky_relu,
    mean,
    mul,
    total,
    upsample_nearest_to,
)


def _weights(rng, shape):
    # fixed random projection so the checked function is a non-trivial scalar
    return Tensor(rng.standard_normal(shape))


def case_conv3d(rng) -> GradCheckReport:
    x = rng.standard_normal((2, 2, 3, 4, 4))
    w = rng.standard_normal((3, 2, 2, 3, 3)) * 0.5
    b = rng.standard_normal(3)
    proj = _weights(rng, (2, 3, 2, 2, 2))
    return gradient_check(lambda x, w, b: total(mul(conv3d(x, w, b, (1, 2, 2), (0, 1, 1)), proj)), [x, w, b])


def case_partial_conv(rng) -> GradCheckReport:
    x = rng.standard_normal((2, 2, 3, 5, 5))
    mask = (rng.random((2, 1, 3, 5, 5)) > 0.4).astype(np.float64)
    w = rng.standard_normal((2, 2, 3, 3, 3)) * 0.5
    b = rng.standard_normal(2)
    proj = _weights(rng, (2, 2, 3, 5, 5))

    def f(x, w, b):
        out, _ = partial_conv3d(x, mask, w, b, (1, 1, 1), (1, 1, 1))
        return total(mul(out, proj))
    return gradient_check(f, [x, w, b])


def case_batch_norm(rng) -> GradCheckReport:
    x = rng.standard_normal((3, 2, 2, 3, 3)) * 2 + 1
    gamma = rng.standard_normal(2)
    beta = rng.standard_normal(2)
    proj = _weights(rng, x.shape)

    def f(x, g, b):
        rm, rv = np.zeros(2), np.ones(2)
        return total(mul(batch_norm(x, g, b, rm, rv, training=True), proj))
    return gradient_check(f, [x, gamma, beta])


def case_composite_net(rng) -> GradCheckReport:
    # partial conv -> batch norm -> leaky relu -> upsample -> partial conv
    gamma, beta = np.ones(3) * 1.3, np.full(3, 0.2)

    def front(x, w1, gamma, beta):
        h, m = partial_conv3d(x, mask, w1, None, (1, 2, 2), (0, 1, 1))
        return batch_norm(h, gamma, beta, np.zeros(3), np.ones(3), training=True), m

    # redraw until no pre-activation sits within a finite-difference step of the kink
    while True:
        x = rng.standard_normal((2, 1, 2, 4, 4))
        mask = (rng.random((2, 1, 2, 4, 4)) > 0.3).astype(np.float64)
        w1 = rng.standard_normal((3, 1, 1, 3, 3)) * 0.5
        pre, _ = front(Tensor(x), Tensor(w1), Tensor(gamma), Tensor(beta))
        if np.abs(pre.data).min() > 0.05:
            break
    w2 = rng.standard_normal((1, 3, 1, 3, 3)) * 0.5
    proj = _weights(rng, (2, 1, 2, 4, 4))

    def f(x, w1, w2, gamma, beta):
        h, m = front(x, w1, gamma, beta)
        h = leaky_relu(h, LEAKY_SLOPE)
        h = upsample_nearest_to(h, (2, 4, 4))
        m = np.take(np.take(m, [0, 0, 1, 1], axis=3), [0, 0, 1, 1], axis=4)
        out, _ = partial_conv3d(h, m, w2, None, (1, 1, 1), (0, 1, 1))
        return total(mul(out, proj))
    return gradient_check(f, [x, w1, w2, gamma, beta])


def case_loss(rng) -> GradCheckReport:
    gt = rng.standard_normal((2, 1, 2, 3, 3))
    mask = (rng.random(gt.shape) > 0.5).astype(np.float64)
    mask.flat[0] = 1.0
    mask.flat[1] = 0.0
    # keep every residual well away from the |.| kink
    pred = gt + np.where(rng.random(gt.shape) > 0.5, 1.0, -1.0) * (0.5 + rng.random(gt.shape))

    def f(p):
        return loss(p, gt, mask, 12.0)[0]
    return gradient_check(f, [pred])


def case_mean(rng) -> GradCheckReport:
    x = rng.standard_normal((3, 4))
    return gradient_check(lambda x: mean(mul(x, x)), [x])


CASES: dict[str, Callable[[np.random.Generator], GradCheckReport]] = {
    "conv3d": case_conv3d,
    "partial_conv3d": case_partial_conv,
    "batch_norm": case_batch_norm,
    "composite_net": case_composite_net,
    "loss": case_loss,
    "mean": case_mean,
}


def run_suite(seed: int = 0) -> dict[str, GradCheckReport]:
    return {name: fn(np.random.default_rng([seed, i])) for i, (name, fn) in enumerate(CASES.items())}
