"""Finite-difference verification of the network's reverse pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import NetConfig, backward, forward, init_params
from .numerics import make_rng
from .train import LossConfig, loss_and_grad


@dataclass
class GradcheckReport:
    layer_errors: list[float]
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_errors(analytic, numeric, floor: float) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    The floor keeps entries whose true gradient is zero (for example the
    output bias, to which a softmax is blind) from turning round-off into a
    large relative error.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(config: NetConfig, size: int = 8, seed: int = 0, step: float = 1e-5,
              loss_cfg: LossConfig = LossConfig(), tolerance: float = 1e-4,
              floor_rel: float = 1e-4, corrupt: bool = False,
              min_step: float = 1e-9) -> GradcheckReport:
    """Central differences of loss(softmax(net(x))) against :func:`backward`.

    Runs in float64 on a random ``size x size`` input and random unit-mass
    target, in train mode with one fixed dropout mask. Every parameter is
    perturbed; a step that changes any leaky-ReLU branch is shrunk tenfold
    (down to ``min_step``). ``corrupt`` scales the first layer's analytic gradient by 1.01
    (a negative control that must fail).
    """
    params = init_params(make_rng(seed, 1), config, np.float64)
    x = make_rng(seed, 2).random((size, size))
    target = make_rng(seed, 3).random((size * config.scale,) * 2)
    target /= target.sum()

    def evaluate(p):
        out, cache = forward(p, config, x, train=True, rng=make_rng(seed, 4))
        return loss_and_grad(out, target, loss_cfg)[0], cache.slopes

    def same_pattern(a, b):
        return all(np.array_equal(u, v) for u, v in zip(a, b))

    out, cache = forward(params, config, x, train=True, rng=make_rng(seed, 4))
    _, g = loss_and_grad(out, target, loss_cfg)
    grads, _ = backward(params, config, cache, g)
    base = cache.slopes
    if corrupt:
        grads.weights[0] = grads.weights[0] * 1.01

    tensors, analytic = params.tensors(), grads.tensors()
    floor = floor_rel * max(float(np.abs(t).max()) for t in analytic)
    errors = []
    for t, a in zip(tensors, analytic):
        flat = t.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            h = step
            # a difference that flips a leaky-ReLU branch measures the kink,
            # not the derivative: shrink the step until the pattern holds
            while True:
                flat[i] = old + h
                up, pat_up = evaluate(params)
                flat[i] = old - h
                down, pat_down = evaluate(params)
                flat[i] = old
                if h <= min_step or (same_pattern(pat_up, base) and same_pattern(pat_down, base)):
                    break
                h /= 10.0
            num[i] = (up - down) / (2.0 * h)
        errors.append(float(relative_errors(a.reshape(-1), num, floor).max()))
    # one entry per layer: worst of its weight and bias tensors
    layer_errors = [max(errors[i], errors[i + 1]) for i in range(0, len(errors), 2)]
    return GradcheckReport(layer_errors, max(layer_errors), tolerance)
