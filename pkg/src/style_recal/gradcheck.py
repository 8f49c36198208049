"""Finite-difference verification suite for every differentiable op and layer.

Each case builds float64 inputs from a seeded generator, evaluates a scalar
loss through the op or layer under test, and compares tape gradients against
central differences. Inputs for kinked ops (relu, max) are sampled away from
the kink so the finite difference stays valid.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Conv2d, Linear, global_pool
from .recalib import RecalibVariant, make_variant
from .tensor import Tensor, using_dtype

__all__ = ["CheckCase", "default_checks", "run_suite", "SUITE_TOLERANCE"]

SUITE_TOLERANCE = 1e-4


class CheckCase:
    def __init__(self, name: str, run: Callable[[np.random.Generator], float], eps: float = 1e-5):
        self.name = name
        self.run = run
        self.eps = eps

    def __repr__(self):
        return f"CheckCase({self.name})"


def _t(rng, *shape, offset: float = 0.0) -> Tensor:
    data = rng.normal(size=shape)
    if offset:
        data = np.sign(data) * (np.abs(data) + offset)
    return Tensor(data, dtype=np.float64)


def _sq_loss(out: Tensor) -> Tensor:
    return T.tsum(out * out)


def _weighted_loss(rng: np.random.Generator, shape: tuple[int, ...]):
    """Random linear functional; avoids losses that BN makes input-invariant."""
    r = Tensor(rng.normal(size=shape), dtype=np.float64)

    def loss(out: Tensor) -> Tensor:
        return T.tsum(out * r)

    return loss


def default_checks() -> list[CheckCase]:
    checks: list[CheckCase] = []

    def op(name, eps=1e-5):
        def wrap(fn):
            checks.append(CheckCase(name, fn, eps))
            return fn

        return wrap

    @op("add")
    def _add(rng):
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        return T.grad_check(lambda ts: _sq_loss(ts[0] + ts[1]), [a, b])

    @op("sub")
    def _sub(rng):
        a, b = _t(rng, 3, 4), _t(rng, 4)
        return T.grad_check(lambda ts: _sq_loss(ts[0] - ts[1]), [a, b])

    @op("mul")
    def _mul(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 3, 4)
        return T.grad_check(lambda ts: T.tsum(ts[0] * ts[1]), [a, b])

    @op("div")
    def _div(rng):
        a, b = _t(rng, 3, 4), _t(rng, 3, 4, offset=0.5)
        return T.grad_check(lambda ts: T.tsum(ts[0] / ts[1]), [a, b])

    @op("matmul")
    def _matmul(rng):
        a, b = _t(rng, 3, 5), _t(rng, 5, 2)
        return T.grad_check(lambda ts: _sq_loss(T.matmul(ts[0], ts[1])), [a, b])

    @op("relu")
    def _relu(rng):
        x = _t(rng, 3, 4, offset=0.1)
        return T.grad_check(lambda ts: _sq_loss(T.relu(ts[0])), [x])

    @op("sigmoid")
    def _sigmoid(rng):
        x = _t(rng, 3, 4)
        return T.grad_check(lambda ts: T.tsum(T.sigmoid(ts[0])), [x])

    @op("sqrt")
    def _sqrt(rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), dtype=np.float64)
        return T.grad_check(lambda ts: T.tsum(T.sqrt(ts[0])), [x])

    @op("sum")
    def _sum(rng):
        x = _t(rng, 2, 3, 4)
        return T.grad_check(lambda ts: _sq_loss(T.tsum(ts[0], axis=(0, 2))), [x])

    @op("mean")
    def _mean(rng):
        x = _t(rng, 2, 3, 4)
        return T.grad_check(lambda ts: _sq_loss(T.tmean(ts[0], axis=(1,), keepdims=True)), [x])

    @op("amax")
    def _amax(rng):
        x = _t(rng, 2, 3, 4, 4)
        return T.grad_check(lambda ts: _sq_loss(T.amax(ts[0], axis=(2, 3))), [x])

    @op("reshape")
    def _reshape(rng):
        x = _t(rng, 2, 6)
        return T.grad_check(lambda ts: _sq_loss(T.reshape(ts[0], (3, 4))), [x])

    @op("concat")
    def _concat(rng):
        a, b = _t(rng, 2, 3), _t(rng, 2, 2)
        return T.grad_check(lambda ts: _sq_loss(T.concat([ts[0], ts[1]], axis=1)), [a, b])

    @op("scale_channels")
    def _scale(rng):
        x, g = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3)
        return T.grad_check(lambda ts: _sq_loss(T.scale_channels(ts[0], ts[1])), [x, g])

    @op("conv2d")
    def _conv(rng):
        x, w = _t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3)
        return T.grad_check(lambda ts: _sq_loss(T.conv2d(ts[0], ts[1], stride=2, padding=1)), [x, w])

    @op("maxpool2d")
    def _maxpool(rng):
        x = _t(rng, 2, 2, 6, 6)
        return T.grad_check(lambda ts: _sq_loss(T.maxpool2d(ts[0], 3, 2, 1)), [x])

    @op("cross_entropy")
    def _ce(rng):
        x = _t(rng, 4, 5)
        labels = rng.integers(0, 5, size=4)
        return T.grad_check(lambda ts: T.cross_entropy(ts[0], labels), [x])

    @op("global_pool_avg")
    def _gp_avg(rng):
        x = _t(rng, 2, 3, 4, 4)
        return T.grad_check(lambda ts: _sq_loss(global_pool(ts[0], "avg")), [x])

    @op("global_pool_std")
    def _gp_std(rng):
        x = _t(rng, 2, 3, 4, 4)
        return T.grad_check(lambda ts: _sq_loss(global_pool(ts[0], "std")), [x])

    @op("global_pool_max")
    def _gp_max(rng):
        x = _t(rng, 2, 3, 4, 4)
        return T.grad_check(lambda ts: _sq_loss(global_pool(ts[0], "max")), [x])

    @op("linear_layer")
    def _linear(rng):
        layer = Linear(5, 3, rng=rng)
        x = _t(rng, 4, 5)
        params = [x, layer.weight, layer.bias]
        return T.grad_check(lambda ts: _sq_loss(layer(ts[0])), params)

    @op("conv_layer")
    def _conv_layer(rng):
        layer = Conv2d(3, 4, 3, stride=1, padding=1, rng=rng)
        x = _t(rng, 2, 3, 5, 5)
        return T.grad_check(lambda ts: _sq_loss(layer(ts[0])), [x, layer.weight])

    @op("batchnorm_2d")
    def _bn2(rng):
        layer = BatchNorm(3)
        layer.gamma.data = rng.uniform(0.5, 1.5, size=3)
        layer.beta.data = rng.normal(size=3)
        x = _t(rng, 6, 3)
        loss = _weighted_loss(rng, (6, 3))
        return T.grad_check(lambda ts: loss(layer(ts[0])), [x, layer.gamma, layer.beta])

    @op("batchnorm_4d")
    def _bn4(rng):
        layer = BatchNorm(3)
        layer.gamma.data = rng.uniform(0.5, 1.5, size=3)
        x = _t(rng, 4, 3, 4, 4)
        loss = _weighted_loss(rng, (4, 3, 4, 4))
        return T.grad_check(lambda ts: loss(layer(ts[0])), [x, layer.gamma, layer.beta])

    @op("srm_block", eps=1e-4)
    def _srm(rng):
        layer = make_variant(4, RecalibVariant.srm(), rng=rng)
        x = _t(rng, 2, 4, 3, 3)
        loss = _weighted_loss(rng, (2, 4, 3, 3))
        params = [x] + layer.parameters()
        return T.grad_check(lambda ts: loss(layer(ts[0])), params, eps=1e-4)

    @op("se_block", eps=1e-4)
    def _se(rng):
        layer = make_variant(8, RecalibVariant.se(4), rng=rng)
        # Keep hidden units alive for every example: a batch-dead ReLU unit has
        # an exactly-zero bias gradient, which the relative-error metric cannot
        # compare against finite-difference noise.
        layer.integrate.fc1.bias.data += 1.0
        x = _t(rng, 2, 8, 3, 3)
        loss = _weighted_loss(rng, (2, 8, 3, 3))
        params = [x] + layer.parameters()
        return T.grad_check(lambda ts: loss(layer(ts[0])), params, eps=1e-4)

    @op("mlp_bn_variant", eps=1e-4)
    def _mlp_bn(rng):
        variant = RecalibVariant(pooling=("avg", "std"), integration="mlp", use_bn=True, se_reduction=4)
        layer = make_variant(4, variant, rng=rng)
        layer.integrate.fc1.bias.data += 1.0
        x = _t(rng, 2, 4, 3, 3)
        loss = _weighted_loss(rng, (2, 4, 3, 3))
        # fc1.bias is excluded: with every hidden unit alive it shifts each
        # channel by a batch constant that the following BN removes exactly, so
        # its true gradient is zero and the relative-error metric cannot rate
        # a structural zero against finite-difference noise.
        params = [x] + [p for name, p in layer.named_parameters() if name != "integrate.fc1.bias"]
        return T.grad_check(lambda ts: loss(layer(ts[0])), params, eps=1e-4)

    @op("cfc_nobn_variant", eps=1e-4)
    def _cfc_nobn(rng):
        variant = RecalibVariant(pooling=("avg", "std", "max"), integration="cfc", use_bn=False)
        layer = make_variant(4, variant, rng=rng)
        x = _t(rng, 2, 4, 3, 3)
        loss = _weighted_loss(rng, (2, 4, 3, 3))
        params = [x] + layer.parameters()
        return T.grad_check(lambda ts: loss(layer(ts[0])), params, eps=1e-4)

    return checks


def run_suite(seeds: Iterable[int] = range(10), checks: list[CheckCase] | None = None) -> dict[str, float]:
    """Max relative error per check across seeds, computed in float64."""
    checks = checks if checks is not None else default_checks()
    results: dict[str, float] = {}
    with using_dtype(np.float64):
        for case in checks:
            worst = 0.0
            for seed in seeds:
                err = case.run(np.random.default_rng(seed))
                worst = max(worst, err)
            results[case.name] = worst
    return results
