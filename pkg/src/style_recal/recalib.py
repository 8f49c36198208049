"""Channel recalibration layers: style pooling, style integration, and gating.

The canonical style recalibrator pools each channel's spatial activations to
global statistics (mean and standard deviation), maps them through a
channel-wise fully connected layer (one tiny d -> 1 linear map per channel,
no cross-channel weights), normalizes over the batch, and squashes to a
per-channel gate in (0, 1) that rescales the channel.

Also provided: the squeeze-and-excitation block (global average pool plus a
bottleneck MLP shared across channels), every pooling/integration ablation
between the two, and the inference-time fold of the batch-norm affine into
the preceding channel-wise layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import BatchNorm, Linear, Module, global_pool
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    concat,
    get_default_dtype,
    relu,
    reshape,
    scale_channels,
    sigmoid,
    tsum,
)

__all__ = [
    "POOL_ORDER",
    "RecalibVariant",
    "StylePool",
    "StyleIntegration",
    "MlpIntegration",
    "ChannelRecalib",
    "FoldError",
    "make_variant",
    "se_layer",
]

POOL_ORDER = ("avg", "std", "max")

SE_DEFAULT_REDUCTION = 16


class FoldError(RuntimeError):
    """Raised when the BN fold is requested in an invalid state."""


@dataclass(frozen=True)
class RecalibVariant:
    """Configuration of one recalibration layer.

    pooling: subset of {avg, std, max}, kept in canonical [avg, std, max] order.
    integration: "cfc" (channel-wise fully connected) or "mlp" (bottleneck MLP
        over the style features concatenated along the channel axis).
    use_bn: batch-normalize the encoded style features before the sigmoid.
    se_reduction: bottleneck reduction ratio for mlp integration.
    """

    pooling: tuple[str, ...]
    integration: str = "cfc"
    use_bn: bool = True
    se_reduction: int | None = None

    def __post_init__(self):
        if not self.pooling:
            raise ValueError("recalib variant: pooling set must be nonempty")
        unknown = [p for p in self.pooling if p not in POOL_ORDER]
        if unknown:
            raise ValueError(f"recalib variant: unknown pooling kinds {unknown}; expected subset of {POOL_ORDER}")
        if len(set(self.pooling)) != len(self.pooling):
            raise ValueError("recalib variant: duplicate pooling kinds")
        ordered = tuple(p for p in POOL_ORDER if p in self.pooling)
        object.__setattr__(self, "pooling", ordered)
        if self.integration not in ("cfc", "mlp"):
            raise ValueError(f"recalib variant: unknown integration {self.integration!r}")
        if self.integration == "mlp":
            r = self.se_reduction if self.se_reduction is not None else SE_DEFAULT_REDUCTION
            if r < 1:
                raise ValueError(f"recalib variant: reduction ratio must be >= 1, got {r}")
            object.__setattr__(self, "se_reduction", r)

    @property
    def d(self) -> int:
        return len(self.pooling)

    @staticmethod
    def srm() -> "RecalibVariant":
        return RecalibVariant(pooling=("avg", "std"), integration="cfc", use_bn=True)

    @staticmethod
    def se(reduction: int = SE_DEFAULT_REDUCTION) -> "RecalibVariant":
        return RecalibVariant(pooling=("avg",), integration="mlp", use_bn=False, se_reduction=reduction)

    def to_dict(self) -> dict:
        return {
            "pooling": list(self.pooling),
            "integration": self.integration,
            "use_bn": self.use_bn,
            "se_reduction": self.se_reduction,
        }

    @staticmethod
    def from_dict(d: dict) -> "RecalibVariant":
        return RecalibVariant(
            pooling=tuple(d["pooling"]),
            integration=d.get("integration", "cfc"),
            use_bn=bool(d.get("use_bn", True)),
            se_reduction=d.get("se_reduction"),
        )


class StylePool(Module):
    """Pool each channel's spatial activations to its selected statistics.

    Output shape is (N, C, d) with the features in fixed [avg, std, max] order.
    """

    def __init__(self, pooling: Sequence[str]):
        super().__init__()
        if not pooling:
            raise ValueError("style pool: empty pooling set")
        self.pooling = tuple(p for p in POOL_ORDER if p in pooling)

    @property
    def d(self) -> int:
        return len(self.pooling)

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[0], x.shape[1]
        feats = [reshape(global_pool(x, kind), (n, c, 1)) for kind in self.pooling]
        return feats[0] if len(feats) == 1 else concat(feats, axis=2)


class StyleIntegration(Module):
    """Channel-wise fully connected encoding, optional BN, sigmoid gate.

    Each channel owns an independent weight vector of length d; encoding is
    a dot product per channel. With BN, the bias is absorbed into the BN
    shift; without it a per-channel bias keeps the layer trainable. After
    :meth:`fold` the eval-mode BN affine is merged into the channel weights so
    each channel reduces to one linear map followed by the sigmoid.
    """

    def __init__(self, channels: int, d: int, use_bn: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.channels = channels
        self.d = d
        self.use_bn = use_bn
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(d)
        dt = get_default_dtype()
        self.weight = Parameter(rng.uniform(-bound, bound, size=(channels, d)).astype(dt))
        if use_bn:
            self.bn = BatchNorm(channels)
            self.bias = None
        else:
            self.bn = None
            self.bias = Parameter(np.zeros(channels, dtype=dt))
        self.folded_weight: np.ndarray | None = None
        self.folded_bias: np.ndarray | None = None
        self.use_folded = False

    def encode(self, t: Tensor) -> Tensor:
        if t.ndim != 3 or t.shape[1] != self.channels or t.shape[2] != self.d:
            raise ShapeError(f"style integration: expected (N, {self.channels}, {self.d}), got {t.shape}")
        return tsum(t * self.weight, axis=2)

    def forward(self, t: Tensor) -> Tensor:
        if self.use_folded:
            if self.folded_weight is None:
                raise FoldError("folded mode requested before fold() has run")
            z = tsum(t * Tensor(self.folded_weight), axis=2)
            return sigmoid(z + Tensor(self.folded_bias))
        z = self.encode(t)
        if self.bn is not None:
            z = self.bn(z)
        else:
            z = z + self.bias
        return sigmoid(z)

    def fold(self) -> None:
        """Merge the eval-mode BN affine into the channel-wise weights.

        w'_c = gamma_c * w_c / sqrt(var_c + eps)
        b'_c = beta_c - gamma_c * mean_c / sqrt(var_c + eps)
        """
        if self.bn is None:
            raise FoldError("fold: layer has no BN to fold")
        if not self.bn.stats_initialized:
            raise FoldError("fold: running statistics not populated (train first or load a checkpoint)")
        var = self.bn.running_var
        if not np.isfinite(var).all() or not np.isfinite(self.bn.running_mean).all():
            raise FoldError("fold: running statistics contain non-finite values")
        scale = self.bn.gamma.data / np.sqrt(var + self.bn.eps)
        self.folded_weight = self.weight.data * scale[:, None]
        self.folded_bias = self.bn.beta.data - scale * self.bn.running_mean
        self.use_folded = True


class MlpIntegration(Module):
    """Bottleneck two-layer subnetwork over concatenated style features.

    This is the excitation subnetwork of the squeeze-and-excitation block,
    generalized to d style features per channel: the (N, C, d) input is
    flattened along the channel axis and mapped C*d -> hidden -> C with a
    ReLU in between, where hidden = max(1, floor(C*d / reduction)). Both
    linear maps carry biases.
    """

    def __init__(self, channels: int, d: int, reduction: int = SE_DEFAULT_REDUCTION,
                 use_bn: bool = False, rng: np.random.Generator | None = None):
        super().__init__()
        if reduction < 1:
            raise ValueError(f"mlp integration: reduction ratio must be >= 1, got {reduction}")
        self.channels = channels
        self.d = d
        self.reduction = reduction
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(1, (channels * d) // reduction)
        self.fc1 = Linear(channels * d, hidden, bias=True, rng=rng)
        self.fc2 = Linear(hidden, channels, bias=True, rng=rng)
        self.bn = BatchNorm(channels) if use_bn else None

    def forward(self, t: Tensor) -> Tensor:
        if t.ndim != 3 or t.shape[1] != self.channels or t.shape[2] != self.d:
            raise ShapeError(f"mlp integration: expected (N, {self.channels}, {self.d}), got {t.shape}")
        n = t.shape[0]
        z = self.fc2(relu(self.fc1(reshape(t, (n, self.channels * self.d)))))
        if self.bn is not None:
            z = self.bn(z)
        return sigmoid(z)


class ChannelRecalib(Module):
    """Full recalibration layer: style pooling -> integration -> channel gate."""

    def __init__(self, channels: int, variant: RecalibVariant,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.channels = channels
        self.variant = variant
        self.pool = StylePool(variant.pooling)
        if variant.integration == "cfc":
            self.integrate = StyleIntegration(channels, variant.d, use_bn=variant.use_bn, rng=rng)
        else:
            self.integrate = MlpIntegration(
                channels, variant.d, reduction=variant.se_reduction, use_bn=variant.use_bn, rng=rng
            )

    def gates(self, x: Tensor) -> Tensor:
        """Per-example per-channel weights of shape (N, C), each in (0, 1)."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"recalib: expected (N, {self.channels}, H, W), got {x.shape}")
        return self.integrate(self.pool(x))

    def forward(self, x: Tensor, gate_cb=None) -> Tensor:
        g = self.gates(x)
        if gate_cb is not None:
            g = Tensor(gate_cb(g.data))
        return scale_channels(x, g)

    def fold(self) -> None:
        if isinstance(self.integrate, StyleIntegration):
            self.integrate.fold()
        else:
            raise FoldError("fold: only the channel-wise fully connected integration folds")

    @property
    def can_fold(self) -> bool:
        return isinstance(self.integrate, StyleIntegration) and self.integrate.bn is not None


def make_variant(channels: int, variant: RecalibVariant,
                 rng: np.random.Generator | None = None) -> ChannelRecalib:
    """Wire the selected pooling set into the selected integrator."""
    return ChannelRecalib(channels, variant, rng=rng)


def se_layer(channels: int, reduction: int = SE_DEFAULT_REDUCTION,
             rng: np.random.Generator | None = None) -> ChannelRecalib:
    """Squeeze-and-excitation block: average-pool squeeze, bottleneck MLP excitation."""
    if reduction < 1:
        raise ValueError(f"se_layer: reduction ratio must be >= 1, got {reduction}")
    return make_variant(channels, RecalibVariant.se(reduction), rng=rng)
