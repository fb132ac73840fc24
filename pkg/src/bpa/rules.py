"""Local backward rules for ReLU, max-pooling and residual blocks.

Forward propagation is never touched here. Each rule maps the gradient arriving
at a layer's output to the gradient at its input, given the saved forward input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .tensor import (
    ParameterError,
    ShapeError,
    Tensor,
    WindowSpec,
    fold_windows,
    scatter_to_argmax,
    window_valid_mask,
    windows,
)


class PolicyError(ValueError):
    pass


def _check_prob(p: float, what: str) -> None:
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"{what} must lie in [0, 1], got {p}")


@dataclass(frozen=True)
class ReluRule:
    kind: str = "vanilla"  # vanilla | linbp | bpa | recover
    prob: float = 0.0

    def __post_init__(self):
        if self.kind not in ("vanilla", "linbp", "bpa", "recover"):
            raise PolicyError(f"unknown ReLU rule {self.kind!r}")
        _check_prob(self.prob, "recover probability")

    def __str__(self):
        return f"recover({self.prob:g})" if self.kind == "recover" else self.kind


@dataclass(frozen=True)
class PoolRule:
    kind: str = "vanilla"  # vanilla | bpa | recover
    temperature: float = 10.0
    prob: float = 0.0

    def __post_init__(self):
        if self.kind not in ("vanilla", "bpa", "recover"):
            raise PolicyError(f"unknown pool rule {self.kind!r}")
        if self.temperature < 0:
            raise ParameterError(f"temperature must be >= 0, got {self.temperature}")
        _check_prob(self.prob, "recover probability")

    def __str__(self):
        if self.kind == "bpa":
            return f"bpa(t={self.temperature:g})"
        return f"recover({self.prob:g})" if self.kind == "recover" else self.kind


@dataclass(frozen=True)
class ResidualRule:
    kind: str = "vanilla"  # vanilla | sgm | linbp
    gamma: float = 0.5

    def __post_init__(self):
        if self.kind not in ("vanilla", "sgm", "linbp"):
            raise PolicyError(f"unknown residual rule {self.kind!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ParameterError(f"gamma must lie in (0, 1], got {self.gamma}")

    def __str__(self):
        return f"sgm(gamma={self.gamma:g})" if self.kind == "sgm" else self.kind


@dataclass(frozen=True)
class GradMask:
    boundary: int  # layer index; the gradient w.r.t. that layer's input is masked
    prob: float

    def __post_init__(self):
        _check_prob(self.prob, "mask probability")


@dataclass(frozen=True)
class BackwardPolicy:
    """Which backward rule every non-linear layer uses.

    ``ghost_lambda`` is the one forward-side knob: when set, forward perturbs
    intermediate features multiplicatively (Ghost networks).
    """

    relu: ReluRule = field(default_factory=ReluRule)
    relu_start: int = 0
    pool: PoolRule = field(default_factory=PoolRule)
    residual: ResidualRule = field(default_factory=ResidualRule)
    mask: GradMask | None = None
    ghost_lambda: float | None = None

    def __post_init__(self):
        if self.relu_start < 0:
            raise PolicyError(f"relu_start must be >= 0, got {self.relu_start}")
        if self.ghost_lambda is not None and not 0.0 <= self.ghost_lambda < 1.0:
            raise ParameterError(f"ghost lambda must lie in [0, 1), got {self.ghost_lambda}")

    def relu_rule_for(self, ordinal: int) -> ReluRule:
        return self.relu if ordinal >= self.relu_start else VANILLA_RELU

    def describe(self) -> str:
        parts = [
            f"relu={self.relu}@{self.relu_start}",
            f"pool={self.pool}",
            f"residual={self.residual}",
        ]
        if self.mask is not None:
            parts.append(f"mask={self.mask.prob:g}@{self.mask.boundary}")
        if self.ghost_lambda is not None:
            parts.append(f"ghost={self.ghost_lambda:g}")
        return " ".join(parts)


VANILLA_RELU = ReluRule()
VANILLA = BackwardPolicy()


# ---------------------------------------------------------------------------
# ReLU


def sigmoid(z: Tensor) -> Tensor:
    half = z.dtype.type(0.5)
    return half * (1 + np.tanh(half * z))


def silu_derivative(z: Tensor) -> Tensor:
    s = sigmoid(z)
    return s * (1 + z * (1 - s))


def relu_derivative(rule: ReluRule, z: Tensor, rng=None) -> Tensor:
    one, zero = z.dtype.type(1), z.dtype.type(0)
    if rule.kind == "vanilla":
        return np.where(z > 0, one, zero)
    if rule.kind == "linbp":
        return np.ones_like(z)
    if rule.kind == "bpa":
        return silu_derivative(z)
    flip = rngmod.uniform(rng, z.shape) < rule.prob
    return np.where((z > 0) | flip, one, zero)


def relu_backward(rule: ReluRule, z_in: Tensor, upstream: Tensor, rng=None) -> Tensor:
    if z_in.shape != upstream.shape:
        raise ShapeError(f"ReLU input {z_in.shape} and upstream {upstream.shape} differ")
    if rule.kind == "linbp":
        return upstream.copy()
    return upstream * relu_derivative(rule, z_in, rng)


# ---------------------------------------------------------------------------
# max-pooling


def softmax_window_weights(z_in: Tensor, spec: WindowSpec, temperature: float) -> Tensor:
    """Per-window softmax(t * z) over the window's real (non-padding) positions.

    Returns (N, C, Ho, Wo, kh, kw); padding positions carry weight 0.
    """
    win = windows(z_in, spec, pad_value=-np.inf)
    valid = window_valid_mask(z_in.shape[2:], spec)
    top = win.max(axis=(-2, -1), keepdims=True)
    shifted = np.where(valid, win - top, 0)
    e = np.where(valid, np.exp(z_in.dtype.type(temperature) * shifted), 0).astype(z_in.dtype)
    return e / e.sum(axis=(-2, -1), keepdims=True)


def _argmax_onehot(arg: np.ndarray, in_hw: tuple[int, int], spec: WindowSpec) -> np.ndarray:
    h, w = in_hw
    ho, wo = arg.shape[2:]
    di = arg // w - (np.arange(ho)[:, None] * spec.stride_h - spec.pad_h)
    dj = arg % w - (np.arange(wo)[None, :] * spec.stride_w - spec.pad_w)
    local = di * spec.kernel_w + dj
    onehot = np.arange(spec.area) == local[..., None]
    return onehot.reshape(arg.shape + (spec.kernel_h, spec.kernel_w))


def maxpool_backward(
    rule: PoolRule, z_in: Tensor, spec: WindowSpec, arg: np.ndarray, upstream: Tensor, rng=None
) -> Tensor:
    ho, wo = spec.out_size(*z_in.shape[2:])
    if upstream.shape != z_in.shape[:2] + (ho, wo) or arg.shape != upstream.shape:
        raise ShapeError(
            f"upstream {upstream.shape} / argmax {arg.shape} do not match pooled shape "
            f"{z_in.shape[:2] + (ho, wo)}"
        )
    if rule.kind == "vanilla":
        return scatter_to_argmax(upstream, arg, z_in.shape)
    if rule.kind == "bpa":
        weights = softmax_window_weights(z_in, spec, rule.temperature)
        return fold_windows(weights * upstream[..., None, None], z_in.shape, spec)
    onehot = _argmax_onehot(arg, z_in.shape[2:], spec)
    valid = window_valid_mask(z_in.shape[2:], spec)
    flip = (rngmod.uniform(rng, onehot.shape) < rule.prob) & valid
    deriv = (onehot | flip).astype(z_in.dtype)
    return fold_windows(deriv * upstream[..., None, None], z_in.shape, spec)


# ---------------------------------------------------------------------------
# residual blocks


def residual_backward(
    rule: ResidualRule, branch_grad: Tensor, skip_grad: Tensor, branch_grad_vanilla: Tensor | None = None
) -> Tensor:
    """Combine the gradients reaching a residual block's input through its two paths.

    For ``linbp`` the branch gradient is rescaled per sample by
    ||skip + vanilla_branch|| / ||skip + branch||, where ``branch_grad`` was
    computed with the policy's (linearised) ReLUs and ``branch_grad_vanilla``
    with ordinary ones.
    """
    if branch_grad.shape != skip_grad.shape:
        raise ShapeError(f"branch {branch_grad.shape} and skip {skip_grad.shape} gradients differ")
    if rule.kind == "vanilla":
        return skip_grad + branch_grad
    if rule.kind == "sgm":
        return skip_grad + branch_grad.dtype.type(rule.gamma) * branch_grad
    if branch_grad_vanilla is None:
        raise PolicyError("linbp residual rescaling needs the vanilla branch gradient")
    axes = tuple(range(1, branch_grad.ndim))
    target = np.sqrt(np.square(skip_grad + branch_grad_vanilla).sum(axis=axes, keepdims=True))
    actual = np.sqrt(np.square(skip_grad + branch_grad).sum(axis=axes, keepdims=True))
    scale = np.where(actual > 0, target / np.where(actual > 0, actual, 1), 1).astype(branch_grad.dtype)
    return skip_grad + scale * branch_grad


def grad_mask(grad: Tensor, prob: float, rng) -> Tensor:
    """Zero each element independently with probability ``prob``; survivors are not rescaled."""
    _check_prob(prob, "mask probability")
    keep = rngmod.uniform(rng, grad.shape) >= prob
    return grad * keep.astype(grad.dtype)
