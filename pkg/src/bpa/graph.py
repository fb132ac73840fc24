"""Tape-based forward execution and policy-driven reverse replay.

A network is a flat list of layers. Residual and dense-concat blocks are
delimited by explicit Begin/End markers: Begin stashes its input, End combines
the stash with the branch output. Forward is always the standard computation;
the :class:`~bpa.rules.BackwardPolicy` only changes how ``backward`` treats
ReLU, max-pool and residual-block layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence, Union

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .rules import (
    VANILLA,
    BackwardPolicy,
    PolicyError,
    grad_mask,
    maxpool_backward,
    relu_backward,
    residual_backward,
)
from .tensor import ShapeError, Tensor, WindowSpec


# ---------------------------------------------------------------------------
# layer kinds


@dataclass(frozen=True)
class Conv:
    weight: str
    bias: str | None
    spec: WindowSpec
    groups: int = 1


@dataclass(frozen=True)
class Linear:
    weight: str  # (out, in)
    bias: str | None


@dataclass(frozen=True)
class ReLU:
    index: int  # ordinal among ReLU layers, forward order


@dataclass(frozen=True)
class MaxPool:
    spec: WindowSpec
    index: int  # ordinal among max-pool layers


@dataclass(frozen=True)
class AvgPool:
    spec: WindowSpec


@dataclass(frozen=True)
class BatchNorm:
    scale: str
    shift: str
    mean: str
    var: str
    eps: float = 1e-5


@dataclass(frozen=True)
class ResidualBegin:
    block: int


@dataclass(frozen=True)
class ResidualEnd:
    block: int
    shortcut: tuple = ()  # layers applied to the stashed input, e.g. 1x1 Conv + BatchNorm


@dataclass(frozen=True)
class ConcatBegin:
    block: int


@dataclass(frozen=True)
class ConcatEnd:
    block: int


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[
    Conv, Linear, ReLU, MaxPool, AvgPool, BatchNorm, ResidualBegin, ResidualEnd, ConcatBegin, ConcatEnd, Flatten
]

_BEGIN = (ResidualBegin, ConcatBegin)
_END = {ResidualEnd: ResidualBegin, ConcatEnd: ConcatBegin}


class GraphError(ValueError):
    pass


def block_pairs(layers: Sequence[Layer]) -> dict[int, int]:
    """Map each End index to its matching Begin index, checking nesting."""
    stack: list[int] = []
    pairs = {}
    for i, layer in enumerate(layers):
        if isinstance(layer, _BEGIN):
            stack.append(i)
        elif type(layer) in _END:
            if not stack:
                raise GraphError(f"layer {i}: {layer} closes no open block")
            b = stack.pop()
            opener = layers[b]
            if not isinstance(opener, _END[type(layer)]) or opener.block != layer.block:
                raise GraphError(f"layer {i}: {layer} does not match {opener} at {b}")
            pairs[i] = b
    if stack:
        raise GraphError(f"unclosed blocks at layers {stack}")
    return pairs


def ghost_sites(layers: Sequence[Layer]) -> set[int]:
    """Layers whose output Ghost perturbs: residual branch outputs, or every
    convolution when the network has no residual blocks."""
    ends = {i for i, l in enumerate(layers) if isinstance(l, ResidualEnd)}
    if ends:
        return ends
    return {i for i, l in enumerate(layers) if isinstance(l, Conv)}


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeEntry:
    layer: Layer
    input: Tensor
    output: Tensor
    aux: dict = field(default_factory=dict)


@dataclass
class Tape:
    entries: list[TapeEntry]
    logits: Tensor
    pairs: dict[int, int]
    weights: Mapping[str, Tensor]
    training: bool = False


def _param(weights: Mapping[str, Tensor], name: str) -> Tensor:
    try:
        return weights[name]
    except KeyError:
        raise GraphError(f"missing weight id {name!r}") from None


def _bn_forward(layer: BatchNorm, x: Tensor, weights, training: bool) -> tuple[Tensor, dict]:
    scale, shift = _param(weights, layer.scale), _param(weights, layer.shift)
    if x.shape[1] != scale.shape[0]:
        raise ShapeError(f"batch norm over {scale.shape[0]} channels got input {x.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        axes = (0,) + tuple(range(2, x.ndim))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = _param(weights, layer.mean), _param(weights, layer.var)
    inv_std = (1.0 / np.sqrt(var + x.dtype.type(layer.eps))).astype(x.dtype)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * scale.reshape(bshape) + shift.reshape(bshape)
    aux = {"inv_std": inv_std}
    if training:
        aux.update(xhat=xhat, batch_mean=mean, batch_var=var)
    return out, aux


def _apply(layer: Layer, x: Tensor, weights, training: bool) -> tuple[Tensor, dict]:
    if isinstance(layer, Conv):
        b = _param(weights, layer.bias) if layer.bias else None
        return T.conv2d(x, _param(weights, layer.weight), b, layer.spec, layer.groups), {}
    if isinstance(layer, Linear):
        w = _param(weights, layer.weight)
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear layer expects (N, {w.shape[1]}), got {x.shape}")
        out = x @ w.T
        if layer.bias:
            out = out + _param(weights, layer.bias)
        return out, {}
    if isinstance(layer, ReLU):
        return np.maximum(x, 0), {}
    if isinstance(layer, MaxPool):
        out, arg = T.maxpool_forward(x, layer.spec)
        return out, {"arg": arg}
    if isinstance(layer, AvgPool):
        return T.avgpool_forward(x, layer.spec), {}
    if isinstance(layer, BatchNorm):
        return _bn_forward(layer, x, weights, training)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), {}
    raise GraphError(f"cannot apply {layer} directly")


def forward(
    model,
    weights: Mapping[str, Tensor],
    x: Tensor,
    ghost_lambda: float | None = None,
    rng: rngmod.RngLike = None,
    training: bool = False,
) -> Tape:
    """Run the network on ``x`` (N, C, H, W), recording what backward needs.

    With ``ghost_lambda`` set, every Ghost site's output (see :func:`ghost_sites`)
    is multiplied by a per-sample factor drawn from U[1 - lambda, 1 + lambda].
    """
    layers = model.layers
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"input {x.shape} does not match model input (N, {model.input_shape})")
    pairs = block_pairs(layers)
    sites = ghost_sites(layers) if ghost_lambda is not None else set()
    entries: list[TapeEntry] = []
    stash: list[Tensor] = []
    h = x
    for i, layer in enumerate(layers):
        aux: dict[str, Any] = {}
        if isinstance(layer, _BEGIN):
            stash.append(h)
            out = h
        elif isinstance(layer, ResidualEnd):
            skip = stash.pop()
            sub = []
            for s in layer.shortcut:
                s_out, s_aux = _apply(s, skip, weights, training)
                sub.append(TapeEntry(s, skip, s_out, s_aux))
                skip = s_out
            if skip.shape != h.shape:
                raise ShapeError(f"block {layer.block}: skip {skip.shape} vs branch {h.shape}")
            aux["shortcut"] = sub
            branch = h
            if i in sites:
                factor = _ghost_factor(ghost_lambda, rng, h)
                aux["factor"] = factor
                branch = h * factor
            out = skip + branch
        elif isinstance(layer, ConcatEnd):
            skip = stash.pop()
            aux["split"] = skip.shape[1]
            out = np.concatenate([skip, h], axis=1)
        else:
            out, aux = _apply(layer, h, weights, training)
            if i in sites:
                factor = _ghost_factor(ghost_lambda, rng, out)
                aux["factor"] = factor
                out = out * factor
        entries.append(TapeEntry(layer, h, out, aux))
        h = out
    if h.ndim != 2:
        raise ShapeError(f"network output must be (N, classes), got {h.shape}")
    return Tape(entries, h, pairs, weights, training)


def _ghost_factor(lam: float, rng, like: Tensor) -> Tensor:
    u = rngmod.uniform(rng, (like.shape[0],), 1.0 - lam, 1.0 + lam)
    return u.astype(like.dtype).reshape((-1,) + (1,) * (like.ndim - 1))


# ---------------------------------------------------------------------------
# losses


@dataclass
class CrossEntropy:
    labels: Any


@dataclass
class NegTargetLogit:
    targets: Any


LossKind = Union[CrossEntropy, NegTargetLogit]


def _labels(loss: LossKind, logits: Tensor) -> np.ndarray:
    raw = loss.labels if isinstance(loss, CrossEntropy) else loss.targets
    lab = np.broadcast_to(np.asarray(raw, dtype=np.int64), (logits.shape[0],))
    if lab.min() < 0 or lab.max() >= logits.shape[1]:
        raise ValueError(f"label out of range [0, {logits.shape[1]}): {lab}")
    return lab


def loss_values(logits: Tensor, loss: LossKind) -> np.ndarray:
    """Per-sample loss, float64."""
    lab = _labels(loss, logits)
    z = logits.astype(np.float64)
    rows = np.arange(z.shape[0])
    if isinstance(loss, NegTargetLogit):
        return -z[rows, lab]
    top = z.max(axis=1)
    lse = top + np.log(np.exp(z - top[:, None]).sum(axis=1))
    return lse - z[rows, lab]


def loss_and_grad(tape_or_logits, loss: LossKind) -> tuple[float, Tensor]:
    """Summed loss over the batch and its gradient w.r.t. the logits.

    Summing keeps each sample's gradient independent of the rest of the batch.
    """
    logits = tape_or_logits.logits if isinstance(tape_or_logits, Tape) else tape_or_logits
    lab = _labels(loss, logits)
    rows = np.arange(logits.shape[0])
    values = loss_values(logits, loss)
    if isinstance(loss, NegTargetLogit):
        d = np.zeros_like(logits)
        d[rows, lab] = -1
    else:
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        d = e / e.sum(axis=1, keepdims=True)
        d[rows, lab] -= 1
    return float(values.sum()), d


# ---------------------------------------------------------------------------
# backward


def _accumulate(param_grads, name, g):
    if param_grads is None or name is None:
        return
    if name in param_grads:
        param_grads[name] = param_grads[name] + g
    else:
        param_grads[name] = g


def _bn_backward(entry: TapeEntry, g: Tensor, weights, param_grads) -> Tensor:
    layer = entry.layer
    scale = _param(weights, layer.scale)
    x = entry.input
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    inv_std = entry.aux["inv_std"]
    if "xhat" in entry.aux:
        xhat = entry.aux["xhat"]
    else:
        xhat = (x - _param(weights, layer.mean).reshape(bshape)) * inv_std.reshape(bshape)
    if param_grads is not None:
        _accumulate(param_grads, layer.scale, (g * xhat).sum(axis=axes))
        _accumulate(param_grads, layer.shift, g.sum(axis=axes))
    dxhat = g * scale.reshape(bshape)
    if "xhat" not in entry.aux:
        return dxhat * inv_std.reshape(bshape)
    mean_d = dxhat.mean(axis=axes, keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
    return (dxhat - mean_d - xhat * mean_dx) * inv_std.reshape(bshape)


def _plain_backward(entry: TapeEntry, g: Tensor, weights, param_grads) -> Tensor:
    """Exact derivative of a parameterised or linear layer."""
    layer = entry.layer
    if isinstance(layer, Conv):
        w = _param(weights, layer.weight)
        if param_grads is not None:
            _accumulate(param_grads, layer.weight, T.conv2d_grad_weight(g, entry.input, layer.spec, layer.groups))
            _accumulate(param_grads, layer.bias, g.sum(axis=(0, 2, 3)))
        return T.conv2d_grad_input(g, w, entry.input.shape, layer.spec, layer.groups)
    if isinstance(layer, Linear):
        w = _param(weights, layer.weight)
        if param_grads is not None:
            _accumulate(param_grads, layer.weight, g.T @ entry.input)
            _accumulate(param_grads, layer.bias, g.sum(axis=0))
        return g @ w
    if isinstance(layer, BatchNorm):
        return _bn_backward(entry, g, weights, param_grads)
    if isinstance(layer, AvgPool):
        return T.avgpool_backward(g, entry.input.shape, layer.spec)
    if isinstance(layer, Flatten):
        return g.reshape(entry.input.shape)
    raise GraphError(f"no exact backward for {layer}")


class _Replay:
    def __init__(self, tape: Tape, policy: BackwardPolicy, rng, param_grads, record):
        self.tape = tape
        self.policy = policy
        self.rng = rng
        self.param_grads = param_grads
        self.record = record

    def _mask(self, i: int, g: Tensor) -> Tensor:
        m = self.policy.mask
        if m is not None and m.boundary == i:
            return grad_mask(g, m.prob, self.rng)
        return g

    def _note(self, i: int, g: Tensor) -> None:
        if self.record is not None:
            self.record[i] = g

    def run(self, lo: int, hi: int, g: Tensor) -> Tensor:
        """Propagate ``g`` (gradient at the output of layer hi-1) to the input of layer lo."""
        entries = self.tape.entries
        weights = self.tape.weights
        i = hi - 1
        while i >= lo:
            entry = entries[i]
            layer = entry.layer
            if isinstance(layer, ResidualEnd):
                b = self.tape.pairs[i]
                g = self._residual(i, b, entry, g)
                self._note(b, g)
                g = self._mask(b, g)
                i = b - 1
                continue
            if isinstance(layer, ConcatEnd):
                b = self.tape.pairs[i]
                k = entry.aux["split"]
                self._note(i, g[:, k:])
                g_branch = self.run(b + 1, i, g[:, k:])
                g = g[:, :k] + g_branch
                self._note(b, g)
                g = self._mask(b, g)
                i = b - 1
                continue
            if "factor" in entry.aux:
                g = g * entry.aux["factor"]
            if isinstance(layer, ReLU):
                g = relu_backward(self.policy.relu_rule_for(layer.index), entry.input, g, self.rng)
            elif isinstance(layer, MaxPool):
                g = maxpool_backward(self.policy.pool, entry.input, layer.spec, entry.aux["arg"], g, self.rng)
            else:
                g = _plain_backward(entry, g, weights, self.param_grads)
            self._note(i, g)
            g = self._mask(i, g)
            i -= 1
        return g

    def _residual(self, i: int, b: int, entry: TapeEntry, g: Tensor) -> Tensor:
        g_skip = g
        for sub in reversed(entry.aux["shortcut"]):
            g_skip = _plain_backward(sub, g_skip, self.tape.weights, self.param_grads)
        g_branch_out = g * entry.aux["factor"] if "factor" in entry.aux else g
        self._note(i, g_branch_out)
        g_branch = self.run(b + 1, i, g_branch_out)
        rule = self.policy.residual
        vanilla_branch = None
        if rule.kind == "linbp":
            shadow = _Replay(self.tape, VANILLA, None, None, None)
            vanilla_branch = shadow.run(b + 1, i, g_branch_out)
        return residual_backward(rule, g_branch, g_skip, vanilla_branch)


def backward(
    tape: Tape,
    policy: BackwardPolicy,
    dlogits: Tensor,
    rng: rngmod.RngLike = None,
    param_grads: dict | None = None,
    record: dict | None = None,
) -> Tensor:
    """Gradient of the loss w.r.t. the network input under ``policy``.

    ``param_grads``, when given, accumulates exact weight gradients (only
    meaningful with the vanilla policy). ``record`` receives, per layer index,
    the gradient w.r.t. that layer's input.
    """
    if dlogits.shape != tape.logits.shape:
        raise ShapeError(f"dlogits {dlogits.shape} does not match logits {tape.logits.shape}")
    if policy.mask is not None and not 0 <= policy.mask.boundary < len(tape.entries):
        raise PolicyError(f"mask boundary {policy.mask.boundary} is not a layer of this network")
    replay = _Replay(tape, policy, rng, param_grads, record)
    return replay.run(0, len(tape.entries), dlogits)


def input_gradient(
    model,
    weights,
    policy: BackwardPolicy,
    x: Tensor,
    loss: LossKind,
    rng: rngmod.RngLike = None,
) -> tuple[Tensor, np.ndarray, Tensor]:
    """Forward (with the policy's Ghost setting) and backward in one call.

    Returns (gradient w.r.t. x, per-sample loss, logits).
    """
    tape = forward(model, weights, x, policy.ghost_lambda, rng)
    _, dlogits = loss_and_grad(tape, loss)
    g = backward(tape, policy, dlogits, rng)
    return g, loss_values(tape.logits, loss), tape.logits


def predict(model, weights, x: Tensor, batch: int = 250) -> np.ndarray:
    out = []
    for s in range(0, x.shape[0], batch):
        out.append(forward(model, weights, x[s : s + batch]).logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
