"""L-infinity attacks whose gradients come from a policy-driven backward pass.

Randomness is drawn from per-sample generators keyed by (seed, sample id), so a
sample's adversarial example never depends on which batch it was attacked in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph
from . import rng as rngmod
from . import tensor as T
from .graph import CrossEntropy, NegTargetLogit
from .rules import BackwardPolicy
from .tensor import DTYPE, WindowSpec

METHODS = ("fgsm", "ifgsm", "pgd", "mifgsm", "vmifgsm")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DimConfig:
    prob: float = 0.5
    canvas: int = 40  # resize to [32, canvas), pad into canvas x canvas, rescale to 32


@dataclass(frozen=True)
class TimConfig:
    size: int = 7
    sigma: float = 3.0


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pgd"
    epsilon: float = 8 / 255
    alpha: float = 1.6 / 255
    iters: int = 10
    mu: float = 1.0
    vmi_samples: int = 20
    vmi_beta: float = 1.5
    dim: DimConfig | None = None
    tim: TimConfig | None = None
    targeted: bool = False
    seed: int = 0
    random_init: bool | None = None  # None: on for PGD only

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")
        if self.method == "fgsm" and self.iters != 1:
            raise ConfigError("fgsm is a single-step attack; iters must be 1")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if self.vmi_samples < 1 or self.vmi_beta < 0:
            raise ConfigError("vmi_samples must be >= 1 and vmi_beta >= 0")
        if self.dim is not None and (not 0 <= self.dim.prob <= 1 or self.dim.canvas <= 32):
            raise ConfigError(f"bad DIM settings {self.dim}")
        if self.tim is not None and (self.tim.size % 2 == 0 or self.tim.sigma <= 0):
            raise ConfigError(f"bad TIM settings {self.tim}")

    @property
    def uses_random_init(self) -> bool:
        return self.method == "pgd" if self.random_init is None else self.random_init

    @classmethod
    def untargeted(cls, method="pgd", **kw) -> "AttackConfig":
        kw.setdefault("iters", 1 if method == "fgsm" else 10)
        return cls(method=method, **kw)

    @classmethod
    def targeted_default(cls, method="mifgsm", **kw) -> "AttackConfig":
        kw.setdefault("alpha", 1 / 255)
        kw.setdefault("iters", 300)
        return cls(method=method, targeted=True, **kw)


@dataclass
class AdvResult:
    adv: np.ndarray
    loss_trace: np.ndarray  # (iters, N) surrogate loss at the point each gradient was taken
    prediction: np.ndarray  # surrogate (vanilla forward) prediction on adv
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def make_loss(cfg: AttackConfig, labels, targets=None):
    if cfg.targeted:
        if targets is None:
            raise ConfigError("targeted attack needs target labels")
        return NegTargetLogit(np.asarray(targets))
    return CrossEntropy(np.asarray(labels))


def draw_targets(labels, ids, seed: int, classes: int = 10) -> np.ndarray:
    """A uniformly drawn wrong label per sample, from (seed, id)."""
    out = []
    for y, i in zip(np.asarray(labels), np.asarray(ids)):
        r = np.random.default_rng([int(seed), int(i), 2])
        out.append((int(y) + 1 + int(r.integers(0, classes - 1))) % classes)
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# input diversity and translation smoothing


def dim_index_maps(cfg: DimConfig, rngs, hw: int = 32) -> np.ndarray:
    """Per-sample (N, hw, hw) pixel maps: identity, or resize-pad-rescale with prob."""
    ident = np.arange(hw * hw).reshape(hw, hw)
    back = T.resize_and_pad_index((cfg.canvas, cfg.canvas), (hw, hw), (hw, hw), (0, 0))
    maps = []
    for r in rngs:
        apply = r.random() < cfg.prob
        size = int(r.integers(hw, cfg.canvas))
        oh = int(r.integers(0, cfg.canvas - size + 1))
        ow = int(r.integers(0, cfg.canvas - size + 1))
        if not apply:
            maps.append(ident)
            continue
        onto = T.resize_and_pad_index((hw, hw), (size, size), (cfg.canvas, cfg.canvas), (oh, ow))
        maps.append(onto.ravel()[back])
    return np.stack(maps)


def tim_smooth(g: np.ndarray, cfg: TimConfig) -> np.ndarray:
    k = T.gaussian_kernel(cfg.size, cfg.sigma).astype(g.dtype)
    c = g.shape[1]
    w = np.broadcast_to(k, (c, 1) + k.shape).copy()
    return T.conv2d(g, w, None, WindowSpec.square(cfg.size, 1, cfg.size // 2), groups=c)


# ---------------------------------------------------------------------------
# attack loop


class _Grad:
    def __init__(self, model, weights, policy: BackwardPolicy, loss, cfg: AttackConfig):
        self.model = model
        self.weights = weights
        self.policy = policy
        self.loss = loss
        self.cfg = cfg

    def __call__(self, x: np.ndarray, rngs) -> tuple[np.ndarray, np.ndarray]:
        idx = None
        if self.cfg.dim is not None:
            idx = dim_index_maps(self.cfg.dim, rngs, x.shape[-1])
            x = T.gather_pixels(x, idx)
        g, losses, _ = graph.input_gradient(self.model, self.weights, self.policy, x, self.loss, rngs)
        if idx is not None:
            g = T.scatter_pixels(g, idx, x.shape[2:])
        if self.cfg.tim is not None:
            g = tim_smooth(g, self.cfg.tim)
        return g, losses


def _l1_normalise(g: np.ndarray) -> np.ndarray:
    n = T.l1_norm(g.reshape(len(g), -1), axis=1)
    n = np.where(n > 0, n, 1).astype(g.dtype)
    return g / T.per_sample(n)


def _project(adv: np.ndarray, x: np.ndarray, eps) -> np.ndarray:
    adv = np.minimum(np.maximum(adv, x - eps), x + eps)
    return T.clamp(adv, DTYPE(0), DTYPE(1))


def attack(
    model,
    weights,
    policy: BackwardPolicy,
    x: np.ndarray,
    cfg: AttackConfig,
    labels,
    targets=None,
    ids=None,
) -> AdvResult:
    """Craft adversarial examples for a batch ``x`` in [0, 1].

    ``ids`` are stable sample identifiers (e.g. test-set indices) used to key
    per-sample randomness; they default to 0..N-1.
    """
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.min(initial=0) < 0 or x.max(initial=0) > 1:
        raise ConfigError("inputs must lie in [0, 1]")
    n = len(x)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    rngs = rngmod.sample_rngs(cfg.seed, ids)
    aux = [np.random.default_rng([int(cfg.seed), int(i), 1]) for i in ids]
    loss = make_loss(cfg, labels, targets)
    grad = _Grad(model, weights, policy, loss, cfg)
    eps = DTYPE(cfg.epsilon)
    step = DTYPE(cfg.epsilon if cfg.method == "fgsm" else cfg.alpha)
    direction = DTYPE(-1 if cfg.targeted else 1)

    adv = x.copy()
    if cfg.uses_random_init:
        adv = _project(x + rngmod.uniform(rngs, x.shape, -cfg.epsilon, cfg.epsilon).astype(DTYPE), x, eps)
    momentum = np.zeros_like(x)
    variance = np.zeros_like(x)
    trace = []
    for _ in range(cfg.iters):
        g, losses = grad(adv, rngs)
        trace.append(losses)
        if cfg.method in ("mifgsm", "vmifgsm"):
            g_used = g + variance if cfg.method == "vmifgsm" else g
            momentum = DTYPE(cfg.mu) * momentum + _l1_normalise(g_used)
            if cfg.method == "vmifgsm":
                variance = _variance(grad, adv, g, cfg, aux)
            g = momentum
        adv = _project(adv + direction * step * T.sign(g), x, eps)
    pred = graph.predict(model, weights, adv)
    return AdvResult(adv, np.array(trace), pred, ids)


def _variance(grad: _Grad, adv: np.ndarray, g: np.ndarray, cfg: AttackConfig, rngs) -> np.ndarray:
    """mean_i(grad(adv + r_i) - g) with r_i ~ U[-beta*eps, beta*eps]; exactly 0 when
    every neighbour gradient equals g."""
    radius = cfg.vmi_beta * cfg.epsilon
    acc = np.zeros_like(adv)
    for _ in range(cfg.vmi_samples):
        r = rngmod.uniform(rngs, adv.shape, -radius, radius).astype(DTYPE)
        gi, _ = grad(adv + r, rngs)
        acc += gi - g
    return acc / DTYPE(cfg.vmi_samples)


# ---------------------------------------------------------------------------
# relevance


def relevance(model, weights, policy: BackwardPolicy, x: np.ndarray, loss, step: float = 1e-2, rng=None) -> np.ndarray:
    """Per-sample (J(x + step*g) - J(x)) / step, g the policy gradient, J the vanilla loss."""
    if step <= 0:
        raise ConfigError(f"step must be > 0, got {step}")
    x = np.asarray(x)
    g, _, _ = graph.input_gradient(model, weights, policy, x, loss, rng)
    j0 = graph.loss_values(graph.forward(model, weights, x).logits, loss)
    j1 = graph.loss_values(graph.forward(model, weights, x + x.dtype.type(step) * g).logits, loss)
    if not (np.isfinite(j0).all() and np.isfinite(j1).all()):
        raise ValueError("non-finite loss while measuring relevance")
    return (j1 - j0) / step

