"""Shared oracles for the test-suite: random small nets and finite differences."""
import numpy as np

from bpa import graph
from bpa.models import ModelDef, _Builder


def random_net(seed: int, channels: int = 2, hw: int = 8, classes: int = 4) -> ModelDef:
    """A small random mix of conv / BN / ReLU / pools / residual / concat / linear."""
    rng = np.random.default_rng(seed)
    b = _Builder(channels, hw)
    b.stage()
    b.conv(int(rng.integers(3, 6)), 3, bn=bool(rng.integers(2)), bias=True)
    for _ in range(int(rng.integers(2, 5))):
        kind = rng.choice(["conv", "residual", "concat", "maxpool", "avgpool"])
        if kind == "conv":
            b.conv(int(rng.integers(3, 6)), int(rng.choice([1, 3])), bn=bool(rng.integers(2)), bias=True)
        elif kind == "residual":
            width = b.c if rng.integers(2) else b.c + 2
            stride = 2 if b.hw >= 4 and rng.integers(2) else 1

            def body(x, width=width, stride=stride):
                x.conv(width, 3, stride, bias=True)
                x.conv(width, 3, relu=False, bias=True)

            b.residual(body, width, stride)
        elif kind == "concat":
            def unit(x):
                x.relu()
                x.conv(2, 3, bn=False, relu=False, bias=True)

            b.dense(unit)
        elif kind == "maxpool" and b.hw >= 4:
            k, s, p = [(2, 2, 0), (3, 2, 1), (3, 1, 1), (2, 1, 0)][int(rng.integers(4))]
            b.maxpool(k, s, p)
        elif kind == "avgpool" and b.hw >= 4:
            b.avgpool(2)
    b.head(classes, hidden=int(rng.integers(4, 9)) if rng.integers(2) else None)
    return b.finish(f"random-{seed}", classes)


def random_weights(model: ModelDef, seed: int, dtype=np.float64) -> dict:
    rng = np.random.default_rng(seed + 1000)
    out = {}
    for name, shape in sorted(model.param_shapes.items()):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            w = rng.normal(0, np.sqrt(2.0 / fan_in), shape)
        elif name.endswith(".var"):
            w = rng.uniform(0.5, 2.0, shape)
        elif name.endswith(".scale"):
            w = rng.uniform(0.5, 1.5, shape)
        else:
            w = rng.normal(0, 0.1, shape)
        out[name] = w.astype(dtype)
    return out


def loss_fn(model, weights, labels):
    def f(x):
        tape = graph.forward(model, weights, x)
        return graph.loss_values(tape.logits, graph.CrossEntropy(labels)).sum()

    return f


def activation_pattern(model, weights, x) -> tuple:
    """ReLU signs and max-pool argmaxes: the piece of the piecewise-smooth net x falls in."""
    tape = graph.forward(model, weights, x)
    parts = []
    for e in tape.entries:
        if isinstance(e.layer, graph.ReLU):
            parts.append(e.input > 0)
        elif isinstance(e.layer, graph.MaxPool):
            parts.append(e.aux["arg"])
    return parts


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def central_diff(f, x: np.ndarray, h: float = 1e-3, pattern=None):
    """Central differences of scalar ``f`` at ``x``.

    With ``pattern`` (a callable like :func:`activation_pattern` bound to a
    model), also returns a mask that is False where the +-h stencil crosses a
    ReLU kink or an argmax switch, where the derivative is not defined by the
    difference quotient.
    """
    g = np.zeros_like(x)
    smooth = np.ones(x.shape, dtype=bool)
    flat, gf, sf = x.reshape(-1), g.reshape(-1), smooth.reshape(-1)
    base = pattern(x) if pattern else None
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        if pattern:
            sf[i] = _same_pattern(base, pattern(x))
        flat[i] = old - h
        down = f(x)
        if pattern:
            sf[i] &= _same_pattern(base, pattern(x))
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return (g, smooth) if pattern else g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6, where=None) -> float:
    sel = np.abs(analytic) > floor
    if where is not None:
        sel &= where
    if not sel.any():
        return 0.0
    a, n = analytic[sel], numeric[sel]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))


def brute_maxpool(x: np.ndarray, k: int, s: int, p: int = 0):
    """Loop-per-window reference: (maxima, flat first-argmax indices)."""
    n, c, h, w = x.shape
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    out = np.zeros((n, c, ho, wo), x.dtype)
    arg = np.zeros((n, c, ho, wo), np.int64)
    for a in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best, where = -np.inf, -1
                    for di in range(k):
                        for dj in range(k):
                            r, q = i * s - p + di, j * s - p + dj
                            if 0 <= r < h and 0 <= q < w and x[a, ch, r, q] > best:
                                best, where = x[a, ch, r, q], r * w + q
                    out[a, ch, i, j], arg[a, ch, i, j] = best, where
    return out, arg


def brute_bpa_pool(x: np.ndarray, upstream: np.ndarray, k: int, s: int, t: float, p: int = 0) -> np.ndarray:
    """Loop over every window, softmax(t * window) over real positions, accumulate shares."""
    n, c, h, w = x.shape
    ho, wo = upstream.shape[2:]
    g = np.zeros_like(x, dtype=np.float64)
    for a in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    cells = [
                        (r, q)
                        for r in range(i * s - p, i * s - p + k)
                        for q in range(j * s - p, j * s - p + k)
                        if 0 <= r < h and 0 <= q < w
                    ]
                    vals = np.array([x[a, ch, r, q] for r, q in cells], dtype=np.float64)
                    e = np.exp(t * (vals - vals.max()))
                    e /= e.sum()
                    for (r, q), share in zip(cells, e):
                        g[a, ch, r, q] += share * upstream[a, ch, i, j]
    return g


def naive_conv(x, w, b, stride=1, pad=0, groups=1):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), np.float64)
    og = o // groups
    for a in range(n):
        for oc in range(o):
            g0 = (oc // og) * cg
            for i in range(ho):
                for j in range(wo):
                    patch = xp[a, g0 : g0 + cg, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[a, oc, i, j] = np.sum(patch * w[oc]) + (b[oc] if b is not None else 0)
    return out


def make_tiny_world(root) -> dict:
    """Synthetic CIFAR-format data plus three briefly trained models under ``root``."""
    from pathlib import Path

    from bpa.data import load_cifar10, write_synthetic
    from bpa.models import build
    from bpa.train import TrainConfig, train
    from bpa.weights import save_weights

    root = Path(root)
    data = write_synthetic(root / "data", n_train=1000, n_test=300, seed=0)
    train_set = load_cifar10(data, "train")
    test_set = load_cifar10(data, "test")
    models = root / "models"
    models.mkdir(exist_ok=True)
    for arch in ("resnet-small", "vgg-small", "plaincnn"):
        cfg = TrainConfig(epochs=3, batch_size=50, lr=0.05, augment=False, seed=0)
        save_weights(train(build(arch), train_set, test_set, cfg), models / f"{arch}.bpaw")
    return {"data": str(data), "models": str(models)}
