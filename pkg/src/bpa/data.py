"""CIFAR-10 binary batches, plus a synthetic stand-in written in the same format.

Each record is 3073 bytes: one label byte followed by 1024 red, 1024 green and
1024 blue pixel bytes in row-major order. Pixels are scaled to [0, 1].
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

RECORD = 3073
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")
ENV_DIR = "BPA_CIFAR10_DIR"


class DatasetError(RuntimeError):
    pass


def resolve_root(root=None) -> Path:
    """The directory holding the .bin batches: ``root``, or $BPA_CIFAR10_DIR.

    A ``cifar-10-batches-bin`` subdirectory (the layout of the official
    tarball) is accepted too.
    """
    if root is None:
        root = os.environ.get(ENV_DIR)
        if not root:
            raise DatasetError(f"no dataset directory given and ${ENV_DIR} is not set")
    p = Path(root)
    if not (p / TEST_FILE).exists() and (p / "cifar-10-batches-bin" / TEST_FILE).exists():
        p = p / "cifar-10-batches-bin"
    return p


def read_batch(path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD:
        raise DatasetError(f"{path}: {raw.size} bytes is not a whole number of {RECORD}-byte records")
    rec = raw.reshape(-1, RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{path}: label {labels.max()} out of range")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return x, labels


def load_cifar10(root=None, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    base = resolve_root(root)
    if split == "train":
        files = TRAIN_FILES
    elif split == "test":
        files = (TEST_FILE,)
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    missing = [f for f in files if not (base / f).exists()]
    if missing:
        raise DatasetError(f"{base}: missing {', '.join(missing)}")
    parts = [read_batch(base / f) for f in files]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def write_batch(path, x: np.ndarray, y: np.ndarray) -> None:
    """Write images in [0, 1] (N, 3, 32, 32) as a CIFAR-10 binary batch."""
    pix = np.clip(np.rint(np.asarray(x) * 255), 0, 255).astype(np.uint8).reshape(len(x), -1)
    rec = np.concatenate([np.asarray(y, dtype=np.uint8)[:, None], pix], axis=1)
    rec.tofile(path)


# ---------------------------------------------------------------------------
# synthetic stand-in


def _class_prototypes(rng: np.random.Generator, classes: int):
    """Classes come in pairs that share coarse appearance (colors, a low-frequency
    grating, a blob) and differ only in a faint stripe texture, so telling siblings
    apart needs small-amplitude detail. That keeps the learned decision
    boundaries close to the data, as with natural images."""
    families = [
        dict(
            colors=rng.uniform(0.1, 0.9, size=(2, 3)),
            freq=rng.uniform(1.5, 3.0),
            angle=rng.uniform(0, np.pi),
            blob=rng.uniform(8, 24, size=2),
            radius=rng.uniform(5, 10),
        )
        for _ in range((classes + 1) // 2)
    ]
    return [dict(families[c // 2], texture=(0.0, np.pi / 2)[c % 2]) for c in range(classes)]


def _render(proto, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    angle = proto["angle"] + rng.normal(0, 0.15)
    freq = proto["freq"] * rng.uniform(0.85, 1.15)
    u = np.cos(angle) * xx + np.sin(angle) * yy
    grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u / 32 + rng.uniform(0, 2 * np.pi))
    cy, cx = proto["blob"] + rng.normal(0, 3, size=2)
    r = proto["radius"] * rng.uniform(0.7, 1.3)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    a, b = proto["colors"] + rng.normal(0, 0.08, size=(2, 3))
    img = a[:, None, None] * grating + b[:, None, None] * blob
    # clutter: a random low-frequency grating of random color
    angle2 = rng.uniform(0, np.pi)
    clutter = np.sin(2 * np.pi * rng.uniform(1, 4) * (np.cos(angle2) * xx + np.sin(angle2) * yy) / 32)
    img = img + 0.25 * rng.uniform(-1, 1, size=3)[:, None, None] * clutter
    img = img * rng.uniform(0.75, 1.25) + rng.uniform(-0.1, 0.1)
    # the class-specific fine texture: stripes of period 8 px, vertical or
    # horizontal (both survive a mirror flip), random phase
    angle3 = proto["texture"] + rng.normal(0, 0.05)
    v = np.cos(angle3) * xx + np.sin(angle3) * yy
    img = img + 0.10 * np.sin(2 * np.pi * v / 8 + rng.uniform(0, 2 * np.pi))
    img = img + rng.normal(0, 0.03, size=img.shape)
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    return np.clip(img, 0, 1)


def synthesize(n: int, seed: int, classes: int = 10, proto_seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Procedural 32x32 RGB images: colored gratings and blobs with geometric and
    photometric jitter, random clutter and a faint class texture. Learnable by
    small CNNs but not linearly trivial. ``proto_seed`` fixes the class
    definitions; ``seed`` the individual draws."""
    protos = _class_prototypes(np.random.default_rng(proto_seed), classes)
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    rng.shuffle(y)
    x = np.stack([_render(protos[c], rng) for c in y]).astype(np.float32)
    return x, y.astype(np.int64)


def write_synthetic(root, n_train: int = 10000, n_test: int = 2000, seed: int = 0) -> Path:
    """Write a synthetic dataset in CIFAR-10 binary layout under ``root``."""
    base = Path(root)
    base.mkdir(parents=True, exist_ok=True)
    x, y = synthesize(n_train, seed=seed + 1, proto_seed=seed)
    for i, part in enumerate(np.array_split(np.arange(n_train), len(TRAIN_FILES))):
        write_batch(base / TRAIN_FILES[i], x[part], y[part])
    xt, yt = synthesize(n_test, seed=seed + 2, proto_seed=seed)
    write_batch(base / TEST_FILE, xt, yt)
    (base / "batches.meta.txt").write_text("\n".join(CLASSES) + "\n")
    (base / "SYNTHETIC").write_text(f"synthetic stand-in, seed={seed}, n_train={n_train}, n_test={n_test}\n")
    return base


def is_synthetic(root=None) -> bool:
    return (resolve_root(root) / "SYNTHETIC").exists()
