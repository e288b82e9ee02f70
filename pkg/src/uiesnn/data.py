"""Paired-image ingestion, splitting and deterministic batching."""

from __future__ import annotations

import os
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, IngestionError

DATA_ROOT_ENV = "UIESNN_DATA_ROOT"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class ImagePair:
    """Raw and reference image, each ``(1, 3, H, W)`` float32 in [0, 1]."""

    raw: np.ndarray
    reference: np.ndarray
    paths: tuple = ("", "")

    @property
    def name(self):
        return Path(self.paths[0]).name


@dataclass
class DatasetManifest:
    pairs: list
    seed: int = 0
    train_fraction: float = 0.9
    val_fraction: float = 0.1
    target: tuple = (512, 512)


def load_image(path, target=None):
    """Decode ``path`` as RGB, bilinearly resize to ``target`` (H, W), scale to [0, 1].

    Returns a ``(1, 3, H, W)`` float32 array.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError("image file not found", path)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if target is not None and img.size != (target[1], target[0]):
                img = img.resize((target[1], target[0]), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot decode image ({exc})", path) from exc
    if target is not None and arr.shape[:2] != tuple(target):
        raise IngestionError(f"resized to {arr.shape[:2]} instead of {tuple(target)}", path)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]


def load_pair(raw_path, ref_path, target):
    raw = load_image(raw_path, target)
    ref = load_image(ref_path, target)
    if raw.shape != ref.shape:
        raise IngestionError(f"raw {raw.shape} and reference {ref.shape} differ", ref_path)
    return ImagePair(raw, ref, (str(raw_path), str(ref_path)))


def load_pairs(path_pairs, target, workers=1):
    """Load many pairs, optionally on a thread pool; output order matches input order."""
    path_pairs = list(path_pairs)
    if workers <= 1:
        return [load_pair(r, f, target) for r, f in path_pairs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda p: load_pair(p[0], p[1], target), path_pairs))


def save_png(image, path):
    """Clamp to [0, 1], quantize to 8 bits and write an RGB PNG. Accepts (3,H,W) or (1,3,H,W)."""
    arr = np.asarray(image)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"save_png takes a single image, got batch of {arr.shape[0]}")
        arr = arr[0]
    arr = np.clip(arr, 0.0, 1.0).transpose(1, 2, 0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), "RGB").save(path, format="PNG")


def resolve_root(root=None):
    return Path(root or os.environ.get(DATA_ROOT_ENV, "."))


def read_manifest(path, root=None):
    """Read tab-separated ``raw<TAB>reference`` lines; relative paths resolve against ``root``."""
    base = resolve_root(root)
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected two tab-separated paths")
            pairs.append(tuple(str(base / p) for p in parts))
    return pairs


def scan_pairs(root):
    """Pair ``root/raw/<name>`` with ``root/ref/<name>`` by filename."""
    root = Path(root)
    raw_dir, ref_dir = root / "raw", root / "ref"
    if not raw_dir.is_dir() or not ref_dir.is_dir():
        raise ConfigError(f"{root} must contain raw/ and ref/ directories")
    refs = {p.name for p in ref_dir.iterdir()}
    return [(str(p), str(ref_dir / p.name)) for p in sorted(raw_dir.iterdir())
            if p.suffix.lower() in IMAGE_SUFFIXES and p.name in refs]


def list_images(directory):
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def split(manifest, seed=None):
    """Shuffle by seed, then cut into disjoint (train, val) lists."""
    items = list(manifest.pairs)
    if not items:
        raise ConfigError("manifest is empty")
    if abs(manifest.train_fraction + manifest.val_fraction - 1.0) > 1e-9 or manifest.train_fraction < 0 \
            or manifest.val_fraction < 0:
        raise ConfigError("train and val fractions must be non-negative and sum to 1")
    rng = np.random.default_rng(manifest.seed if seed is None else seed)
    order = rng.permutation(len(items))
    n_train = int(round(len(items) * manifest.train_fraction))
    return [items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]]


def stack_pairs(pairs):
    raw = np.concatenate([p.raw for p in pairs], axis=0)
    ref = np.concatenate([p.reference for p in pairs], axis=0)
    return raw, ref


def batches(pairs, batch_size, epoch_seed=None):
    """Yield ``(raw, reference)`` batches; shuffled per epoch when ``epoch_seed`` is given.

    The last batch may be smaller than ``batch_size``.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    pairs = list(pairs)
    order = np.arange(len(pairs))
    if epoch_seed is not None:
        order = np.random.default_rng(epoch_seed).permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        yield stack_pairs([pairs[i] for i in order[start:start + batch_size]])


_DONE = object()


def prefetch(iterable, size=2):
    """Iterate ``iterable`` on a background thread, at most ``size`` items ahead of the consumer.

    Order is preserved and exceptions raised by the producer are re-raised in
    the consumer.
    """
    if size < 1:
        raise ConfigError(f"prefetch size must be >= 1, got {size}")
    q = queue.Queue(maxsize=size)
    stop = threading.Event()

    def produce():
        try:
            for item in iterable:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_DONE)
        except BaseException as exc:  # handed to the consumer
            q.put(exc)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def synthetic_pairs(count, size=64, seed=0):
    """Procedural clean scenes and underwater-degraded copies of them.

    Clean images are smooth color fields with a few bright blobs and edges;
    the raw copy applies per-channel attenuation (red lost first), a
    blue-green veiling light and mild blur, i.e. the usual image formation
    model ``I = J * t + B * (1 - t)``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    out = []
    for idx in range(count):
        base = rng.uniform(0.2, 0.8, size=(3, 1, 1))
        gx, gy = rng.uniform(-0.3, 0.3, size=(2, 3, 1, 1))
        clean = base + gx * xx + gy * yy
        for _ in range(3):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            radius = rng.uniform(0.08, 0.25)
            color = rng.uniform(0.0, 1.0, size=(3, 1, 1))
            mask = ((yy - cy) ** 2 + (xx - cx) ** 2) < radius ** 2
            clean = np.where(mask, 0.5 * clean + 0.5 * color, clean)
        y0 = rng.integers(size // 4, 3 * size // 4)
        clean[:, y0:y0 + max(size // 16, 1), :] *= rng.uniform(0.5, 0.9)
        clean = np.clip(clean, 0.0, 1.0)
        depth = rng.uniform(0.5, 1.5) * (0.4 + 0.6 * yy)
        atten = np.array([1.2, 0.45, 0.3]).reshape(3, 1, 1) * rng.uniform(0.8, 1.2)
        trans = np.exp(-atten * depth)
        veil = np.array([0.05, rng.uniform(0.35, 0.5), rng.uniform(0.45, 0.6)]).reshape(3, 1, 1)
        raw = clean * trans + veil * (1.0 - trans)
        raw = 0.25 * (np.roll(raw, 1, 1) + np.roll(raw, -1, 1) + np.roll(raw, 1, 2) + np.roll(raw, -1, 2)) * 0.5 \
            + 0.5 * raw
        out.append(ImagePair(np.clip(raw, 0, 1).astype(np.float32)[None], clean.astype(np.float32)[None],
                             (f"synthetic_{idx:04d}.png", f"synthetic_{idx:04d}.png")))
    return out


def write_pairs(pairs, root):
    """Export pairs as ``root/raw/*.png`` and ``root/ref/*.png`` (8-bit)."""
    root = Path(root)
    (root / "raw").mkdir(parents=True, exist_ok=True)
    (root / "ref").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        save_png(p.raw, root / "raw" / p.name)
        save_png(p.reference, root / "ref" / p.name)
