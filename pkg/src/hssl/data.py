"""Deterministic datasets and multi-crop augmentation.

Every random draw is keyed by explicit seeds, never by global state, thread
count or arrival order: datasets by ``(seed, record index)``, shuffles by
``(seed, epoch)``, views by ``(seed, record id, epoch, step, view index)``.
"""

from __future__ import annotations

import colorsys
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ContractError, FormatError, PolicyError
from .resample import bilinear_matrix

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32


@dataclass
class ImageRecord:
    id: int
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    label: int


@dataclass
class ImageDataset:
    images: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64, only ever read by probes
    ids: np.ndarray     # [N] int64
    seed: int = 0

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ContractError("images, labels and ids must have equal length")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> ImageRecord:
        return ImageRecord(int(self.ids[i]), self.images[i], int(self.labels[i]))

    def records(self) -> Iterator[ImageRecord]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, index) -> "ImageDataset":
        index = np.asarray(index, dtype=np.int64)
        return ImageDataset(self.images[index], self.labels[index], self.ids[index], self.seed)

    def fraction(self, frac: float, seed: int | None = None) -> "ImageDataset":
        """Class-stratified, seeded subset holding ``frac`` of the records."""
        if not 0 < frac <= 1:
            raise ContractError(f"data fraction must lie in (0, 1], got {frac}")
        if frac == 1:
            return self
        rng = np.random.default_rng([self.seed if seed is None else seed, 7])
        keep = []
        for c in np.unique(self.labels):
            idx = np.flatnonzero(self.labels == c)
            keep.extend(rng.permutation(idx)[:max(1, int(round(frac * len(idx))))])
        return self.subset(np.sort(keep))


# -- synthetic images ----------------------------------------------------------

_SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "bar", "ellipse")


def _shape_distance(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Signed distance (negative inside) in a unit frame where the shape spans about [-1, 1]."""
    if shape == "disk":
        return np.hypot(u, v) - 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) - 0.85
    if shape == "triangle":
        k = np.sqrt(3.0)
        d2 = (-k * u - v) / 2 - 0.4
        d3 = (k * u - v) / 2 - 0.4
        return np.maximum(np.maximum(v - 0.8, d2), d3)
    if shape == "cross":
        arm_h = np.maximum(np.abs(u) - 1.0, np.abs(v) - 0.32)
        arm_v = np.maximum(np.abs(v) - 1.0, np.abs(u) - 0.32)
        return np.minimum(arm_h, arm_v)
    if shape == "ring":
        return np.abs(np.hypot(u, v) - 0.75) - 0.25
    if shape == "diamond":
        return (np.abs(u) + np.abs(v)) / np.sqrt(2.0) - 0.75
    if shape == "bar":
        return np.maximum(np.abs(u) - 1.0, np.abs(v) - 0.4)
    return np.hypot(u, v * 1.8) - 1.0


def _render(rng: np.random.Generator, label: int, num_classes: int, size: int) -> np.ndarray:
    yy, xx = (np.mgrid[0:size, 0:size].astype(np.float64) + 0.5) / size

    # textured background: a few random low-frequency waves around a dull base colour
    base = rng.uniform(0.25, 0.65, size=3) * rng.uniform(0.6, 1.0)
    tex = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(-6, 6, size=2)
        tex += np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    tex = tex / 3 * rng.uniform(0.08, 0.2)
    img = base[:, None, None] + tex[None] * rng.uniform(0.5, 1.0, size=3)[:, None, None]
    img = img + rng.normal(0, 0.03, size=img.shape)

    # class = (shape family, colour family); neighbouring classes share a hue family
    shape = _SHAPES[label % len(_SHAPES)]
    families = max(1, (num_classes + 1) // 2)
    hue = ((label // 2) / families + rng.normal(0, 0.03)) % 1.0
    sat = rng.uniform(0.65, 1.0)
    val = rng.uniform(0.7, 1.0)
    colour = np.array(colorsys.hsv_to_rgb(hue, sat, val))

    scale = rng.uniform(0.22, 0.36)
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    theta = rng.uniform(0, 2 * np.pi) if shape not in ("disk", "ring") else 0.0
    du, dv = (xx - cx) / scale, (yy - cy) / scale
    u = np.cos(theta) * du + np.sin(theta) * dv
    v = -np.sin(theta) * du + np.cos(theta) * dv
    d = _shape_distance(shape, u, v)
    alpha = np.clip(0.5 - d * scale * size, 0.0, 1.0)
    img = img * (1 - alpha[None]) + colour[:, None, None] * alpha[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(num_classes: int, per_class: int, image_size: int = 32, seed: int = 0,
                       id_offset: int = 0) -> ImageDataset:
    """Class-conditional images of coloured primitives over textured backgrounds."""
    if num_classes < 2:
        raise ContractError("synthetic dataset needs at least two classes")
    labels = np.repeat(np.arange(num_classes), per_class)
    order = np.random.default_rng([seed, 1]).permutation(len(labels))
    labels = labels[order]
    images = np.stack([_render(np.random.default_rng([seed, 2, i]), int(c), num_classes, image_size)
                       for i, c in enumerate(labels)]) if len(labels) else \
        np.zeros((0, 3, image_size, image_size), np.float32)
    ids = np.arange(len(labels), dtype=np.int64) + id_offset
    return ImageDataset(images, labels.astype(np.int64), ids, seed)


# -- CIFAR binary layout ------------------------------------------------------

def load_cifar_binary(path) -> ImageDataset:
    """Parse 1 label byte + 3072 channel-major pixel bytes per record."""
    raw = np.fromfile(os.fspath(path), dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES:
        offset = raw.size - raw.size % CIFAR_RECORD_BYTES
        raise FormatError(f"{path}: truncated record at byte offset {offset} "
                          f"(file length {raw.size} is not a multiple of {CIFAR_RECORD_BYTES})")
    rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = (rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return ImageDataset(images, labels, np.arange(len(rec), dtype=np.int64))


def save_cifar_binary(dataset: ImageDataset, path):
    if dataset.images.shape[1:] != (3, 32, 32):
        raise ContractError("CIFAR layout stores 3x32x32 images only")
    if len(dataset) and (dataset.labels.min() < 0 or dataset.labels.max() > 255):
        raise ContractError("CIFAR layout stores labels in one byte")
    pix = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    out = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pix], axis=1)
    tmp = f"{os.fspath(path)}.tmp"
    out.tofile(tmp)
    os.replace(tmp, path)


# -- multi-crop ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    global_count: int = 2
    global_size: int = 32
    local_count: int = 10
    local_size: int = 16
    global_scale: tuple = (0.4, 1.0)
    local_scale: tuple = (0.05, 0.4)
    ratio: tuple = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter: float = 0.2
    grayscale_prob: float = 0.2

    def validate(self, patch_size: int = 1):
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise PolicyError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}", keys=[name])
        for name in ("global_size", "local_size"):
            size = getattr(self, name)
            if size < 1 or size % patch_size:
                raise PolicyError(f"{name}={size} is not a positive multiple of patch size {patch_size}",
                                  keys=[name])
        if self.global_count < 1 or self.local_count < 0:
            raise PolicyError("need >= 1 global view and >= 0 local views", keys=["global_count"])
        if not (0 <= self.flip_prob <= 1 and 0 <= self.grayscale_prob <= 1 and self.jitter >= 0):
            raise PolicyError("flip/grayscale probabilities must lie in [0, 1], jitter >= 0")

    @property
    def num_views(self) -> int:
        return self.global_count + self.local_count


@dataclass
class ViewBatch:
    """Views of one source batch: ``globals[v]`` / ``locals[v]`` are ``[B, 3, S, S]``.

    ``provenance[v]`` holds per-record crop boxes ``(y, x, h, w)``, flips and
    view seeds for view ``v`` (globals first, then locals).
    """

    globals: list
    locals: list
    ids: np.ndarray
    provenance: list = field(default_factory=list)

    @property
    def views(self) -> list:
        return list(self.globals) + list(self.locals)

    @property
    def batch_size(self) -> int:
        return len(self.ids)


def _random_resized_box(rng, h: int, w: int, scale, ratio):
    area = h * w
    log_r = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(*scale)
        r = np.exp(rng.uniform(*log_r))
        cw = np.sqrt(target * r)
        ch = np.sqrt(target / r)
        if cw <= w and ch <= h:
            y = rng.uniform(0, h - ch)
            x = rng.uniform(0, w - cw)
            return y, x, ch, cw
    side_h, side_w = h, w
    in_ratio = w / h
    if in_ratio < ratio[0]:
        side_h = w / ratio[0]
    elif in_ratio > ratio[1]:
        side_w = h * ratio[1]
    return (h - side_h) / 2, (w - side_w) / 2, side_h, side_w


def _view(pixels: np.ndarray, rng: np.random.Generator, size: int, scale, policy: AugmentPolicy):
    _, h, w = pixels.shape
    y, x, ch, cw = _random_resized_box(rng, h, w, scale, policy.ratio)
    if ch < 1 or cw < 1:
        raise PolicyError(f"crop of {ch:.2f}x{cw:.2f} pixels is smaller than one pixel")
    ah = bilinear_matrix(size, h, y, ch)
    aw = bilinear_matrix(size, w, x, cw)
    out = np.einsum("ij,cjk,lk->cil", ah, pixels.astype(np.float64), aw)
    flip = bool(rng.uniform() < policy.flip_prob)
    if flip:
        out = out[:, :, ::-1]
    s = policy.jitter
    if s > 0:
        gain = rng.uniform(1 - s, 1 + s, size=3)
        shift = rng.uniform(-s, s, size=3)
        out = out * gain[:, None, None] + shift[:, None, None]
    if rng.uniform() < policy.grayscale_prob:
        gray = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
        out = np.broadcast_to(gray, out.shape)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return np.ascontiguousarray(out), (y, x, ch, cw), flip


def view_seed(dataset_seed: int, record_id: int, epoch: int, step: int, view: int) -> list:
    return [int(dataset_seed), int(record_id), int(epoch), int(step), int(view)]


def augment_multicrop(record: ImageRecord, policy: AugmentPolicy, epoch: int, step: int,
                      dataset_seed: int = 0) -> ViewBatch:
    """All configured views of one record (batch of one)."""
    globals_, locals_, prov = [], [], []
    for v in range(policy.num_views):
        seed = view_seed(dataset_seed, record.id, epoch, step, v)
        is_global = v < policy.global_count
        size = policy.global_size if is_global else policy.local_size
        scale = policy.global_scale if is_global else policy.local_scale
        img, box, flip = _view(record.pixels, np.random.default_rng(seed), size, scale, policy)
        (globals_ if is_global else locals_).append(img[None])
        prov.append({"box": np.array([box]), "flip": np.array([flip]), "seed": [seed]})
    return ViewBatch(globals_, locals_, np.array([record.id]), prov)


def collate(batches: list) -> ViewBatch:
    g = [np.concatenate(v) for v in zip(*(b.globals for b in batches))]
    loc = [np.concatenate(v) for v in zip(*(b.locals for b in batches))]
    prov = []
    for per_view in zip(*(b.provenance for b in batches)):
        prov.append({"box": np.concatenate([p["box"] for p in per_view]),
                     "flip": np.concatenate([p["flip"] for p in per_view]),
                     "seed": [s for p in per_view for s in p["seed"]]})
    return ViewBatch(g, loc, np.concatenate([b.ids for b in batches]), prov)


def epoch_order(dataset: ImageDataset, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), 11, int(epoch)]).permutation(len(dataset))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size) if n >= batch_size else 1


def iter_view_batches(dataset: ImageDataset, policy: AugmentPolicy, batch_size: int, epoch: int,
                      seed: int = 0, workers: int = 0, prefetch: int = 2,
                      step_offset: int = 0) -> Iterator[ViewBatch]:
    """Yield augmented batches of one epoch in step order.

    With ``workers > 0`` batches are built on a thread pool with at most
    ``prefetch`` batches in flight; the delivered sequence is identical to
    the serial one.
    """
    order = epoch_order(dataset, seed, epoch)
    n_steps = steps_per_epoch(len(dataset), batch_size)
    bs = min(batch_size, len(dataset))

    def build(step: int) -> ViewBatch:
        idx = order[step * bs:(step + 1) * bs]
        gstep = step_offset + step
        return collate([augment_multicrop(dataset[i], policy, epoch, gstep, seed) for i in idx])

    if workers <= 0:
        for step in range(n_steps):
            yield build(step)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        nxt = 0
        while nxt < n_steps and len(pending) < max(1, prefetch):
            pending.append(pool.submit(build, nxt))
            nxt += 1
        while pending:
            batch = pending.popleft().result()
            if nxt < n_steps:
                pending.append(pool.submit(build, nxt))
                nxt += 1
            yield batch
