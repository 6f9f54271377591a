"""Procedural fine-grained toy dataset.

Every class draws the same body and the same multiset of part shapes; what
distinguishes classes is which part sits at which anchor around the body.
Appearance statistics are therefore nearly identical across classes and a
pixel-centroid classifier stays weak, while the part arrangement carries
the label. Random translation and rotation jitter plus background clutter
(reusing the same part shapes) force a model to localize the body before
reading off the arrangement.

Images are 8-bit grayscale PGM files; the training loader replicates the
single channel to three so the backbone contract is unchanged. A dataset
directory holds ``train/`` and ``test/`` subdirectories, each with its
images and a ``manifest.tsv`` of ``filename<TAB>label`` rows.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .pgmio import read_pgm, write_pgm

N_PART_SHAPES = 6
PARTS_PER_CLASS = 4
MAX_CLASSES = 24  # distinct arrangements of a 4-part pool

# geometry in units of image size
BODY_RADIUS = 0.115
ANCHOR_RADIUS = 0.27
PART_TILE = 0.18
ANCHOR_ANGLES = (0.25 * math.pi, 0.75 * math.pi, 1.25 * math.pi, 1.75 * math.pi)

DEFAULT_JITTER_SIGMA = 3.0  # pixels, for a 64-pixel image
DEFAULT_CLUTTER = 3
ROTATION_MAX = math.radians(25.0)
RADIUS_JITTER = 2.0
PIXEL_NOISE = 0.02


@dataclass(frozen=True)
class GlyphSpec:
    """Recipe for one class: shared body, parts at body-relative anchors."""

    class_id: int
    body_shape: int
    parts: tuple[tuple[int, float, float, float], ...]  # (shape id, angle, radius, scale)
    jitter_sigma: float
    clutter_count: int


def part_tile(shape_id: int, size: int) -> np.ndarray:
    """Render part shape ``shape_id`` into a size x size tile in [0, 1]."""
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = x - c, y - c
    r = np.sqrt(dx * dx + dy * dy)
    half = size / 2.0
    if shape_id == 0:  # disk
        return (r <= half - 0.5).astype(np.float64)
    if shape_id == 1:  # filled square
        m = half * 0.78
        return ((np.abs(dx) <= m) & (np.abs(dy) <= m)).astype(np.float64)
    if shape_id == 2:  # upward triangle
        return ((dy >= -half + 0.5) & (np.abs(dx) <= (dy + half) * 0.55)).astype(np.float64)
    if shape_id == 3:  # plus
        arm = max(1.0, size * 0.16)
        return (((np.abs(dx) <= arm) | (np.abs(dy) <= arm)) & (r <= half)).astype(np.float64)
    if shape_id == 4:  # ring
        return ((r <= half - 0.5) & (r >= half * 0.55)).astype(np.float64)
    if shape_id == 5:  # diagonal cross
        arm = max(1.0, size * 0.14)
        d1 = np.abs(dx - dy) / math.sqrt(2.0)
        d2 = np.abs(dx + dy) / math.sqrt(2.0)
        return (((d1 <= arm) | (d2 <= arm)) & (r <= half)).astype(np.float64)
    raise ConfigError(f"unknown part shape {shape_id}")


def build_class_specs(seed: int, n_classes: int,
                      jitter_sigma: float = DEFAULT_JITTER_SIGMA,
                      clutter_count: int = DEFAULT_CLUTTER) -> list[GlyphSpec]:
    """Deterministic class recipes.

    Classes come in pairs: both members of a pair use the same 4-part
    pool but opposite anchor arrangements, so only the part layout
    separates them. Distinct pairs use different 4-subsets of the 6
    shapes; any two 4-subsets of a 6-set overlap in at least 2 shapes,
    which keeps every pair of classes sharing at least half their parts.
    """
    if not (2 <= n_classes <= MAX_CLASSES):
        raise ConfigError(f"n_classes must be in [2, {MAX_CLASSES}], got {n_classes}")
    rng = np.random.default_rng([seed, 0xC1A55])
    pools = list(itertools.combinations(range(N_PART_SHAPES), PARTS_PER_CLASS))
    rng.shuffle(pools)
    specs = []
    for c in range(n_classes):
        base = list(pools[c // 2])
        rng_pool = np.random.default_rng([seed, 0xC1A55, c // 2])
        rng_pool.shuffle(base)
        if c % 2 == 1:  # same parts, diagonally swapped layout
            base = base[2:] + base[:2]
        parts = tuple(
            (int(shape), ANCHOR_ANGLES[slot], ANCHOR_RADIUS, 1.0)
            for slot, shape in enumerate(base)
        )
        specs.append(GlyphSpec(c, 0, parts, jitter_sigma, clutter_count))
    return specs


def shared_part_fraction(a: GlyphSpec, b: GlyphSpec) -> float:
    """Fraction of a's part shape ids that b also uses (multiset overlap)."""
    ids_a = sorted(p[0] for p in a.parts)
    ids_b = list(p[0] for p in b.parts)
    hits = 0
    for pid in ids_a:
        if pid in ids_b:
            ids_b.remove(pid)
            hits += 1
    return hits / len(ids_a)


def _stamp(canvas: np.ndarray, tile: np.ndarray, cx: float, cy: float,
           intensity: float) -> None:
    t = tile.shape[0]
    x0 = int(round(cx - t / 2.0))
    y0 = int(round(cy - t / 2.0))
    h, w = canvas.shape
    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(w, x0 + t), min(h, y0 + t)
    if sx0 >= sx1 or sy0 >= sy1:
        return
    sub = tile[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] * intensity
    region = canvas[sy0:sy1, sx0:sx1]
    np.maximum(region, sub, out=region)


def render_image(spec: GlyphSpec, rng: np.random.Generator, image_size: int) -> np.ndarray:
    """Draw one jittered instance of the class glyph, uint8 grayscale."""
    size = image_size
    canvas = np.zeros((size, size))
    tile_px = max(5, int(round(PART_TILE * size)))
    anchor_px = ANCHOR_RADIUS * size
    # keep the whole constellation inside the frame after jitter
    reach = anchor_px + tile_px / 2.0 + RADIUS_JITTER + 1.0
    max_off = max(0.0, size / 2.0 - reach - 1.0)
    off = np.clip(rng.normal(0.0, spec.jitter_sigma, size=2),
                  -min(2.0 * spec.jitter_sigma, max_off),
                  min(2.0 * spec.jitter_sigma, max_off))
    cx, cy = size / 2.0 + off[0], size / 2.0 + off[1]
    rot = rng.uniform(-ROTATION_MAX, ROTATION_MAX)

    body_px = max(4, int(round(2 * BODY_RADIUS * size)))
    _stamp(canvas, part_tile(4, body_px), cx, cy, 0.45)

    for shape_id, angle, radius, scale in spec.parts:
        a = angle + rot + rng.uniform(-0.05, 0.05)
        r = radius * size + rng.uniform(-RADIUS_JITTER, RADIUS_JITTER)
        px = cx + r * math.cos(a)
        py = cy + r * math.sin(a)
        t = max(5, int(round(tile_px * scale)))
        _stamp(canvas, part_tile(shape_id, t), px, py, rng.uniform(0.85, 1.0))

    # clutter: same part alphabet, scattered outside the constellation
    keepout = anchor_px + tile_px
    margin = tile_px / 2.0 + 1.0
    for _ in range(spec.clutter_count):
        for _try in range(50):
            qx = rng.uniform(margin, size - margin)
            qy = rng.uniform(margin, size - margin)
            if math.hypot(qx - cx, qy - cy) > keepout:
                break
        else:
            continue
        shape_id = int(rng.integers(0, N_PART_SHAPES))
        _stamp(canvas, part_tile(shape_id, tile_px), qx, qy, rng.uniform(0.75, 1.0))

    canvas += rng.normal(0.0, PIXEL_NOISE, size=canvas.shape)
    return (np.clip(canvas, 0.0, 1.0) * 255.0).round().astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset on disk


def _split_labels(count: int, n_classes: int) -> np.ndarray:
    """Round-robin labels; class counts differ by at most one."""
    return np.arange(count) % n_classes


def _render_split(specs, split_id: int, count: int, image_size: int, seed: int):
    labels = _split_labels(count, len(specs))
    images = np.empty((count, image_size, image_size), dtype=np.uint8)
    for i in range(count):
        rng = np.random.default_rng([seed, split_id, i])
        images[i] = render_image(specs[labels[i]], rng, image_size)
    return images, labels


def _write_split(dir_path: str, prefix: str, images: np.ndarray, labels: np.ndarray) -> None:
    os.makedirs(dir_path, exist_ok=True)
    rows = []
    for i in range(len(images)):
        name = f"{prefix}_{i:05d}.pgm"
        write_pgm(os.path.join(dir_path, name), images[i])
        rows.append(f"{name}\t{int(labels[i])}\n")
    with open(os.path.join(dir_path, "manifest.tsv"), "w") as f:
        f.writelines(rows)


def generate(seed: int, n_classes: int, n_train: int, n_test: int,
             image_size: int, out_dir: str,
             jitter_sigma: float = DEFAULT_JITTER_SIGMA,
             clutter_count: int = DEFAULT_CLUTTER) -> dict:
    """Write a full dataset and return a summary.

    Deterministic in ``seed``: every image draws from its own seeded
    stream keyed by (seed, split, index), so repeated runs are
    byte-identical and train/test never share a draw.
    """
    specs = build_class_specs(seed, n_classes, jitter_sigma, clutter_count)
    train_x, train_y = _render_split(specs, 0, n_train, image_size, seed)
    test_x, test_y = _render_split(specs, 1, n_test, image_size, seed)
    _write_split(os.path.join(out_dir, "train"), "train", train_x, train_y)
    _write_split(os.path.join(out_dir, "test"), "test", test_x, test_y)
    return {
        "out_dir": out_dir,
        "n_classes": n_classes,
        "n_train": n_train,
        "n_test": n_test,
        "image_size": image_size,
        "centroid_accuracy": nearest_centroid_accuracy(train_x, train_y, test_x, test_y),
    }


def load_split(split_dir: str):
    """Read a manifest directory back into (images uint8, labels int64)."""
    manifest = os.path.join(split_dir, "manifest.tsv")
    names, labels = [], []
    with open(manifest) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            name, label = line.split("\t")
            names.append(name)
            labels.append(int(label))
    images = np.stack([read_pgm(os.path.join(split_dir, n)) for n in names])
    return images, np.asarray(labels, dtype=np.int64)


def to_model_input(image: np.ndarray) -> np.ndarray:
    """uint8 grayscale -> H x W x 3 float64 in [0, 1]."""
    f = image.astype(np.float64) / 255.0
    return np.repeat(f[:, :, None], 3, axis=2)


def nearest_centroid_accuracy(train_x: np.ndarray, train_y: np.ndarray,
                              test_x: np.ndarray, test_y: np.ndarray) -> float:
    """Accuracy of classifying each test image by its nearest class-mean
    pixel vector. Kept weak by design; checked at generation time."""
    classes = np.unique(train_y)
    flat_train = train_x.reshape(len(train_x), -1).astype(np.float64)
    flat_test = test_x.reshape(len(test_x), -1).astype(np.float64)
    centroids = np.stack([flat_train[train_y == c].mean(axis=0) for c in classes])
    d2 = ((flat_test[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = classes[d2.argmin(axis=1)]
    return float((pred == test_y).mean())
