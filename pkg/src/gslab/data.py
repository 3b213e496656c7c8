"""Datasets: synthetic glyphs, annotation crops, splits and batch builders."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from gslab.augment import AugPipeline, ImageBuffer
from gslab.errors import RecordError


@dataclass
class Dataset:
    """Labelled images. ``images`` is an (N, H, W, C) array, or a list of
    (H, W, C) arrays when sizes differ. ``ids`` are stable item identifiers
    that survive splitting and seed the augmentation streams."""

    images: object
    labels: np.ndarray
    class_count: int
    name: str = ""
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        self.ids = np.asarray(self.ids, dtype=int)
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("images, labels and ids must have the same length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def items(self) -> list:
        return [(ImageBuffer(self.images[i]), int(self.labels[i])) for i in range(len(self))]

    @cached_property
    def by_class(self) -> list:
        return [np.flatnonzero(self.labels == k) for k in range(self.class_count)]

    def subset(self, positions, name: Optional[str] = None) -> "Dataset":
        positions = np.asarray(positions, dtype=int)
        if isinstance(self.images, np.ndarray):
            imgs = self.images[positions]
        else:
            imgs = [self.images[i] for i in positions]
        return Dataset(imgs, self.labels[positions], self.class_count, name or self.name, self.ids[positions])

    def unlabeled(self) -> "ImageSet":
        return ImageSet(self.images, self.ids)

    def stacked(self) -> np.ndarray:
        return self.images if isinstance(self.images, np.ndarray) else np.stack(self.images)


@dataclass
class ImageSet:
    """Images without labels; the only thing the SimCLR path ever sees."""

    images: object
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


# -- synthetic glyphs -------------------------------------------------------

def _arc(cx, cy, rx, ry, start_deg, end_deg, n=20):
    t = np.radians(np.linspace(start_deg, end_deg, n))
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


# Greek capitals as polylines in a [-1, 1] box, y pointing down.
GLYPH_TEMPLATES = [
    [[(-0.6, 0.7), (0, -0.7), (0.6, 0.7)], [(-0.3, 0.15), (0.3, 0.15)]],  # alpha
    [[(-0.5, -0.7), (-0.5, 0.7)],
     [(-0.5, -0.7), (0.2, -0.7), (0.45, -0.5), (0.45, -0.2), (0.2, 0.0), (-0.5, 0.0)],
     [(-0.5, 0.0), (0.3, 0.0), (0.55, 0.2), (0.55, 0.5), (0.3, 0.7), (-0.5, 0.7)]],  # beta
    [[(-0.4, 0.7), (-0.4, -0.7), (0.5, -0.7)]],  # gamma
    [[(-0.6, 0.7), (0, -0.7), (0.6, 0.7), (-0.6, 0.7)]],  # delta
    [[(0.5, -0.7), (-0.4, -0.7), (-0.4, 0.7), (0.5, 0.7)], [(-0.4, 0.0), (0.3, 0.0)]],  # epsilon
    [[(-0.5, -0.7), (0.5, -0.7), (-0.5, 0.7), (0.5, 0.7)]],  # zeta
    [[(-0.5, -0.7), (-0.5, 0.7)], [(0.5, -0.7), (0.5, 0.7)], [(-0.5, 0.0), (0.5, 0.0)]],  # eta
    [_arc(0, 0, 0.5, 0.7, 0, 360, 28), [(-0.3, 0.0), (0.3, 0.0)]],  # theta
    [[(0, -0.7), (0, 0.7)], [(-0.25, -0.7), (0.25, -0.7)], [(-0.25, 0.7), (0.25, 0.7)]],  # iota
    [[(-0.4, -0.7), (-0.4, 0.7)], [(0.5, -0.7), (-0.4, 0.05), (0.5, 0.7)]],  # kappa
    [[(-0.6, 0.7), (0, -0.7), (0.6, 0.7)]],  # lambda
    [[(-0.6, 0.7), (-0.6, -0.7), (0, 0.3), (0.6, -0.7), (0.6, 0.7)]],  # mu
    [[(-0.5, 0.7), (-0.5, -0.7), (0.5, 0.7), (0.5, -0.7)]],  # nu
    [[(-0.5, -0.7), (0.5, -0.7)], [(-0.3, 0.0), (0.3, 0.0)], [(-0.5, 0.7), (0.5, 0.7)]],  # xi
    [_arc(0, 0, 0.55, 0.7, 0, 360, 28)],  # omicron
    [[(-0.5, 0.7), (-0.5, -0.7), (0.5, -0.7), (0.5, 0.7)]],  # pi
    [[(-0.4, 0.7), (-0.4, -0.7), (0.3, -0.7), (0.55, -0.4), (0.3, -0.05), (-0.4, -0.05)]],  # rho
    [[(0.5, -0.7), (-0.5, -0.7), (0.1, 0.0), (-0.5, 0.7), (0.5, 0.7)]],  # sigma
    [[(-0.6, -0.7), (0.6, -0.7)], [(0, -0.7), (0, 0.7)]],  # tau
    [[(-0.6, -0.7), (0, 0.0), (0.6, -0.7)], [(0, 0.0), (0, 0.7)]],  # upsilon
    [_arc(0, 0, 0.6, 0.35, 0, 360, 28), [(0, -0.75), (0, 0.75)]],  # phi
    [[(-0.55, -0.7), (0.55, 0.7)], [(0.55, -0.7), (-0.55, 0.7)]],  # chi
    [[(-0.6, -0.7), (-0.6, -0.15), (-0.3, 0.15), (0.3, 0.15), (0.6, -0.15), (0.6, -0.7)], [(0, -0.7), (0, 0.7)]],  # psi
    [_arc(0, -0.05, 0.55, 0.6, 130, 410, 24), [(-0.65, 0.7), (-0.35, 0.7)], [(0.35, 0.7), (0.65, 0.7)]],  # omega
]


def glyph_template(class_id: int) -> list:
    """Strokes for a class; beyond the built-in letters, a seeded random scribble."""
    if class_id < len(GLYPH_TEMPLATES):
        return GLYPH_TEMPLATES[class_id]
    rng = np.random.default_rng(np.random.SeedSequence([0x676C79, class_id]))
    strokes = []
    for _ in range(int(rng.integers(2, 4))):
        pts = rng.uniform(-0.7, 0.7, size=(int(rng.integers(2, 4)), 2))
        strokes.append([tuple(p) for p in pts])
    return strokes


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    length2 = dx * dx + dy * dy
    if length2 == 0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / length2, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def render_glyph(class_id: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """Render one jittered RGB glyph as an (side, side, 3) array in [0, 1]."""
    angle = math.radians(rng.uniform(-10, 10))
    shift = rng.uniform(-0.1, 0.1, size=2) * side
    half = 0.36 * side * rng.uniform(0.9, 1.1)
    thickness = side * rng.uniform(0.06, 0.11)
    cos, sin = math.cos(angle), math.sin(angle)
    centre = (side - 1) / 2.0

    ys, xs = np.mgrid[0:side, 0:side].astype(float)
    dist = np.full((side, side), np.inf)
    for stroke in glyph_template(class_id):
        pts = []
        for x, y in stroke:
            rx, ry = cos * x - sin * y, sin * x + cos * y
            pts.append((centre + shift[0] + half * rx, centre + shift[1] + half * ry))
        for a, b in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distance(xs, ys, a, b))
    ink = np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0)[:, :, None]

    background = np.array([0.86, 0.76, 0.56]) + rng.uniform(-0.08, 0.08, size=3)
    ink_colour = np.array([0.22, 0.16, 0.10]) + rng.uniform(-0.08, 0.08, size=3)
    img = background * (1 - ink) + ink_colour * ink
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_glyphs(class_count: int = 5, per_class: int = 200, side: int = 32, seed: int = 0,
                    name: str = "glyphs") -> Dataset:
    if class_count < 2:
        raise ValueError("need at least two classes")
    images = np.empty((class_count * per_class, side, side, 3))
    labels = np.repeat(np.arange(class_count), per_class)
    for k in range(class_count):
        for j in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, k, j]))
            images[k * per_class + j] = render_glyph(k, side, rng)
    return Dataset(images, labels, class_count, name)


# -- image I/O and annotations ----------------------------------------------

def load_image(path) -> ImageBuffer:
    """Read a PNG/PGM into an RGB ImageBuffer (8-bit values divided by 255)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageBuffer(arr)


def save_image(img, path) -> None:
    px = img.pixels if isinstance(img, ImageBuffer) else np.asarray(img)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    arr = np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


@dataclass
class AnnotationRecord:
    image_path: str
    x: int
    y: int
    w: int
    h: int
    label: str
    line: int = 0


def read_annotations(path) -> list[AnnotationRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["image_path", "x", "y", "w", "h", "label"]
        if reader.fieldnames != expected:
            raise RecordError(f"annotation header must be {','.join(expected)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                records.append(AnnotationRecord(row["image_path"], int(row["x"]), int(row["y"]),
                                                int(row["w"]), int(row["h"]), row["label"], line_no))
            except (TypeError, ValueError) as exc:
                raise RecordError(f"line {line_no}: {exc}") from None
    return records


def crop_from_annotations(records: Sequence[AnnotationRecord], label_map: dict, root=None,
                          name: str = "annotated") -> Dataset:
    """One crop per record; images are read once and cached."""
    cache: dict = {}
    images, labels = [], []
    for rec in records:
        path = Path(rec.image_path) if root is None else Path(root) / rec.image_path
        if path not in cache:
            cache[path] = load_image(path).pixels
        px = cache[path]
        h_img, w_img = px.shape[:2]
        if rec.w < 1 or rec.h < 1 or rec.x < 0 or rec.y < 0 or rec.x + rec.w > w_img or rec.y + rec.h > h_img:
            raise RecordError(
                f"line {rec.line}: box ({rec.x},{rec.y},{rec.w},{rec.h}) outside {w_img}x{h_img} image {rec.image_path}")
        if rec.label not in label_map:
            raise RecordError(f"line {rec.line}: label {rec.label!r} not in label map")
        images.append(px[rec.y:rec.y + rec.h, rec.x:rec.x + rec.w].copy())
        labels.append(label_map[rec.label])
    if images and all(im.shape == images[0].shape for im in images):
        images = np.stack(images)
    return Dataset(images, labels, max(label_map.values()) + 1, name)


def load_image_folder(root, name: Optional[str] = None) -> tuple[Dataset, list[str]]:
    """Read ``root/<label>/<image>.png``; labels are sorted directory names."""
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for k, cls in enumerate(classes):
        for f in sorted((root / cls).iterdir()):
            if f.suffix.lower() in (".png", ".pgm"):
                images.append(load_image(f).pixels)
                labels.append(k)
    if images and all(im.shape == images[0].shape for im in images):
        images = np.stack(images)
    return Dataset(images, labels, len(classes), name or root.name), classes


def save_image_folder(ds: Dataset, root, class_names: Optional[Sequence[str]] = None) -> None:
    root = Path(root)
    names = list(class_names) if class_names else [f"class{k:02d}" for k in range(ds.class_count)]
    for pos in range(len(ds)):
        save_image(ds.images[pos], root / names[ds.labels[pos]] / f"{ds.ids[pos]:06d}.png")


# -- splitting --------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.70, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must be three values summing to 1")


def split_sizes(n: int, fractions=(0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_valid = math.floor(fractions[1] * n + 1e-9)
    return n_train, n_valid, n - n_train - n_valid


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle of positions (labels are never consulted)."""
    n = len(ds)
    if n < 10:
        raise ValueError("need at least 10 items to split")
    n_train, n_valid, _ = split_sizes(n, spec.fractions)
    perm = np.random.default_rng(spec.seed).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:])
    names = ("train", "valid", "test")
    return tuple(ds.subset(np.sort(p), f"{ds.name}/{nm}") for p, nm in zip(parts, names))


# -- batch builders ---------------------------------------------------------

@dataclass
class TripletBatch:
    anchor: np.ndarray  # dataset positions
    positive: np.ndarray
    negative: np.ndarray

    @property
    def positions(self) -> np.ndarray:
        """Anchor block, then positive block, then negative block."""
        return np.concatenate([self.anchor, self.positive, self.negative])

    def __len__(self) -> int:
        return 3 * len(self.anchor)

    def images(self, ds: Dataset, pipeline: AugPipeline, epoch: int = 0, step: int = 0) -> np.ndarray:
        pos = self.positions
        roles = np.repeat([0, 1, 2], len(self.anchor))
        return pipeline.apply_batch(ds.images, pos, epoch, views=3 * step + roles, id_map=ds.ids)


def make_triplet_batch(train: Dataset, n: int, rng: np.random.Generator) -> TripletBatch:
    """Uniform anchors; positive from the anchor's class (another item);
    negative uniform over items with a different label."""
    if train.class_count < 2 or sum(len(c) > 0 for c in train.by_class) < 2:
        raise ValueError("triplet batches need at least two populated classes")
    if any(len(c) == 1 for c in train.by_class):
        raise ValueError("every populated class needs at least two items")
    size = len(train)
    anchors = rng.integers(0, size, size=n)
    positives = np.empty(n, dtype=int)
    negatives = np.empty(n, dtype=int)
    for k, a in enumerate(anchors):
        members = train.by_class[train.labels[a]]
        choice = members[rng.integers(0, len(members) - 1)]
        # skip over the anchor itself so the positive is a different item
        positives[k] = choice if choice != a else members[-1]
        while True:
            cand = int(rng.integers(0, size))
            if train.labels[cand] != train.labels[a]:
                negatives[k] = cand
                break
    return TripletBatch(anchors, positives, negatives)


@dataclass
class ContrastiveViews:
    views: np.ndarray  # (2n, C, H, W), interleaved [a1, b1, a2, b2, ...]
    sources: np.ndarray  # positions in the ImageSet

    @property
    def partner(self) -> np.ndarray:
        return np.arange(len(self.views)) ^ 1


def contrastive_views(images: ImageSet, positions, pipeline: AugPipeline, epoch: int = 0) -> ContrastiveViews:
    positions = np.asarray(positions, dtype=int)
    if not isinstance(images, ImageSet):
        raise TypeError("contrastive batches are built from an unlabeled ImageSet")
    doubled = np.repeat(positions, 2)
    views = np.tile([1, 2], len(positions))
    batch = pipeline.apply_batch(images.images, doubled, epoch, views=views, id_map=images.ids)
    return ContrastiveViews(batch, positions)


def make_contrastive_batch(images: ImageSet, n: int, pipeline: AugPipeline, rng: np.random.Generator,
                           epoch: int = 0) -> ContrastiveViews:
    if n < 2:
        raise ValueError("contrastive batches need n >= 2")
    positions = rng.choice(len(images), size=n, replace=False)
    return contrastive_views(images, positions, pipeline, epoch)
