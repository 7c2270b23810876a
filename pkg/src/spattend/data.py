"""Datasets: synthetic generation, augmentation and the on-disk image tree.

Synthetic images put a class-specific discriminative patch on a blank
background at a random (or centred) position, optionally surrounded by
clutter rectangles, decoy parts and pixel noise.  Two patch layouts exist:

``single``
    the patch is the class's own part template.
``stacked``
    the patch is the class's part with a shared anchor part placed
    ``part_gap`` pixels below it.  Decoys (isolated copies of *other*
    classes' parts, never paired with an anchor) then make the class
    identifiable only from which part sits above the anchor.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import pnm
from .errors import DataError, SpecError


@dataclass
class Sample:
    image: np.ndarray          # (H, W, C) in [0, 1]
    label: int
    ident: str
    boxes: tuple = ()          # discriminative part boxes (top, left, height, width)


@dataclass
class Dataset:
    images: np.ndarray         # (N, H, W, C)
    labels: np.ndarray         # (N,)
    ids: list
    boxes: list = None
    num_classes: int = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.boxes is None:
            self.boxes = [()] * len(self.labels)
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise DataError("images, labels and ids differ in length")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, k):
        return Sample(self.images[k], int(self.labels[k]), self.ids[k], tuple(self.boxes[k]))

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], [self.ids[k] for k in indices],
                       [self.boxes[k] for k in indices], self.num_classes)

    @classmethod
    def from_samples(cls, samples, num_classes=None):
        samples = list(samples)
        if not samples:
            raise DataError("no samples")
        return cls(np.stack([s.image for s in samples]), [s.label for s in samples],
                   [s.ident for s in samples], [s.boxes for s in samples], num_classes)

    def concat(self, other):
        return Dataset(np.concatenate([self.images, other.images]),
                       np.concatenate([self.labels, other.labels]), self.ids + other.ids,
                       self.boxes + other.boxes, max(self.num_classes, other.num_classes))


def stratified_split(labels, fraction, seed):
    """Indices ``(keep, held_out)`` holding out ``fraction`` of every class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    keep, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_held = int(round(fraction * len(idx)))
        held.extend(idx[:n_held])
        keep.extend(idx[n_held:])
    return np.sort(np.array(keep, dtype=np.int64)), np.sort(np.array(held, dtype=np.int64))


# synthetic generation ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    image_size: int = 64
    num_classes: int = 4
    patch_size: int = 12
    contrast: float = 1.0
    layout: str = "single"          # single | stacked
    part_gap: int = 24              # stacked: vertical offset of the anchor part below the class part
    placement: str = "random"       # random | center
    clutter_density: float = 0.0    # fraction of image area covered by clutter rectangles
    decoys: int = 0                 # isolated copies of other classes' parts per image
    noise: float = 0.0              # std of additive Gaussian pixel noise
    n_train: int = 64
    n_test: int = 64
    seed: int = 0
    template_cells: int = 4         # templates are template_cells^2 blocks of on/off pixels

    def patch_shape(self):
        if self.layout == "stacked":
            return (self.part_gap + self.patch_size, self.patch_size)
        return (self.patch_size, self.patch_size)

    def validate(self):
        def bad(key, msg):
            raise SpecError(f"synthetic.{key}: {msg}", key=f"data.synthetic.{key}")

        if self.num_classes < 2:
            bad("classes", "need at least 2 classes")
        if self.layout not in ("single", "stacked"):
            bad("layout", f"unknown layout {self.layout!r}")
        if self.placement not in ("random", "center"):
            bad("placement", f"unknown placement {self.placement!r}")
        if self.patch_size < self.template_cells:
            bad("patch_size", "smaller than the template block grid")
        if self.layout == "stacked" and self.part_gap < self.patch_size:
            bad("part_gap", "parts would overlap")
        ph, pw = self.patch_shape()
        if ph > self.image_size or pw > self.image_size:
            bad("patch_size", f"patch {ph}x{pw} larger than image {self.image_size}")
        if not 0.0 <= self.clutter_density < 1.0:
            bad("clutter", "must be in [0, 1)")
        for key, value in (("decoys", self.decoys), ("noise", self.noise)):
            if value < 0:
                bad(key, "must be >= 0")
        if self.contrast <= 0:
            bad("contrast", "must be > 0")
        if self.n_train < 0 or self.n_test < 0:
            bad("n_train", "sizes must be >= 0")
        return self


def make_templates(spec):
    """Class part templates plus the shared anchor part, pairwise distinct.

    Each template is a ``template_cells``-square grid of on/off blocks upscaled
    to ``patch_size``; any two templates differ in at least a quarter of their
    blocks.
    """
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    g = spec.template_cells
    chosen = []
    while len(chosen) < spec.num_classes + 1:
        cand = rng.random((g, g)) < 0.5
        if cand.sum() < g or cand.sum() > g * g - g:
            continue
        if all(np.sum(cand != c) >= max(2, g * g // 4) for c in chosen):
            chosen.append(cand)
    reps = -(-spec.patch_size // g)
    out = []
    for cand in chosen:
        big = np.kron(cand, np.ones((reps, reps)))[:spec.patch_size, :spec.patch_size]
        out.append(big * spec.contrast)
    return out[:-1], out[-1]


def class_patch(spec, templates, anchor, label):
    """The full discriminative patch of ``label`` and its part offsets."""
    part = templates[label]
    if spec.layout == "single":
        return part, [(0, 0, spec.patch_size, spec.patch_size)]
    ph, pw = spec.patch_shape()
    patch = np.zeros((ph, pw))
    patch[:spec.patch_size] = part
    patch[spec.part_gap:spec.part_gap + spec.patch_size] = anchor
    return patch, [(0, 0, spec.patch_size, spec.patch_size),
                   (spec.part_gap, 0, spec.patch_size, spec.patch_size)]


def _overlaps(box, boxes, margin=0):
    t, l, h, w = box
    for (t2, l2, h2, w2) in boxes:
        if t < t2 + h2 + margin and t2 < t + h + margin and l < l2 + w2 + margin and l2 < l + w + margin:
            return True
    return False


def _render(spec, templates, anchor, label, rng):
    S = spec.image_size
    img = np.zeros((S, S))
    patch, parts = class_patch(spec, templates, anchor, label)
    ph, pw = patch.shape
    if spec.placement == "center":
        top, left = (S - ph) // 2, (S - pw) // 2
    else:
        top, left = int(rng.integers(0, S - ph + 1)), int(rng.integers(0, S - pw + 1))
    img[top:top + ph, left:left + pw] = patch
    boxes = tuple((top + t, left + l, h, w) for t, l, h, w in parts)
    occupied = [(top, left, ph, pw)]

    others = [c for c in range(spec.num_classes) if c != label]
    p = spec.patch_size
    for d in range(spec.decoys):
        part = templates[others[d % len(others)]] if others else templates[label]
        for _ in range(200):
            box = (int(rng.integers(0, S - p + 1)), int(rng.integers(0, S - p + 1)), p, p)
            if not _overlaps(box, occupied, margin=2):
                img[box[0]:box[0] + p, box[1]:box[1] + p] = part
                occupied.append(box)
                break

    target = spec.clutter_density * S * S
    covered = 0.0
    tries = 0
    while covered < target and tries < 5000:
        tries += 1
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        box = (int(rng.integers(0, S - h + 1)), int(rng.integers(0, S - w + 1)), h, w)
        if _overlaps(box, occupied, margin=1):
            continue
        img[box[0]:box[0] + h, box[1]:box[1] + w] = rng.uniform(0.3, 1.0) * spec.contrast
        covered += h * w

    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)[:, :, None], boxes


def generate_synthetic(spec):
    """``(train, test)`` datasets, fully determined by ``spec``.

    Labels cycle through the classes so both splits are balanced; the two
    splits are drawn from independent random streams.
    """
    spec.validate()
    templates, anchor = make_templates(spec)
    splits = []
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        rng = np.random.default_rng([spec.seed, 1 if split == "train" else 2])
        images, labels, ids, boxes = [], [], [], []
        for k in range(n):
            label = k % spec.num_classes
            img, bx = _render(spec, templates, anchor, label, rng)
            images.append(img)
            labels.append(label)
            ids.append(f"{split}-{k:05d}")
            boxes.append(bx)
        arr = np.stack(images) if images else np.zeros((0, spec.image_size, spec.image_size, 1))
        splits.append(Dataset(arr, labels, ids, boxes, spec.num_classes))
    return splits[0], splits[1]


# augmentation -----------------------------------------------------------------

def resize_bilinear(image, out_h, out_w):
    """Resize ``(H, W, C)`` with bilinear interpolation (corner pixels aligned)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def shift_crop(image, dx=0, dy=0):
    """Translate by (dx, dy) pixels without inventing border values.

    The in-bounds window of the translated image is cropped and rescaled
    back to the original size.  Positive ``dx`` moves content right,
    positive ``dy`` moves it down.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError("shift larger than the image")
    # content moving right means the left part of the original stays visible
    cols = slice(0, w - dx) if dx >= 0 else slice(-dx, w)
    rows = slice(0, h - dy) if dy >= 0 else slice(-dy, h)
    return resize_bilinear(img[rows, cols], h, w)


SHIFTS = ((-5, 0), (5, 0), (0, -3), (0, 3))


def augment(sample, rng=None, flip=True, shift=True):
    """Original plus horizontal mirror plus four shifted copies.

    Shifts are 5 px left / right and 3 px up / down.  ``rng`` is accepted for
    pipelines that randomize augmentation; the fixed set used here ignores it.
    """
    out = [sample]
    if flip:
        out.append(Sample(sample.image[:, ::-1].copy(), sample.label, sample.ident + ":flip"))
    if shift:
        for dx, dy in SHIFTS:
            out.append(Sample(shift_crop(sample.image, dx, dy), sample.label,
                              f"{sample.ident}:shift({dx},{dy})"))
    return out


def augment_dataset(data, flip=True, shift=True):
    samples = []
    for s in data:
        samples.extend(augment(s, flip=flip, shift=shift))
    return Dataset.from_samples(samples, data.num_classes)


# on-disk image tree ------------------------------------------------------------

INDEX_NAME = "index.tsv"
INDEX_FIELDS = ("path", "label", "split", "id")


def write_image_tree(out_dir, splits):
    """Write ``{split_name: Dataset}`` as ``<out>/<split>/class<k>/<id>.pgm|ppm`` plus an index."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for split, data in splits.items():
        for s in data:
            ext = "pgm" if s.image.shape[2] == 1 else "ppm"
            rel = os.path.join(split, f"class{s.label}", f"{s.ident}.{ext}")
            os.makedirs(os.path.join(out_dir, os.path.dirname(rel)), exist_ok=True)
            pnm.write(os.path.join(out_dir, rel), s.image)
            rows.append((rel.replace(os.sep, "/"), s.label, split, s.ident))
    with open(os.path.join(out_dir, INDEX_NAME), "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(INDEX_FIELDS)
        writer.writerows(rows)
    return rows


def read_image_tree(root, split=None):
    """Read an image tree written by :func:`write_image_tree` (or by hand)."""
    path = os.path.join(root, INDEX_NAME)
    if not os.path.exists(path):
        raise DataError(f"no {INDEX_NAME} in {root}")
    images, labels, ids = [], [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f, delimiter="\t")
        for row in reader:
            if split is not None and row.get("split") != split:
                continue
            images.append(pnm.read(os.path.join(root, row["path"])))
            labels.append(int(row["label"]))
            ids.append(row.get("id") or row["path"])
    if not images:
        raise DataError(f"no samples{' for split ' + split if split else ''} in {root}")
    return Dataset(np.stack(images), labels, ids)
