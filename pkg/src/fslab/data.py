"""Image pools, few-shot episodes, batch samplers, augmentation, and datasets."""

from __future__ import annotations

import colorsys
import csv
import enum
import math
import os
from dataclasses import dataclass

import numpy as np

from fslab.ppm import PPMError, read_ppm, write_ppm
from fslab.rng import stream


class DataError(ValueError):
    """Dataset content or episode request is invalid."""


class SamplerConfigError(ValueError):
    pass


@dataclass(eq=False)
class LabeledImage:
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    class_id: int
    source_id: str


@dataclass
class Dataset:
    train: list
    val: list
    class_names: list
    image_size: int

    @property
    def num_classes(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.train) + len(self.val)


@dataclass
class Episode:
    support: list
    query: list
    n_shot: int
    class_ids: list


@dataclass
class BatchPlan:
    batches: list
    sampler_kind: str
    classes_per_batch: int | None = None
    instances_per_class: int | None = None

    def __len__(self):
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


class AugmentLevel(enum.Enum):
    NONE = "none"
    LOW = "low"
    HIGH = "high"

    @classmethod
    def parse(cls, text):
        try:
            return cls(str(text).strip().lower())
        except ValueError:
            raise ValueError(f"unknown augmentation level {text!r}; expected none, low, or high") from None


# magnitudes are calibration choices, recorded in run metadata
AUGMENT_PARAMS = {
    "crop_scale": (0.6, 1.0),
    "crop_ratio": (3 / 4, 4 / 3),
    "flip_p": 0.5,
    "jitter": (0.7, 1.3),
    "grayscale_p": 0.2,
    "center_crop_fraction": 1.0,
}


# ---------------------------------------------------------------------------
# pools and episodes
# ---------------------------------------------------------------------------


def _by_class(items):
    groups = {}
    for it in items:
        groups.setdefault(it.class_id, []).append(it)
    return groups


def build_pools(dataset, per_class=20):
    """First ``per_class`` images of each class from the train and val splits."""
    if per_class < 1:
        raise DataError("per_class must be >= 1")
    pools = []
    for split_name, items in (("train", dataset.train), ("val", dataset.val)):
        groups = _by_class(items)
        pool = []
        for cid in range(dataset.num_classes):
            got = groups.get(cid, [])
            if len(got) < per_class:
                raise DataError(
                    f"class {dataset.class_names[cid]!r} has {len(got)} {split_name} images, need {per_class}"
                )
            pool.extend(got[:per_class])
        pools.append(pool)
    return pools[0], pools[1]


def heldout_images(dataset, per_class=20):
    """Train-split images past the first ``per_class`` of each class (disjoint from both pools)."""
    out = []
    for cid, items in sorted(_by_class(dataset.train).items()):
        out.extend(items[per_class:])
    return out


def sample_episode(train_pool, test_pool, n_shot, seed):
    """Draw ``n_shot`` support images per class without replacement; query is the whole test pool."""
    groups = _by_class(train_pool)
    if n_shot < 1:
        raise DataError("n_shot must be >= 1")
    rng = stream(seed, "episode", n_shot)
    support = []
    for cid in sorted(groups):
        items = groups[cid]
        if n_shot > len(items):
            raise DataError(f"n_shot {n_shot} exceeds the {len(items)} images of class {cid}")
        idx = np.sort(rng.choice(len(items), size=n_shot, replace=False))
        support.extend(items[i] for i in idx)
    return Episode(support=support, query=list(test_pool), n_shot=n_shot, class_ids=sorted(groups))


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


class _Cycler:
    """Endless reshuffled cycle that never repeats an item inside one draw."""

    def __init__(self, items, rng):
        self.items = list(items)
        self.rng = rng
        self.queue = []

    def draw(self, k):
        if k > len(self.items):
            raise SamplerConfigError(f"cannot draw {k} distinct items from {len(self.items)}")
        out = self.queue[:k]
        self.queue = self.queue[k:]
        while len(out) < k:
            fresh = [self.items[i] for i in self.rng.permutation(len(self.items))]
            taken = set(out)
            head = [x for x in fresh if x not in taken][: k - len(out)]
            out.extend(head)
            used = set(head)
            self.queue = [x for x in fresh if x not in used]
        return out


def stratified_batches(labels, classes_per_batch, instances_per_class, seed, num_batches=None, epoch=0):
    """Batches of ``classes_per_batch`` distinct classes x ``instances_per_class`` samples each.

    Classes cycle so every class appears before any repeats; within a class,
    samples cycle so each is used before any is reused. The default length
    covers the dataset once.
    """
    labels = np.asarray(labels, dtype=int)
    if instances_per_class < 2:
        raise SamplerConfigError("instances_per_class must be >= 2, otherwise the contrastive loss has no positives")
    classes = sorted(set(labels.tolist()))
    if classes_per_batch < 1 or classes_per_batch > len(classes):
        raise SamplerConfigError(f"classes_per_batch {classes_per_batch} not in [1, {len(classes)}]")
    rng = stream(seed, "sampler", "stratified", epoch)
    members = {c: np.flatnonzero(labels == c).tolist() for c in classes}
    for c, m in members.items():
        if len(m) < instances_per_class:
            raise SamplerConfigError(f"class {c} has {len(m)} samples, fewer than instances_per_class={instances_per_class}")
    if num_batches is None:
        num_batches = max(1, math.ceil(len(labels) / (classes_per_batch * instances_per_class)))
    class_cycle = _Cycler(classes, rng)
    sample_cycles = {c: _Cycler(members[c], rng) for c in classes}
    batches = []
    for _ in range(num_batches):
        batch = []
        for c in class_cycle.draw(classes_per_batch):
            batch.extend(sample_cycles[c].draw(instances_per_class))
        batches.append(batch)
    return BatchPlan(batches, "stratified", classes_per_batch, instances_per_class)


def random_batches(labels, batch_size, seed, epoch=0):
    """Seeded permutation chunked into batches; the last may be short."""
    if batch_size < 1:
        raise SamplerConfigError("batch_size must be >= 1")
    n = len(labels)
    perm = stream(seed, "sampler", "random", epoch).permutation(n).tolist()
    return BatchPlan([perm[i:i + batch_size] for i in range(0, n, batch_size)], "random")


def has_positive_pairs(plan, labels):
    """Every class present in every batch appears at least twice."""
    labels = np.asarray(labels)
    for batch in plan.batches:
        _, counts = np.unique(labels[batch], return_counts=True)
        if np.any(counts < 2):
            return False
    return True


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def resize_bilinear(img, out_h, out_w, box=None):
    """Sample ``box = (top, left, height, width)`` of ``img`` onto an ``out_h x out_w`` grid."""
    _, h, w = img.shape
    top, left, bh, bw = box if box is not None else (0.0, 0.0, float(h), float(w))
    ys = top + (np.arange(out_h) + 0.5) * (bh / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (bw / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[:, y0][:, :, x0]
    b = img[:, y0][:, :, x1]
    c = img[:, y1][:, :, x0]
    d = img[:, y1][:, :, x1]
    return (a * (1 - wx) + b * wx) * (1 - wy) + (c * (1 - wx) + d * wx) * wy


def to_grayscale(img):
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.stack([lum, lum, lum])


def center_crop(img, size, fraction=1.0):
    _, h, w = img.shape
    scaled = int(round(size / fraction))
    short = min(h, w)
    nh, nw = round(h * scaled / short), round(w * scaled / short)
    img = resize_bilinear(img, nh, nw)
    top, left = (nh - size) // 2, (nw - size) // 2
    return img[:, top:top + size, left:left + size]


def _random_resized_crop(img, size, rng):
    _, h, w = img.shape
    area = h * w
    lo, hi = AUGMENT_PARAMS["crop_scale"]
    rlo, rhi = AUGMENT_PARAMS["crop_ratio"]
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(math.log(rlo), math.log(rhi)))
        cw = math.sqrt(target * ratio)
        ch = math.sqrt(target / ratio)
        if cw <= w and ch <= h:
            top = rng.uniform(0, h - ch)
            left = rng.uniform(0, w - cw)
            return resize_bilinear(img, size, size, (top, left, ch, cw))
    return center_crop(img, size)


def _color_jitter(img, rng):
    lo, hi = AUGMENT_PARAMS["jitter"]
    bright, contrast, sat = rng.uniform(lo, hi, size=3)
    img = np.clip(img * bright, 0, 1)
    mean_lum = to_grayscale(img)[0].mean()
    img = np.clip((img - mean_lum) * contrast + mean_lum, 0, 1)
    gray = to_grayscale(img)
    return np.clip(gray + (img - gray) * sat, 0, 1)


def augment_pixels(pixels, level, rng, size=None):
    level = AugmentLevel.parse(level.value if isinstance(level, AugmentLevel) else level)
    size = size or pixels.shape[-1]
    if level is AugmentLevel.NONE:
        out = center_crop(pixels, size, AUGMENT_PARAMS["center_crop_fraction"])
        return np.clip(out, 0.0, 1.0)
    out = _random_resized_crop(pixels, size, rng)
    if rng.random() < AUGMENT_PARAMS["flip_p"]:
        out = out[:, :, ::-1]
    if level is AugmentLevel.HIGH:
        out = _color_jitter(out, rng)
        if rng.random() < AUGMENT_PARAMS["grayscale_p"]:
            out = to_grayscale(out)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def augment(image, level, rng, size=None):
    """Augmented copy of a :class:`LabeledImage`; ``NONE`` is deterministic."""
    return LabeledImage(augment_pixels(image.pixels, level, rng, size), image.class_id, image.source_id)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

_GOLDEN = 0.6180339887498949


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, float(np.clip(s, 0, 1)), float(np.clip(v, 0, 1))))


def _class_template(c):
    return {
        "hue": (c * _GOLDEN) % 1.0,
        "pattern": c % 3,
        "freq": 1.5 + (c // 3) % 3,
        "angle": math.radians((c * 47) % 180),
    }


def render_synthetic(c, size, rng):
    """One jittered image of synthetic class ``c``."""
    t = _class_template(c)
    hue = t["hue"] + rng.normal(0.0, 0.04)
    fg = _hsv(hue, 0.8, rng.uniform(0.75, 1.0))
    bg = _hsv(hue + 0.08, 0.5, rng.uniform(0.15, 0.4))
    yy, xx = np.mgrid[0:size, 0:size] / size
    yy = yy + rng.uniform(-0.15, 0.15)
    xx = xx + rng.uniform(-0.15, 0.15)
    freq = t["freq"] * rng.uniform(0.8, 1.2)
    ang = t["angle"] + rng.normal(0.0, 0.2)
    phase = rng.uniform(0, 2 * np.pi)
    if t["pattern"] == 0:
        u = xx * math.cos(ang) + yy * math.sin(ang)
        m = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase)
    elif t["pattern"] == 1:
        u = xx * math.cos(ang) + yy * math.sin(ang)
        v = -xx * math.sin(ang) + yy * math.cos(ang)
        m = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * freq * u + phase) * np.sin(2 * np.pi * freq * v))
        m = 0.2 + 0.6 * m
    else:
        gx = (xx * freq) % 1.0 - 0.5
        gy = (yy * freq) % 1.0 - 0.5
        r = np.sqrt(gx * gx + gy * gy)
        radius = 0.3 * rng.uniform(0.8, 1.2)
        m = 1.0 / (1.0 + np.exp((r - radius) / 0.04))
    img = bg[:, None, None] + m[None] * (fg - bg)[:, None, None]
    img = img + rng.normal(0.0, 0.06, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(num_classes, per_class, image_size=32, seed=0, class_offset=0):
    """Procedural dataset; the first half of each class goes to ``train``, the rest to ``val``.

    ``class_offset`` selects templates ``offset .. offset + num_classes - 1``,
    giving class sets disjoint from the default ones.
    """
    if num_classes < 2:
        raise DataError("synthetic dataset needs at least 2 classes")
    if per_class < 2:
        raise DataError("synthetic dataset needs at least 2 images per class")
    n_train = per_class - per_class // 2
    train, val = [], []
    for c in range(num_classes):
        rng = stream(seed, "synth", class_offset + c)
        for i in range(per_class):
            img = LabeledImage(render_synthetic(class_offset + c, image_size, rng), c, f"synth/{class_offset + c}/{i}")
            (train if i < n_train else val).append(img)
    names = [f"class{class_offset + c:03d}" for c in range(num_classes)]
    return Dataset(train, val, names, image_size)


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------

SPLITS = ("train", "val")


def load_manifest(path, image_size=32):
    """Read a ``path,label,split`` CSV of P6 images; labels map to sorted dense ids."""
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "label", "split"]:
            raise DataError(f"{path}: header must be 'path,label,split'")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: manifest has no rows")
    for n, row in enumerate(rows, start=2):
        if row["split"] not in SPLITS:
            raise DataError(f"{path}:{n}: unknown split {row['split']!r}; expected train or val")
    names = sorted({row["label"] for row in rows})
    ids = {name: i for i, name in enumerate(names)}
    train, val = [], []
    for row in rows:
        img_path = row["path"] if os.path.isabs(row["path"]) else os.path.join(base, row["path"])
        if not os.path.isfile(img_path):
            raise DataError(f"image not found: {img_path}")
        try:
            px = read_ppm(img_path)
        except PPMError as exc:
            raise DataError(f"{img_path}: {exc}") from exc
        if px.shape[1:] != (image_size, image_size):
            px = np.clip(resize_bilinear(px, image_size, image_size), 0.0, 1.0)
        item = LabeledImage(px, ids[row["label"]], row["path"])
        (train if row["split"] == "train" else val).append(item)
    return Dataset(train, val, names, image_size)


def write_dataset(dataset, out_dir):
    """Emit P6 images plus ``manifest.csv`` that :func:`load_manifest` reads back."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for split, items in (("train", dataset.train), ("val", dataset.val)):
        counters = {}
        for it in items:
            name = dataset.class_names[it.class_id]
            k = counters.get(name, 0)
            counters[name] = k + 1
            rel = os.path.join(split, name, f"{k:04d}.ppm")
            os.makedirs(os.path.join(out_dir, split, name), exist_ok=True)
            write_ppm(os.path.join(out_dir, rel), it.pixels)
            rows.append((rel, name, split))
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        w.writerows(rows)
    return manifest


def stack_pixels(items):
    return np.stack([it.pixels for it in items]) if items else np.zeros((0, 3, 1, 1))


def labels_of(items):
    return np.array([it.class_id for it in items], dtype=int)
