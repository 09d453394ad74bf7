"""Dataset ingestion, class-disjoint splits, augmentation and pair/episode sampling.

All images are float32 arrays shaped ``(C, H, W)`` with values in ``[0, 1]``.
Omniglot is stored with ink = 1 and background = 0 so that zero fill during
rotation and translation matches the background.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy import ndimage

from .exceptions import IngestionError, IntegrityError, SamplingError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif")
OMNIGLOT_IMAGES_PER_CLASS = 20
OMNIGLOT_SUBSETS = ("images_background", "images_evaluation")

MAX_ROTATION = 45.0
MAX_SHIFT = 6


@dataclass(frozen=True)
class Dataset:
    """Per-class image arrays.

    ``images[c]`` has shape ``(n_c, C, H, W)``; class ids are ``0..C-1`` in
    the canonical order produced by the loader.
    """

    images: list
    name: str = ""
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.images:
            raise IntegrityError("dataset has no classes")
        shape = self.images[0].shape[1:]
        for c, arr in enumerate(self.images):
            if arr.ndim != 4 or arr.shape[0] < 1:
                raise IntegrityError(f"class {c} has no images")
            if arr.shape[1:] != shape:
                raise IntegrityError(
                    f"class {c} has image shape {arr.shape[1:]}, expected {shape}")
        if self.class_names and len(self.class_names) != len(self.images):
            raise IntegrityError("class_names length does not match class count")

    @property
    def num_classes(self) -> int:
        return len(self.images)

    @property
    def class_ids(self) -> np.ndarray:
        return np.arange(self.num_classes)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images[0].shape[1:])

    def class_size(self, c: int) -> int:
        return self.images[c].shape[0]


@dataclass(frozen=True)
class ClassSplit:
    train: tuple
    validation: tuple
    test: tuple
    seed: int = 0

    def __post_init__(self):
        parts = {"train": set(self.train), "validation": set(self.validation),
                 "test": set(self.test)}
        names = list(parts)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                common = parts[a] & parts[b]
                if common:
                    raise IntegrityError(
                        f"split parts {a} and {b} share classes {sorted(common)[:5]}")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": list(self.train),
                "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSplit":
        return cls(tuple(int(c) for c in d["train"]),
                   tuple(int(c) for c in d["validation"]),
                   tuple(int(c) for c in d["test"]), int(d.get("seed", 0)))

    def save(self, path) -> None:
        """Write the split manifest as JSON (one list of class ids per part)."""
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ClassSplit":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PairBatch:
    """Rows of ``(x, x_t, y)``; ``y = 1`` when both images share a class."""

    x: np.ndarray
    x_t: np.ndarray
    y: np.ndarray
    class_x: np.ndarray = None
    class_t: np.ndarray = None

    def __post_init__(self):
        if self.x.shape != self.x_t.shape or len(self.y) != len(self.x):
            raise ValueError("x, x_t and y must have matching row counts and shapes")

    def __len__(self):
        return len(self.y)

    def take(self, index) -> "PairBatch":
        pick = lambda a: None if a is None else a[index]
        return PairBatch(self.x[index], self.x_t[index], self.y[index],
                         pick(self.class_x), pick(self.class_t))


@dataclass
class Episode:
    """Support set of ``n_way`` classes times ``k_shot`` exemplars plus queries.

    ``support_index`` and ``query_index`` hold ``(class, image)`` pairs into
    the source dataset.
    """

    support: np.ndarray
    support_labels: np.ndarray
    queries: np.ndarray
    query_labels: np.ndarray
    n_way: int
    k_shot: int
    support_index: list = field(default_factory=list)
    query_index: list = field(default_factory=list)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.support_labels)


# ---------------------------------------------------------------- loading

def _load_gray(path: Path, size) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L").resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(f"cannot read image {path}: {e}") from e


def _load_rgb(path: Path, size) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(f"cannot read image {path}: {e}") from e


def _image_files(folder: Path) -> list:
    return sorted(p for p in folder.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def _subdirs(folder: Path) -> list:
    return sorted((p for p in folder.iterdir() if p.is_dir()), key=lambda p: p.name)


def _character_key(path: Path):
    m = re.search(r"(\d+)$", path.name)
    return (int(m.group(1)) if m else float("inf"), path.name)


def omniglot_class_dirs(root) -> list:
    """Character directories in canonical (alphabet name, character index) order.

    ``root`` may hold the alphabets directly or the two official subset
    folders (``images_background`` / ``images_evaluation``), which are merged.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"Omniglot root {root} is not a directory")
    subsets = [root / s for s in OMNIGLOT_SUBSETS if (root / s).is_dir()]
    alphabets = []
    for base in (subsets or [root]):
        alphabets.extend(_subdirs(base))
    alphabets.sort(key=lambda p: (p.name, str(p)))
    classes = []
    for alphabet in alphabets:
        classes.extend(sorted(_subdirs(alphabet), key=_character_key))
    if not classes:
        raise IngestionError(f"no alphabet/character directories found under {root}")
    return classes


def load_omniglot(root, size=(28, 28),
                  images_per_class: int = OMNIGLOT_IMAGES_PER_CLASS) -> Dataset:
    """Load an Omniglot tree (``alphabet/character/*.png``) as a :class:`Dataset`.

    Images are rescaled to ``size`` and inverted so strokes are 1.
    """
    images, names = [], []
    for char_dir in omniglot_class_dirs(root):
        files = _image_files(char_dir)
        if len(files) != images_per_class:
            raise IntegrityError(
                f"{char_dir} has {len(files)} images, expected {images_per_class}")
        arr = np.stack([1.0 - _load_gray(f, size) for f in files])[:, None]
        images.append(arr.astype(np.float32))
        names.append(f"{char_dir.parent.name}/{char_dir.name}")
    return Dataset(images, name="omniglot", class_names=names)


def load_image_folder(root, size=(84, 84)) -> Dataset:
    """Load ``class_name/*.{png,jpg}`` RGB folders, bilinearly rescaled to ``size``."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"image folder root {root} is not a directory")
    class_dirs = _subdirs(root)
    if not class_dirs:
        raise IngestionError(f"no class directories under {root}")
    images, names = [], []
    for d in class_dirs:
        files = _image_files(d)
        if not files:
            raise IntegrityError(f"class folder {d} contains no images")
        images.append(np.stack([_load_rgb(f, size) for f in files]).astype(np.float32))
        names.append(d.name)
    return Dataset(images, name=root.name, class_names=names)


# ---------------------------------------------------------------- splitting

def make_split(dataset: Dataset, train_count: int, val_count: int,
               seed: int = 0) -> ClassSplit:
    """Split the first ``train_count + val_count`` classes into train/validation.

    Validation classes are a seeded draw from that prefix; every remaining
    class is a test class.
    """
    n = dataset.num_classes
    if train_count < 0 or val_count < 0 or train_count + val_count > n:
        raise ValueError(
            f"train_count={train_count} + val_count={val_count} exceeds {n} classes")
    head = np.arange(train_count + val_count)
    rng = np.random.default_rng(seed)
    val = np.sort(rng.choice(head, size=val_count, replace=False))
    train = np.setdiff1d(head, val)
    test = np.arange(train_count + val_count, n)
    return ClassSplit(tuple(int(c) for c in train), tuple(int(c) for c in val),
                      tuple(int(c) for c in test), seed)


# ---------------------------------------------------------------- augmentation

def _shift(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(arr)
    h, w = arr.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = arr[..., src_y, src_x]
    return out


def augment(image: np.ndarray, rotation_deg: float = 0.0, dx: int = 0, dy: int = 0,
            max_rotation: float = MAX_ROTATION, max_shift: int = MAX_SHIFT) -> np.ndarray:
    """Rotate about the image centre, then translate by whole pixels.

    Works on ``(C, H, W)`` or ``(B, C, H, W)``; positive ``dx`` moves content
    right, positive ``dy`` moves it down. Vacated pixels are filled with 0.
    """
    if abs(rotation_deg) > max_rotation:
        raise ValueError(f"rotation {rotation_deg} outside ±{max_rotation} degrees")
    if int(dx) != dx or int(dy) != dy or abs(dx) > max_shift or abs(dy) > max_shift:
        raise ValueError(f"shift ({dx}, {dy}) must be integers within ±{max_shift}")
    out = np.array(image, dtype=np.float32, copy=True)
    if rotation_deg != 0:
        out = ndimage.rotate(out, rotation_deg, axes=(-1, -2), reshape=False,
                             order=1, mode="constant", cval=0.0)
    if dx or dy:
        out = _shift(out, int(dx), int(dy))
    return np.clip(out, 0.0, 1.0, out=out)


def random_augment(batch: np.ndarray, rng: np.random.Generator,
                   max_rotation: float = MAX_ROTATION,
                   max_shift: int = MAX_SHIFT) -> np.ndarray:
    """Independent uniform rotation and integer shift for every image in ``batch``."""
    out = np.empty_like(batch)
    angles = rng.uniform(-max_rotation, max_rotation, size=len(batch))
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(batch), 2))
    for i, img in enumerate(batch):
        out[i] = augment(img, angles[i], shifts[i, 0], shifts[i, 1],
                         max_rotation=max_rotation, max_shift=max_shift)
    return out


# ---------------------------------------------------------------- sampling

def _as_classes(split_part: Iterable[int]) -> np.ndarray:
    return np.array(sorted(int(c) for c in split_part), dtype=np.int64)


def sample_pair_batch(dataset: Dataset, split_part: Iterable[int], batch_size: int,
                      rng: np.random.Generator) -> PairBatch:
    """Draw a label-balanced batch of same-class and different-class pairs.

    The conditioning class of every row is uniform over ``split_part``.
    Positives use two distinct images of one class; negatives use two
    distinct classes.
    """
    classes = _as_classes(split_part)
    if batch_size < 2:
        raise SamplingError("batch_size must be at least 2")
    if len(classes) < 2:
        raise SamplingError("pair sampling needs at least 2 classes")
    sizes = np.array([dataset.class_size(c) for c in classes])
    if (sizes < 2).any():
        raise SamplingError("every class must have at least 2 images for pair sampling")

    n_pos = batch_size // 2
    y = np.zeros(batch_size, dtype=np.int64)
    y[:n_pos] = 1
    y = rng.permutation(y)

    t_idx = rng.integers(0, len(classes), size=batch_size)
    other = rng.integers(0, len(classes) - 1, size=batch_size)
    x_idx = np.where(y == 1, t_idx, other + (other >= t_idx))
    cls_t, cls_x = classes[t_idx], classes[x_idx]

    xs, xts = [], []
    for c_x, c_t, same in zip(cls_x, cls_t, y):
        n = dataset.class_size(c_t)
        if same:
            i, j = rng.choice(n, size=2, replace=False)
        else:
            j = rng.integers(n)
            i = rng.integers(dataset.class_size(c_x))
        xs.append(dataset.images[c_x][i])
        xts.append(dataset.images[c_t][j])
    return PairBatch(np.stack(xs), np.stack(xts), y, cls_x, cls_t)


def sample_episode(dataset: Dataset, split_part: Iterable[int], n_way: int, k_shot: int,
                   n_queries: int, rng: np.random.Generator) -> Episode:
    """Sample ``n_way`` classes with ``k_shot`` exemplars each plus ``n_queries`` queries.

    Each query picks a support class uniformly and then one of that class's
    non-support images uniformly, with replacement across queries.
    """
    classes = _as_classes(split_part)
    if n_way < 1 or k_shot < 1 or n_queries < 0:
        raise SamplingError("n_way and k_shot must be positive, n_queries non-negative")
    if len(classes) < n_way:
        raise SamplingError(f"{len(classes)} classes available, {n_way}-way requested")
    chosen = np.sort(rng.choice(classes, size=n_way, replace=False))
    support, s_labels, s_index, pools = [], [], [], []
    for c in chosen:
        n = dataset.class_size(c)
        if n < k_shot + 1:
            raise SamplingError(
                f"class {c} has {n} images, needs at least {k_shot + 1}")
        order = rng.permutation(n)
        for i in order[:k_shot]:
            support.append(dataset.images[c][i])
            s_labels.append(c)
            s_index.append((int(c), int(i)))
        pools.append(order[k_shot:])

    q_images, q_labels, q_index = [], [], []
    for _ in range(n_queries):
        k = rng.integers(n_way)
        i = rng.choice(pools[k])
        c = chosen[k]
        q_images.append(dataset.images[c][i])
        q_labels.append(c)
        q_index.append((int(c), int(i)))
    queries = (np.stack(q_images) if q_images
               else np.empty((0,) + dataset.image_shape, dtype=np.float32))
    return Episode(np.stack(support), np.array(s_labels, dtype=np.int64), queries,
                   np.array(q_labels, dtype=np.int64), n_way, k_shot, s_index, q_index)


# ---------------------------------------------------------------- synthetic data

def _glyph_prototype(rng: np.random.Generator, size: int, strokes: int) -> list:
    return [rng.uniform(0.2, 0.8, size=(rng.integers(2, 4), 2)) * size
            for _ in range(strokes)]


def _render(strokes: Sequence[np.ndarray], size: int, width: float,
            scale: int = 4) -> np.ndarray:
    canvas = Image.new("L", (size * scale, size * scale), 0)
    draw = ImageDraw.Draw(canvas)
    for pts in strokes:
        draw.line([tuple(p * scale) for p in pts], fill=255,
                  width=max(1, int(round(width * scale))))
    canvas = canvas.resize((size, size), Image.BILINEAR)
    return np.asarray(canvas, dtype=np.float32) / 255.0


def synthetic_glyphs(num_classes: int = 20, per_class: int = 20, size: int = 28,
                     strokes: int = 3, jitter: float = 0.04, seed: int = 0) -> Dataset:
    """Omniglot-like stroke characters for tests and demos.

    Each class is a random set of polylines; instances perturb the control
    points by ``jitter`` (fraction of the image size).
    """
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(num_classes):
        proto = _glyph_prototype(rng, size, strokes)
        batch = []
        for _ in range(per_class):
            pts = [p + rng.normal(0, jitter * size, size=p.shape) for p in proto]
            batch.append(_render(pts, size, width=size / 14))
        images.append(np.stack(batch)[:, None])
    return Dataset(images, name="synthetic_glyphs")


def synthetic_blobs(per_class: int = 64, size: int = 8, sigma: float = 1.2,
                    jitter: float = 0.4, seed: int = 0) -> Dataset:
    """Two classes of Gaussian bumps, one in the upper-left and one in the lower-right.

    Bump centres are offset per image by normal noise with std ``jitter`` pixels.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    centres = [(size * 0.3, size * 0.3), (size * 0.7, size * 0.7)]
    images = []
    for cy, cx in centres:
        batch = []
        for _ in range(per_class):
            oy, ox = rng.normal(0, jitter, size=2)
            img = np.exp(-((yy - cy - oy) ** 2 + (xx - cx - ox) ** 2) / (2 * sigma ** 2))
            batch.append(img)
        images.append(np.stack(batch)[:, None].astype(np.float32))
    return Dataset(images, name="synthetic_blobs")


