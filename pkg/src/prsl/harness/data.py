"""Synthetic shape images with class labels and template captions."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InvalidConfigError
from ..models.specs import SPECIAL_TOKENS

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 1.0, 0.1),
    "blue": (0.15, 0.15, 1.0),
    "yellow": (1.0, 1.0, 0.1),
    "purple": (0.7, 0.1, 1.0),
    "cyan": (0.1, 1.0, 1.0),
    "orange": (1.0, 0.55, 0.0),
    "white": (1.0, 1.0, 1.0),
}
TEMPLATE_WORDS = (
    "a", "above", "and", "below", "image", "in", "is", "left", "of", "right", "the", "there",
)


def vocabulary() -> list[str]:
    """Special tokens first, then every word the caption templates can emit."""
    return [*SPECIAL_TOKENS, *sorted(set(TEMPLATE_WORDS) | set(SHAPES) | set(COLORS))]


def class_of(shape: str, color: str) -> int:
    return list(COLORS).index(color) * len(SHAPES) + SHAPES.index(shape)


def describe_class(label: int) -> tuple[str, str]:
    return SHAPES[label % len(SHAPES)], list(COLORS)[label // len(SHAPES)]


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    image_size: int = 12
    num_classes: int = 16
    n_train: int = 2000
    n_test: int = 500
    shapes_per_image: tuple = (1, 1)
    references_per_image: int = 3
    shape_size: int = 5
    noise: float = 0.3
    vocab_size: int = 64
    seed: int = 0
    channels: int = field(default=3, init=False)

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(self.shapes_per_image))
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi <= 2:
            raise InvalidConfigError("shapes_per_image must lie within 1..2")
        if not 2 <= self.num_classes <= len(SHAPES) * len(COLORS):
            raise InvalidConfigError(f"num_classes must lie in 2..{len(SHAPES) * len(COLORS)}")
        if not 1 <= self.references_per_image <= 3:
            raise InvalidConfigError("references_per_image must lie in 1..3")
        if self.image_size < self.shape_size or (hi == 2 and self.image_size < 2 * self.shape_size):
            raise InvalidConfigError("image too small for the requested shapes")
        if self.vocab_size < len(vocabulary()):
            raise InvalidConfigError(
                f"vocab_size {self.vocab_size} cannot hold the {len(vocabulary())} template tokens"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes_per_image"] = list(self.shapes_per_image)
        d.pop("channels")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        return cls(**{k: v for k, v in d.items() if k != "channels"})


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray
    references: list  # per item: list of token lists

    @property
    def captions(self) -> list:
        """Token-id training captions (the first reference of each item)."""
        index = {tok: i for i, tok in enumerate(vocabulary())}
        return [[index[t] for t in refs[0]] for refs in self.references]

    def targets(self, kind: str):
        return self.labels if kind == "classifier" else self.captions

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    train: Split
    test: Split

    @property
    def vocabulary(self) -> list[str]:
        return vocabulary()


def _mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2 - 0.25
    if shape == "triangle":
        return np.abs(xx - c) <= yy / 2 + 0.25
    return (np.abs(yy - c) <= 0.5) | (np.abs(xx - c) <= 0.5)


def _render(rng, spec, objects, layout):
    n, s = spec.image_size, spec.shape_size
    img = rng.uniform(0.0, spec.noise, size=(n, n, 3))
    half = n // 2
    for slot, (shape, color) in enumerate(objects):
        if layout == "single":
            y0, y1, x0, x1 = 0, n - s, 0, n - s
        elif layout == "vertical":
            y0, y1 = (0, half - s) if slot == 0 else (half, n - s)
            x0, x1 = 0, n - s
        else:
            y0, y1 = 0, n - s
            x0, x1 = (0, half - s) if slot == 0 else (half, n - s)
        y = int(rng.integers(y0, y1 + 1))
        x = int(rng.integers(x0, x1 + 1))
        intensity = rng.uniform(0.75, 1.0)
        rgb = np.array(COLORS[color]) * intensity
        m = _mask(shape, s)
        patch = img[y:y + s, x:x + s]
        patch[m] = np.clip(rgb + rng.uniform(0.0, 0.05, size=(m.sum(), 3)), 0.0, 1.0)
    return img


def _captions(objects, layout) -> list[list[str]]:
    (s1, c1), *rest = objects
    first = f"a {c1} {s1}"
    if layout == "single":
        texts = [first, f"there is {first}", f"{first} in the image"]
    else:
        s2, c2 = rest[0]
        second = f"a {c2} {s2}"
        if layout == "vertical":
            texts = [f"{first} above {second}", f"{second} below {first}", f"{first} and {second}"]
        else:
            texts = [f"{first} left of {second}", f"{second} right of {first}",
                     f"{first} and {second}"]
    return [t.split() for t in texts]


def _split(rng, spec, count) -> Split:
    images = np.empty((count, spec.image_size, spec.image_size, 3))
    labels = np.empty(count, dtype=np.int64)
    refs = []
    lo, hi = spec.shapes_per_image
    for i in range(count):
        k = int(rng.integers(lo, hi + 1))
        objects = [describe_class(int(rng.integers(spec.num_classes))) for _ in range(k)]
        layout = "single" if k == 1 else ("vertical" if rng.random() < 0.5 else "horizontal")
        images[i] = _render(rng, spec, objects, layout)
        labels[i] = class_of(*objects[0])
        refs.append(_captions(objects, layout)[: spec.references_per_image])
    return Split(images, labels, refs)


def generate_dataset(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    """Render train/test splits deterministically from ``spec.seed``."""
    train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(2)
    train = _split(np.random.default_rng(train_seq), spec, spec.n_train)
    test = _split(np.random.default_rng(test_seq), spec, spec.n_test)
    return SyntheticDataset(spec, train, test)


def linearly_separable_toy(n: int = 200, dim: int = 8, margin: float = 0.2, seed: int = 0):
    """Two-class points with a planted separating hyperplane and a margin.

    Returns ``(images, labels, normal)`` with images shaped ``(n, 1, dim, 1)``
    in ``[0, 1]``; ``labels == (x - 0.5) @ normal > 0`` holds for every point.
    """
    rng = np.random.default_rng(seed)
    normal = rng.normal(size=dim)
    normal /= np.linalg.norm(normal)
    points = []
    while len(points) < n:
        x = rng.uniform(0.0, 1.0, size=dim)
        if abs((x - 0.5) @ normal) >= margin / 2:
            points.append(x)
    x = np.array(points)
    labels = ((x - 0.5) @ normal > 0).astype(np.int64)
    return x.reshape(n, 1, dim, 1), labels, normal


def save_dataset(ds: SyntheticDataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "spec.json"), "w") as fh:
        json.dump(ds.spec.to_dict(), fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "vocab.json"), "w") as fh:
        json.dump(ds.vocabulary, fh, indent=1)
    for name, split in (("train", ds.train), ("test", ds.test)):
        np.save(os.path.join(out_dir, f"{name}_images.npy"), split.images)
        np.save(os.path.join(out_dir, f"{name}_labels.npy"), split.labels)
        with open(os.path.join(out_dir, f"{name}_references.json"), "w") as fh:
            json.dump([[" ".join(r) for r in refs] for refs in split.references], fh, indent=1)


def load_dataset(in_dir) -> SyntheticDataset:
    with open(os.path.join(in_dir, "spec.json")) as fh:
        spec = SyntheticDatasetSpec.from_dict(json.load(fh))
    splits = {}
    for name in ("train", "test"):
        with open(os.path.join(in_dir, f"{name}_references.json")) as fh:
            refs = [[r.split() for r in item] for item in json.load(fh)]
        splits[name] = Split(
            np.load(os.path.join(in_dir, f"{name}_images.npy")),
            np.load(os.path.join(in_dir, f"{name}_labels.npy")),
            refs,
        )
    return SyntheticDataset(spec, splits["train"], splits["test"])
