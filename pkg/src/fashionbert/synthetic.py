"""Procedural fashion-like products: attribute tuples, rendered images and
templated descriptions.

Every attribute is drawn in a fixed region of a 16x16 layout lattice so
particular patches carry particular attributes: the trim band sits on the
top garment rows, sleeves on the side columns, the pattern covers the body.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import read_image, to_uint8, write_ppm

COLORS = {
    "black": (0.05, 0.05, 0.05),
    "white": (0.95, 0.95, 0.95),
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.20),
    "blue": (0.10, 0.25, 0.85),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.95, 0.50, 0.05),
    "pink": (0.98, 0.60, 0.75),
}
PATTERNS = ("plain", "striped", "checked")
SHAPES = ("top", "pants", "dress")
SLEEVES = ("long", "short", "none")
BACKGROUND = (0.5, 0.5, 0.5)
LATTICE = 16
NOISE = 0.03
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Attributes:
    base: str
    accent: str
    pattern: str
    shape: str
    sleeve: str

    def as_tuple(self) -> tuple[str, ...]:
        return (self.base, self.accent, self.pattern, self.shape, self.sleeve)


@dataclass
class ProductRecord:
    product_id: int
    attributes: Attributes
    image: np.ndarray
    description: str


def attribute_space() -> list[Attributes]:
    return [Attributes(*t) for t in itertools.product(COLORS, COLORS, PATTERNS, SHAPES, SLEEVES)]


def describe(attrs: Attributes) -> str:
    """e.g. ``long sleeve striped top in black with red trim``."""
    head = f"{attrs.sleeve} sleeve " if attrs.sleeve != "none" else ""
    return f"{head}{attrs.pattern} {attrs.shape} in {attrs.base} with {attrs.accent} trim"


def vocabulary_words() -> set[str]:
    """Every word the description templates can emit."""
    words = set(COLORS) | set(PATTERNS) | set(SHAPES) | {s for s in SLEEVES if s != "none"}
    return words | {"sleeve", "in", "with", "trim"}


def _overlay_color(rgb: np.ndarray) -> np.ndarray:
    lum = rgb @ np.array([0.299, 0.587, 0.114])
    return rgb * 0.45 if lum > 0.5 else rgb * 0.45 + 0.55


def _layout(attrs: Attributes) -> tuple[np.ndarray, np.ndarray]:
    """Lattice masks ``(body, trim)``; body includes the sleeves."""
    body = np.zeros((LATTICE, LATTICE), dtype=bool)
    if attrs.shape == "top":
        body[2:10, 5:11] = True
    elif attrs.shape == "dress":
        body[2:8, 5:11] = True
        body[8:15, 4:12] = True
    else:  # pants
        body[2:5, 4:12] = True
        body[5:15, 4:7] = True
        body[5:15, 9:12] = True
    if attrs.sleeve == "long":
        body[2:10, 2:5] = True
        body[2:10, 11:14] = True
    elif attrs.sleeve == "short":
        body[2:5, 2:5] = True
        body[2:5, 11:14] = True
    trim = np.zeros_like(body)
    trim[2:3] = body[2:3]
    trim[2:3, 2:5] = trim[2:3, 11:14] = False
    return body & ~trim, trim


def render(attrs: Attributes, size: int = 64, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw the product at ``size x size``; pixel values are multiples of 1/255."""
    if size % LATTICE:
        raise ValueError(f"image size must be a multiple of {LATTICE}")
    body, trim = _layout(attrs)
    base = np.array(COLORS[attrs.base])
    alt = _overlay_color(base)
    cells = np.empty((LATTICE, LATTICE, 3))
    cells[:] = BACKGROUND
    rows, cols = np.indices((LATTICE, LATTICE))
    if attrs.pattern == "striped":
        use_alt = rows % 2 == 1
    elif attrs.pattern == "checked":
        use_alt = (rows + cols) % 2 == 1
    else:
        use_alt = np.zeros_like(body)
    cells[body] = base
    cells[body & use_alt] = alt
    cells[trim] = COLORS[attrs.accent]
    unit = size // LATTICE
    image = np.repeat(np.repeat(cells, unit, axis=0), unit, axis=1)
    if rng is not None:
        image = image + rng.uniform(-NOISE, NOISE, size=image.shape)
    return to_uint8(image).astype(np.float64) / 255.0


def generate_dataset(count: int, image_size: int = 64, seed: int = 0) -> list[ProductRecord]:
    """``count`` products with distinct attribute tuples, sampled uniformly."""
    space = attribute_space()
    if count < 2:
        raise ValueError("need at least two products")
    if count > len(space):
        raise ValueError(f"only {len(space)} distinct attribute tuples exist, {count} requested")
    order = np.random.default_rng(seed).permutation(len(space))[:count]
    records = []
    for pid, idx in enumerate(order):
        attrs = space[idx]
        # per-record stream: generation order does not matter
        rng = np.random.default_rng([seed, pid])
        records.append(ProductRecord(pid, attrs, render(attrs, image_size, rng), describe(attrs)))
    return records


def split_ids(ids, seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[int]]:
    """Disjoint train/val/test lists of product ids."""
    ids = np.array(sorted(ids))
    perm = np.random.default_rng([seed, 0x5117]).permutation(ids)
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    parts = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    return {name: sorted(int(i) for i in part) for name, part in zip(SPLIT_NAMES, parts)}


# ---------------------------------------------------------------------------
# corpus directory
# ---------------------------------------------------------------------------


def write_corpus(directory, records: list[ProductRecord], splits: dict[str, list[int]]) -> None:
    """``products.txt`` + ``images/<id>.ppm`` + one id file per split."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        fields = [str(rec.product_id), *rec.attributes.as_tuple(), rec.description]
        lines.append("\t".join(fields) + "\n")
        write_ppm(root / "images" / f"{rec.product_id}.ppm", rec.image)
    (root / "products.txt").write_text("".join(lines), encoding="utf-8")
    for name, ids in splits.items():
        (root / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def read_corpus(directory) -> tuple[list[ProductRecord], dict[str, list[int]]]:
    root = Path(directory)
    products = root / "products.txt"
    if not products.exists():
        raise FileNotFoundError(f"{products} not found")
    records = []
    for lineno, line in enumerate(products.read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 7:
            raise ValueError(f"{products}:{lineno}: expected 7 tab-separated fields")
        pid = int(parts[0])
        records.append(ProductRecord(pid, Attributes(*parts[1:6]), read_image(root / "images" / f"{pid}.ppm"), parts[6]))
    splits = {}
    for name in SPLIT_NAMES:
        path = root / f"{name}.txt"
        if path.exists():
            splits[name] = [int(x) for x in path.read_text().split()]
    return records, splits
