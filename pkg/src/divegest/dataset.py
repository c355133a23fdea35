"""Labeled-image ingestion: class vocabulary, CSV manifests, splits, and a
synthetic desk-scale dataset of geometric glyphs.

Real underwater footage enters the pipeline as binary PPM files listed in a
``manifest.csv`` (header ``path,label``, paths relative to the manifest's
directory). The synthetic generator produces byte-identical datasets from a
seed so training runs are reproducible end to end.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from divegest import ppm

log = logging.getLogger(__name__)

# The 17-way diver gesture vocabulary: 16 gestures plus the negative class.
CADDY_CLASSES = (
    "backward", "boat", "carry", "delimiter", "down", "end", "five", "four",
    "here", "mosaic", "none", "one", "photo", "start", "three", "two", "up",
)

VOCAB_SIZE = 17


class DatasetError(ValueError):
    """Rejected manifest, label, or dataset input."""


class ClassVocab:
    """Ordered, validated list of exactly 17 class names."""

    def __init__(self, names: Sequence[str] = CADDY_CLASSES):
        names = tuple(names)
        if len(names) != VOCAB_SIZE:
            raise DatasetError(f"vocabulary must have exactly {VOCAB_SIZE} names, got {len(names)}")
        if len(set(names)) != len(names):
            raise DatasetError("vocabulary names must be unique")
        if "none" not in names:
            raise DatasetError("vocabulary must contain the negative class 'none'")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return VOCAB_SIZE

    def __iter__(self):
        return iter(self.names)

    def __getitem__(self, i: int) -> str:
        return self.names[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassVocab) and self.names == other.names

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DatasetError(f"unknown label {name!r}") from None


@dataclass
class Manifest:
    """Relative image paths with class names, rooted at one directory."""

    root: Path
    records: list[tuple[str, str]]
    vocab: ClassVocab

    def __len__(self) -> int:
        return len(self.records)

    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.vocab}
        for _, label in self.records:
            counts[label] += 1
        return counts

    def labels(self) -> np.ndarray:
        return np.array([self.vocab.index(lbl) for _, lbl in self.records], dtype=np.int64)


def load_manifest(csv_path, vocab: ClassVocab | None = None) -> Manifest:
    """Parse a ``path,label`` CSV; row numbers in errors count the header as row 1."""
    path = Path(csv_path)
    vocab = vocab or ClassVocab()
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty manifest")
    if rows[0] != ["path", "label"]:
        raise DatasetError(f"{path}: row 1: expected header 'path,label', got {','.join(rows[0])!r}")
    records: list[tuple[str, str]] = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DatasetError(f"{path}: row {i}: expected 2 fields, got {len(row)}")
        rel, label = row
        if not rel:
            raise DatasetError(f"{path}: row {i}: empty image path")
        if label not in vocab.names:
            raise DatasetError(f"row {i}: unknown label '{label}'")
        records.append((rel, label))
    if not records:
        raise DatasetError(f"{path}: manifest has a header but no records")
    return Manifest(root=path.parent, records=records, vocab=vocab)


def load_image(path) -> np.ndarray:
    """Decode one 8-bit RGB raster to a (3, H, W) float tensor in [0, 1]."""
    return ppm.read_ppm(path)


def save_image(path, image: np.ndarray) -> None:
    ppm.write_ppm(path, image)


@dataclass
class LabeledDataset:
    """Decoded images (N, 3, H, W) in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    vocab: ClassVocab
    files: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def load_dataset(manifest: Manifest) -> LabeledDataset:
    """Decode every manifest record into memory (desk-scale sizes only)."""
    if not manifest.records:
        raise DatasetError("manifest has no records")
    images = [load_image(manifest.root / rel) for rel, _ in manifest.records]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"images disagree on shape: {sorted(shapes)}")
    return LabeledDataset(
        images=np.stack(images),
        labels=manifest.labels(),
        vocab=manifest.vocab,
        files=[rel for rel, _ in manifest.records],
    )


def split(manifest: Manifest, fractions: tuple[float, float] = (0.8, 0.2),
          seed: int = 0) -> tuple[Manifest, Manifest]:
    """Stratified seeded split into (train, test).

    Each class is shuffled and partitioned independently with
    largest-remainder rounding, so the outputs are disjoint and their union
    is the input as a multiset. A class with fewer samples than split parts
    goes entirely to train, with a warning.
    """
    if any(f <= 0 for f in fractions):
        raise DatasetError(f"split fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)
    parts: tuple[list[tuple[str, str]], list[tuple[str, str]]] = ([], [])
    for name in manifest.vocab:
        members = [rec for rec in manifest.records if rec[1] == name]
        if not members:
            continue
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        if len(members) < len(fractions):
            log.warning("class %r has %d sample(s), fewer than %d split parts; all go to train",
                        name, len(members), len(fractions))
            parts[0].extend(shuffled)
            continue
        exact = [len(members) * f for f in fractions]
        counts = [int(np.floor(e)) for e in exact]
        remainders = [e - c for e, c in zip(exact, counts)]
        for _ in range(len(members) - sum(counts)):
            k = int(np.argmax(remainders))
            counts[k] += 1
            remainders[k] = -1.0
        parts[0].extend(shuffled[:counts[0]])
        parts[1].extend(shuffled[counts[0]:])
    train, test = parts
    return (Manifest(manifest.root, train, manifest.vocab),
            Manifest(manifest.root, test, manifest.vocab))


# ---------------------------------------------------------------------------
# synthetic surrogate dataset

@dataclass
class SyntheticSpec:
    """Parameters of the generated glyph dataset; a pure function of itself."""

    classes: int = 5
    per_class: int = 200
    size: int = 32
    seed: int = 0


def _glyph_mask(kind: int, size: int, cy: float, cx: float, scale: float) -> np.ndarray:
    """Boolean (size, size) mask of glyph ``kind`` centered at (cy, cx).

    17 distinct shapes; the first five are horizontal bar, vertical bar,
    diagonal, disc, cross.
    """
    r = np.arange(size)[:, None] - cy
    c = np.arange(size)[None, :] - cx
    half = scale * size * 0.34
    thick = max(1.5, scale * size * 0.08)
    rad = scale * size * 0.22

    hbar = (np.abs(r) <= thick) & (np.abs(c) <= half)
    vbar = (np.abs(c) <= thick) & (np.abs(r) <= half)
    diag = (np.abs(r - c) <= thick * 1.2) & (np.abs(r) <= half) & (np.abs(c) <= half)
    anti = (np.abs(r + c) <= thick * 1.2) & (np.abs(r) <= half) & (np.abs(c) <= half)
    disc = r * r + c * c <= rad * rad
    ring = (r * r + c * c <= rad * rad * 1.7) & (r * r + c * c >= rad * rad * 0.55)
    box = (np.maximum(np.abs(r), np.abs(c)) <= half * 0.8) & \
          (np.maximum(np.abs(r), np.abs(c)) >= half * 0.8 - thick)
    diamond = np.abs(r) + np.abs(c) <= rad * 1.6

    if kind == 0:
        return hbar
    if kind == 1:
        return vbar
    if kind == 2:
        return diag
    if kind == 3:
        return disc
    if kind == 4:
        return hbar | vbar
    if kind == 5:
        return anti
    if kind == 6:
        return ring
    if kind == 7:
        return box
    if kind == 8:
        return diag | anti
    if kind == 9:
        return (np.abs(r - half * 0.55) <= thick) & (np.abs(c) <= half) | \
               (np.abs(r + half * 0.55) <= thick) & (np.abs(c) <= half)
    if kind == 10:
        return (np.abs(c - half * 0.55) <= thick) & (np.abs(r) <= half) | \
               (np.abs(c + half * 0.55) <= thick) & (np.abs(r) <= half)
    if kind == 11:
        return r * r + c * c <= (rad * 0.5) ** 2
    if kind == 12:
        dots = np.zeros((size, size), dtype=bool)
        for sy in (-1, 1):
            for sx in (-1, 1):
                dots |= (r - sy * half * 0.6) ** 2 + (c - sx * half * 0.6) ** 2 <= (rad * 0.45) ** 2
        return dots
    if kind == 13:
        return ((np.abs(r + half * 0.6) <= thick) & (np.abs(c) <= half)) | \
               ((np.abs(c) <= thick) & (r >= -half * 0.6) & (r <= half))
    if kind == 14:
        return ((np.abs(c + half * 0.6) <= thick) & (np.abs(r) <= half)) | \
               ((np.abs(r - half * 0.6) <= thick) & (c >= -half * 0.6) & (c <= half))
    if kind == 15:
        quad = (r >= 0) ^ (c >= 0)
        return quad & (np.abs(r) <= half * 0.75) & (np.abs(c) <= half * 0.75)
    if kind == 16:
        return diamond
    raise DatasetError(f"no glyph defined for class index {kind}")


def render_glyph(class_index: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, size, size) sample: bright glyph on a noisy dark background."""
    jitter = size * 0.09
    cy = (size - 1) / 2 + rng.uniform(-jitter, jitter)
    cx = (size - 1) / 2 + rng.uniform(-jitter, jitter)
    scale = rng.uniform(0.8, 1.0)
    mask = _glyph_mask(class_index, size, cy, cx, scale)
    image = rng.normal(0.2, 0.03, size=(3, size, size))
    level = rng.uniform(0.85, 0.95)
    image[:, mask] = level + rng.normal(0.0, 0.02, size=(3, int(mask.sum())))
    return np.clip(image, 0.0, 1.0)


def synth_generate(spec: SyntheticSpec, out_dir) -> Manifest:
    """Write a deterministic glyph dataset: PPM files plus ``manifest.csv``."""
    if not 1 <= spec.classes <= VOCAB_SIZE:
        raise DatasetError(f"classes must be in [1, {VOCAB_SIZE}], got {spec.classes}")
    if spec.per_class < 1:
        raise DatasetError(f"per_class must be >= 1, got {spec.per_class}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = ClassVocab()
    rng = np.random.default_rng(spec.seed)
    records: list[tuple[str, str]] = []
    for ci in range(spec.classes):
        name = vocab[ci]
        for k in range(spec.per_class):
            fname = f"{name}_{k:04d}.ppm"
            ppm.write_ppm(out / fname, render_glyph(ci, spec.size, rng))
            records.append((fname, name))
    with open(out / "manifest.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("path,label\n")
        for rel, label in records:
            fh.write(f"{rel},{label}\n")
    return Manifest(root=out, records=records, vocab=vocab)
