"""Synthetic glyph dataset with ground-truth teacher maps.

Each class is a fixed 4x4-cell binary glyph rendered into a 2x2-patch block
(8x8 pixels) at a random patch-aligned position over textured background
noise, alongside decoy blocks drawn from a small set of regular textures
(checkerboards, stripes) at the same contrast. The patch mask marks the true
glyph's four patches and the teacher map is built from it. Localization
therefore carries the class signal: the true glyph is separable from the
decoys only by its pattern structure, which attention supervision hands to
the model directly while plain task training has to discover it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .teacher import TeacherMap, mask_teacher, read_tim, write_tim

MAX_CLASSES = 16
GLYPH_CELLS = 4          # glyph is GLYPH_CELLS x GLYPH_CELLS cells
CELL_PIXELS = 2          # each cell is CELL_PIXELS x CELL_PIXELS pixels
GLYPH_PATCHES = 2        # glyph spans GLYPH_PATCHES x GLYPH_PATCHES patches
NUM_DISTRACTORS = 2
GLYPH_ON, GLYPH_OFF = 1.0, 0.0
DECOY_ON, DECOY_OFF = 0.75, 0.2  # weaker contrast separates decoys from glyphs
BG_LOW, BG_HIGH = 0.25, 0.65

_PATTERN_SEED = 0x67C5  # class glyphs are a fixed alphabet, not per-dataset


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 10
    samples: int = 2000
    noise_sigma: float = 0.0
    split: float = 0.8  # fraction of each class used for training
    image_size: int = 32
    patch_size: int = 4

    def __post_init__(self) -> None:
        if not 1 <= self.classes <= MAX_CLASSES:
            raise ValueError(f"classes must be in [1, {MAX_CLASSES}]")
        if self.samples < self.classes or self.samples % self.classes:
            raise ValueError("samples must be a positive multiple of classes")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must be in (0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


@dataclass
class Dataset:
    spec: DatasetSpec
    seed: int
    images: np.ndarray    # (S, H, W, 1) float32 in [0, 1]
    labels: np.ndarray    # (S,) int64
    masks: np.ndarray     # (S, N) uint8
    teachers: np.ndarray  # (S, N) float32, rows sum to 1
    train_idx: np.ndarray
    val_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


def _popcount_rows(bits: np.ndarray) -> np.ndarray:
    return bits.reshape(len(bits), -1).sum(axis=1)


def glyph_alphabet(classes: int) -> np.ndarray:
    """Fixed, distinct binary glyph patterns, (classes, 4, 4) uint8.

    Patterns keep 6..10 of 16 cells set and pairwise Hamming distance >= 5,
    so classes stay readable even at low contrast."""
    rng = np.random.default_rng(_PATTERN_SEED)
    chosen: list[np.ndarray] = []
    while len(chosen) < classes:
        cand = (rng.random((GLYPH_CELLS, GLYPH_CELLS)) < 0.5).astype(np.uint8)
        bits = int(cand.sum())
        if not 6 <= bits <= 10:
            continue
        if any(int(np.sum(cand != c)) < 5 for c in chosen):
            continue
        chosen.append(cand)
    return np.stack(chosen)


def _render_glyph(img: np.ndarray, pattern: np.ndarray, pr: int, pc: int,
                  patch_size: int, on: float = GLYPH_ON,
                  off: float = GLYPH_OFF) -> None:
    """Draw a glyph into the 2x2-patch block at patch coords (pr, pc)."""
    y0, x0 = pr * patch_size, pc * patch_size
    for ci in range(GLYPH_CELLS):
        for cj in range(GLYPH_CELLS):
            val = on if pattern[ci, cj] else off
            y = y0 + ci * CELL_PIXELS
            x = x0 + cj * CELL_PIXELS
            img[y:y + CELL_PIXELS, x:x + CELL_PIXELS] = val




def _decoy_pattern(rng: np.random.Generator, alphabet: np.ndarray) -> np.ndarray:
    """A glyph-like pattern at Hamming distance >= 3 from every class glyph."""
    while True:
        cand = (rng.random((GLYPH_CELLS, GLYPH_CELLS)) < 0.5).astype(np.uint8)
        bits = int(cand.sum())
        if not 6 <= bits <= 10:
            continue
        if all(int(np.sum(cand != a)) >= 3 for a in alphabet):
            return cand


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Box-smoothed noise rescaled into [BG_LOW, BG_HIGH]."""
    raw = rng.random((size + 1, size + 1))
    sm = (raw[:-1, :-1] + raw[1:, :-1] + raw[:-1, 1:] + raw[1:, 1:]) / 4.0
    return (BG_LOW + (BG_HIGH - BG_LOW) * sm).astype(np.float64)


def _sample(spec: DatasetSpec, alphabet: np.ndarray, label: int,
            sample_seed: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, TeacherMap]:
    rng = np.random.default_rng(sample_seed)
    g = spec.grid
    img = _textured_background(rng, spec.image_size)

    span = g - GLYPH_PATCHES + 1
    pr, pc = int(rng.integers(span)), int(rng.integers(span))
    blocks = [(pr, pc)]
    for _ in range(NUM_DISTRACTORS):
        for _attempt in range(50):
            dr, dc = int(rng.integers(span)), int(rng.integers(span))
            if all(abs(dr - br) >= GLYPH_PATCHES or abs(dc - bc) >= GLYPH_PATCHES
                   for br, bc in blocks):
                blocks.append((dr, dc))
                _render_glyph(img, _decoy_pattern(rng, alphabet), dr, dc,
                              spec.patch_size, on=DECOY_ON, off=DECOY_OFF)
                break
    _render_glyph(img, alphabet[label], pr, pc, spec.patch_size)

    mask = np.zeros((g, g), dtype=np.uint8)
    mask[pr:pr + GLYPH_PATCHES, pc:pc + GLYPH_PATCHES] = 1
    mask = mask.reshape(-1)
    teacher = mask_teacher(mask, sigma=spec.noise_sigma,
                           seed=int(rng.integers(2**31)), grid_h=g, grid_w=g)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[..., None], mask, teacher


def gen_synthetic(spec: DatasetSpec, seed: int) -> Dataset:
    """Deterministic dataset: the seed fixes every image, mask, and teacher.

    Samples are balanced over classes; the train/val split is stratified per
    class so ablation medians are comparable across seeds."""
    alphabet = glyph_alphabet(spec.classes)
    per_class = spec.samples // spec.classes
    images = np.empty((spec.samples, spec.image_size, spec.image_size, 1), np.float32)
    labels = np.empty(spec.samples, np.int64)
    masks = np.empty((spec.samples, spec.num_patches), np.uint8)
    teachers = np.empty((spec.samples, spec.num_patches), np.float32)

    i = 0
    train_idx, val_idx = [], []
    for label in range(spec.classes):
        n_train = int(round(per_class * spec.split))
        for j in range(per_class):
            img, mask, tmap = _sample(spec, alphabet, label, (seed, i))
            images[i], labels[i], masks[i] = img, label, mask
            teachers[i] = tmap.values
            (train_idx if j < n_train else val_idx).append(i)
            i += 1
    return Dataset(spec, seed, images, labels, masks, teachers,
                   np.asarray(train_idx), np.asarray(val_idx))


def teacher_map(ds: Dataset, i: int) -> TeacherMap:
    g = ds.spec.grid
    return TeacherMap(g, g, ds.teachers[i], provenance="synthetic")


# ---------------------------------------------------------------------------
# Directory cache: manifest plus one raw binary file per sample
# ---------------------------------------------------------------------------

_SAMPLE_HEADER = struct.Struct("<IIII")  # label, height, width, channels


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"seed = {ds.seed}",
        f"classes = {ds.spec.classes}",
        f"samples = {ds.spec.samples}",
        f"noise_sigma = {ds.spec.noise_sigma}",
        f"split = {ds.spec.split}",
        f"image_size = {ds.spec.image_size}",
        f"patch_size = {ds.spec.patch_size}",
    ]
    for i in range(len(ds)):
        part = "train" if i in set(ds.train_idx.tolist()) else "val"
        name = f"sample_{i:05d}.bin"
        lines.append(f"sample {i} file={name} label={int(ds.labels[i])} split={part}")
        img = ds.images[i]
        payload = _SAMPLE_HEADER.pack(int(ds.labels[i]), *img.shape)
        payload += img.astype("<f4").tobytes()
        payload += ds.masks[i].astype(np.uint8).tobytes()
        (out / name).write_bytes(payload)
        write_tim(teacher_map(ds, i), out / f"sample_{i:05d}.tim")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest} not found; not a dataset directory")
    head: dict[str, str] = {}
    rows: list[tuple[int, str, int, str]] = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("sample "):
            _, idx, rest = line.split(" ", 2)
            kv = dict(p.split("=", 1) for p in rest.split())
            rows.append((int(idx), kv["file"], int(kv["label"]), kv["split"]))
        else:
            key, _, value = line.partition(" = ")
            head[key] = value
    spec = DatasetSpec(
        classes=int(head["classes"]), samples=int(head["samples"]),
        noise_sigma=float(head["noise_sigma"]), split=float(head["split"]),
        image_size=int(head["image_size"]), patch_size=int(head["patch_size"]))
    n = len(rows)
    images = np.empty((n, spec.image_size, spec.image_size, 1), np.float32)
    labels = np.empty(n, np.int64)
    masks = np.empty((n, spec.num_patches), np.uint8)
    teachers = np.empty((n, spec.num_patches), np.float32)
    train_idx, val_idx = [], []
    for idx, fname, label, part in rows:
        raw = (root / fname).read_bytes()
        lab, h, w, c = _SAMPLE_HEADER.unpack_from(raw)
        if lab != label:
            raise ValueError(f"{fname}: label mismatch with manifest")
        npix = h * w * c
        images[idx] = np.frombuffer(
            raw, "<f4", count=npix, offset=_SAMPLE_HEADER.size).reshape(h, w, c)
        masks[idx] = np.frombuffer(
            raw, np.uint8, count=spec.num_patches,
            offset=_SAMPLE_HEADER.size + 4 * npix)
        labels[idx] = label
        teachers[idx] = read_tim(root / f"sample_{idx:05d}.tim").values
        (train_idx if part == "train" else val_idx).append(idx)
    return Dataset(spec, int(head["seed"]), images, labels, masks, teachers,
                   np.asarray(train_idx), np.asarray(val_idx))
