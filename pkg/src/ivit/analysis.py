"""Evaluation and interpretability tooling.

Covers cosine similarity of attention class rows against teacher and human
maps (per image, then averaged), layer-wise gate-weight trends over a
dataset, heatmap rendering to plain portable graymaps, and the plain-text
human annotation format (grid header line, then rows of confidences in
{0, 0.5, 1.0}).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import ModelConfig, as_leaves, forward
from .teacher import TeacherMap
from .training import Switches, class_row_distribution_np

CONFIDENCE_LEVELS = (0.0, 0.5, 1.0)


class AnnotationFormatError(ValueError):
    """Raised for malformed human annotation files."""


@dataclass
class HumanAnnotation:
    grid_h: int
    grid_w: int
    confidence: np.ndarray  # (N,), entries in {0, 0.5, 1.0}

    def __post_init__(self) -> None:
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if self.confidence.shape[0] != self.grid_h * self.grid_w:
            raise AnnotationFormatError(
                f"expected {self.grid_h * self.grid_w} confidences, "
                f"got {self.confidence.shape[0]}")
        if not np.all(np.isin(self.confidence, CONFIDENCE_LEVELS)):
            bad = self.confidence[~np.isin(self.confidence, CONFIDENCE_LEVELS)][0]
            raise AnnotationFormatError(
                f"confidence {bad} outside {{0, 0.5, 1.0}}")
        if self.confidence.sum() == 0:
            raise AnnotationFormatError("annotation has no non-zero entries")


def read_annotation(path: str | Path) -> HumanAnnotation:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise AnnotationFormatError(f"{path}: empty file")
    try:
        gh, gw = (int(v) for v in lines[0].split())
    except ValueError as exc:
        raise AnnotationFormatError(f"{path}: bad grid header {lines[0]!r}") from exc
    if len(lines) - 1 != gh:
        raise AnnotationFormatError(f"{path}: expected {gh} rows, got {len(lines) - 1}")
    rows = []
    for ln in lines[1:]:
        vals = [float(v) for v in ln.split()]
        if len(vals) != gw:
            raise AnnotationFormatError(f"{path}: row {ln!r} has {len(vals)} values")
        rows.append(vals)
    return HumanAnnotation(gh, gw, np.asarray(rows).reshape(-1))


def write_annotation(ann: HumanAnnotation, path: str | Path) -> None:
    grid = ann.confidence.reshape(ann.grid_h, ann.grid_w)
    lines = [f"{ann.grid_h} {ann.grid_w}"]
    lines += [" ".join(f"{v:g}" for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def human_map(ann: HumanAnnotation) -> TeacherMap:
    """Renormalize annotation confidences into a teacher-style map."""
    values = ann.confidence / ann.confidence.sum()
    return TeacherMap(ann.grid_h, ann.grid_w, values, provenance="human")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two equal-length non-zero vectors."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine is undefined for a zero vector")
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# Model-facing evaluation
# ---------------------------------------------------------------------------


@dataclass
class GateTrend:
    """Dataset-mean gate weights per layer (g1 guided, g2 visual)."""

    g1: list[float]
    g2: list[float]

    def format(self) -> str:
        lines = [f"layer={i} g1={a:.6f} g2={b:.6f}"
                 for i, (a, b) in enumerate(zip(self.g1, self.g2))]
        return "\n".join(lines) + "\n"


@dataclass
class EvalReport:
    top1: float
    cos_guided_teacher: float | None = None
    cos_visual_teacher: float | None = None
    cos_guided_human: float | None = None
    cos_visual_human: float | None = None
    cos_teacher_human: float | None = None
    samples: int = 0

    def format(self) -> str:
        # Similarities are computed per image and then averaged.
        parts = [f"samples={self.samples}", f"top1={self.top1:.4f}"]
        for key in ("cos_guided_teacher", "cos_visual_teacher",
                    "cos_guided_human", "cos_visual_human", "cos_teacher_human"):
            val = getattr(self, key)
            if val is not None:
                parts.append(f"{key}={val:.4f}")
        return " ".join(parts) + "\n"


def _batched_trace_rows(images: np.ndarray, params, cfg: ModelConfig,
                        switches: Switches, batch: int = 64):
    """Yield (logits, guided_rows, visual_rows) per batch; rows are the
    head-averaged renormalized class-row distributions, (L, B, N)."""
    leaves = as_leaves(params)
    mode = dict(interaction=switches.iq, gate_net=switches.gc)
    for lo in range(0, len(images), batch):
        res = forward(images[lo:lo + batch], leaves, cfg, **mode)
        guided = None
        if switches.iq:
            guided = np.stack([class_row_distribution_np(t.guided) for t in res.trace])
        visual = np.stack([class_row_distribution_np(t.visual) for t in res.trace])
        yield res.logits.data, guided, visual


def gate_trend(params, cfg: ModelConfig, ds: Dataset,
               switches: Switches = Switches(),
               indices: np.ndarray | None = None) -> GateTrend:
    """Mean g1/g2 per layer over heads, rows, and samples of a dataset."""
    idx = ds.val_idx if indices is None else indices
    if len(idx) == 0:
        raise ValueError("empty dataset")
    leaves = as_leaves(params)
    mode = dict(interaction=switches.iq, gate_net=switches.gc)
    g1 = np.zeros(cfg.layers)
    g2 = np.zeros(cfg.layers)
    total = 0
    for lo in range(0, len(idx), 64):
        sel = idx[lo:lo + 64]
        res = forward(ds.images[sel], leaves, cfg, **mode)
        b = len(sel)
        for li, layer in enumerate(res.trace):
            g1[li] += float(layer.gates[..., 0].mean()) * b
            g2[li] += float(layer.gates[..., 1].mean()) * b
        total += b
    return GateTrend(list(g1 / total), list(g2 / total))


def evaluate(params, cfg: ModelConfig, ds: Dataset,
             teachers: np.ndarray | None = None,
             humans: dict[int, TeacherMap] | None = None,
             switches: Switches = Switches(),
             indices: np.ndarray | None = None) -> EvalReport:
    """Accuracy plus mean per-image cosine of attention class rows against
    teacher maps (and human maps when provided). The class-row extraction
    matches the alignment loss's convention exactly.

    ``teachers`` defaults to the dataset's own maps; ``humans`` maps sample
    index -> human-derived map for the annotated subset."""
    idx = ds.val_idx if indices is None else indices
    if len(idx) == 0:
        raise ValueError("empty dataset")
    if teachers is None:
        teachers = ds.teachers
    if len(teachers) != len(ds.images):
        raise ValueError(f"teacher count {len(teachers)} != dataset size "
                         f"{len(ds.images)} (index misalignment)")
    correct = 0
    cg, cv = [], []
    cgh, cvh, cth = [], [], []
    pos = 0
    layer_mean = lambda rows, j, t: float(
        np.mean([cosine(layer[j], t) for layer in rows]))
    for logits, guided, visual in _batched_trace_rows(
            ds.images[idx], params, cfg, switches):
        b = logits.shape[0]
        sel = idx[pos:pos + b]
        correct += int(np.sum(np.argmax(logits, -1) == ds.labels[sel]))
        for j, i in enumerate(sel):
            t = teachers[i]
            if guided is not None:
                cg.append(layer_mean(guided, j, t))
            cv.append(layer_mean(visual, j, t))
            if humans and int(i) in humans:
                h = humans[int(i)].values
                if guided is not None:
                    cgh.append(layer_mean(guided, j, h))
                cvh.append(layer_mean(visual, j, h))
                cth.append(cosine(t, h))
        pos += b
    mean = lambda xs: float(np.mean(xs)) if xs else None
    return EvalReport(
        top1=correct / len(idx),
        cos_guided_teacher=mean(cg), cos_visual_teacher=mean(cv),
        cos_guided_human=mean(cgh), cos_visual_human=mean(cvh),
        cos_teacher_human=mean(cth), samples=len(idx))


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------


def heatmap_pgm(values: np.ndarray, grid_h: int, grid_w: int,
                scale: float | None = None, upsample: int = 8) -> str:
    """Render a patch map as a plain (P2) portable graymap.

    Intensity is value / scale * 255 rounded half-up; ``scale=None`` uses
    the per-map maximum, a number fixes a global reference."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape[0] != grid_h * grid_w:
        raise ValueError(f"grid {grid_h}x{grid_w} does not match {values.shape[0]} values")
    if upsample < 1:
        raise ValueError("upsample factor must be >= 1")
    ref = float(values.max()) if scale is None else float(scale)
    if ref <= 0:
        ref = 1.0
    levels = np.floor(values / ref * 255.0 + 0.5).astype(np.int64)
    levels = np.clip(levels, 0, 255).reshape(grid_h, grid_w)
    cells = np.kron(levels, np.ones((upsample, upsample), dtype=np.int64))
    lines = [f"P2", f"{grid_w * upsample} {grid_h * upsample}", "255"]
    lines += [" ".join(str(v) for v in row) for row in cells]
    return "\n".join(lines) + "\n"


def save_heatmap(tmap: TeacherMap, path: str | Path,
                 scale: float | None = None, upsample: int = 8) -> None:
    Path(path).write_text(
        heatmap_pgm(tmap.values, tmap.grid_h, tmap.grid_w, scale, upsample))
