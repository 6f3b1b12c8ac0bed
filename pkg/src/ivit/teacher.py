"""Teacher interaction maps: construction, filtering, and the TIM file format.

A teacher map is a non-negative distribution over image patches telling the
student where the task-relevant content sits. Maps are built from
foreground/background strength vectors by non-negative competition
(max(0, fore - back)) followed by L1 normalization, from per-instance
strengths for dense tasks, or synthetically from ground-truth patch masks.

The TIM binary format is the interchange contract with external extraction
tools; round trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import EPS_DENOM

TIM_MAGIC = b"TIM1"
TIM_VERSION = 1

PROVENANCES = ("synthetic", "vlm-probe", "human")
PROMPT_IDS = ("none", "1", "2", "3", "dense")


class TimFormatError(ValueError):
    """Raised for malformed TIM files and invalid map payloads."""


@dataclass
class TeacherMap:
    """Normalized non-negative patch distribution on a gh x gw grid."""

    grid_h: int
    grid_w: int
    values: np.ndarray  # length grid_h * grid_w, float32, sums to 1
    provenance: str = "synthetic"
    prompt_id: str = "none"
    degenerate: bool = False  # constructor fell back to the uniform map

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if self.values.shape[0] != self.grid_h * self.grid_w:
            raise TimFormatError(
                f"expected {self.grid_h * self.grid_w} values, got {self.values.shape[0]}")
        if self.provenance not in PROVENANCES:
            raise TimFormatError(f"unknown provenance {self.provenance!r}")
        if self.prompt_id not in PROMPT_IDS:
            raise TimFormatError(f"unknown prompt id {self.prompt_id!r}")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise TimFormatError("teacher map values must be finite and >= 0")
        total = float(self.values.sum())
        if abs(total - 1.0) > 1e-3:
            raise TimFormatError(f"teacher map must sum to 1, got {total:.6g}")

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.grid_h, self.grid_w)


def _normalize_or_uniform(d: np.ndarray, grid_h: int, grid_w: int,
                          provenance: str, prompt_id: str) -> TeacherMap:
    norm = float(d.sum())
    if norm > EPS_DENOM:
        return TeacherMap(grid_h, grid_w, d / norm, provenance, prompt_id)
    uniform = np.full(d.shape, 1.0 / d.size, dtype=np.float64)
    return TeacherMap(grid_h, grid_w, uniform, provenance, prompt_id, degenerate=True)


def _check_strengths(v: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what} contains non-finite values")
    if np.any(v < 0):
        raise ValueError(f"{what} contains negative values")
    return v


def _grid_shape(n: int, grid_h: int | None, grid_w: int | None) -> tuple[int, int]:
    if grid_h is None or grid_w is None:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ValueError(f"cannot infer a square grid from {n} patches")
        return side, side
    if grid_h * grid_w != n:
        raise ValueError(f"grid {grid_h}x{grid_w} does not match {n} patches")
    return grid_h, grid_w


def classification_teacher(fore: np.ndarray, back: np.ndarray,
                           grid_h: int | None = None, grid_w: int | None = None,
                           provenance: str = "vlm-probe",
                           prompt_id: str = "1") -> TeacherMap:
    """Teacher map from foreground vs background strengths.

    d = max(0, fore - back), L1-normalized; when the filtered difference
    vanishes everywhere the map degenerates to uniform (flagged).
    """
    fore = _check_strengths(fore, "foreground strengths")
    back = _check_strengths(back, "background strengths")
    if fore.shape != back.shape:
        raise ValueError(f"length mismatch: {fore.shape[0]} vs {back.shape[0]}")
    gh, gw = _grid_shape(fore.shape[0], grid_h, grid_w)
    d = np.maximum(0.0, fore - back)
    return _normalize_or_uniform(d, gh, gw, provenance, prompt_id)


def dense_teacher(objects: list[np.ndarray], back: np.ndarray,
                  grid_h: int | None = None, grid_w: int | None = None,
                  provenance: str = "vlm-probe") -> TeacherMap:
    """Teacher map for dense prediction: instance strengths summed, then filtered."""
    if not objects:
        raise ValueError("need at least one object strength vector")
    objs = [_check_strengths(o, f"object {i} strengths") for i, o in enumerate(objects)]
    back = _check_strengths(back, "background strengths")
    for i, o in enumerate(objs):
        if o.shape != back.shape:
            raise ValueError(f"object {i} length {o.shape[0]} != background {back.shape[0]}")
    gh, gw = _grid_shape(back.shape[0], grid_h, grid_w)
    d = np.maximum(0.0, np.sum(objs, axis=0) - back)
    return _normalize_or_uniform(d, gh, gw, provenance, prompt_id="dense")


def mask_teacher(mask: np.ndarray, sigma: float = 0.0, seed: int = 0,
                 grid_h: int | None = None, grid_w: int | None = None) -> TeacherMap:
    """Synthetic teacher from a ground-truth binary patch mask.

    Values are proportional to mask + |N(0, sigma)| per patch; sigma = 0
    gives the uniform distribution over masked patches.
    """
    mask = np.asarray(mask).reshape(-1)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    if mask.sum() < 1:
        raise ValueError("mask must have at least one set patch")
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    gh, gw = _grid_shape(mask.shape[0], grid_h, grid_w)
    d = mask.astype(np.float64)
    if sigma > 0:
        rng = np.random.default_rng(seed)
        d = d + np.abs(rng.normal(0.0, sigma, size=d.shape))
    return _normalize_or_uniform(d, gh, gw, provenance="synthetic", prompt_id="none")


# ---------------------------------------------------------------------------
# TIM interchange format
# ---------------------------------------------------------------------------
# Layout (little-endian):
#   4 bytes  magic "TIM1"
#   u32      version = 1
#   u32      grid height
#   u32      grid width
#   u8       provenance (index into PROVENANCES)
#   u8       prompt id  (index into PROMPT_IDS)
#   2 bytes  reserved (zero)
#   f32 * N  values, N = gh * gw

_HEADER = struct.Struct("<4sIIIBBxx")


def write_tim(tmap: TeacherMap, path: str | Path) -> None:
    payload = _HEADER.pack(
        TIM_MAGIC, TIM_VERSION, tmap.grid_h, tmap.grid_w,
        PROVENANCES.index(tmap.provenance), PROMPT_IDS.index(tmap.prompt_id),
    ) + tmap.values.astype("<f4").tobytes()
    Path(path).write_bytes(payload)


def read_tim(path: str | Path) -> TeacherMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TimFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, gh, gw, prov, prompt = _HEADER.unpack_from(raw)
    if magic != TIM_MAGIC:
        raise TimFormatError(f"{path}: bad magic {magic!r}")
    if version != TIM_VERSION:
        raise TimFormatError(f"{path}: unsupported version {version}")
    n = gh * gw
    expected = _HEADER.size + 4 * n
    if len(raw) != expected:
        raise TimFormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    if prov >= len(PROVENANCES):
        raise TimFormatError(f"{path}: unknown provenance code {prov}")
    if prompt >= len(PROMPT_IDS):
        raise TimFormatError(f"{path}: unknown prompt code {prompt}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).copy()
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise TimFormatError(f"{path}: values must be finite and >= 0")
    total = float(values.sum())
    if abs(total - 1.0) > 1e-3:
        raise TimFormatError(f"{path}: values sum to {total:.6g}, not 1")
    return TeacherMap(gh, gw, values, PROVENANCES[prov], PROMPT_IDS[prompt])
