"""Attention factorization and logical-interaction decomposition.

Two views of "which inputs work together": the attention view splits a
row-stochastic matrix into a binary structure mask and a strength matrix,
and the game-theoretic view decomposes a black-box set function into exact
AND-interaction effects (Moebius inversion over the subset lattice), so
that summing effects over subsets of S reconstructs v(S) exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import check_finite, softmax_rows


# ---------------------------------------------------------------------------
# Attention and its structure/strength factorization
# ---------------------------------------------------------------------------


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
              d_k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention; returns (output, row-stochastic A)."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if d_k is None:
        d_k = q.shape[-1]
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key width mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"key/value row mismatch: {k.shape[0]} vs {v.shape[0]}")
    a = softmax_rows(q @ k.T / np.sqrt(d_k))
    return a @ v, a


def factorize_attention(
    a: np.ndarray,
    *,
    threshold: float | None = None,
    top_k: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Split attention A into a binary structure mask and the strength matrix.

    Strength is A itself, untouched. Structure is 1 where A[i, j] >= threshold,
    or where A[i, j] is among the k largest entries of row i (ties going to the
    lower column index). Exactly one rule must be given.
    """
    a = check_finite(np.asarray(a), "attention matrix")
    if (threshold is None) == (top_k is None):
        raise ValueError("give exactly one of threshold or top_k")
    t = a.shape[-1]
    if threshold is not None:
        if not 0.0 < threshold <= 1.0:
            raise ValueError(f"threshold must be in (0, 1], got {threshold}")
        sigma = (a >= threshold).astype(np.uint8)
    else:
        if not 1 <= top_k <= t:
            raise ValueError(f"top_k must be in [1, {t}], got {top_k}")
        # Stable sort on (-value, column) keeps ties at the lower index.
        order = np.argsort(-a, axis=-1, kind="stable")
        sigma = np.zeros(a.shape, dtype=np.uint8)
        np.put_along_axis(sigma, order[..., :top_k], 1, axis=-1)
    return sigma, a


def default_top_k(t: int) -> int:
    """Binarization default: keep the strongest quarter of each row."""
    return max(1, int(np.ceil(t / 4)))


def masked_output(sigma: np.ndarray, phi: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the factorized form (sigma * phi) @ v."""
    return (sigma * phi) @ v


# ---------------------------------------------------------------------------
# AND-interaction effects over subsets
# ---------------------------------------------------------------------------

MAX_VARS = 16


@dataclass
class HarsanyiTable:
    """Interaction effect for every subset of n variables, indexed by bitmask."""

    n: int
    effects: np.ndarray  # length 2**n, effects[mask] = I(S) for S = bits(mask)

    def __post_init__(self) -> None:
        self.effects = np.asarray(self.effects, dtype=np.float64)
        if self.effects.shape != (1 << self.n,):
            raise ValueError(
                f"table must have {1 << self.n} entries, got {self.effects.shape}")

    def effect(self, subset: Iterable[int] | int) -> float:
        return float(self.effects[_as_mask(subset, self.n)])


def _as_mask(subset: Iterable[int] | int, n: int) -> int:
    if isinstance(subset, (int, np.integer)):
        mask = int(subset)
    else:
        mask = 0
        for i in subset:
            mask |= 1 << int(i)
    if not 0 <= mask < (1 << n):
        raise ValueError(f"subset out of range for n={n}")
    return mask


def subset_oracle(fn: Callable[[np.ndarray], float], x: np.ndarray,
                  baseline: np.ndarray | float = 0.0) -> Callable[[int], float]:
    """Wrap a function of an input vector as a masked subset evaluator.

    v(S) evaluates fn on x with every variable outside S replaced by the
    baseline (a scalar or a vector matching x).
    """
    x = np.asarray(x, dtype=np.float64)
    base = np.broadcast_to(np.asarray(baseline, dtype=np.float64), x.shape)
    n = x.shape[0]

    def v(mask: int) -> float:
        keep = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        return float(fn(np.where(keep, x, base)))

    return v


def evaluate_all_subsets(oracle: Callable[[int], float], n: int) -> np.ndarray:
    values = np.empty(1 << n, dtype=np.float64)
    for mask in range(1 << n):
        val = oracle(mask)
        if not np.isfinite(val):
            raise ValueError(f"oracle returned non-finite value for mask {mask:#x}")
        values[mask] = val
    return values


def harsanyi_and(oracle: Callable[[int], float], n: int) -> HarsanyiTable:
    """Exact AND-interaction effects I(S) = sum_{T subseteq S} (-1)^{|S|-|T|} v(T).

    Enumerates all 2**n oracle values, then runs the in-place Moebius
    transform over the subset lattice (n * 2**n updates, exact).
    """
    if not 0 < n <= MAX_VARS:
        raise ValueError(f"variable count must be in [1, {MAX_VARS}], got {n}")
    eff = evaluate_all_subsets(oracle, n)
    for bit in range(n):
        step = 1 << bit
        # View trick: pair each mask having this bit with its bit-cleared twin.
        eff = eff.reshape(-1, 2 * step)
        eff[:, step:] -= eff[:, :step]
        eff = eff.reshape(-1)
    return HarsanyiTable(n=n, effects=eff)


def reconstruct_value(table: HarsanyiTable, subset: Iterable[int] | int) -> float:
    """Sum effects over all subsets of S; equals v(S) by Moebius inversion."""
    s = _as_mask(subset, table.n)
    total = 0.0
    t = s
    while True:
        total += table.effects[t]
        if t == 0:
            break
        t = (t - 1) & s
    return float(total)


def sparsify(table: HarsanyiTable, k: int) -> list[tuple[tuple[int, ...], float]]:
    """The k subsets with the largest |effect|, strongest first.

    Ties break toward the smaller subset, then lexicographic member order.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    entries = []
    for mask in range(1 << table.n):
        members = tuple(i for i in range(table.n) if (mask >> i) & 1)
        entries.append((members, float(table.effects[mask])))
    entries.sort(key=lambda e: (-abs(e[1]), len(e[0]), e[0]))
    return entries[:k]


def format_table(table: HarsanyiTable) -> str:
    """One line per subset: ``S=<bitmask-hex> I=<value>``."""
    lines = [f"S={mask:#x} I={table.effects[mask] + 0.0:.12g}"  # +0.0 drops -0
             for mask in range(1 << table.n)]
    return "\n".join(lines) + "\n"
