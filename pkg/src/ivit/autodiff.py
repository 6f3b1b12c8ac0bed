"""Reverse-mode autodiff over numpy arrays, plus the numeric kernels it wraps.

The engine is deliberately small: a ``Tensor`` wraps an ndarray and records
its parents and a backward closure. Everything the model needs (matmul with
batch broadcasting, softmax over the last axis, sigmoid, layer norm, KL and
cross-entropy losses) is a primitive with a hand-written backward, so
gradients are exact up to floating point.

Training runs in float32; verification suites build float64 graphs for
headroom in finite-difference comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

# Floor for denominators in normalizations and relative errors.
EPS_DENOM = 1e-12


# ---------------------------------------------------------------------------
# Numeric kernels (no graph). These are the exported numerics operations;
# the Tensor ops below reuse them.
# ---------------------------------------------------------------------------


def check_finite(a: np.ndarray, what: str = "input") -> np.ndarray:
    """Reject NaN/Inf, naming the first offending row for diagnostics."""
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))
        row = bad[0][0] if bad[0].size else 0
        raise ValueError(f"non-finite value in {what} at row {row}")
    return a


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for overflow safety.

    Works on any array; the softmax is taken over the last axis.
    """
    m = check_finite(m, "softmax input")
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def smooth_distribution(q: np.ndarray, lam: float) -> np.ndarray:
    """Mix a distribution toward uniform: (1-lam) * q + lam / n."""
    q = np.asarray(q)
    n = q.shape[-1]
    return (1.0 - lam) * q + lam / n


def kl_rows(p: np.ndarray, q: np.ndarray, lam: float = 0.0) -> float:
    """KL divergence D(p || q') in nats, q' = (1-lam) q + lam * uniform.

    Both arguments must be 1-D distributions of equal length. Entries where
    p is zero contribute nothing; with lam = 0 and q' zero under p support
    the divergence is +inf.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 1 or q.ndim != 1 or p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("negative entries in distribution")
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"smoothing lambda must be in [0, 1), got {lam}")
    for name, d in (("P", p), ("Q", q)):
        if abs(d.sum() - 1.0) > 1e-4:
            raise ValueError(f"{name} does not sum to 1 (sum={d.sum():.6g})")
    qs = smooth_distribution(q, lam)
    support = p > 0
    if np.any(qs[support] == 0.0):
        return float("inf")
    val = float(np.sum(p[support] * (np.log(p[support]) - np.log(qs[support]))))
    # Clamp the tiny negative residue accumulation can leave.
    return max(val, -1e-9) if val < 0 else val


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(EPS_DENOM, abs(a) + abs(n))


# ---------------------------------------------------------------------------
# Tensor graph
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node in the expression graph: an ndarray plus backward bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other))

    def _make(self, data: np.ndarray, parents: tuple["Tensor", ...],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accum(self, g: np.ndarray) -> None:
        # First contribution aliases g (callers never mutate it afterwards);
        # later ones add out of place so aliased buffers stay intact.
        if self.grad is None:
            self.grad = g if g.shape == self.data.shape else np.broadcast_to(
                g, self.data.shape).copy()
        else:
            self.grad = self.grad + g

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            # Python scalars stay weak so float32 graphs are not promoted.
            a, c = self, other

            def backward_c(g: np.ndarray) -> None:
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.shape))

            return self._make(a.data + c, (a,), backward_c)
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return self._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(-g)

        return self._make(-a.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            return self + (-other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return (-self) + other

    def __mul__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            a, c = self, other

            def backward_c(g: np.ndarray) -> None:
                if a.requires_grad:
                    a._accum(_unbroadcast(g * c, a.shape))

            return self._make(a.data * c, (a,), backward_c)
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return self._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            return self * (1.0 / other)
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return self._make(a.data / b.data, (a, b), backward)

    def __pow__(self, k: int) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g * k * a.data ** (k - 1))

        return self._make(a.data ** k, (a,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        a, b = self, other

        # Stacked @ plain-matrix collapses to one GEMM instead of a batch loop.
        if a.data.ndim > 2 and b.data.ndim == 2:
            lead = a.data.shape[:-1]
            kdim = a.data.shape[-1]
            a2 = a.data.reshape(-1, kdim)
            out = (a2 @ b.data).reshape(*lead, b.data.shape[-1])

            def backward_flat(g: np.ndarray) -> None:
                g2 = g.reshape(-1, b.data.shape[-1])
                if a.requires_grad:
                    a._accum((g2 @ b.data.T).reshape(a.data.shape))
                if b.requires_grad:
                    b._accum(a2.T @ g2)

            return self._make(out, (a, b), backward_flat)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accum(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accum(_unbroadcast(gb, b.shape))

        return self._make(a.data @ b.data, (a, b), backward)

    def __getitem__(self, idx) -> "Tensor":
        a = self
        parts = idx if isinstance(idx, tuple) else (idx,)
        advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                full = np.zeros_like(a.data)
                if advanced:
                    np.add.at(full, idx, g)  # duplicates must accumulate
                else:
                    full[idx] += g
                a._accum(full)

        return self._make(a.data[idx], (a,), backward)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        a = self
        old = a.shape

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g.reshape(old))

        return self._make(a.data.reshape(*shape), (a,), backward)

    def transpose(self, *axes: int) -> "Tensor":
        a = self
        inv = np.argsort(axes)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g.transpose(*inv))

        return self._make(a.data.transpose(*axes), (a,), backward)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            if not a.requires_grad:
                return
            if axis is None:
                a._accum(np.broadcast_to(g, a.shape).copy())
                return
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.shape).copy())

        return self._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else (
            np.prod([self.shape[ax] for ax in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # -- nonlinearities -------------------------------------------------------------

    def sigmoid(self) -> "Tensor":
        a = self
        y = sigmoid(a.data)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g * y * (1.0 - y))

        return self._make(y, (a,), backward)

    def tanh(self) -> "Tensor":
        a = self
        y = np.tanh(a.data)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g * (1.0 - y * y))

        return self._make(y, (a,), backward)

    def gelu(self) -> "Tensor":
        """GELU, tanh approximation (smooth, so finite differences agree)."""
        a = self
        x = a.data
        c = np.asarray(np.sqrt(2.0 / np.pi), dtype=x.dtype)
        k = np.asarray(0.044715, dtype=x.dtype)
        inner = x * x
        inner *= k
        inner += 1.0
        inner *= x
        inner *= c
        t = np.tanh(inner)
        y = 1.0 + t
        y *= x
        y *= 0.5

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                u = t * t
                np.subtract(1.0, u, out=u)      # sech^2
                v = x * x
                v *= 3.0 * float(k)
                v += 1.0
                v *= float(c)                   # d(inner)/dx
                u *= v
                u *= x
                u += 1.0
                u += t                          # (1+t) + x*sech^2*dinner
                u *= 0.5
                u *= g
                a._accum(u)

        return self._make(y, (a,), backward)

    def exp(self) -> "Tensor":
        a = self
        y = np.exp(a.data)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g * y)

        return self._make(y, (a,), backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g / a.data)

        return self._make(np.log(a.data), (a,), backward)

    def softmax_rows(self) -> "Tensor":
        """Softmax over the last axis with shift stabilization.

        Inputs are finite by construction inside a graph; the standalone
        ``softmax_rows`` kernel is the checked entry point.
        """
        a = self
        y = a.data - np.max(a.data, axis=-1, keepdims=True)
        np.exp(y, out=y)
        y /= np.sum(y, axis=-1, keepdims=True)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                gy = g * y
                dot = np.sum(gy, axis=-1, keepdims=True)
                out = g - dot
                out *= y
                a._accum(out)

        return self._make(y, (a,), backward)

    def layer_norm(self, scale: "Tensor", offset: "Tensor", eps: float = 1e-6) -> "Tensor":
        """Normalize over the last axis, then apply learned scale and offset."""
        a = self
        x = a.data
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered
        xhat *= inv
        y = xhat * scale.data
        y += offset.data
        n = x.shape[-1]

        def backward(g: np.ndarray) -> None:
            if scale.requires_grad:
                scale._accum(_unbroadcast(g * xhat, scale.shape))
            if offset.requires_grad:
                offset._accum(_unbroadcast(g, offset.shape))
            if a.requires_grad:
                gx = g * scale.data
                sum_gx = gx.sum(axis=-1, keepdims=True)
                sum_gx_xhat = (gx * xhat).sum(axis=-1, keepdims=True)
                corr = xhat * sum_gx_xhat
                corr += sum_gx
                corr *= 1.0 / n
                gx -= corr
                gx *= inv
                a._accum(gx)

        return self._make(y, (a, scale, offset), backward)

    # -- autodiff driver -------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output through the whole graph."""
        if self.data.size != 1:
            raise ValueError(f"backward seed must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


# ---------------------------------------------------------------------------
# Composite graph ops used by the model and losses
# ---------------------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along an axis; backward splits the gradient."""
    datas = [p.data for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parts))
    ax = axis if axis >= 0 else out_data.ndim + axis

    def backward(g: np.ndarray) -> None:
        index: list = [slice(None)] * out_data.ndim
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index[ax] = slice(lo, hi)
                p._accum(g[tuple(index)])

    if out.requires_grad:
        out._parents = tuple(parts)
        out._backward = backward
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over a batch of logits (B, C) with int labels (B,)."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError("labels must be 1-D and match the batch size")
    ncls = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= ncls):
        raise ValueError(f"label out of range [0, {ncls})")
    a = logits
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    logp = shifted - logz
    batch = x.shape[0]
    val = -np.mean(logp[np.arange(batch), labels])
    out = Tensor(np.asarray(val, dtype=x.dtype), requires_grad=a.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            p = np.exp(logp)
            p[np.arange(batch), labels] -= 1.0
            a._accum(g * p / batch)

    if out.requires_grad:
        out._parents = (a,)
        out._backward = backward
    return out


def kl_to_target(p: Tensor, q: np.ndarray, lam: float) -> Tensor:
    """Differentiable D(p || q') per row, meaned over leading axes.

    ``p`` holds row distributions on its last axis; ``q`` is a constant
    target of the same row length (broadcast over leading axes). Rows of p
    must be strictly positive except where they underflowed to zero, which
    contributes nothing.
    """
    q = np.asarray(q, dtype=p.dtype)
    qs = smooth_distribution(q, lam)
    a = p
    x = a.data
    support = x > 0
    safe = np.where(support, x, 1.0)
    logq = np.log(np.broadcast_to(qs, x.shape))
    terms = np.where(support, x * (np.log(safe) - logq), 0.0)
    rows = x.size // x.shape[-1]
    val = terms.sum() / rows
    out = Tensor(np.asarray(val, dtype=x.dtype), requires_grad=a.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            d = np.where(support, np.log(safe) + 1.0 - logq, 0.0)
            a._accum(g * d / rows)

    if out.requires_grad:
        out._parents = (a,)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Gradient extraction and verification
# ---------------------------------------------------------------------------


@dataclass
class GradientReport:
    """One compared gradient entry, worst mismatch first in sorted lists."""

    parameter: str
    analytic: float
    numeric: float
    rel_error: float


def reverse_gradients(output: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar output for every named parameter.

    Parameters disconnected from the graph get an all-zero gradient (their
    names are also reported on the ``.disconnected`` attribute of the
    returned dict-like for callers that care).
    """
    for p in params.values():
        p.grad = None
    output.backward()
    grads: dict[str, np.ndarray] = {}
    disconnected: list[str] = []
    for name, p in params.items():
        if p.grad is None:
            grads[name] = np.zeros_like(p.data)
            disconnected.append(name)
        else:
            grads[name] = p.grad
    if disconnected:
        grads = _GradMap(grads, disconnected)
    return grads


class _GradMap(dict):
    """Gradient map that flags parameters the output did not depend on."""

    def __init__(self, data: dict, disconnected: list[str]):
        super().__init__(data)
        self.disconnected = disconnected


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    theta: dict[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-6,
    probe_dtype: np.dtype | None = None,
    trainable: dict[str, bool] | None = None,
) -> list[GradientReport]:
    """Central-difference check of every parameter entry of a scalar function.

    ``f`` receives name -> Tensor leaves (requires_grad set) and must return
    a scalar Tensor. The probe evaluations run in extended precision
    (x86 80-bit by default for float64 inputs) so the difference quotient
    stays accurate even for near-zero gradient entries. Reports come back
    sorted by relative error, descending.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"step size must be in [1e-7, 1e-3], got {eps}")
    if probe_dtype is None:
        first = next(iter(theta.values()))
        probe_dtype = np.longdouble if first.dtype == np.float64 else np.float64

    leaves = {
        k: Tensor(v.copy(), requires_grad=(trainable is None or trainable.get(k, False)),
                  name=k)
        for k, v in theta.items()
    }
    out = f(leaves)
    if not np.isfinite(out.data):
        raise ValueError("function value is not finite at theta")
    grads = reverse_gradients(out, leaves)

    work = {k: v.astype(probe_dtype) for k, v in theta.items()}
    step = np.asarray(eps, dtype=probe_dtype)
    reports: list[GradientReport] = []
    for name, base in theta.items():
        if trainable is not None and not trainable.get(name, False):
            continue
        flat = work[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _eval_plain(f, work)
            flat[i] = orig - step
            lo = _eval_plain(f, work)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise ValueError(f"non-finite function value probing {name}[{i}]")
            numeric = float((hi - lo) / (2.0 * step))
            analytic = float(gflat[i])
            idx = np.unravel_index(i, base.shape) if base.ndim else ()
            label = f"{name}{[int(j) for j in idx]}" if idx else name
            reports.append(GradientReport(label, analytic, numeric,
                                          relative_error(analytic, numeric)))
    reports.sort(key=lambda r: r.rel_error, reverse=True)
    return reports


def _eval_plain(f: Callable[[dict[str, Tensor]], Tensor], theta: dict[str, np.ndarray]):
    leaves = {k: Tensor(v) for k, v in theta.items()}
    return f(leaves).data
