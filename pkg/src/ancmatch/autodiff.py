"""Reverse-mode differentiation over the fixed op set the pipeline needs.

Define-by-run: a :class:`Tape` records one forward pass and replays it in
reverse. The op set is deliberately closed (correlation, 2D/4D
convolution, ReLU, elementwise product and max-normalization, softmax,
Frobenius-norm losses, plus the indexing glue between them).

Gradient policy
---------------
* ``backward`` zeroes the grads of every intermediate recorded on the
  tape, seeds the loss with 1, and *accumulates* into the inputs. Leaf
  parameters therefore keep accumulating across backward calls (a second
  backward doubles them); call :func:`zero_grads` before each optimizer
  step.
* ReLU takes derivative 0 at exactly 0; max-reductions route the full
  gradient to the first maximizing element in scan order; ``safe_div``
  treats zero denominators as a constant-zero region.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, NumericError
from .tensor_core import Rng


class Variable:
    """A tensor plus its gradient buffer.

    ``grad`` is allocated (zero) whenever the variable participates in
    differentiation and stays ``None`` for pure constants.
    """

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"


def zero_grads(params: Sequence[Variable]) -> None:
    for p in params:
        p.zero_grad()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out: Variable, backward: Callable[[], None]):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of op applications for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    # -- recording machinery ------------------------------------------------

    def _emit(self, value: np.ndarray, inputs: Sequence[Variable],
              backward: Callable[[Variable], Callable[[], None]] | None) -> Variable:
        needs = any(v.requires_grad for v in inputs)
        out = Variable(value, requires_grad=needs)
        if needs and backward is not None:
            self.nodes.append(_Node(out, backward(out)))
            self._outputs.add(id(out))
        return out

    def constant(self, value) -> Variable:
        return Variable(value, requires_grad=False)

    # -- arithmetic ---------------------------------------------------------

    def add(self, a: Variable, b: Variable) -> Variable:
        def bw(out):
            def run():
                if a.requires_grad:
                    a.grad += _unbroadcast(out.grad, a.shape)
                if b.requires_grad:
                    b.grad += _unbroadcast(out.grad, b.shape)
            return run
        return self._emit(a.value + b.value, (a, b), bw)

    def sub(self, a: Variable, b: Variable) -> Variable:
        def bw(out):
            def run():
                if a.requires_grad:
                    a.grad += _unbroadcast(out.grad, a.shape)
                if b.requires_grad:
                    b.grad -= _unbroadcast(out.grad, b.shape)
            return run
        return self._emit(a.value - b.value, (a, b), bw)

    def mul(self, a: Variable, b: Variable) -> Variable:
        def bw(out):
            def run():
                if a.requires_grad:
                    a.grad += _unbroadcast(out.grad * b.value, a.shape)
                if b.requires_grad:
                    b.grad += _unbroadcast(out.grad * a.value, b.shape)
            return run
        return self._emit(a.value * b.value, (a, b), bw)

    def scale(self, a: Variable, s: float) -> Variable:
        def bw(out):
            def run():
                if a.requires_grad:
                    a.grad += s * out.grad
            return run
        return self._emit(a.value * s, (a,), bw)

    def safe_div(self, a: Variable, b: Variable) -> Variable:
        """Elementwise a/b with 0/0 := 0 wherever b == 0 (constant region)."""
        mask = b.value != 0
        inv = np.where(mask, np.divide(1.0, np.where(mask, b.value, 1.0)), 0.0)
        val = a.value * inv

        def bw(out):
            def run():
                if a.requires_grad:
                    a.grad += _unbroadcast(out.grad * inv, a.shape)
                if b.requires_grad:
                    b.grad += _unbroadcast(-out.grad * val * inv, b.shape)
            return run
        return self._emit(val, (a, b), bw)

    def relu(self, a: Variable) -> Variable:
        mask = a.value > 0

        def bw(out):
            def run():
                if a.requires_grad:
                    a.grad += np.where(mask, out.grad, 0)
            return run
        return self._emit(np.where(mask, a.value, 0), (a,), bw)

    # -- shape moves ----------------------------------------------------------

    def permute(self, a: Variable, order: Sequence[int]) -> Variable:
        order = tuple(order)
        if sorted(order) != list(range(a.value.ndim)):
            raise InvalidArgumentError(f"invalid permutation {order} for rank {a.value.ndim}")
        inverse = tuple(np.argsort(order))

        def bw(out):
            def run():
                if a.requires_grad:
                    a.grad += np.transpose(out.grad, inverse)
            return run
        return self._emit(np.ascontiguousarray(np.transpose(a.value, order)), (a,), bw)

    def reshape(self, a: Variable, shape: Sequence[int]) -> Variable:
        old = a.value.shape

        def bw(out):
            def run():
                if a.requires_grad:
                    a.grad += out.grad.reshape(old)
            return run
        return self._emit(np.ascontiguousarray(a.value.reshape(tuple(shape))), (a,), bw)

    def concat(self, parts: Sequence[Variable], axis: int) -> Variable:
        sizes = [p.value.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def bw(out):
            def run():
                sl = [slice(None)] * out.grad.ndim
                for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                    if p.requires_grad:
                        sl[axis] = slice(lo, hi)
                        p.grad += out.grad[tuple(sl)]
            return run
        return self._emit(np.concatenate([p.value for p in parts], axis=axis), parts, bw)

    # -- reductions -----------------------------------------------------------

    def amax(self, a: Variable, axes: tuple, keepdims: bool = True) -> Variable:
        """Max over ``axes``; backward routes to the first maximizer per slice."""
        val = a.value.max(axis=axes, keepdims=True)

        def bw(out):
            def run():
                if not a.requires_grad:
                    return
                g = out.grad if keepdims else out.grad.reshape(val.shape)
                moved = np.moveaxis(a.value, axes, range(-len(axes), 0))
                lead = moved.shape[:a.value.ndim - len(axes)]
                flat = moved.reshape(lead + (-1,))
                idx = flat.argmax(axis=-1)
                scatter = np.zeros_like(flat)
                np.put_along_axis(
                    scatter, idx[..., None], g.reshape(lead + (1,)), axis=-1
                )
                scatter = scatter.reshape(moved.shape)
                a.grad += np.moveaxis(scatter, range(-len(axes), 0), axes)
            return run
        out_val = val if keepdims else val.reshape(
            tuple(s for i, s in enumerate(a.value.shape) if i not in axes))
        return self._emit(out_val, (a,), bw)

    def sum(self, a: Variable) -> Variable:
        def bw(out):
            def run():
                if a.requires_grad:
                    a.grad += out.grad
            return run
        return self._emit(np.asarray(a.value.sum()), (a,), bw)

    def softmax(self, a: Variable, axes: tuple) -> Variable:
        """Softmax over ``axes`` jointly, stabilized by max subtraction."""
        if not np.isfinite(a.value).all():
            raise NumericError("softmax received non-finite input")
        m = a.value.max(axis=axes, keepdims=True)
        e = np.exp(a.value - m)
        y = e / e.sum(axis=axes, keepdims=True)

        def bw(out):
            def run():
                if a.requires_grad:
                    inner = (out.grad * y).sum(axis=axes, keepdims=True)
                    a.grad += y * (out.grad - inner)
            return run
        return self._emit(y, (a,), bw)

    def frobenius(self, a: Variable) -> Variable:
        """Frobenius norm; subgradient 0 at the exact origin."""
        norm = float(np.sqrt((a.value.astype(np.float64) ** 2).sum()))

        def bw(out):
            def run():
                if a.requires_grad and norm > 0:
                    a.grad += (float(out.grad) / norm) * a.value
            return run
        return self._emit(np.asarray(norm, dtype=a.value.dtype), (a,), bw)

    def matmul(self, a: Variable, b: Variable, transpose_b: bool = False) -> Variable:
        bv = b.value.T if transpose_b else b.value

        def bw(out):
            def run():
                if a.requires_grad:
                    a.grad += out.grad @ bv.T
                if b.requires_grad:
                    gb = a.value.T @ out.grad
                    b.grad += gb.T if transpose_b else gb
            return run
        return self._emit(a.value @ bv, (a, b), bw)

    # -- gathers ---------------------------------------------------------------

    def take_source_rows(self, c: Variable, cells: Sequence[tuple[int, int]]) -> Variable:
        """Rows of a rank-4 volume at source cells, flattened over (k, l)."""
        hs, ws, ht, wt = c.value.shape
        rows = np.stack([c.value[i, j].reshape(ht * wt) for i, j in cells])

        def bw(out):
            def run():
                if c.requires_grad:
                    for r, (i, j) in enumerate(cells):
                        c.grad[i, j] += out.grad[r].reshape(ht, wt)
            return run
        return self._emit(rows, (c,), bw)

    def take_target_rows(self, c: Variable, cells: Sequence[tuple[int, int]]) -> Variable:
        """Rows over source cells for fixed target cells, flattened over (i, j)."""
        hs, ws, ht, wt = c.value.shape
        rows = np.stack([c.value[:, :, k, l].reshape(hs * ws) for k, l in cells])

        def bw(out):
            def run():
                if c.requires_grad:
                    for r, (k, l) in enumerate(cells):
                        c.grad[:, :, k, l] += out.grad[r].reshape(hs, ws)
            return run
        return self._emit(rows, (c,), bw)

    # -- normalization -----------------------------------------------------------

    def normalize_cells(self, a: Variable) -> Variable:
        """Unit L2 norm along the last axis; zero vectors stay zero."""
        norms = np.sqrt((a.value ** 2).sum(axis=-1, keepdims=True))
        safe = np.where(norms == 0, 1.0, norms)
        y = a.value / safe

        def bw(out):
            def run():
                if a.requires_grad:
                    inner = (out.grad * y).sum(axis=-1, keepdims=True)
                    a.grad += (out.grad - y * inner) / safe
            return run
        return self._emit(y, (a,), bw)

    # -- convolution / correlation ------------------------------------------------

    def correlation(self, fs: Variable, ft: Variable) -> Variable:
        """4D correlation volume of two (h, w, d) grids."""
        val = kernels.correlate4d(fs.value, ft.value)

        def bw(out):
            def run():
                if fs.requires_grad:
                    fs.grad += kernels.correlate4d_grad_s(out.grad, ft.value)
                if ft.requires_grad:
                    ft.grad += kernels.correlate4d_grad_t(out.grad, fs.value)
            return run
        return self._emit(val, (fs, ft), bw)

    def conv2d(self, x: Variable, w: Variable, b: Variable, relu: bool) -> Variable:
        """Same-size zero-padded 2D cross-correlation, optional fused ReLU."""
        lin = kernels.conv2d_forward(x.value, w.value, b.value)
        val = np.where(lin > 0, lin, 0) if relu else lin
        mask = lin > 0 if relu else None
        ksize = w.value.shape[0]

        def bw(out):
            def run():
                g = np.where(mask, out.grad, 0) if relu else out.grad
                if x.requires_grad:
                    x.grad += kernels.conv2d_grad_input(g, w.value)
                if w.requires_grad or b.requires_grad:
                    dw, db = kernels.conv2d_grad_weights(x.value, g, ksize)
                    if w.requires_grad:
                        w.grad += dw
                    if b.requires_grad:
                        b.grad += db
            return run
        return self._emit(val, (x, w, b), bw)

    def conv4d(self, x: Variable, w: Variable, b: Variable, impl: str = "fast") -> Variable:
        """Same-size zero-padded 4D cross-correlation.

        ``impl="naive"`` runs the loop oracle forward instead of the
        optimized path; gradients use the shared kernels either way.
        """
        if impl == "fast":
            val = kernels.conv4d_fast(x.value, w.value, b.value)
        elif impl == "naive":
            val = kernels.conv4d_naive(x.value, w.value, b.value)
        else:
            raise InvalidArgumentError(f"unknown conv4d impl {impl!r}")
        w_shape = w.value.shape

        def bw(out):
            def run():
                if x.requires_grad:
                    x.grad += kernels.conv4d_grad_input(out.grad, w.value)
                if w.requires_grad or b.requires_grad:
                    dw, db = kernels.conv4d_grad_weights(x.value, out.grad, w_shape)
                    if w.requires_grad:
                        w.grad += dw
                    if b.requires_grad:
                        b.grad += db
            return run
        return self._emit(val, (x, w, b), bw)


def backward(tape: Tape, loss: Variable) -> None:
    """Populate grads of everything reachable from ``loss``.

    Intermediates recorded on the tape are zeroed first; leaf grads
    accumulate (see module docstring for the repeat-call policy).
    """
    if loss.value.size != 1:
        raise InvalidArgumentError(f"loss must be scalar, got shape {loss.value.shape}")
    if id(loss) not in tape._outputs:
        raise InvalidArgumentError("loss was not produced on this tape")
    for node in tape.nodes:
        node.out.grad[...] = 0
    loss.grad[...] = 1
    for node in reversed(tape.nodes):
        node.backward()


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckEntry:
    name: str
    checked: int
    max_rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    total_checked: int

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries if e.checked), default=0.0)


def grad_check(build: Callable[[], tuple[Tape, Variable]],
               params: Sequence[tuple[str, Variable]],
               step: float = 1e-6,
               sample: int | None = None,
               rng: Rng | None = None) -> GradCheckReport:
    """Compare analytic grads with central finite differences.

    ``build`` reruns the full forward pass and returns (tape, scalar loss);
    it must be deterministic. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. ``sample`` caps how many scalar
    parameters are probed (seeded choice over the joint index space).
    """
    if step <= 0:
        raise InvalidArgumentError("step must be positive")

    for _, p in params:
        p.zero_grad()
    tape, loss = build()
    if not np.isfinite(loss.value):
        raise NumericError("loss is not finite")
    backward(tape, loss)
    analytic = {name: p.grad.copy() for name, p in params}

    index_space = []
    for name, p in params:
        index_space.extend((name, i) for i in range(p.value.size))
    if sample is not None and sample < len(index_space):
        picks = (rng or Rng(0)).choice_without_replacement(len(index_space), sample)
        chosen = [index_space[i] for i in sorted(picks)]
    else:
        chosen = index_space

    by_name = dict(params)
    worst: dict[str, float] = {name: 0.0 for name, _ in params}
    counts: dict[str, int] = {name: 0 for name, _ in params}

    def eval_loss() -> float:
        _, lv = build()
        f = float(lv.value)
        if not np.isfinite(f):
            raise NumericError("loss is not finite during finite differencing")
        return f

    for name, flat in chosen:
        p = by_name[name]
        orig = p.value.flat[flat]
        p.value.flat[flat] = orig + step
        f_plus = eval_loss()
        p.value.flat[flat] = orig - step
        f_minus = eval_loss()
        p.value.flat[flat] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        a = float(analytic[name].flat[flat])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst[name] = max(worst[name], rel)
        counts[name] += 1

    entries = [GradCheckEntry(name, counts[name], worst[name]) for name, _ in params]
    return GradCheckReport(entries=entries, total_checked=len(chosen))
