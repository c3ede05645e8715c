"""Dense float64 tensors plus a reverse-mode differentiation tape.

Every network in this package (encoders, attention, the decoder, the
training losses) is written in terms of the kernels below, so one
``Tape.backward`` call produces gradients for any composite loss.

Recording is opt-in: a kernel records onto a tape only when at least one
of its tensor inputs is attached to one (via ``Tape.watch`` or because it
was itself produced on that tape).  Plain forward evaluation with
unwatched parameters runs as pure numpy with no graph overhead, which is
what decoding and sampling use.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

# exp() overflows float64 just above 709; log() needs a positive floor.
_EXP_MAX = 709.0
_LOG_TINY = 1e-300


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes for the requested kernel."""


class DegenerateMaskError(ValueError):
    """A softmax row has no unmasked entry left to normalize over."""


class Tensor:
    """A dense n-dimensional array of float64 values.

    ``data`` is the row-major numpy buffer.  ``tape``/``node_id`` are set
    while the tensor participates in a recording; they are ``None`` for
    constants and for frozen parameters used in pure evaluation.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the underlying buffer."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Arithmetic sugar; the named kernels below do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple[int, ...], backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of kernel applications for one forward pass.

    A tape is single-writer: one forward/backward pass owns it.  Inputs of
    every node precede the node, so the reverse sweep in ``backward`` is a
    valid topological order by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: list[np.ndarray | None] = []
        self._watched: list[Tensor] = []

    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf (parameter) tensor so gradients reach it."""
        if t.tape is self:
            return t
        if t.tape is not None:
            raise ValueError("tensor is already attached to another tape")
        t.tape = self
        t.node_id = self._append("leaf", (), None)
        self._watched.append(t)
        return t

    def close(self) -> None:
        """Detach watched leaves so they can join a future tape."""
        for t in self._watched:
            t.tape = None
            t.node_id = None
        self._watched.clear()

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def _append(self, op: str, parents: tuple[int, ...], backward) -> int:
        self.nodes.append(_Node(op, parents, backward))
        return len(self.nodes) - 1

    def _emit(self, op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
        pids = tuple(p.node_id for p in parents if p.tape is self)
        out = Tensor(data, self, self._append(op, pids, backward))
        return out

    def backward(self, root: Tensor) -> list[np.ndarray | None]:
        """Reverse sweep from a scalar root; fills ``self.gradients``.

        Parameters not reachable from the root simply keep a ``None``
        slot; ``grad`` reports those as zeros.
        """
        if root.tape is not self or root.node_id is None:
            raise ValueError("root tensor was not produced on this tape")
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.node_id] = np.ones_like(root.data)
        for nid in range(root.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        self.gradients = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient accumulated for ``t``; zeros if unreachable."""
        if t.tape is not self or t.node_id is None:
            raise ValueError("tensor is not on this tape")
        g = self.gradients[t.node_id] if self.gradients else None
        return np.zeros_like(t.data) if g is None else g


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("kernel inputs belong to different tapes")
    return tape


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def constant(x) -> Tensor:
    """A tensor that never joins a tape (no gradient flows into it)."""
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise kernels
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    da, db = _as_array(a), _as_array(b)
    out = da + db
    if tape is None:
        return Tensor(out)
    parents = [t for t in (a, b) if isinstance(t, Tensor) and t.tape is tape]

    def backward(g):
        gs = []
        if isinstance(a, Tensor) and a.tape is tape:
            gs.append(_unbroadcast(g, da.shape))
        if isinstance(b, Tensor) and b.tape is tape:
            gs.append(_unbroadcast(g, db.shape))
        return gs

    return tape._emit("add", out, parents, backward)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    da, db = _as_array(a), _as_array(b)
    out = da - db
    if tape is None:
        return Tensor(out)
    parents = [t for t in (a, b) if isinstance(t, Tensor) and t.tape is tape]

    def backward(g):
        gs = []
        if isinstance(a, Tensor) and a.tape is tape:
            gs.append(_unbroadcast(g, da.shape))
        if isinstance(b, Tensor) and b.tape is tape:
            gs.append(_unbroadcast(-g, db.shape))
        return gs

    return tape._emit("sub", out, parents, backward)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    da, db = _as_array(a), _as_array(b)
    out = da * db
    if tape is None:
        return Tensor(out)
    parents = [t for t in (a, b) if isinstance(t, Tensor) and t.tape is tape]

    def backward(g):
        gs = []
        if isinstance(a, Tensor) and a.tape is tape:
            gs.append(_unbroadcast(g * db, da.shape))
        if isinstance(b, Tensor) and b.tape is tape:
            gs.append(_unbroadcast(g * da, db.shape))
        return gs

    return tape._emit("mul", out, parents, backward)


def scale(a: Tensor, s: float) -> Tensor:
    tape = _tape_of(a)
    out = a.data * s
    if tape is None:
        return Tensor(out)
    return tape._emit("scale", out, [a], lambda g: [g * s])


def sigmoid(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    x = np.clip(a.data, -_EXP_MAX, _EXP_MAX)
    out = 1.0 / (1.0 + np.exp(-x))
    if tape is None:
        return Tensor(out)
    return tape._emit("sigmoid", out, [a], lambda g: [g * out * (1.0 - out)])


def tanh(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    out = np.tanh(a.data)
    if tape is None:
        return Tensor(out)
    return tape._emit("tanh", out, [a], lambda g: [g * (1.0 - out * out)])


def exp(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    out = np.exp(np.clip(a.data, None, _EXP_MAX))
    if tape is None:
        return Tensor(out)
    return tape._emit("exp", out, [a], lambda g: [g * out])


def log(a: Tensor) -> Tensor:
    """Natural log, clamped below at 1e-300 so zeros stay finite."""
    tape = _tape_of(a)
    safe = np.maximum(a.data, _LOG_TINY)
    out = np.log(safe)
    if tape is None:
        return Tensor(out)
    return tape._emit("log", out, [a], lambda g: [g / safe])


# ---------------------------------------------------------------------------
# shape and selection kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[0]:
        raise ShapeMismatchError(f"matmul dimension mismatch: {da.shape} x {db.shape}")
    tape = _tape_of(a, b)
    out = da @ db
    if tape is None:
        return Tensor(out)
    parents = [t for t in (a, b) if isinstance(t, Tensor) and t.tape is tape]

    def backward(g):
        gs = []
        if isinstance(a, Tensor) and a.tape is tape:
            gs.append(g @ db.T)
        if isinstance(b, Tensor) and b.tape is tape:
            gs.append(da.T @ g)
        return gs

    return tape._emit("matmul", out, parents, backward)


def transpose(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    out = a.data.T.copy()
    if tape is None:
        return Tensor(out)
    return tape._emit("transpose", out, [a], lambda g: [g.T])


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    tape = _tape_of(a)
    out = a.data.reshape(shape)
    if tape is None:
        return Tensor(out)
    return tape._emit("reshape", out, [a], lambda g: [g.reshape(a.data.shape)])


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*parts)
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    if tape is None:
        return Tensor(out)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    parents = [p for p in parts if p.tape is tape]

    def backward(g):
        gs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.tape is tape:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                gs.append(g[tuple(idx)])
        return gs

    return tape._emit("concat", out, parents, backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"gather_rows needs a 2-D tensor, got {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for shape {a.data.shape}")
    tape = _tape_of(a)
    out = a.data[idx]
    if tape is None:
        return Tensor(out)

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return [acc]

    return tape._emit("gather_rows", out, [a], backward)


def take(a: Tensor, row: int, col: int) -> Tensor:
    """Extract one entry of a 2-D tensor as a scalar tensor."""
    tape = _tape_of(a)
    out = np.asarray(a.data[row, col])
    if tape is None:
        return Tensor(out)

    def backward(g):
        acc = np.zeros_like(a.data)
        acc[row, col] = g
        return [acc]

    return tape._emit("take", out, [a], backward)


def sum_all(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    out = np.asarray(a.data.sum())
    if tape is None:
        return Tensor(out)
    return tape._emit("sum", out, [a], lambda g: [np.broadcast_to(g, a.data.shape).copy()])


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction.

    ``mask`` is boolean with True marking entries that participate; masked
    entries come out exactly 0.  A row with nothing unmasked is an error.
    """
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows needs a 2-D tensor, got {x.data.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.data.shape:
            raise ShapeMismatchError(
                f"mask shape {mask.shape} does not match input {x.data.shape}"
            )
        if not mask.any(axis=1).all():
            raise DegenerateMaskError("softmax row is fully masked")
    tape = _tape_of(x)
    d = x.data
    if mask is None:
        m = d.max(axis=1, keepdims=True)
        e = np.exp(d - m)
    else:
        shifted = np.where(mask, d, -np.inf)
        m = shifted.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(d - m), 0.0)
    out = e / e.sum(axis=1, keepdims=True)
    if tape is None:
        return Tensor(out)

    def backward(g):
        gy = g * out
        return [gy - out * gy.sum(axis=1, keepdims=True)]

    return tape._emit("softmax", out, [x], backward)


# ---------------------------------------------------------------------------
# composite layers
# ---------------------------------------------------------------------------


def gru_cell(x: Tensor, h_prev: Tensor, p: dict[str, Tensor]) -> Tensor:
    """One GRU step for row vectors ``x`` (1, d_in) and ``h_prev`` (1, d_h).

    Gating: z and r from sigmoids, a tanh candidate with the reset gate
    applied to the previous state, and output (1-z)*h_prev + z*candidate.
    Parameter keys: wz/uz/bz, wr/ur/br, wh/uh/bh.
    """
    z = sigmoid(matmul(x, p["wz"]) + matmul(h_prev, p["uz"]) + p["bz"])
    r = sigmoid(matmul(x, p["wr"]) + matmul(h_prev, p["ur"]) + p["br"])
    cand = tanh(matmul(x, p["wh"]) + matmul(mul(r, h_prev), p["uh"]) + p["bh"])
    return add(mul(z, cand), sub(h_prev, mul(z, h_prev)))


def mlp(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Affine chain with tanh between layers and an affine final layer."""
    out = x
    for i, (w, b) in enumerate(layers):
        if out.data.shape[-1] != w.data.shape[0]:
            raise ShapeMismatchError(
                f"mlp layer {i}: input width {out.data.shape} vs weight {w.data.shape}"
            )
        out = add(matmul(out, w), b)
        if i < len(layers) - 1:
            out = tanh(out)
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


class FiniteDifferenceReport:
    """Worst-case relative disagreement between tape and central differences."""

    def __init__(self):
        self.max_rel_error = 0.0
        self.worst_param = ""
        self.per_param: dict[str, float] = {}
        self.coords_checked = 0

    def record(self, name: str, err: float) -> None:
        self.per_param[name] = max(self.per_param.get(name, 0.0), err)
        if err > self.max_rel_error:
            self.max_rel_error = err
            self.worst_param = name

    def __repr__(self) -> str:
        return (
            f"FiniteDifferenceReport(max_rel_error={self.max_rel_error:.3e}, "
            f"worst_param={self.worst_param!r}, coords={self.coords_checked})"
        )


def finite_difference_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    scale_floor: float = 1e-3,
) -> FiniteDifferenceReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must be deterministic (seed any sampling outside of it) and
    return a scalar tensor built from the tensors in ``params``.  The
    relative error per coordinate is |fd - tape| / max(|fd|, |tape|,
    scale_floor); the floor keeps round-off noise on near-zero gradients
    from registering as disagreement.  ``coords_per_param`` caps how many
    coordinates are probed per parameter (sampled with ``rng``), since a
    full sweep costs two evaluations per coordinate.
    """
    tape = Tape()
    for t in params.values():
        tape.watch(t)
    loss = f()
    tape.backward(loss)
    grads = {name: tape.grad(t) for name, t in params.items()}
    tape.close()

    report = FiniteDifferenceReport()
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if coords_per_param is not None and n > coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=coords_per_param, replace=False)
            coords = np.sort(coords)
        else:
            coords = range(n)
        gflat = grads[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            g = gflat[i]
            err = abs(fd - g) / max(abs(fd), abs(g), scale_floor)
            report.record(name, err)
            report.coords_checked += 1
        if name not in report.per_param:
            report.per_param[name] = 0.0
    return report
