"""Minimal dense-matrix reverse-mode differentiation on a tape.

Scope: exactly what 2-layer GCN autoencoders, variational heads, MLP
discriminators and the trigger-optimization loss need, including gradients
with respect to *inputs* (adjacency and feature matrices), in float64.

Usage is define-by-run: open a Tape, run primitives on Tensors, then call
``backward(loss)`` (or ``Tape.gradients`` with explicit seed adjoints).
Tensors are 2-D matrices; scalars are shape (1, 1). Broadcasting is
restricted to row vectors (1, m), column vectors (n, 1) and scalars.
"""

from __future__ import annotations

import threading

import numpy as np
import scipy.sparse as sp

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def _record(self, t: "Tensor") -> None:
        t._index = len(self._nodes)
        self._nodes.append(t)

    def gradients(self, seeds) -> dict:
        """Backward pass from (tensor, adjoint) seed pairs.

        Returns a map from every requires_grad *leaf* Tensor reached to its
        accumulated gradient matrix. Gradients sum across fan-out and across
        multiple seeds.
        """
        adjoint: dict[int, np.ndarray] = {}  # pending adjoints of tape nodes
        result: dict[Tensor, np.ndarray] = {}  # accumulated leaf gradients
        start = -1
        for t, adj in seeds:
            adj = np.asarray(adj, dtype=np.float64)
            if adj.shape != t.shape:
                raise ValueError(
                    f"seed adjoint shape {adj.shape} != tensor shape {t.shape}"
                )
            if not t.requires_grad:
                continue
            if t._index is not None:
                key = id(t)
                adjoint[key] = adjoint.get(key, 0.0) + adj
                start = max(start, t._index)
            else:
                result[t] = result.get(t, 0.0) + adj
        for node in reversed(self._nodes[: start + 1]):
            adj = adjoint.pop(id(node), None)
            if adj is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                contrib = vjp(adj)
                if parent._index is None:
                    if parent in result:
                        result[parent] = result[parent] + contrib
                    else:
                        result[parent] = contrib
                else:
                    key = id(parent)
                    if key in adjoint:
                        adjoint[key] = adjoint[key] + contrib
                    else:
                        adjoint[key] = contrib
        return result


class Tensor:
    """A float64 matrix, optionally tracked for gradients."""

    __slots__ = ("values", "requires_grad", "_parents", "_vjps", "_index")

    def __init__(self, values, requires_grad: bool = False):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ValueError(f"tensors are 2-D matrices, got ndim={v.ndim}")
        if not np.isfinite(v).all():
            raise ValueError("tensor values must be finite")
        self.values = v
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjps: tuple = ()
        self._index = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError("item() on non-scalar tensor")
        return float(self.values[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _emit(name: str, values: np.ndarray, parents, vjps) -> Tensor:
    tape = _active_tape()
    tracked = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
    out = Tensor(values, requires_grad=bool(tracked) and tape is not None)
    if out.requires_grad:
        out._parents = tuple(p for p, _ in tracked)
        out._vjps = tuple(v for _, v in tracked)
        tape._record(out)
    return out


def _check_same_or_broadcast(name: str, a: Tensor, b: Tensor):
    """Allow same shape, or b a row/col vector or scalar against a (and
    symmetrically); returns a reducer for each operand's gradient."""
    sa, sb = a.shape, b.shape

    def reducer(shape):
        def reduce_to(g):
            if g.shape == shape:
                return g
            out = g
            if shape[0] == 1 and g.shape[0] != 1:
                out = out.sum(axis=0, keepdims=True)
            if shape[1] == 1 and g.shape[1] != 1:
                out = out.sum(axis=1, keepdims=True)
            if out.shape != shape:
                raise ValueError(f"{name}: cannot reduce grad {g.shape} to {shape}")
            return out

        return reduce_to

    ok = sa == sb
    for x, y in ((sa, sb), (sb, sa)):
        if (y[0] in (1, x[0])) and (y[1] in (1, x[1])):
            ok = True
    if not ok:
        raise ValueError(f"{name}: incompatible shapes {sa} and {sb}")
    return reducer(sa), reducer(sb)


def add(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _check_same_or_broadcast("add", a, b)
    return _emit("add", a.values + b.values, (a, b), (ra, rb))


def sub(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _check_same_or_broadcast("sub", a, b)
    return _emit("sub", a.values - b.values, (a, b), (ra, lambda g: rb(-g)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _check_same_or_broadcast("hadamard", a, b)
    av, bv = a.values, b.values
    return _emit(
        "hadamard", av * bv, (a, b), (lambda g: ra(g * bv), lambda g: rb(g * av))
    )


def divide(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _check_same_or_broadcast("divide", a, b)
    av, bv = a.values, b.values
    out = av / bv
    return _emit(
        "divide",
        out,
        (a, b),
        (lambda g: ra(g / bv), lambda g: rb(-g * av / (bv * bv))),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    return _emit(
        "matmul", av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g)
    )


def spmm(s: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times dense tensor; s carries no gradient."""
    if s.shape[1] != x.shape[0]:
        raise ValueError(f"spmm: inner dims {s.shape} x {x.shape}")
    st = s.T.tocsr()
    return _emit("spmm", s @ x.values, (x,), (lambda g: st @ g,))


def scalar_mul(c: float, x: Tensor) -> Tensor:
    c = float(c)
    return _emit("scalar_mul", c * x.values, (x,), (lambda g: c * g,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _emit("relu", x.values * mask, (x,), (lambda g: g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.values))
    return _emit("sigmoid", out, (x,), (lambda g: g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _emit("exp", out, (x,), (lambda g: g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.values
    return _emit("log", np.log(xv), (x,), (lambda g: g / xv,))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    xv = x.values
    return _emit("power", xv**p, (x,), (lambda g: g * p * xv ** (p - 1.0),))


def transpose(x: Tensor) -> Tensor:
    return _emit("transpose", x.values.T.copy(), (x,), (lambda g: g.T,))


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    xv = x.values
    if axis is None:
        out = np.array([[xv.sum()]])
        vjp = lambda g: np.full(xv.shape, float(g[0, 0]))
    elif axis == 0:
        out = xv.sum(axis=0, keepdims=True)
        vjp = lambda g: np.broadcast_to(g, xv.shape).copy()
    elif axis == 1:
        out = xv.sum(axis=1, keepdims=True)
        vjp = lambda g: np.broadcast_to(g, xv.shape).copy()
    else:
        raise ValueError(f"reduce_sum: bad axis {axis}")
    return _emit("reduce_sum", out, (x,), (vjp,))


def reduce_mean(x: Tensor) -> Tensor:
    n = x.values.size
    out = np.array([[x.values.mean()]])
    return _emit(
        "reduce_mean", out, (x,), (lambda g: np.full(x.shape, float(g[0, 0]) / n),)
    )


def slice_block(x: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    n, m = x.shape
    if not (0 <= r0 <= r1 <= n and 0 <= c0 <= c1 <= m):
        raise ValueError(f"slice: bounds ({r0}:{r1},{c0}:{c1}) outside {x.shape}")

    def vjp(g):
        out = np.zeros(x.shape)
        out[r0:r1, c0:c1] = g
        return out

    return _emit("slice", x.values[r0:r1, c0:c1].copy(), (x,), (vjp,))


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ValueError("gather_rows: index out of range")

    def vjp(g):
        out = np.zeros(x.shape)
        np.add.at(out, idx, g)
        return out

    return _emit("gather_rows", x.values[idx].copy(), (x,), (vjp,))


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    cols = {t.shape[1] for t in tensors}
    if len(cols) != 1:
        raise ValueError(f"concat: column counts differ: {sorted(cols)}")
    offs = np.cumsum([0] + [t.shape[0] for t in tensors])
    vjps = []
    for i, t in enumerate(tensors):
        r0, r1 = int(offs[i]), int(offs[i + 1])
        vjps.append(lambda g, r0=r0, r1=r1: g[r0:r1].copy())
    return _emit(
        "concat", np.vstack([t.values for t in tensors]), tuple(tensors), tuple(vjps)
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes {a.shape} != {b.shape}")
    diff = a.values - b.values
    n = diff.size
    out = np.array([[(diff * diff).mean()]])
    scale = 2.0 / n
    return _emit(
        "mse",
        out,
        (a, b),
        (
            lambda g: float(g[0, 0]) * scale * diff,
            lambda g: -float(g[0, 0]) * scale * diff,
        ),
    )


_BCE_CLIP = 1e-12


def bce_with_weights(pred: Tensor, target, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy on probabilities, positives upweighted.

    ``target`` is a constant 0/1 matrix; predictions are clipped to
    [1e-12, 1 - 1e-12] (no gradient through the clip at saturation).
    """
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.shape != pred.shape:
        raise ValueError(f"bce: shapes {pred.shape} != {t.shape}")
    pw = float(pos_weight)
    p = np.clip(pred.values, _BCE_CLIP, 1.0 - _BCE_CLIP)
    inside = (pred.values > _BCE_CLIP) & (pred.values < 1.0 - _BCE_CLIP)
    n = p.size
    loss = -(pw * t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()

    def vjp(g):
        core = (-pw * t / p + (1.0 - t) / (1.0 - p)) / n
        return float(g[0, 0]) * core * inside

    return _emit("bce_with_weights", np.array([[loss]]), (pred,), (vjp,))


class ReconTarget:
    """Precomputed target for the full-pair weighted reconstruction BCE.

    Holds the symmetric 0/1 target (training adjacency plus the diagonal,
    plus any poisoned positive pairs), its positive weight
    (#zeros / #ones) and the global norm factor n^2 / (2 #zeros).
    """

    def __init__(self, target_csr: sp.csr_matrix):
        t = target_csr.tocsr().astype(np.float64)
        t.eliminate_zeros()
        if (t != t.T).nnz != 0:
            raise ValueError("reconstruction target must be symmetric")
        self.csr = t
        n = t.shape[0]
        ones = float(t.nnz)
        zeros = float(n) * float(n) - ones
        if ones == 0 or zeros == 0:
            raise ValueError("degenerate reconstruction target")
        self.pos_weight = zeros / ones
        self.norm = float(n) * float(n) / (2.0 * zeros)
        self.n = n

    @classmethod
    def from_adjacency(cls, adj: sp.spmatrix, extra_pairs=None) -> "ReconTarget":
        n = adj.shape[0]
        t = adj.tocsr() + sp.eye(n, format="csr")
        if extra_pairs:
            arr = np.asarray(list(extra_pairs), dtype=np.int64)
            rows = np.concatenate([arr[:, 0], arr[:, 1]])
            cols = np.concatenate([arr[:, 1], arr[:, 0]])
            t = t + sp.csr_matrix(
                (np.ones(rows.size), (rows, cols)), shape=(n, n)
            )
        t = t.tocsr()
        t.data[:] = 1.0
        return cls(t)


def recon_value_and_grad(
    z: np.ndarray,
    target: ReconTarget,
    want_loss: bool = True,
    want_grad: bool = True,
    block: int = 1024,
):
    """Weighted BCE over all n^2 logits of Z Z^T, streamed in row blocks.

    loss = norm/n^2 * sum_ij [ pw*T*softplus(-s) + (1-T)*softplus(s) ],
    s = z z^T. The gradient uses the symmetry of s and T:
    dL/dz = 2 * norm/n^2 * G z with G = sigma(s) - T*(pw - (pw-1)*sigma(s)).
    """
    n, k = z.shape
    t = target.csr
    pw = target.pos_weight
    c = target.norm / (float(n) * float(n))
    indptr, indices = t.indptr, t.indices
    dz = np.empty_like(z) if want_grad else None
    loss = 0.0
    for i0 in range(0, n, block):
        i1 = min(i0 + block, n)
        s = z[i0:i1] @ z.T
        if want_loss:
            loss += float(np.logaddexp(0.0, s).sum())  # sum softplus(s)
        if want_grad:
            # sigmoid in place
            np.negative(s, out=s)
            np.exp(s, out=s)
            s += 1.0
            np.reciprocal(s, out=s)
        for r in range(i0, i1):
            cols = indices[indptr[r] : indptr[r + 1]]
            if cols.size == 0:
                continue
            sval = z[r] @ z[cols].T  # exact logits at the positive entries
            if want_loss:
                # positives contribute pw*softplus(-s) instead of softplus(s)
                spl = np.maximum(sval, 0.0) + np.log1p(np.exp(-np.abs(sval)))
                loss += float(((pw - 1.0) * spl - pw * sval).sum())
            if want_grad:
                sig = 1.0 / (1.0 + np.exp(-sval))
                s[r - i0, cols] = sig - (pw - (pw - 1.0) * sig)
        if want_grad:
            dz[i0:i1] = s @ z
    if want_grad:
        dz *= 2.0 * c
    return (c * loss if want_loss else None), dz


def recon_bce_logits(z: Tensor, target: ReconTarget) -> Tensor:
    """Tape primitive for the full-pair weighted reconstruction BCE."""
    if z.shape[0] != target.n:
        raise ValueError(
            f"recon_bce_logits: {z.shape[0]} rows vs target size {target.n}"
        )
    loss, _ = recon_value_and_grad(z.values, target, want_loss=True, want_grad=False)

    def vjp(g):
        _, dz = recon_value_and_grad(z.values, target, want_loss=False)
        return float(g[0, 0]) * dz

    return _emit("recon_bce_logits", np.array([[loss]]), (z,), (vjp,))


def backward(loss: Tensor) -> dict:
    """Gradients of a scalar loss w.r.t. every requires_grad tensor reached."""
    if loss.shape != (1, 1):
        raise ValueError(f"backward: loss must be scalar (1,1), got {loss.shape}")
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() outside of an active Tape")
    if not tape._nodes:
        raise RuntimeError("backward() on an empty tape")
    return tape.gradients([(loss, np.ones((1, 1)))])
