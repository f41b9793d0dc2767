"""Dense linear algebra with a small reverse-mode tape.

Every operation in this module accepts plain ``numpy`` arrays or :class:`Var`
handles.  With plain arrays the operation is evaluated directly and a plain
array comes back, so the same algebra serves both the closed-form DMD code and
the differentiable NDMD layer.  When any input is a :class:`Var` the result is
recorded on that variable's :class:`Tape` together with its vector-Jacobian
product.

Adjoint convention for complex values: the adjoint of ``z = x + iy`` carried
on the tape is ``dL/dx + i dL/dy`` for a real scalar loss ``L``.  Under this
convention a holomorphic map ``w = f(z)`` pulls back as ``conj(f'(z)) * w_bar``
and real inputs keep the real part of whatever arrives.

Forward SVD and eigendecomposition call LAPACK through ``numpy.linalg``; the
reverse rules are written out here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

GAP_CLAMP = 1e-6
PINV_RCOND = 1e-10
EIG_RESIDUAL_TOL = 1e-6


class ContractViolation(ValueError):
    """An operation was called outside its documented domain."""


class DegenerateInputError(ValueError):
    """A decomposition input is (numerically) rank deficient."""


class NonDiagonalizableError(np.linalg.LinAlgError):
    """The eigenvector matrix does not reconstruct the input."""


# --------------------------------------------------------------------------
# tape


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make ``ndarray @ Var`` defer to Var.__rmatmul__

    def __init__(self, value: Any, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self) -> "Var":
        return transpose(self)

    @property
    def real(self) -> "Var":
        return real(self)

    def conj(self) -> "Var":
        return conj(self)

    def sum(self, axis=None) -> "Var":
        return sum_(self, axis)

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


@dataclass
class _Node:
    parents: tuple
    vjp: Callable | None


class Tape:
    """Linear record of primitive operations for one backward sweep.

    Nodes are appended in evaluation order, so walking the list backwards
    visits every node after all of its consumers.  ``clamp_events`` counts
    near-degenerate spectral gaps whose denominators were clamped during
    backward passes.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self.clamp_events = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value) -> Var:
        value = np.asarray(value)
        value = np.array(value, dtype=np.result_type(value.dtype, np.float64), copy=True)
        return self._push(value, (), None)

    def _push(self, value, parents: tuple, vjp) -> Var:
        self._nodes.append(_Node(parents, vjp))
        return Var(value, self, len(self._nodes) - 1)

    def gradient(self, output: Var, wrt: Sequence[Var], seed=None) -> list[np.ndarray]:
        """Adjoints of ``output`` with respect to each of ``wrt``.

        ``seed`` defaults to one for a scalar output.  Variables that do not
        influence ``output`` receive zeros.
        """
        if output.tape is not self:
            raise ContractViolation("output was not recorded on this tape")
        if seed is None:
            if np.size(output.value) != 1:
                raise ContractViolation("a seed adjoint is required for non-scalar outputs")
            seed = np.ones_like(output.value)
        adj: list = [None] * (output.index + 1)
        adj[output.index] = seed
        for i in range(output.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self._nodes[i]
            if node.vjp is None:
                continue
            grads = node.vjp(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not isinstance(parent, Var):
                    continue
                j = parent.index
                pg = _match_kind(pg, parent.value)
                adj[j] = pg if adj[j] is None else _accumulate(adj[j], pg)
        out = []
        for w in wrt:
            g = adj[w.index] if w.index < len(adj) else None
            out.append(np.zeros_like(w.value) if g is None else g)
        return out


def _accumulate(a, b):
    if isinstance(a, tuple):
        return tuple(y if x is None else x if y is None else x + y for x, y in zip(a, b))
    return a + b


def _match_kind(g, value):
    if isinstance(g, tuple):
        return g
    if np.iscomplexobj(g) and not np.iscomplexobj(value):
        return np.array(g.real)
    return g


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _record(value, parents: tuple, vjp) -> Any:
    tape = _tape_of(*parents)
    if tape is None:
        return value
    return tape._push(value, parents, vjp)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x) -> np.ndarray:
    """Underlying array of a Var, or the array itself."""
    return np.asarray(_val(x))


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av + bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av - bv, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a):
    return _record(-_val(a), (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        return (_unbroadcast(g * np.conj(bv), sa), _unbroadcast(g * np.conj(av), sb))

    return _record(av * bv, (a, b), vjp)


def div(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv

    def vjp(g):
        ga = g / np.conj(bv)
        return (_unbroadcast(ga, sa), _unbroadcast(-ga * np.conj(out), sb))

    return _record(out, (a, b), vjp)


def matmul(a, b):
    av, bv = _val(a), _val(b)

    def vjp(g):
        if bv.ndim == 1:
            ga = np.outer(g, np.conj(bv))
        else:
            ga = g @ np.conj(bv).T
        if av.ndim == 1:
            gb = np.outer(np.conj(av), g)
        else:
            gb = np.conj(av).T @ g
        return ga, gb

    return _record(av @ bv, (a, b), vjp)


def transpose(a):
    return _record(_val(a).T, (a,), lambda g: (g.T,))


def conj(a):
    return _record(np.conj(_val(a)), (a,), lambda g: (np.conj(g),))


def real(a):
    return _record(np.real(_val(a)), (a,), lambda g: (np.real(g),))


def getitem(a, key):
    av = _val(a)

    def vjp(g):
        full = np.zeros(av.shape, dtype=np.result_type(av, g))
        np.add.at(full, key, g)
        return (full,)

    return _record(av[key], (a,), vjp)


def reshape(a, shape):
    av = _val(a)
    return _record(av.reshape(shape), (a,), lambda g: (np.reshape(g, av.shape),))


def sum_(a, axis=None):
    av = _val(a)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record(av.sum(axis=axis), (a,), vjp)


def mean(a, axis=None):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return sum_(a, axis) / n


def concat(xs: Sequence, axis: int = 0):
    vals = [_val(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    out = np.concatenate(vals, axis=axis)
    return _record(out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)))


def tanh(a):
    out = np.tanh(_val(a))
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    av = _val(a)
    return _record(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def abs_(a):
    """Modulus; for complex inputs the pullback is ``g * z / |z|``."""
    av = _val(a)
    out = np.abs(av)
    safe = np.where(out > 0, out, 1.0)

    def vjp(g):
        return (np.where(out > 0, g * av / safe, 0.0),)

    return _record(out, (a,), vjp)


def square_norm(a):
    """Sum of squared moduli."""
    av = _val(a)
    return _record(np.sum(np.abs(av) ** 2), (a,), lambda g: (2.0 * g * av,))


def diag_power(lambdas, exponent):
    """Elementwise powers ``lambdas ** exponent``.

    A scalar exponent gives a vector.  An integer array of exponents gives the
    outer power table with shape ``lambdas.shape + exponent.shape``.
    """
    e = np.asarray(exponent)
    if not np.issubdtype(e.dtype, np.integer):
        if not np.all(np.equal(np.mod(e, 1), 0)):
            raise ContractViolation("exponents must be integers")
        e = e.astype(np.int64)
    if np.any(e < 0):
        raise ContractViolation("negative exponents are not supported")
    lv = np.asarray(_val(lambdas))
    base = lv.reshape(lv.shape + (1,) * e.ndim)
    out = base ** e

    def vjp(g):
        lower = np.where(e > 0, base ** np.maximum(e - 1, 0), 0.0)
        d = e * lower
        gl = g * np.conj(d)
        return (gl.reshape(lv.shape + (-1,)).sum(axis=-1) if e.ndim else gl.reshape(lv.shape),)

    return _record(out, (lambdas,), vjp)


def take_min(a, axis: int):
    """Minimum along ``axis``; the pullback routes to the argmin entry."""
    av = _val(a)
    idx = np.expand_dims(np.argmin(av, axis=axis), axis)
    out = np.take_along_axis(av, idx, axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(av, dtype=np.result_type(av, g))
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (a,), vjp)


# --------------------------------------------------------------------------
# singular value decomposition


@dataclass
class SvdResult:
    """Thin SVD factors; ``u`` is rows x rank, ``v`` is cols x rank."""

    u: Any
    sigma: Any
    v: Any
    rank: int


def _clamp(denom, counts_where=None):
    """Clamp small denominators to magnitude GAP_CLAMP keeping their direction."""
    mag = np.abs(denom)
    small = mag < GAP_CLAMP
    if not np.any(small):
        return denom, 0
    if np.iscomplexobj(denom):
        phase = np.where(mag > 0, denom / np.where(mag > 0, mag, 1.0), 1.0)
        fixed = np.where(small, GAP_CLAMP * phase, denom)
    else:
        fixed = np.where(small, np.where(denom < 0, -GAP_CLAMP, GAP_CLAMP), denom)
    if counts_where is not None:
        small = small & counts_where
    return fixed, int(np.count_nonzero(small))


def _svd_np(m: np.ndarray):
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    return u, s, vh.T


def svd_backward(fwd: SvdResult, gu=None, gsigma=None, gv=None, *, return_clamps: bool = False):
    """Adjoint of the input matrix of a real thin SVD.

    ``fwd`` holds arrays.  Missing adjoints count as zero.  Singular-value gaps
    whose squared difference falls below ``GAP_CLAMP`` are clamped.
    """
    u, s, v = (np.asarray(fwd.u), np.asarray(fwd.sigma), np.asarray(fwd.v))
    k = s.shape[0]
    gu = np.zeros_like(u) if gu is None else np.real(gu)
    gv = np.zeros_like(v) if gv is None else np.real(gv)
    gs = np.zeros_like(s) if gsigma is None else np.real(gsigma)

    j_u = u.T @ gu
    j_v = v.T @ gv
    sym_u = j_u - j_u.T
    sym_v = j_v - j_v.T
    s2 = s * s
    denom = s2[None, :] - s2[:, None]
    off = ~np.eye(k, dtype=bool)
    active = off & ((sym_u != 0) | (sym_v != 0))
    denom, clamps = _clamp(np.where(off, denom, 1.0), counts_where=np.triu(active))
    f = np.where(off, 1.0 / denom, 0.0)

    inner = (f * sym_u) * s[None, :] + s[:, None] * (f * sym_v) + np.diag(gs)
    grad = u @ inner @ v.T

    s_inv = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    m_rows, n_cols = u.shape[0], v.shape[0]
    if m_rows > k:
        proj_u = gu - u @ j_u
        grad += (proj_u * s_inv[None, :]) @ v.T
    if n_cols > k:
        proj_v = gv - v @ j_v
        grad += (u * s_inv[None, :]) @ proj_v.T
    if return_clamps:
        return grad, clamps
    return grad


def svd_truncated(m, rank: int | None = None, threshold: float | None = None) -> SvdResult:
    """Best rank-``rank`` factorization of a real matrix.

    Exactly one of ``rank`` or ``threshold`` is given.  In threshold mode the
    rank is the number of singular values at or above ``threshold * sigma_1``.

    On a tape the full thin SVD is recorded and then sliced, so the reverse
    pass accounts for coupling with the discarded directions exactly.
    """
    mv = np.asarray(_val(m), dtype=float)
    if mv.ndim != 2:
        raise ContractViolation("svd_truncated expects a matrix")
    if not np.all(np.isfinite(mv)):
        raise ContractViolation("non-finite entries in svd input")
    if (rank is None) == (threshold is None):
        raise ContractViolation("give exactly one of rank or threshold")
    u, s, v = _svd_np(mv)
    kmax = s.shape[0]
    if threshold is not None:
        if not 0.0 < threshold < 1.0:
            raise ContractViolation("threshold must lie in (0, 1)")
        r = int(np.count_nonzero(s >= threshold * s[0])) if s.size and s[0] > 0 else 0
        if r == 0:
            raise DegenerateInputError("no singular value survives the threshold")
    else:
        r = int(rank)
        if r < 1 or r > kmax:
            raise ContractViolation(f"rank {r} outside [1, {kmax}]")
    if not isinstance(m, Var):
        return SvdResult(u[:, :r].copy(), s[:r].copy(), v[:, :r].copy(), r)

    full = SvdResult(u, s, v, kmax)

    def vjp(g):
        gu, gs, gv = g
        grad, clamps = svd_backward(full, gu, gs, gv, return_clamps=True)
        m.tape.clamp_events += clamps
        return (grad,)

    node = m.tape._push((u, s, v), (m,), vjp)
    return SvdResult(
        _select(node, 0, (slice(None), slice(0, r))),
        _select(node, 1, slice(0, r)),
        _select(node, 2, (slice(None), slice(0, r))),
        r,
    )


def _select(node: Var, slot: int, key) -> Var:
    """Slice one component of a tuple-valued node."""
    parts = node.value
    full = parts[slot]

    def vjp(g):
        piece = np.zeros_like(full)
        piece[key] = g
        out = [None] * len(parts)
        out[slot] = piece
        return (tuple(out),)

    return node.tape._push(full[key].copy(), (node,), vjp)


# --------------------------------------------------------------------------
# eigendecomposition


@dataclass
class EigResult:
    """Eigenvalues and unit-norm eigenvector columns of a square matrix."""

    lambdas: Any
    y: Any


def eig_order(lambdas: np.ndarray) -> np.ndarray:
    """Descending modulus, then descending real part, positive imaginary first."""
    lam = np.asarray(lambdas)
    return np.lexsort((-lam.imag, -lam.real, -np.abs(lam)))


def _eig_np(m: np.ndarray):
    lam, y = np.linalg.eig(m)
    lam = lam.astype(complex)
    y = y.astype(complex)
    order = eig_order(lam)
    lam, y = lam[order], y[:, order]
    scale = max(np.linalg.norm(m), 1e-300)
    try:
        recon = y @ np.diag(lam) @ np.linalg.inv(y)
    except np.linalg.LinAlgError as exc:
        raise NonDiagonalizableError("singular eigenvector matrix") from exc
    resid = np.linalg.norm(recon - m) / scale
    if not np.isfinite(resid) or resid > EIG_RESIDUAL_TOL:
        raise NonDiagonalizableError(f"eigendecomposition residual {resid:.3g} above tolerance")
    return lam, y


def eig_backward(fwd: EigResult, glambdas=None, gy=None, *, real_input: bool = True,
                 return_clamps: bool = False):
    """Adjoint of the input of ``eig``.

    Includes the correction for the unit-norm normalization of eigenvector
    columns, so losses that depend on ``y`` only through gauge-invariant
    combinations get exact gradients.
    """
    lam = np.asarray(fwd.lambdas)
    y = np.asarray(fwd.y)
    n = lam.shape[0]
    gl = np.zeros(n, complex) if glambdas is None else np.asarray(glambdas, complex)
    gy = np.zeros((n, n), complex) if gy is None else np.asarray(gy, complex)

    yh = y.conj().T
    yh_gy = yh @ gy
    yh_gy = yh_gy - (yh @ y) * np.real(np.diag(yh_gy))[None, :]
    diff = lam[None, :] - lam[:, None]  # lambda_j - lambda_i
    off = ~np.eye(n, dtype=bool)
    active = off & (yh_gy != 0)
    diff, clamps = _clamp(np.where(off, diff, 1.0), counts_where=np.triu(active | active.T))
    f = np.where(off, 1.0 / np.conj(diff), 0.0)
    inner = f * yh_gy + np.diag(gl)
    grad = np.linalg.solve(yh, inner @ yh)
    if real_input:
        grad = grad.real
    if return_clamps:
        return grad, clamps
    return grad


def eig(m) -> EigResult:
    """Eigendecomposition of a real square matrix, sorted by :func:`eig_order`."""
    mv = np.asarray(_val(m), dtype=float)
    if mv.ndim != 2 or mv.shape[0] != mv.shape[1]:
        raise ContractViolation("eig expects a square matrix")
    if not np.all(np.isfinite(mv)):
        raise ContractViolation("non-finite entries in eig input")
    lam, y = _eig_np(mv)
    if not isinstance(m, Var):
        return EigResult(lam, y)
    fwd = EigResult(lam, y)

    def vjp(g):
        gl, gy = g
        grad, clamps = eig_backward(fwd, gl, gy, return_clamps=True)
        m.tape.clamp_events += clamps
        return (grad,)

    node = m.tape._push((lam, y), (m,), vjp)
    return EigResult(_select(node, 0, slice(None)), _select(node, 1, (slice(None), slice(None))))


# --------------------------------------------------------------------------
# pseudo-inverse


def _pinv_np(a: np.ndarray) -> np.ndarray:
    if a.size == 0:
        return np.zeros(a.shape[::-1], dtype=a.dtype)
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    # subnormal singular values would overflow on inversion; treat them as zero
    tiny = np.finfo(s.dtype).tiny
    if s[0] < tiny:
        return np.zeros(a.shape[::-1], dtype=a.dtype)
    keep = (s > PINV_RCOND * s[0]) & (s >= tiny)
    s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (vh.conj().T * s_inv[None, :]) @ u.conj().T


def pinv(m):
    """Moore-Penrose pseudo-inverse; singular values below 1e-10 * sigma_1 (or subnormal) are dropped."""
    av = np.asarray(_val(m))
    gp = _pinv_np(av)

    def vjp(g):
        gh = gp.conj().T
        g_h = np.conj(g).T
        term = -gh @ g @ gh
        term = term + (np.eye(av.shape[0]) - av @ gp) @ g_h @ gp @ gh
        term = term + gh @ gp @ g_h @ (np.eye(av.shape[1]) - gp @ av)
        return (term,)

    return _record(gp, (m,), vjp)


# --------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable, m: np.ndarray, step: float = 1e-5, floor: float = 1e-8) -> float:
    """Largest relative gap between tape and central-difference gradients.

    ``f`` maps a matrix (array or Var) to a scalar.  Entries where both
    gradients are below ``floor`` in magnitude are skipped.
    """
    m = np.asarray(m, dtype=float)
    tape = Tape()
    x = tape.leaf(m)
    (g_tape,) = tape.gradient(f(x), [x])
    g_fd = np.zeros_like(m)
    for idx in np.ndindex(m.shape):
        up = m.copy()
        dn = m.copy()
        up[idx] += step
        dn[idx] -= step
        g_fd[idx] = (float(np.real(f(up))) - float(np.real(f(dn)))) / (2 * step)
    return relative_error(g_tape, g_fd, floor)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mag = np.maximum(np.abs(a), np.abs(b))
    mask = mag > floor
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(a - b)[mask] / mag[mask]))
