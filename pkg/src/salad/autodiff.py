"""Dense n-dimensional arrays with reverse-mode automatic differentiation.

Every value is stored as a row-major float64 numpy array. Operations build a
computation graph of closures; Tensor.backward walks it once in reverse
topological order and accumulates gradients on requires_grad leaves. There is
no broadcasting beyond scalar-vs-tensor, which keeps every backward rule a
few lines of auditable numpy.
"""

from __future__ import annotations

import numpy as np

_EPS_NORM = 1e-12


class NumericError(ArithmeticError):
    """Raised when an operation produces or receives NaN/Inf, or violates a
    domain constraint (log of non-positive, division by zero)."""


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in output of '{op}'")
    return arr


class Tensor:
    """A node in the computation graph.

    data          float64 ndarray (any rank, 0-d for scalars)
    requires_grad leaves opt in; op outputs inherit from their parents
    grad          same-shape gradient accumulator, populated by backward()
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._done = False

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph construction helpers -------------------------------------

    def _child(self, data, parents, backward, op):
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                     _parents=parents, _backward=backward, _op=op)
        return out

    # -- elementwise arithmetic ------------------------------------------

    def _coerce(self, other, op):
        """Accept a same-shape Tensor, a 0-d Tensor, or a python scalar."""
        if isinstance(other, Tensor):
            if other.data.shape != self.data.shape and other.data.shape != ():
                raise ValueError(f"shape mismatch in '{op}': {self.data.shape} vs {other.data.shape}")
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Tensor(float(other))
        raise TypeError(f"unsupported operand for '{op}': {type(other)!r}")

    def __add__(self, other):
        other = self._coerce(other, "add")

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad)
            if other.requires_grad:
                other._accumulate(out.grad if other.data.shape else np.sum(out.grad))

        return self._child(self.data + other.data, (self, other), backward, "add")

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        other = self._coerce(other, "sub")

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad)
            if other.requires_grad:
                other._accumulate(-out.grad if other.data.shape else -np.sum(out.grad))

        return self._child(self.data - other.data, (self, other), backward, "sub")

    def __mul__(self, other):
        other = self._coerce(other, "mul")

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * other.data)
            if other.requires_grad:
                g = out.grad * self.data
                other._accumulate(g if other.data.shape else np.sum(g))

        return self._child(self.data * other.data, (self, other), backward, "mul")

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        other = self._coerce(other, "div")
        if np.any(other.data == 0.0):
            raise NumericError("division by zero")

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad / other.data)
            if other.requires_grad:
                g = -out.grad * self.data / (other.data * other.data)
                other._accumulate(g if other.data.shape else np.sum(g))

        return self._child(self.data / other.data, (self, other), backward, "div")

    def __neg__(self):
        def backward(out):
            if self.requires_grad:
                self._accumulate(-out.grad)

        return self._child(-self.data, (self,), backward, "neg")

    def exp(self):
        out_data = np.exp(self.data)

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * out.data)

        return self._child(out_data, (self,), backward, "exp")

    def log(self):
        if np.any(self.data <= 0.0):
            raise NumericError("log of non-positive value")

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad / self.data)

        return self._child(np.log(self.data), (self,), backward, "log")

    def square(self):
        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * 2.0 * self.data)

        return self._child(self.data * self.data, (self,), backward, "square")

    # -- reductions and indexing -----------------------------------------

    def sum(self):
        def backward(out):
            if self.requires_grad:
                self._accumulate(np.full_like(self.data, float(out.grad)))

        return self._child(np.sum(self.data), (self,), backward, "sum")

    def take(self, indices):
        """Select elements of a 1-d tensor at the given indices (gather)."""
        if self.data.ndim != 1:
            raise ValueError("take expects a 1-d tensor")
        idx = np.asarray(indices, dtype=np.intp)

        def backward(out):
            if self.requires_grad:
                g = np.zeros_like(self.data)
                np.add.at(g, idx, out.grad)
                self._accumulate(g)

        return self._child(self.data[idx], (self, ), backward, "take")

    # -- linear algebra ----------------------------------------------------

    def matmul(self, other):
        if not isinstance(other, Tensor):
            raise TypeError("matmul expects a Tensor")
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

        def backward(out):
            if b.ndim == 2:
                if self.requires_grad:
                    self._accumulate(out.grad @ b.T)
                if other.requires_grad:
                    other._accumulate(a.T @ out.grad)
            else:  # matrix @ vector
                if self.requires_grad:
                    self._accumulate(np.outer(out.grad, b))
                if other.requires_grad:
                    other._accumulate(a.T @ out.grad)

        return self._child(a @ b, (self, other), backward, "matmul")

    def __matmul__(self, other):
        return self.matmul(other)

    # -- nonlinearities -----------------------------------------------------

    def leaky_relu(self, slope=0.01):
        mask = np.where(self.data > 0.0, 1.0, slope)

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * mask)

        return self._child(self.data * mask, (self,), backward, "leaky_relu")

    def sigmoid(self):
        # exp may overflow for very negative inputs; the result still
        # saturates to exactly 0.0, so the warning carries no information
        with np.errstate(over="ignore"):
            out_data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * out.data * (1.0 - out.data))

        return self._child(out_data, (self,), backward, "sigmoid")

    def softmax_rows(self):
        """Row-wise softmax, stabilized by per-row max subtraction.

        Accepts a 1-d tensor (treated as a single row) or a 2-d tensor.
        """
        x = self.data
        vec = x.ndim == 1
        x2 = x[None, :] if vec else x
        if x2.ndim != 2:
            raise ValueError("softmax_rows expects a 1-d or 2-d tensor")
        shifted = x2 - x2.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        out_data = probs[0] if vec else probs

        def backward(out):
            if self.requires_grad:
                y = out.data[None, :] if vec else out.data
                dy = out.grad[None, :] if vec else out.grad
                inner = np.sum(dy * y, axis=1, keepdims=True)
                g = y * (dy - inner)
                self._accumulate(g[0] if vec else g)

        return self._child(out_data, (self,), backward, "softmax_rows")

    def l2_normalize(self):
        """Scale a 1-d tensor to unit Euclidean norm.

        Backward projects the upstream gradient onto the tangent space of the
        unit sphere: dv = (dy - y * (y . dy)) / ||v||.
        """
        if self.data.ndim != 1:
            raise ValueError("l2_normalize expects a 1-d tensor")
        norm = float(np.linalg.norm(self.data))
        if norm < _EPS_NORM:
            raise NumericError("l2_normalize of a near-zero vector")

        def backward(out):
            if self.requires_grad:
                y = out.data
                dy = out.grad
                self._accumulate((dy - y * np.dot(y, dy)) / norm)

        return self._child(self.data / norm, (self,), backward, "l2_normalize")

    # -- backward pass ------------------------------------------------------

    def backward(self):
        """Propagate d(self)/d(leaf) into every requires_grad leaf.

        self must be scalar (0-d or single-element). A second backward over
        the same graph raises; build a fresh graph per pass.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root")
        if self._done:
            raise RuntimeError("backward already ran on this graph (stale graph)")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._done and node._parents:
                raise RuntimeError("backward already ran on part of this graph (stale graph)")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.requires_grad and node.grad is not None:
                node._backward(node)
            if node._parents:
                node._done = True


# -- functional aliases -------------------------------------------------

def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def matmul(a, b):
    return a.matmul(b)


def softmax_rows(t):
    return t.softmax_rows()


def l2_normalize(t):
    return t.l2_normalize()


def grad_check(f, x, h=1e-6):
    """Max relative error between analytic and central-difference gradients.

    f takes a Tensor and returns a scalar Tensor; x supplies the evaluation
    point. Relative error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(Tensor(base)).data)
        flat[i] = orig - h
        f_minus = float(f(Tensor(base)).data)
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
