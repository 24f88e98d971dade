"""Dense float64 tensors and a reverse-mode differentiation tape.

Values are plain numpy float64 arrays (row-major), rank <= 2 plus an
optional leading batch axis. A ``Tape`` records every primitive applied
to its nodes; one backward pass per recording propagates a seeded
gradient to every recorded node, so the gradient of the loss with
respect to any intermediate activation can be read off afterwards.
"""

from __future__ import annotations

import numpy as np


class NdcoreError(Exception):
    pass


class ShapeMismatch(NdcoreError):
    pass


class NonFinite(NdcoreError):
    pass


class TapeConsumed(NdcoreError):
    pass


class UnknownNode(NdcoreError):
    pass


def as_tensor(value) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (0-d stays 0-d)."""
    return np.asarray(value, dtype=np.float64, order="C")


class Node:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


class _Record:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents
        self.vjp = vjp


def _softmax(z: np.ndarray) -> np.ndarray:
    # max-subtraction keeps exp() finite for large logits
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _rms_scale(x: np.ndarray, eps: float) -> np.ndarray:
    n = x.shape[-1]
    return np.sqrt(np.sum(x * x, axis=-1, keepdims=True) / n + eps)


class Tape:
    """Append-only record of primitive operations with reverse-mode VJPs.

    Recording is single-threaded; independent tapes share no state.
    ``backward`` may be called once per recording.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._values: list[np.ndarray] = []
        self._grads: list[np.ndarray | None] | None = None

    def __len__(self):
        return len(self._records)

    # -- recording -----------------------------------------------------

    def _append(self, value: np.ndarray, parents=(), vjp=None) -> Node:
        if not np.isfinite(value).all():
            raise NonFinite(f"non-finite entries in op output of shape {value.shape}")
        self._records.append(_Record(tuple(p.index for p in parents), vjp))
        self._values.append(value)
        return Node(self, len(self._values) - 1, value)

    def _own(self, node: Node) -> Node:
        if not isinstance(node, Node) or node.tape is not self:
            raise UnknownNode("node was not recorded on this tape")
        return node

    def input(self, value) -> Node:
        """Record a leaf value (network input, parameter, target)."""
        return self._append(as_tensor(value))

    def add(self, a: Node, b: Node) -> Node:
        a, b = self._own(a), self._own(b)
        if a.shape != b.shape:
            raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
        return self._append(a.value + b.value, (a, b), lambda u: (u, u))

    def sub(self, a: Node, b: Node) -> Node:
        a, b = self._own(a), self._own(b)
        if a.shape != b.shape:
            raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")
        return self._append(a.value - b.value, (a, b), lambda u: (u, -u))

    def mul(self, a: Node, b: Node) -> Node:
        a, b = self._own(a), self._own(b)
        if a.shape != b.shape:
            raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
        av, bv = a.value, b.value
        return self._append(av * bv, (a, b), lambda u: (u * bv, u * av))

    def scale(self, a: Node, c: float) -> Node:
        a = self._own(a)
        c = float(c)
        return self._append(a.value * c, (a,), lambda u: (u * c,))

    def matmul(self, a: Node, b: Node) -> Node:
        a, b = self._own(a), self._own(b)
        av, bv = a.value, b.value
        if av.ndim == 2 and bv.ndim == 2:
            if av.shape[1] != bv.shape[0]:
                raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")
            vjp = lambda u: (u @ bv.T, av.T @ u)
        elif av.ndim == 2 and bv.ndim == 1:
            if av.shape[1] != bv.shape[0]:
                raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")
            vjp = lambda u: (np.outer(u, bv), av.T @ u)
        elif av.ndim == 1 and bv.ndim == 2:
            if av.shape[0] != bv.shape[0]:
                raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")
            vjp = lambda u: (bv @ u, np.outer(av, u))
        elif av.ndim == 1 and bv.ndim == 1:
            if av.shape[0] != bv.shape[0]:
                raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")
            vjp = lambda u: (u * bv, u * av)
        else:
            raise ShapeMismatch(f"matmul supports rank <= 2, got {av.shape} @ {bv.shape}")
        return self._append(av @ bv, (a, b), vjp)

    def linear(self, x: Node, w: Node) -> Node:
        """Apply weight ``w`` (out, in) to activations ``x`` (..., in)."""
        x, w = self._own(x), self._own(w)
        xv, wv = x.value, w.value
        if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
            raise ShapeMismatch(f"linear: x{xv.shape} w{wv.shape}")
        if xv.ndim == 1:
            vjp = lambda u: (wv.T @ u, np.outer(u, xv))
        elif xv.ndim == 2:
            vjp = lambda u: (u @ wv, u.T @ xv)
        else:
            raise ShapeMismatch(f"linear: rank {xv.ndim} input")
        return self._append(xv @ wv.T, (x, w), vjp)

    def relu(self, a: Node) -> Node:
        a = self._own(a)
        mask = a.value > 0.0  # subgradient at 0 fixed to 0
        return self._append(np.where(mask, a.value, 0.0), (a,), lambda u: (u * mask,))

    def sum(self, a: Node) -> Node:
        a = self._own(a)
        shape = a.shape
        return self._append(
            np.asarray(a.value.sum()), (a,), lambda u: (np.broadcast_to(u, shape).copy(),)
        )

    def rmsnorm(self, x: Node, gamma, eps: float) -> Node:
        """Root-mean-square normalization with stabilizer ``eps``; ``gamma`` is constant."""
        x = self._own(x)
        gamma = as_tensor(gamma)
        xv = x.value
        if gamma.shape != (xv.shape[-1],):
            raise ShapeMismatch(f"rmsnorm: gamma {gamma.shape} vs width {xv.shape[-1]}")
        n = xv.shape[-1]
        s = _rms_scale(xv, eps)

        def vjp(u):
            gu = gamma * u
            inner = np.sum(xv * gu, axis=-1, keepdims=True)
            return (gu / s - xv * (inner / (n * s**3)),)

        return self._append(gamma * xv / s, (x,), vjp)

    def layernorm(self, x: Node, gamma, eps: float) -> Node:
        """Mean-centered RMS normalization; ``gamma`` is constant."""
        x = self._own(x)
        gamma = as_tensor(gamma)
        xv = x.value
        if gamma.shape != (xv.shape[-1],):
            raise ShapeMismatch(f"layernorm: gamma {gamma.shape} vs width {xv.shape[-1]}")
        n = xv.shape[-1]
        c = xv - xv.mean(axis=-1, keepdims=True)
        s = _rms_scale(c, eps)

        def vjp(u):
            gu = gamma * u
            inner = np.sum(c * gu, axis=-1, keepdims=True)
            w = gu / s - c * (inner / (n * s**3))
            return (w - w.mean(axis=-1, keepdims=True),)

        return self._append(gamma * c / s, (x,), vjp)

    def batchnorm_fixed(self, x: Node, gamma, beta, mean, var, eps: float) -> Node:
        """Affine normalization with frozen statistics (evaluation-mode map)."""
        x = self._own(x)
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        mean, var = as_tensor(mean), as_tensor(var)
        coef = gamma / np.sqrt(var + eps)
        return self._append(
            coef * (x.value - mean) + beta, (x,), lambda u: (u * coef,)
        )

    def softmax_cross_entropy(self, z: Node, labels, reduction: str = "mean") -> Node:
        """Cross-entropy of logits ``z`` against integer ``labels``."""
        z = self._own(z)
        zv = z.value
        labels = np.asarray(labels, dtype=np.int64)
        if zv.ndim == 1:
            zv2, labels2 = zv[None, :], np.atleast_1d(labels)
        elif zv.ndim == 2:
            zv2, labels2 = zv, labels
        else:
            raise ShapeMismatch(f"softmax_cross_entropy: logits rank {zv.ndim}")
        if labels2.shape != (zv2.shape[0],):
            raise ShapeMismatch(f"labels {labels.shape} vs logits {zv.shape}")
        shifted = zv2 - zv2.max(axis=-1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=-1))
        rows = np.arange(zv2.shape[0])
        losses = logsumexp - shifted[rows, labels2]
        p = _softmax(zv2)
        onehot = np.zeros_like(zv2)
        onehot[rows, labels2] = 1.0
        denom = zv2.shape[0] if reduction == "mean" else 1.0
        if reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {reduction!r}")
        grad_core = (p - onehot) / denom

        def vjp(u):
            g = grad_core * u
            return (g[0] if zv.ndim == 1 else g,)

        return self._append(np.asarray(losses.sum() / denom), (z,), vjp)

    def squared_error(self, z: Node, target, reduction: str = "mean") -> Node:
        """Half squared distance between ``z`` and a constant ``target``."""
        z = self._own(z)
        target = as_tensor(target)
        if target.shape != z.shape:
            raise ShapeMismatch(f"squared_error: {z.shape} vs {target.shape}")
        diff = z.value - target
        rows = z.value.shape[0] if z.value.ndim == 2 else 1
        denom = float(rows) if reduction == "mean" else 1.0
        if reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {reduction!r}")
        return self._append(
            np.asarray(0.5 * np.sum(diff * diff) / denom),
            (z,),
            lambda u: (diff * (u / denom),),
        )

    # -- differentiation -----------------------------------------------

    def backward(self, objective: Node, seed=None) -> None:
        """Propagate ``seed`` (default: ones) from ``objective`` to every node.

        Raises TapeConsumed on a second call for the same recording.
        """
        objective = self._own(objective)
        if self._grads is not None:
            raise TapeConsumed("backward already ran for this recording")
        if seed is None:
            seed = np.ones(objective.shape)
        seed = as_tensor(seed)
        if seed.shape != objective.shape:
            raise ShapeMismatch(f"seed {seed.shape} vs output {objective.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._records)
        grads[objective.index] = seed
        for i in range(objective.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            rec = self._records[i]
            if rec.vjp is None:
                continue
            parent_grads = rec.vjp(g)
            for p, pg in zip(rec.parents, parent_grads):
                grads[p] = pg if grads[p] is None else grads[p] + pg
        self._grads = grads

    def grad_at(self, node: Node) -> np.ndarray:
        """Gradient of the seeded objective at ``node`` (zeros if disconnected)."""
        node = self._own(node)
        if self._grads is None:
            raise NdcoreError("grad_at requires a completed backward pass")
        if node.index >= len(self._grads):
            raise UnknownNode(f"node #{node.index} unknown")
        g = self._grads[node.index]
        if g is None:
            return np.zeros(node.shape)
        return g


def finite_difference_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``x``; the oracle for backward()."""
    x = as_tensor(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
