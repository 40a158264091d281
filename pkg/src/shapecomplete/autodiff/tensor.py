"""Reverse-mode automatic differentiation: tensors and the recording tape.

Operations (see ops.py) compute eagerly with numpy and, when a tape is
active, append a record holding the backward closure.  Records are stored
in creation order, which is a topological order of the DAG by
construction, so backpropagation is a single reverse sweep with no sort.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(FloatingPointError):
    """Non-finite values reached an operation that rejects them."""


class Tensor:
    """A shaped real array, optionally tracked on the active tape.

    `requires_grad` marks graph connectivity: leaves are created with it,
    op outputs inherit it from their inputs.  Gradients accumulate into
    `grad` during `backward` and stay `None` for untouched tensors.
    """

    __slots__ = ("values", "requires_grad", "grad", "node_id")

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return float(self.values)

    def grad_or_zeros(self):
        if self.grad is None:
            return np.zeros_like(self.values)
        return self.grad

    def accumulate_grad(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("output", "parents", "backward_fn", "op_name")

    def __init__(self, output, parents, backward_fn, op_name):
        self.output = output
        self.parents = parents
        self.backward_fn = backward_fn
        self.op_name = op_name


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of differentiable operations.

    Usable as a context manager; only one tape may be active at a time.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, output, parents, backward_fn, op_name):
        output.node_id = len(self.records)
        self.records.append(_Record(output, parents, backward_fn, op_name))


def active_tape():
    return _ACTIVE_TAPE


def record_op(output, parents, backward_fn, op_name):
    """Mark `output` grad-connected and record it if a tape is active."""
    output.requires_grad = any(p.requires_grad for p in parents)
    if output.requires_grad and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(output, parents, backward_fn, op_name)
    return output


def backward(tape, loss):
    """Reverse sweep over `tape` seeding from the scalar `loss`.

    Every grad-connected tensor reachable from the loss accumulates its
    gradient; tensors off the loss's path keep `grad = None` (read back
    as zeros via `grad_or_zeros`).
    """
    if loss.values.ndim != 0 and loss.values.size != 1:
        raise ShapeMismatchError(
            f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.grad = np.ones_like(loss.values)
    for rec in reversed(tape.records):
        out_grad = rec.output.grad
        if out_grad is None:
            continue
        rec.backward_fn(out_grad)
