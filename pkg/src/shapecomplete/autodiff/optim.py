"""Named parameter store and the Adam optimizer."""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, ShapeMismatchError, Tensor


class ParamStore:
    """Named parameter tensors plus per-parameter Adam moments.

    Iteration is always in lexicographic name order so that update and
    serialization order is reproducible.
    """

    def __init__(self):
        self._params = {}
        self.moments1 = {}
        self.moments2 = {}
        self.step_count = 0

    def add(self, name, tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor, requires_grad=True)
        tensor.requires_grad = True
        self._params[name] = tensor
        self.moments1[name] = np.zeros_like(tensor.values)
        self.moments2[name] = np.zeros_like(tensor.values)
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grads(self):
        for _, p in self.items():
            p.grad = None

    def gradients(self):
        """Current gradients keyed by name; missing ones read as zeros."""
        return {name: p.grad_or_zeros() for name, p in self.items()}

    def total_size(self):
        return sum(p.size for p in self._params.values())


def adam_step(params, grads=None, lr=1e-4, beta1=0.9, beta2=0.999,
              eps=1e-8, weight_decay=0.0, names=None):
    """One bias-corrected Adam update over every parameter in the store.

    `grads` maps name -> array; when omitted the tensors' accumulated
    gradients are used (absent gradients count as zero).  The L2 penalty
    enters as its gradient `weight_decay * theta` before the moment
    updates.  Any non-finite gradient rejects the whole step.  `names`
    restricts the update to a subset (frozen parameters stay bit-exact).
    """
    if grads is None:
        grads = params.gradients()
    selected = params.names() if names is None else sorted(names)
    for name in selected:
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name}")
        if grads[name].shape != params[name].values.shape:
            raise ShapeMismatchError(
                f"gradient shape {grads[name].shape} != parameter shape "
                f"{params[name].values.shape} for {name}")
        if not np.isfinite(grads[name]).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    params.step_count += 1
    t = params.step_count
    corr1 = 1.0 - beta1 ** t
    corr2 = 1.0 - beta2 ** t
    for name in selected:
        p = params[name]
        g = grads[name]
        if weight_decay != 0.0:
            g = g + weight_decay * p.values
        m = params.moments1[name]
        v = params.moments2[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.values -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.values.dtype)
    return params
