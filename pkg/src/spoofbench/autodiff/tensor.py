"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array together with the bookkeeping needed to replay
the computation backwards: the tensors it was computed from and a closure that
maps the adjoint of the output to adjoint contributions for those parents.
The graph is whatever set of tensors is reachable through ``_parents``; it is
acyclic by construction because every op returns a fresh node.

Backward propagates pass-local adjoints through the graph in reverse
topological order and only then deposits them into ``.grad``, so calling
``backward`` twice on the same graph accumulates exactly twice the gradient.
"""

import numpy as np


def _as_array(values):
    arr = np.asarray(values, dtype=np.float64)
    return np.ascontiguousarray(arr)


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: non-finite values in result")


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.data = _as_array(values)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # convenience arithmetic; the op functions carry the real contracts
    def __add__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.shift(self, float(other))

    def __sub__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.shift(self, -float(other))

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    def __rmul__(self, other):
        from . import ops
        return ops.scale(self, float(other))

    def backward(self):
        """Propagate d(self)/d(node) to every grad-requiring node in the graph.

        self must hold a single value. Adjoints for this pass are kept in a
        side table and added into ``.grad`` at the end, so repeated calls are
        additive and never feed stale gradients back into the propagation.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.data.shape}")

        order = _topological_order(self)
        adjoint = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            a = adjoint.pop(id(node), None)
            if a is None:
                continue
            if node._backward is not None:
                node._backward(a, adjoint)
            elif node.requires_grad:
                # user-created leaf: this is where gradients are read back
                _deposit(node, a)


def _deposit(node, adjoint_value):
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += adjoint_value


def _topological_order(root):
    """Iterative post-order over parents; no recursion-depth ceiling."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def make_node(values, parents, backward_fn, op_name):
    """Assemble an op result; drops graph edges when no parent needs gradients."""
    _check_finite(op_name, values)
    out = Tensor(values)
    if needs_grad(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def add_adjoint(table, node, contribution):
    """Accumulate a pass-local adjoint for one parent node."""
    if not node.requires_grad:
        return
    key = id(node)
    existing = table.get(key)
    if existing is None:
        table[key] = np.array(contribution, dtype=np.float64, copy=True)
    else:
        existing += contribution
