"""Parameter trees: nested dicts of leaf tensors, plus initializers."""

import numpy as np

from dwinformer.errors import UsageError
from dwinformer.tensor import Tensor

INIT_STD = 0.02


class Initializer:
    """Seeded source of initial parameter values for one model build."""

    def __init__(self, seed=0, dtype=np.float32, std=INIT_STD):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.std = std

    def _leaf(self, arr):
        return Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, dtype=self.dtype)

    def trunc_normal(self, shape):
        # resample until every draw lies within two standard deviations
        out = self.rng.standard_normal(shape)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2.0
        return self._leaf(out * self.std)

    def zeros(self, shape):
        return self._leaf(np.zeros(shape))

    def ones(self, shape):
        return self._leaf(np.ones(shape))


def flatten(tree, prefix=""):
    """Ordered ``{dotted.name: Tensor}`` view of a parameter tree.

    Raises :class:`UsageError` if the same tensor object appears twice.
    """
    out = {}
    seen = {}

    def walk(node, path):
        if isinstance(node, Tensor):
            if id(node) in seen:
                raise UsageError(f"parameter registered twice: {seen[id(node)]} and {path}")
            seen[id(node)] = path
            out[path] = node
        elif isinstance(node, dict):
            for k, v in node.items():
                walk(v, f"{path}.{k}" if path else str(k))
        elif isinstance(node, (list, tuple)):
            for i, v in enumerate(node):
                walk(v, f"{path}.{i}" if path else str(i))
        elif node is not None:
            raise TypeError(f"unexpected {type(node).__name__} in parameter tree at {path!r}")

    walk(tree, prefix)
    return out


def count(tree):
    return sum(t.size for t in flatten(tree).values())


def zero_grads(tree):
    for t in flatten(tree).values():
        t.grad = None
