"""Named parameter sets and the Adam optimizer with decoupled weight decay."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .tensor import Tensor


class NumericAbort(RuntimeError):
    """A non-finite value reached a stage that refuses to proceed."""


class ParamSet:
    """A named, ordered collection of leaf tensors (the model's weights)."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def accumulate(self, grads: Dict[str, np.ndarray]) -> None:
        """Add externally computed per-parameter gradients (scene workers)."""
        for name, g in grads.items():
            t = self._params[name]
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad = t.grad + g

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, blocks: Dict[str, np.ndarray]) -> None:
        """Overwrite parameter values; shapes and names must match exactly."""
        for name, t in self._params.items():
            if name not in blocks:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(blocks[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"checkpoint shape {arr.shape} for parameter {name!r}, expected {t.data.shape}"
                )
            t.data = arr.copy()
        extra = set(blocks) - set(self._params)
        if extra:
            raise KeyError(f"checkpoint has unknown parameter {sorted(extra)[0]!r}")


class Adam:
    """Adam with decoupled weight decay applied before the moment update.

    The decay step is ``p -= lr * wd * p``; the Adam update then uses the
    bias-corrected first/second moments as usual.  A non-finite gradient
    refuses the whole step and names the offending parameter.
    """

    def __init__(
        self,
        params: ParamSet,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else float(lr)
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.all(np.isfinite(g)):
                raise NumericAbort(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            data = p.data
            if self.weight_decay:
                data = data - lr * self.weight_decay * data
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            data = data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = data

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Optimizer state as named blocks for mid-run checkpointing."""
        blocks: Dict[str, np.ndarray] = {"adam.step": np.array([float(self.t)])}
        for name in self.params.names():
            blocks[f"adam.m.{name}"] = self.m[name]
            blocks[f"adam.v.{name}"] = self.v[name]
        return blocks

    def load_state_arrays(self, blocks: Dict[str, np.ndarray]) -> None:
        self.t = int(round(float(np.asarray(blocks["adam.step"]).reshape(()))))
        for name in self.params.names():
            self.m[name] = np.asarray(blocks[f"adam.m.{name}"], dtype=np.float64).reshape(
                self.m[name].shape
            ).copy()
            self.v[name] = np.asarray(blocks[f"adam.v.{name}"], dtype=np.float64).reshape(
                self.v[name].shape
            ).copy()
