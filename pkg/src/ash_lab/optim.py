"""SGD with momentum and Adam over a module's named parameters."""
from __future__ import annotations

import numpy as np

from .nets import Module


class FrozenParameterError(RuntimeError):
    pass


class Optimizer:
    kind = ""

    def __init__(self, module: Module, lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.module = module
        self.lr = lr
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.steps = 0

    def _grads(self) -> dict[str, np.ndarray]:
        if self.module.frozen:
            raise FrozenParameterError(f"{type(self.module).__name__} is frozen; refusing to update it")
        params = self.module.parameters()
        missing = [n for n, p in params.items() if p.grad is None]
        if missing:
            raise RuntimeError("missing gradients for: " + ", ".join(missing))
        return {n: p.grad for n, p in params.items()}

    def zero_grad(self) -> None:
        self.module.zero_grad()

    def step(self) -> None:
        grads = self._grads()
        self.steps += 1
        for name, p in self.module.parameters().items():
            # rebind rather than mutate so graphs built earlier keep their values
            p.data = p.data - self._update(name, grads[name])

    def _update(self, name: str, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # flat name -> array mapping, used by checkpoints
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"steps": np.array([self.steps], dtype=np.float64)}
        for pname, slots in self.state.items():
            for slot, arr in slots.items():
                out[f"{slot}.{pname}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state = {}
        for key, arr in arrays.items():
            if key == "steps":
                self.steps = int(arr[0])
                continue
            slot, pname = key.split(".", 1)
            self.state.setdefault(pname, {})[slot] = np.array(arr, dtype=np.float64)


class SGDMomentum(Optimizer):
    """v <- mu*v + g ; p <- p - lr*v"""

    kind = "sgd_momentum"

    def __init__(self, module: Module, lr: float, momentum: float = 0.9):
        super().__init__(module, lr)
        self.momentum = momentum

    def _update(self, name, g):
        slots = self.state.setdefault(name, {})
        v = slots.get("v")
        v = g.copy() if v is None else self.momentum * v + g
        slots["v"] = v
        return self.lr * v


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, module: Module, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(module, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, name, g):
        slots = self.state.setdefault(name, {})
        m = slots.get("m", np.zeros_like(g))
        v = slots.get("v", np.zeros_like(g))
        m = self.beta1 * m + (1 - self.beta1) * g
        v = self.beta2 * v + (1 - self.beta2) * g * g
        slots["m"], slots["v"] = m, v
        mhat = m / (1 - self.beta1**self.steps)
        vhat = v / (1 - self.beta2**self.steps)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, module: Module, lr: float, **hyper) -> Optimizer:
    if kind == "sgd_momentum":
        return SGDMomentum(module, lr, **hyper)
    if kind == "adam":
        return Adam(module, lr, **hyper)
    raise ValueError(f"unknown optimizer kind {kind!r}")
