"""Adam with decoupled weight decay (AdamW)."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np


class AdamW:
    """In-place AdamW over a ``name -> array`` dict.

    Update per step ``t`` (1-based)::

        m = b1 m + (1 - b1) g
        v = b2 v + (1 - b2) g^2
        w -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps) + lr * wd * w

    Weight decay is skipped for 1-D arrays (gains, biases, the mask token).
    """

    def __init__(self, params: Mapping[str, np.ndarray], lr=2e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.05, frozen: Iterable[str] = ()):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.frozen = set(frozen)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, w in self.params.items():
            if name in self.frozen or name not in grads:
                continue
            g = grads[name].astype(w.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and w.ndim > 1:
                update = update + self.weight_decay * w
            w -= (self.lr * update).astype(w.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k][...] = arrays[f"opt.m.{k}"]
            self.v[k][...] = arrays[f"opt.v.{k}"]
        self.t = t
