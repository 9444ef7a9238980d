"""Small parameter containers shared by the attention, fusion and model code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor | None = None

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, std: float = 0.02, bias: bool = True) -> "Linear":
        w = Tensor(rng.truncated_normal((n_in, n_out), std), requires_grad=True)
        b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None
        return cls(w, b)

    @classmethod
    def zeros(cls, n_in: int, n_out: int, bias: bool = True) -> "Linear":
        w = Tensor(np.zeros((n_in, n_out)), requires_grad=True)
        b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


@dataclass
class MLP:
    """Stack of linears with SiLU between consecutive layers (none after the last)."""

    layers: list[Linear]

    @classmethod
    def init(cls, rng, widths: list[int], std: float = 0.02) -> "MLP":
        return cls([Linear.init(rng, a, b, std) for a, b in zip(widths[:-1], widths[1:])])

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                x = T.silu(x)
            x = layer(x)
        return x

    def parameters(self) -> dict[str, Tensor]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.parameters().items()}


def prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}
