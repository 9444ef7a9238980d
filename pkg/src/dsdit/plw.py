"""Post-attention fusion of LR and Ref features into the noisy branch.

Three injection strategies are provided: patch-level weights (a per-token
softmax gate over the two sources, then a zero-initialised linear), and the
two simpler ablation variants.  All three are the identity on ``H_z`` at
initialisation.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .layers import MLP, Linear, prefixed
from .tensor import DimensionError, Tensor


def _check(h_z: Tensor, h_l: Tensor, h_r: Tensor) -> None:
    if not h_z.shape == h_l.shape == h_r.shape:
        raise DimensionError(f"token shapes differ: {h_z.shape}, {h_l.shape}, {h_r.shape}")


@dataclass
class PLWParams:
    weight_mlp: MLP  # 3C -> 2C -> C -> 2
    zero_linear: Linear  # C -> C, zero-initialised

    @classmethod
    def init(cls, rng, dim: int, widths: tuple[int, int] | None = None, std: float = 0.02) -> "PLWParams":
        hidden = widths or (2 * dim, dim)
        return cls(MLP.init(rng, [3 * dim, *hidden, 2], std), Linear.zeros(dim, dim))

    def parameters(self) -> dict[str, Tensor]:
        return {**prefixed("weight_mlp", self.weight_mlp.parameters()),
                **prefixed("zero_linear", self.zero_linear.parameters())}


def compute_patch_weights(h_l: Tensor, h_r: Tensor, h_z: Tensor, params: PLWParams) -> tuple[Tensor, Tensor]:
    """Per-token fusion weights ``(W_l, W_r)``, each ``(..., N, 1)``, summing to one."""
    _check(h_z, h_l, h_r)
    logits = params.weight_mlp(T.concat([h_l, h_r, h_z], axis=-1))
    if logits.shape[-1] != 2:
        raise DimensionError(f"weight MLP must emit 2 logits, got {logits.shape[-1]}")
    w = T.softmax_lastdim(logits)
    w_l, w_r = T.split(w, [1, 1], axis=-1)
    return w_l, w_r


def inject_plw(h_z: Tensor, h_l: Tensor, h_r: Tensor, params: PLWParams) -> Tensor:
    w_l, w_r = compute_patch_weights(h_l, h_r, h_z, params)
    fused = T.add(T.mul(h_l, w_l), T.mul(h_r, w_r))
    return T.add(h_z, params.zero_linear(fused))


@dataclass
class VariantAParams:
    zero_l: Linear
    zero_r: Linear

    @classmethod
    def init(cls, dim: int) -> "VariantAParams":
        return cls(Linear.zeros(dim, dim), Linear.zeros(dim, dim))

    def parameters(self) -> dict[str, Tensor]:
        return {**prefixed("zero_l", self.zero_l.parameters()),
                **prefixed("zero_r", self.zero_r.parameters())}


@dataclass
class VariantBParams:
    zero_linear: Linear

    @classmethod
    def init(cls, dim: int) -> "VariantBParams":
        return cls(Linear.zeros(dim, dim))

    def parameters(self) -> dict[str, Tensor]:
        return prefixed("zero_linear", self.zero_linear.parameters())


def inject_variant_a(h_z: Tensor, h_l: Tensor, h_r: Tensor, params: VariantAParams) -> Tensor:
    """Independent zero-initialised linears for each source."""
    _check(h_z, h_l, h_r)
    return T.add(T.add(h_z, params.zero_l(h_l)), params.zero_r(h_r))


def inject_variant_b(h_z: Tensor, h_l: Tensor, h_r: Tensor, params: VariantBParams) -> Tensor:
    """Sum the sources, then one shared zero-initialised linear."""
    _check(h_z, h_l, h_r)
    return T.add(h_z, params.zero_linear(T.add(h_l, h_r)))
