"""Joint (MM-DiT style) attention, the siamese LR/Ref combination and M3 attention.

Token tensors are ``(B, N, C)``; a bare ``(N, C)`` matrix is treated as a batch of
one and returned unbatched.  The noisy branch owns a single
:class:`BranchProjection`; the siamese paths both use that same object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class BranchProjection:
    """Query/key/value projections of one modality (``x @ W``)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    bq: Tensor | None = None
    bk: Tensor | None = None
    bv: Tensor | None = None

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def __post_init__(self):
        c = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv):
            if w.shape != (c, c):
                raise DimensionError(f"projection weights must be square {c}x{c}, got {w.shape}")

    @classmethod
    def init(cls, rng, dim: int, std: float = 0.02, bias: bool = False, name: str = "") -> "BranchProjection":
        def w(tag):
            return Tensor(rng.truncated_normal((dim, dim), std), requires_grad=True, name=f"{name}{tag}")

        def b(tag):
            return Tensor(np.zeros(dim), requires_grad=True, name=f"{name}{tag}") if bias else None

        return cls(w("wq"), w("wk"), w("wv"), b("bq"), b("bk"), b("bv"))

    def parameters(self) -> dict[str, Tensor]:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv}
        for key in ("bq", "bk", "bv"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out

    def project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return (T.linear(x, self.wq, self.bq), T.linear(x, self.wk, self.bk),
                T.linear(x, self.wv, self.bv))


def split_heads(t: Tensor, heads: int) -> Tensor:
    """``(B, N, C)`` -> ``(B, H, N, C/H)``."""
    b, n, c = t.shape
    if heads < 1 or c % heads:
        raise DimensionError(f"{heads} heads do not divide channel dim {c}")
    return T.permute(T.reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3))


def merge_heads(t: Tensor) -> Tensor:
    """``(B, H, N, D)`` -> ``(B, N, H*D)``."""
    b, h, n, d = t.shape
    return T.reshape(T.permute(t, (0, 2, 1, 3)), (b, n, h * d))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"token tensor must be (N, C) or (B, N, C), got {x.shape}")
    return x, False


def attend(qkvs: list[tuple[Tensor, Tensor, Tensor]], heads: int,
           return_weights: bool = False):
    """Multi-head attention over the concatenation of several token groups.

    ``qkvs`` holds one (Q, K, V) triple per modality, each ``(B, N_i, C)``.
    Returns the per-modality slices of the output (and optionally the
    ``(B, H, sum N_i, sum N_i)`` attention weights).
    """
    c = qkvs[0][0].shape[-1]
    for q, k, v in qkvs:
        if q.shape[-1] != c or k.shape[-1] != c or v.shape[-1] != c:
            raise DimensionError("all modalities must share the channel dim")
    if heads < 1 or c % heads:
        raise DimensionError(f"{heads} heads do not divide channel dim {c}")
    sizes = [q.shape[1] for q, _, _ in qkvs]
    q, k, v = (T.concat([t[i] for t in qkvs], axis=1) for i in range(3))
    out, weights = T.attention(q, k, v, heads)
    parts = T.split(out, sizes, axis=1) if len(sizes) > 1 else [out]
    return (parts, weights) if return_weights else parts


def joint_attention(noisy: Tensor, cond: Tensor, proj_z: BranchProjection, proj_c: BranchProjection,
                    heads: int = 4, qkv_z=None, return_weights: bool = False):
    """Attention of the noisy tokens jointly with one conditioning modality.

    Returns ``(updated_noisy, updated_cond)``.  ``qkv_z`` lets a caller reuse
    the noisy branch's projections already computed for the other path.
    """
    noisy, unb = _batched(noisy)
    cond, _ = _batched(cond)
    if noisy.shape[-1] != cond.shape[-1]:
        raise DimensionError(f"channel mismatch {noisy.shape} vs {cond.shape}")
    if qkv_z is None:
        qkv_z = proj_z.project(noisy)
    elif unb:
        qkv_z = tuple(_batched(t)[0] for t in qkv_z)
    res = attend([qkv_z, proj_c.project(cond)], heads, return_weights)
    parts, weights = res if return_weights else (res, None)
    if unb:
        parts = [T.reshape(p, p.shape[1:]) for p in parts]
    out = (parts[0], parts[1])
    return (out, weights) if return_weights else out


def siamese_combine(h_l_z: Tensor, h_r_z: Tensor, lam: float = 1.0) -> Tensor:
    """Noisy-token update from the two paths: ``h_l_z + lam * h_r_z``."""
    if h_l_z.shape != h_r_z.shape:
        raise DimensionError(f"shape mismatch {h_l_z.shape} vs {h_r_z.shape}")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 1.0:
        return T.add(h_l_z, h_r_z)
    return T.add(h_l_z, T.mul(h_r_z, float(lam)))


def m3_attention(z: Tensor, l: Tensor, r: Tensor, proj_z: BranchProjection,
                 proj_l: BranchProjection, proj_r: BranchProjection, heads: int = 4,
                 return_weights: bool = False):
    """One joint attention over the concatenated noisy, LR and Ref sequences."""
    z, unb = _batched(z)
    l, _ = _batched(l)
    r, _ = _batched(r)
    if not z.shape[-1] == l.shape[-1] == r.shape[-1]:
        raise DimensionError("all modalities must share the channel dim")
    res = attend([proj_z.project(z), proj_l.project(l), proj_r.project(r)], heads, return_weights)
    parts, weights = res if return_weights else (res, None)
    if unb:
        parts = [T.reshape(p, p.shape[1:]) for p in parts]
    out = tuple(parts)
    return (out, weights) if return_weights else out
