"""DS-DiT / M3-DiT velocity models in pixel space, AdamW and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import BranchProjection, attend, siamese_combine
from .imaging import PatchGrid, patchify, unpatchify_tensor
from .layers import MLP, Linear, prefixed
from .plw import (PLWParams, VariantAParams, VariantBParams, inject_plw,
                  inject_variant_a, inject_variant_b)
from .tensor import DimensionError, SeededRng, Tensor

ARCHS = ("dsdit", "m3dit")
INJECTIONS = ("none", "variant_a", "variant_b", "plw")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    dim: int = 64
    heads: int = 4
    blocks: int = 4
    arch: str = "dsdit"
    injection: str = "plw"
    temb_dim: int = 64
    seed: int = 0
    mlp_ratio: int = 2
    qkv_bias: bool = False
    init_std: float = 0.02
    plw_widths: tuple[int, int] | None = None
    cond_modulation: bool = False
    lambda_scales_injection: bool = False
    freeze_cond: bool = False

    def __post_init__(self):
        if self.plw_widths is not None:
            self.plw_widths = tuple(self.plw_widths)
        self.validate()

    def validate(self) -> None:
        if self.patch < 1 or self.image_size % self.patch:
            raise ConfigError(f"patch {self.patch} must divide image_size {self.image_size}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide dim {self.dim}")
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}")
        if self.injection not in INJECTIONS:
            raise ConfigError(f"injection must be one of {INJECTIONS}")
        if self.arch == "m3dit" and self.injection != "none":
            raise ConfigError("injection strategies are defined for the siamese (dsdit) path only")
        if self.temb_dim % 2:
            raise ConfigError("temb_dim must be even")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid.for_image(self.image_size, self.image_size, self.patch)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["plw_widths"] is not None:
            d["plw_widths"] = list(d["plw_widths"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# embeddings


def sincos_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table ``(rows*cols, dim)``: half the channels per axis."""
    if dim % 4:
        raise ConfigError("positional embedding needs dim divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    yy, xx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")

    def axis(pos):
        ang = pos.reshape(-1, 1) * omega[None]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([axis(yy), axis(xx)], axis=1)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 * t`` for each entry of ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


# ---------------------------------------------------------------------------
# blocks


@dataclass
class Norm:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, dim: int) -> "Norm":
        return cls(Tensor(np.ones(dim), requires_grad=True), Tensor(np.zeros(dim), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return T.add(T.mul(T.layer_norm(x), T.add(scale, 1.0)), shift)


@dataclass
class CondBranch:
    """Weights of one conditioning modality inside a block."""

    norm1: Norm
    norm2: Norm
    proj: BranchProjection
    out: Linear
    mlp: MLP
    modulation: Linear | None = None

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> "CondBranch":
        c = cfg.dim
        return cls(Norm.init(c), Norm.init(c),
                   BranchProjection.init(rng, c, cfg.init_std, cfg.qkv_bias),
                   Linear.init(rng, c, c, cfg.init_std),
                   MLP.init(rng, [c, cfg.mlp_ratio * c, c], cfg.init_std),
                   Linear.init(rng, c, 4 * c, cfg.init_std) if cfg.cond_modulation else None)

    def parameters(self):
        out = {**prefixed("norm1", self.norm1.parameters()), **prefixed("norm2", self.norm2.parameters()),
               **prefixed("proj", self.proj.parameters()), **prefixed("out", self.out.parameters()),
               **prefixed("mlp", self.mlp.parameters())}
        if self.modulation is not None:
            out.update(prefixed("modulation", self.modulation.parameters()))
        return out

    def mods(self, c_act: Tensor | None):
        if self.modulation is None:
            return None
        b = c_act.shape[0]
        m = T.reshape(self.modulation(c_act), (b, 1, -1))
        return T.split(m, [m.shape[-1] // 4] * 4, axis=-1)

    def pre_attn(self, h: Tensor, mods) -> Tensor:
        n = self.norm1(h)
        return n if mods is None else T.add(T.mul(n, T.add(mods[1], 1.0)), mods[0])

    def pre_mlp(self, h: Tensor, mods) -> Tensor:
        n = self.norm2(h)
        return n if mods is None else T.add(T.mul(n, T.add(mods[3], 1.0)), mods[2])


@dataclass
class Block:
    """One DS-DiT (or M3-DiT) block.

    The noisy branch has a single ``proj_z``; both siamese attention paths
    reference this same instance.
    """

    cfg: ModelConfig
    modulation: Linear  # c -> 6C: shift/scale/gate for attention and MLP sublayers
    proj_z: BranchProjection
    out_z: Linear
    mlp_z: MLP
    lr: CondBranch
    ref: CondBranch
    injection: PLWParams | VariantAParams | VariantBParams | None = None

    @classmethod
    def init(cls, rng, cfg: ModelConfig, inj_rng=None) -> "Block":
        c = cfg.dim
        inj_rng = inj_rng or rng
        modulation = Linear.init(rng, c, 6 * c, cfg.init_std)
        proj_z = BranchProjection.init(rng, c, cfg.init_std, cfg.qkv_bias)
        out_z = Linear.init(rng, c, c, cfg.init_std)
        mlp_z = MLP.init(rng, [c, cfg.mlp_ratio * c, c], cfg.init_std)
        lr = CondBranch.init(rng, cfg)
        ref = _clone(lr)
        inj = None
        if cfg.injection == "plw":
            inj = PLWParams.init(inj_rng, c, cfg.plw_widths, cfg.init_std)
        elif cfg.injection == "variant_a":
            inj = VariantAParams.init(c)
        elif cfg.injection == "variant_b":
            inj = VariantBParams.init(c)
        return cls(cfg, modulation, proj_z, out_z, mlp_z, lr, ref, inj)

    def parameters(self) -> dict[str, Tensor]:
        out = {**prefixed("modulation", self.modulation.parameters()),
               **prefixed("proj_z", self.proj_z.parameters()),
               **prefixed("out_z", self.out_z.parameters()),
               **prefixed("mlp_z", self.mlp_z.parameters()),
               **prefixed("lr", self.lr.parameters()),
               **prefixed("ref", self.ref.parameters())}
        if self.injection is not None:
            out.update(prefixed(f"inject_{self.cfg.injection}", self.injection.parameters()))
        return out

    def __call__(self, hz: Tensor, hl: Tensor, hr: Tensor, c_act: Tensor, lam, trace: dict | None = None):
        b = hz.shape[0]
        heads = self.cfg.heads
        mod = T.reshape(self.modulation(c_act), (b, 1, -1))
        shift1, scale1, gate1, shift2, scale2, gate2 = T.split(mod, [self.cfg.dim] * 6, axis=-1)
        ml, mr = self.lr.mods(c_act), self.ref.mods(c_act)

        nz = _modulate(hz, shift1, scale1)
        nl = self.lr.pre_attn(hl, ml)
        nr = self.ref.pre_attn(hr, mr)
        qkv_z = self.proj_z.project(nz)
        if self.cfg.arch == "dsdit":
            a_lz, a_l = attend([qkv_z, self.lr.proj.project(nl)], heads)
            a_rz, a_r = attend([qkv_z, self.ref.proj.project(nr)], heads)
            a_z = _combine(a_lz, a_rz, lam)
            if trace is not None:
                trace.update(h_l_z=a_lz, h_r_z=a_rz, h_new_l=a_l, h_new_r=a_r)
        else:
            a_z, a_l, a_r = attend([qkv_z, self.lr.proj.project(nl), self.ref.proj.project(nr)], heads)
        # residual gates are (1 + g) so every sublayer contributes from step 0
        hz = T.add(hz, T.mul(self.out_z(a_z), T.add(gate1, 1.0)))
        hl = T.add(hl, self.lr.out(a_l))
        hr = T.add(hr, self.ref.out(a_r))

        h_z = T.add(hz, T.mul(self.mlp_z(_modulate(hz, shift2, scale2)), T.add(gate2, 1.0)))
        h_l = T.add(hl, self.lr.mlp(self.lr.pre_mlp(hl, ml)))
        h_r = T.add(hr, self.ref.mlp(self.ref.pre_mlp(hr, mr)))
        if self.injection is not None:
            h_r_inj = _combine(None, h_r, lam) if self.cfg.lambda_scales_injection else h_r
            inject = {"plw": inject_plw, "variant_a": inject_variant_a,
                      "variant_b": inject_variant_b}[self.cfg.injection]
            h_z = inject(h_z, h_l, h_r_inj, self.injection)
        return h_z, h_l, h_r


def _combine(h_l_z: Tensor | None, h_r_z: Tensor, lam) -> Tensor:
    """Siamese sum with a scalar or per-sample lambda (h_l_z=None: just scale)."""
    if np.ndim(lam) == 0:
        if h_l_z is None:
            return h_r_z if lam == 1.0 else T.mul(h_r_z, float(lam))
        return siamese_combine(h_l_z, h_r_z, float(lam))
    lam_t = Tensor(np.asarray(lam, dtype=np.float64).reshape(-1, 1, 1))
    scaled = T.mul(h_r_z, lam_t)
    return scaled if h_l_z is None else T.add(h_l_z, scaled)


def _clone(obj):
    """Deep copy with fresh, independently trainable parameter tensors."""
    return copy.deepcopy(obj)


# ---------------------------------------------------------------------------
# model


@dataclass
class DSDiT:
    cfg: ModelConfig
    embed_z: Linear
    embed_l: Linear
    embed_r: Linear
    t_mlp: MLP
    blocks: list[Block]
    final_modulation: Linear
    head: Linear
    pos: np.ndarray = field(repr=False)

    def parameters(self) -> dict[str, Tensor]:
        out = {**prefixed("embed_z", self.embed_z.parameters()),
               **prefixed("embed_l", self.embed_l.parameters()),
               **prefixed("embed_r", self.embed_r.parameters()),
               **prefixed("t_mlp", self.t_mlp.parameters())}
        for i, blk in enumerate(self.blocks):
            out.update(prefixed(f"blocks.{i}", blk.parameters()))
        out.update(prefixed("final_modulation", self.final_modulation.parameters()))
        out.update(prefixed("head", self.head.parameters()))
        return out

    def forward(self, xt, t, lr_img, ref_img, lam=1.0, trace: list | None = None) -> Tensor:
        """Predicted velocity ``(B, H, W, 3)`` as a (possibly taped) Tensor.

        ``lr_img`` must already be upsampled to the model resolution.  ``lam``
        scales the Ref path at the siamese combination point; it may be a
        scalar or one value per sample.
        """
        cfg = self.cfg
        xt, lr_img, ref_img = (_as_batch(a, cfg) for a in (xt, lr_img, ref_img))
        b = xt.shape[0]
        if not (lr_img.shape[0] == ref_img.shape[0] == b):
            raise DimensionError("xt, lr and ref batch sizes differ")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        pos = Tensor(self.pos[None])
        hz = T.add(self.embed_z(Tensor(patchify(xt, cfg.patch))), pos)
        hl = T.add(self.embed_l(Tensor(patchify(lr_img, cfg.patch))), pos)
        hr = T.add(self.embed_r(Tensor(patchify(ref_img, cfg.patch))), pos)
        c_act = T.silu(self.t_mlp(Tensor(timestep_embedding(t, cfg.temb_dim))))
        hl0, hr0 = hl, hr
        for blk in self.blocks:
            rec = {} if trace is not None else None
            hz, hl, hr = blk(hz, hl, hr, c_act, lam, rec)
            if trace is not None:
                rec.update(h_z=hz, h_l=hl, h_r=hr)
                trace.append(rec)
            if cfg.freeze_cond:
                hl, hr = hl0, hr0
        mod = T.reshape(self.final_modulation(c_act), (b, 1, -1))
        shift, scale = T.split(mod, [cfg.dim, cfg.dim], axis=-1)
        out = self.head(_modulate(hz, shift, scale))
        return unpatchify_tensor(out, cfg.grid)

    def velocity(self, xt, t, lr_img, ref_img, lam=1.0) -> np.ndarray:
        """Inference wrapper satisfying the sampler's velocity-model contract."""
        return self.forward(xt, t, lr_img, ref_img, lam).data

    __call__ = velocity

    def velocity_pair(self, xt, t, lr_img, ref_img, lam_weak: float = 0.0):
        """Strong and weak velocities from one stacked pass (two-pass equivalent)."""
        b = xt.shape[0]
        stack = lambda a: np.concatenate([a, a], axis=0)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        lam = np.concatenate([np.ones(b), np.full(b, float(lam_weak))])
        v = self.velocity(stack(xt), stack(t), stack(lr_img), stack(ref_img), lam)
        return v[:b], v[b:]


def _as_batch(a, cfg: ModelConfig) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    s = cfg.image_size
    if a.shape[1:] != (s, s, 3):
        raise DimensionError(f"expected images of shape ({s}, {s}, 3), got {a.shape[1:]}")
    return a


def build_model(cfg: ModelConfig, rng: SeededRng | None = None) -> DSDiT:
    """Freshly initialised model.

    Truncated-normal (std ``init_std``) weights, zero biases, zero injection
    linears and a zero output head, so the initial velocity is exactly zero.
    LR and Ref branch weights start as identical copies.
    """
    cfg.validate()
    rng = rng or SeededRng(cfg.seed)
    # injection weights come from their own stream so that every other
    # parameter is identical across injection strategies
    inj_rng = rng.spawn(0x1A7)
    c, tok = cfg.dim, cfg.grid.token_dim
    embed_l = Linear.init(rng, tok, c, cfg.init_std)
    model = DSDiT(
        cfg=cfg,
        embed_z=Linear.init(rng, tok, c, cfg.init_std),
        embed_l=embed_l,
        embed_r=_clone(embed_l),
        t_mlp=MLP.init(rng, [cfg.temb_dim, c, c], cfg.init_std),
        blocks=[Block.init(rng, cfg, inj_rng) for _ in range(cfg.blocks)],
        final_modulation=Linear.init(rng, c, 2 * c, cfg.init_std),
        head=Linear.zeros(c, tok),
        pos=sincos_2d(cfg.grid.rows, cfg.grid.cols, c),
    )
    for name, p in model.parameters().items():
        p.name = name
    return model


def parameter_digest(model: DSDiT) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.parameters().items()):
        h.update(name.encode())
        h.update(T.dtns_bytes(p))
    return h.hexdigest()


def model_grad_check(cfg: ModelConfig, seed: int = 0, std: float = 0.25):
    """Finite-difference check of the full model loss on a perturbed tiny model."""
    rng = SeededRng(seed)
    model = build_model(cfg, rng.spawn(1))
    params = model.parameters()
    for p in params.values():
        p.data = Tensor(rng.normal(p.shape, std)).data
    s = cfg.image_size
    xt, lr, ref, target = (rng.normal((2, s, s, 3)) for _ in range(4))
    t = rng.uniform(0.1, 0.9, 2)

    def loss():
        v = model.forward(xt, t, lr, ref, 0.7)
        return T.mean(T.square(T.sub(v, Tensor(target))))

    return T.grad_check(loss, params)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamW:
    """Adam with decoupled weight decay (decay applied as ``p *= 1 - lr * wd``)."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        k = self.step_count
        bc1 = 1.0 - self.beta1 ** k
        bc2 = 1.0 - self.beta2 ** k
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {name}: {g.shape} != {p.shape}")
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m, v = np.zeros(p.shape), np.zeros(p.shape)
            elif m.shape != p.shape:
                raise DimensionError(f"moment state for {name} has shape {m.shape}")
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            new = p.data * (1.0 - self.lr * self.weight_decay)
            new = new - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = T.Tensor._wrap(new, False).data


def adamw_step(params, grads, state: AdamW | None = None, lr=5e-5, beta1=0.9, beta2=0.999,
               eps=1e-8, weight_decay=1e-3) -> AdamW:
    """Functional form of one AdamW update; returns the (possibly new) state."""
    state = state or AdamW(lr, beta1, beta2, eps, weight_decay)
    state.step(params, grads)
    return state


# ---------------------------------------------------------------------------
# checkpoints: b"DSCK" | u32 version | u32 len + JSON meta | u32 count |
#              (u32 len + name + DTNS)* | u64 digest (first 8 bytes of sha256)

CKPT_MAGIC = b"DSCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    optimizer: dict | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: DSDiT, step: int = 0, optimizer: AdamW | None = None,
                   rng: SeededRng | None = None, extra: dict | None = None) -> "Checkpoint":
        tensors = {name: p.data.copy() for name, p in model.parameters().items()}
        opt = None
        if optimizer is not None:
            opt = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                   "eps": optimizer.eps, "weight_decay": optimizer.weight_decay,
                   "step_count": optimizer.step_count,
                   "m": {k: a.copy() for k, a in optimizer.m.items()},
                   "v": {k: a.copy() for k, a in optimizer.v.items()}}
        return cls(model.cfg, tensors, step, opt, rng.state if rng is not None else None, extra or {})

    def to_model(self) -> DSDiT:
        model = build_model(ModelConfig.from_dict(self.config.to_dict()), SeededRng(self.config.seed))
        params = model.parameters()
        if set(params) != set(self.tensors):
            raise CheckpointError("parameter names do not match the configuration")
        for name, p in params.items():
            arr = self.tensors[name]
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data = Tensor(arr).data
        return model

    def to_optimizer(self) -> AdamW | None:
        if self.optimizer is None:
            return None
        o = self.optimizer
        return AdamW(o["lr"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"], o["step_count"],
                     {k: a.copy() for k, a in o["m"].items()}, {k: a.copy() for k, a in o["v"].items()})


def _rng_state_json(state):
    if state is None:
        return None
    return json.loads(json.dumps(state, default=int))


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    named = sorted(ck.tensors.items())
    opt_meta = None
    if ck.optimizer is not None:
        opt_meta = {k: v for k, v in ck.optimizer.items() if k not in ("m", "v")}
        named += sorted((f"__opt_m__.{k}", a) for k, a in ck.optimizer["m"].items())
        named += sorted((f"__opt_v__.{k}", a) for k, a in ck.optimizer["v"].items())
    meta = {"config": ck.config.to_dict(), "step": ck.step, "optimizer": opt_meta,
            "rng_state": _rng_state_json(ck.rng_state), "extra": ck.extra}
    meta_b = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(meta_b)), meta_b,
             struct.pack("<I", len(named))]
    for name, arr in named:
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, T.dtns_bytes(arr)]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()[:8]


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 20 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a DSCK checkpoint")
    body, digest = buf[:-8], buf[-8:]
    if hashlib.sha256(body).digest()[:8] != digest:
        raise CheckpointError("checkpoint digest mismatch (corrupt or tampered)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", body, 8)
    pos = 12 + mlen
    meta = json.loads(body[12:pos])
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4:pos + 4 + nlen].decode()
        t, pos = T.dtns_from_bytes(body, pos + 4 + nlen)
        arr = t.data.copy()
        if name.startswith("__opt_m__."):
            m[name[10:]] = arr
        elif name.startswith("__opt_v__."):
            v[name[10:]] = arr
        else:
            tensors[name] = arr
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint body")
    opt = None
    if meta["optimizer"] is not None:
        opt = dict(meta["optimizer"], m=m, v=v)
    return Checkpoint(ModelConfig.from_dict(meta["config"]), tensors, meta["step"], opt,
                      meta["rng_state"], meta.get("extra", {}))


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint; ``expect_config`` enforces a resume-compatible config."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ck = checkpoint_from_bytes(buf)
    if expect_config is not None and ck.config.to_dict() != expect_config.to_dict():
        raise CheckpointError("checkpoint config does not match the requested model config")
    return ck
