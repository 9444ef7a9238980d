"""Training, evaluation, guidance sweeps and injection ablations on synthetic scenes."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DEFAULT_JITTER, Dataset, build_dataset
from .flow import SamplerConfig, euler_sample, interpolate, rf_loss, sample_timestep
from .imaging import contact_sheet, mse, psnr, psnr_from_mse, ssim, write_png
from .model import AdamW, Checkpoint, DSDiT, ModelConfig, build_model
from .tensor import NumericError, SeededRng

log = logging.getLogger(__name__)

DEFAULT_OMEGA_GRID = (0.0, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5)
REF_MODES = ("ref", "noise")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    steps: int = 2000
    batch: int = 16
    lr: float = 5e-5
    wd: float = 1e-3
    warmup: int = 0
    t_schedule: str = "uniform"
    seed: int = 0
    log_every: int = 50
    train_count: int = 1024
    test_count: int = 64
    scale: int = 8
    fraction_range: tuple[float, float] = (0.1, 0.5)
    jitter: tuple[float, float] = DEFAULT_JITTER
    data_seed: int = 1234
    test_seed: int = 98765
    ref_mode: str = "ref"
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.fraction_range = tuple(self.fraction_range)
        self.jitter = tuple(self.jitter)
        if self.model.image_size % self.scale:
            raise ValueError(f"scale {self.scale} must divide image size {self.model.image_size}")
        if self.ref_mode not in REF_MODES:
            raise ValueError(f"ref_mode must be one of {REF_MODES}")
        lo, hi = self.fraction_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"bad change_fraction range {self.fraction_range}")

    def train_data(self) -> Dataset:
        return build_dataset(self.train_count, self.data_seed, self.model.image_size, self.scale,
                             self.fraction_range, self.jitter)

    def test_data(self) -> Dataset:
        return build_dataset(self.test_count, self.test_seed, self.model.image_size, self.scale,
                             self.fraction_range, self.jitter)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        sampler = SamplerConfig(**d.pop("sampler", {}))
        return cls(model=model, sampler=sampler, **d)


def desk_config(**overrides) -> ExperimentConfig:
    """The desk-scale preset: 32x32, p=4, C=64, 4 heads, 4 blocks, batch 16, x8."""
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    sampler_keys = {f.name for f in dataclasses.fields(SamplerConfig)}
    m = {k: overrides.pop(k) for k in list(overrides) if k in model_keys and k != "seed"}
    s = {k: overrides.pop(k) for k in list(overrides)
         if k in sampler_keys and k not in ("seed", "steps")}
    if "sampler_steps" in overrides:
        s["steps"] = overrides.pop("sampler_steps")
    base = dict(lr=2e-3, warmup=100)
    base.update(overrides)
    return ExperimentConfig(model=ModelConfig(**m), sampler=SamplerConfig(**s), **base)


# ---------------------------------------------------------------------------
# model-space conversion: images in [0, 1] <-> flow space in [-1, 1]


def to_model_space(img: np.ndarray) -> np.ndarray:
    return 2.0 * img - 1.0


def to_image(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def conditions(ds: Dataset, idx, ref_mode: str, seed: int):
    """Model-space (lr, ref) for the scenes at ``idx``.

    In ``noise`` mode the Ref input is uniform noise keyed on the scene seed,
    which gives an LR-only control with the same architecture.
    """
    lr = to_model_space(ds.lr_up[idx])
    if ref_mode == "ref":
        return lr, to_model_space(ds.ref[idx])
    noise = np.stack([SeededRng(seed ^ (ds.seeds[i] & 0x7FFFFFFF)).uniform(0.0, 1.0, ds.ref.shape[1:])
                      for i in np.atleast_1d(idx)])
    return lr, to_model_space(noise)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    runtime: float

    def smoothed(self, window: int = 100) -> list[float]:
        out = []
        for i in range(len(self.losses)):
            chunk = self.losses[max(0, i - window + 1):i + 1]
            out.append(float(np.mean(chunk)))
        return out


def batch_loss(model: DSDiT, x0, x1, t, lr, ref) -> T.Tensor:
    xt = interpolate(x0, x1, t)
    return rf_loss(model.forward(xt, t, lr, ref, 1.0), x0, x1)


def draw_batch(rng: SeededRng, ds: Dataset, cfg: ExperimentConfig):
    idx = rng.integers(0, len(ds), cfg.batch)
    x0 = to_model_space(ds.hr[idx])
    x1 = rng.normal(x0.shape)
    t = sample_timestep(rng, cfg.batch, cfg.t_schedule)
    lr, ref = conditions(ds, idx, cfg.ref_mode, cfg.seed)
    return x0, x1, t, lr, ref


def train(cfg: ExperimentConfig, dataset: Dataset | None = None, resume: Checkpoint | None = None,
          steps: int | None = None, callback=None) -> TrainResult:
    """Rectified-flow training with AdamW; deterministic for a fixed config."""
    start = time.perf_counter()
    ds = dataset if dataset is not None else cfg.train_data()
    total = cfg.steps if steps is None else steps
    if resume is not None:
        model = resume.to_model()
        opt = resume.to_optimizer() or AdamW(cfg.lr, weight_decay=cfg.wd)
        rng = SeededRng(cfg.seed)
        if resume.rng_state is not None:
            rng.state = resume.rng_state
        step0 = resume.step
    else:
        model = build_model(cfg.model, SeededRng(cfg.model.seed))
        opt = AdamW(cfg.lr, weight_decay=cfg.wd)
        rng = SeededRng(cfg.seed)
        step0 = 0
    params = model.parameters()
    losses: list[float] = []
    for step in range(step0, step0 + total):
        if cfg.warmup:
            opt.lr = cfg.lr * min(1.0, (step + 1) / cfg.warmup)
        x0, x1, t, lr, ref = draw_batch(rng, ds, cfg)
        with T.Tape() as tape:
            try:
                loss = batch_loss(model, x0, x1, t, lr, ref)
            except NumericError as exc:
                raise NumericError(f"non-finite activations at step {step}: {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        grads = T.backward(loss, tape, params.values())
        opt.step(params, {name: grads[p] for name, p in params.items()})
        losses.append(value)
        if cfg.log_every and (step % cfg.log_every == 0 or step == step0 + total - 1):
            log.info("step %d loss %.5f", step, value)
        if callback is not None:
            callback(step, value)
    opt.lr = cfg.lr
    ck = Checkpoint.from_model(model, step0 + total, opt, rng,
                               extra={"experiment": _jsonable(cfg.to_dict())})
    return TrainResult(ck, losses, time.perf_counter() - start)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    rows: list[dict]
    config: dict
    runtime: float = 0.0

    FIELDS = ("method", "index", "seed", "psnr", "ssim", "psnr_unchanged", "psnr_changed",
              "mse", "mse_unchanged", "mse_changed", "changed_fraction")

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def aggregate(self, method: str) -> dict[str, float]:
        rows = [r for r in self.rows if r["method"] == method]
        keys = ("psnr", "ssim", "psnr_unchanged", "psnr_changed")
        return {k: float(np.mean([r[k] for r in rows])) for k in keys}

    def summary(self) -> list[dict]:
        return [{"method": m, **self.aggregate(m)} for m in self.methods()]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in self.FIELDS})

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("method", "psnr", "ssim", "psnr_unchanged", "psnr_changed"))
            w.writeheader()
            w.writerows(self.summary())


def image_metrics(pred: np.ndarray, hr: np.ndarray, mask: np.ndarray) -> dict:
    unchanged = ~mask
    e, eu, ec = mse(pred, hr), mse(pred, hr, unchanged), mse(pred, hr, mask)
    return {"psnr": psnr(pred, hr), "ssim": ssim(pred, hr),
            "psnr_unchanged": psnr_from_mse(eu) if unchanged.any() else float("nan"),
            "psnr_changed": psnr_from_mse(ec) if mask.any() else float("nan"),
            "mse": e, "mse_unchanged": eu, "mse_changed": ec,
            "changed_fraction": float(mask.mean())}


def sample_images(model: DSDiT, ds: Dataset, sampler: SamplerConfig, ref_mode: str = "ref",
                  cond_seed: int = 0, chunk: int = 64, velocity=None) -> np.ndarray:
    """Run the Euler sampler on every scene; returns images in [0, 1]."""
    noise_rng = SeededRng(sampler.seed)
    x1_all = noise_rng.normal(ds.hr.shape)
    out = []
    for lo in range(0, len(ds), chunk):
        idx = np.arange(lo, min(lo + chunk, len(ds)))
        lr, ref = conditions(ds, idx, ref_mode, cond_seed)
        x = euler_sample(model, x1_all[idx], lr, ref, sampler, velocity=velocity)
        out.append(to_image(x))
    return np.concatenate(out)


def bicubic_rows(ds: Dataset) -> list[dict]:
    return [{"method": "bicubic", "index": i, "seed": ds.seeds[i],
             **image_metrics(ds.lr_up[i], ds.hr[i], ds.mask[i])} for i in range(len(ds))]


def evaluate(model: DSDiT, ds: Dataset, sampler: SamplerConfig, method: str = "model",
             ref_mode: str = "ref", cond_seed: int = 0, include_baseline: bool = True,
             images: np.ndarray | None = None) -> MetricsReport:
    start = time.perf_counter()
    if images is None:
        images = sample_images(model, ds, sampler, ref_mode, cond_seed)
    rows = bicubic_rows(ds) if include_baseline else []
    rows += [{"method": method, "index": i, "seed": ds.seeds[i],
              **image_metrics(images[i], ds.hr[i], ds.mask[i])} for i in range(len(ds))]
    cfg = {"sampler": dataclasses.asdict(sampler), "model": model.cfg.to_dict(), "ref_mode": ref_mode}
    return MetricsReport(rows, cfg, time.perf_counter() - start)


def sweep_omega(model: DSDiT, ds: Dataset, omegas=DEFAULT_OMEGA_GRID, base: SamplerConfig | None = None,
                out_dir: str | Path | None = None, grid_images: int = 4):
    """Evaluate at each guidance coefficient; optional CSV table and PNG grid."""
    base = base or SamplerConfig()
    report_rows = bicubic_rows(ds)
    samples = {}
    for w in omegas:
        cfg = dataclasses.replace(base, omega=float(w), guidance=True, dump_dir=None)
        imgs = sample_images(model, ds, cfg)
        samples[w] = imgs
        report_rows += [{"method": f"omega={w:g}", "index": i, "seed": ds.seeds[i],
                         **image_metrics(imgs[i], ds.hr[i], ds.mask[i])} for i in range(len(ds))]
    report = MetricsReport(report_rows, {"omegas": list(omegas), "sampler": dataclasses.asdict(base)})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "omega_sweep_rows.csv")
        report.write_summary_csv(out / "omega_sweep.csv")
        n = min(grid_images, len(ds))
        rows = [[ds.lr_up[i], ds.ref[i], *(samples[w][i] for w in omegas), ds.hr[i]] for i in range(n)]
        write_png(out / "omega_sweep.png", contact_sheet(rows))
    return report, samples


def ablate_injection(base: ExperimentConfig, train_ds: Dataset | None = None, test_ds: Dataset | None = None,
                     injections=("none", "variant_a", "variant_b", "plw"), out_dir=None):
    """Train and evaluate one model per injection strategy from identical seeds."""
    train_ds = train_ds if train_ds is not None else base.train_data()
    test_ds = test_ds if test_ds is not None else base.test_data()
    step0_identical = injection_step0_identical(base, test_ds, injections)
    rows = []
    for inj in injections:
        cfg = dataclasses.replace(base, model=dataclasses.replace(base.model, injection=inj))
        result = train(cfg, train_ds)
        model = result.checkpoint.to_model()
        rep = evaluate(model, test_ds, base.sampler, method=inj, include_baseline=False, cond_seed=cfg.seed)
        rows.append({"injection": inj, **rep.aggregate(inj), "final_loss": float(np.mean(result.losses[-50:]))})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "ablate_injection.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows, step0_identical


def injection_step0_identical(base: ExperimentConfig, ds: Dataset,
                               injections=("none", "variant_a", "variant_b", "plw")) -> bool:
    """Fresh models of every injection strategy agree bit-for-bit at step 0.

    The zero head makes the velocity trivially zero, so the final noisy-branch
    tokens (the head input) are compared as well.
    """
    probe = _probe_batch(base, ds)
    outs = []
    for inj in injections:
        model = build_model(dataclasses.replace(base.model, injection=inj), SeededRng(base.model.seed))
        trace: list = []
        v = model.forward(*probe, trace=trace)
        outs.append((v.data, trace[-1]["h_z"].data))
    return all(np.array_equal(outs[0][0], v) and np.array_equal(outs[0][1], h) for v, h in outs[1:])


def _probe_batch(cfg: ExperimentConfig, ds: Dataset, n: int = 2):
    rng = SeededRng(cfg.seed + 17)
    idx = np.arange(min(n, len(ds)))
    x0 = to_model_space(ds.hr[idx])
    x1 = rng.normal(x0.shape)
    t = np.full(len(idx), 0.5)
    lr, ref = conditions(ds, idx, "ref", cfg.seed)
    return interpolate(x0, x1, t), t, lr, ref, 1.0
