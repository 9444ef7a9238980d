"""Command-line entry point: ``dsdit <subcommand> [options]``.

Every subcommand accepts ``--seed`` and ``--config FILE`` (flat ``key = value``
text).  Explicit flags override the file, which overrides the desk preset.
Failures print one JSON line ``{"error": ..., "message": ...}`` to stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import BranchProjection, joint_attention
from .data import build_dataset
from .experiment import (DEFAULT_OMEGA_GRID, ExperimentConfig, ablate_injection, desk_config, evaluate,
                         sample_images, sweep_omega, train)
from .flow import DEFAULT_OMEGA, FUSU_OMEGA, SamplerConfig, autoguide, euler_sample
from .imaging import bicubic_resize, checkerboard, pixel_digest, psnr, write_png
from .model import ModelConfig, load_checkpoint, model_grad_check, save_checkpoint
from .tensor import SeededRng, Tensor

log = logging.getLogger("dsdit")

OMEGA_RANGE = (0.0, 2.0)
CONFIG_KEYS = {
    "image_size": int, "patch": int, "dim": int, "heads": int, "blocks": int, "arch": str,
    "injection": str, "lr": float, "wd": float, "steps": int, "batch": int, "seed": int,
    "omega": float, "lambda_weak": float, "sampler_steps": int,
    # harness extras
    "scale": int, "train_count": int, "test_count": int, "warmup": int, "ref_mode": str,
}
MODEL_KEYS = ("image_size", "patch", "dim", "heads", "blocks", "arch", "injection")
SAMPLER_KEYS = {"omega": "omega", "lambda_weak": "lambda_weak", "sampler_steps": "steps"}
EXPERIMENT_KEYS = ("lr", "wd", "steps", "batch", "scale", "train_count", "test_count", "warmup", "ref_mode")


class CliError(Exception):
    def __init__(self, message: str, kind: str = "usage"):
        super().__init__(message)
        self.kind = kind


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", "io") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value", "config")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise CliError(f"{path}:{lineno}: unknown key {key!r}", "config")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {value!r}", "config") from exc
    return out


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for key, typ in CONFIG_KEYS.items():
        p.add_argument(_flag(key), dest=key, type=typ, default=None)


def settings(args, base: dict | None = None) -> dict:
    """Merge checkpoint/experiment defaults, the config file and explicit flags."""
    merged = dict(base or {})
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    merged.update({k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None})
    return merged


def experiment_config(values: dict, template: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = template or desk_config()
    model = {k: values[k] for k in MODEL_KEYS if k in values}
    sampler = {SAMPLER_KEYS[k]: values[k] for k in SAMPLER_KEYS if k in values}
    exp = {k: values[k] for k in EXPERIMENT_KEYS if k in values}
    if "seed" in values:
        model["seed"] = sampler["seed"] = exp["seed"] = values["seed"]
    omega = sampler.get("omega", cfg.sampler.omega)
    if not OMEGA_RANGE[0] <= omega <= OMEGA_RANGE[1]:
        raise CliError(f"omega must lie in [{OMEGA_RANGE[0]}, {OMEGA_RANGE[1]}], got {omega}", "config")
    try:
        return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **model),
                                   sampler=dataclasses.replace(cfg.sampler, **sampler), **exp)
    except ValueError as exc:
        raise CliError(str(exc), "config") from exc


def _from_checkpoint(args):
    ck = load_checkpoint(args.checkpoint)
    template = None
    if "experiment" in ck.extra:
        template = ExperimentConfig.from_dict(ck.extra["experiment"])
    values = settings(args)
    frozen = [k for k in MODEL_KEYS if k in values and values[k] != getattr(ck.config, k)]
    if frozen:
        raise CliError(f"model keys {frozen} differ from the checkpoint", "config")
    cfg = experiment_config(values, template)
    cfg = dataclasses.replace(cfg, model=ck.config)
    return ck, cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> dict:
    cfg = experiment_config(settings(args))
    split_seed = {"train": cfg.data_seed, "test": cfg.test_seed}[args.split]
    count = args.count or (cfg.train_count if args.split == "train" else cfg.test_count)
    ds = build_dataset(count, split_seed ^ cfg.seed, cfg.model.image_size, cfg.scale,
                       cfg.fraction_range, cfg.jitter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, seed in enumerate(ds.seeds):
        names = {}
        for kind, img in (("hr", ds.hr[i]), ("lr_up", ds.lr_up[i]), ("ref", ds.ref[i]),
                          ("mask", np.repeat(ds.mask[i][..., None].astype(float), 3, axis=2))):
            name = f"{i:04d}_{kind}.png"
            write_png(out / name, img)
            names[kind] = name
        entries.append({"index": i, "seed": seed, "change_fraction": float(ds.mask[i].mean()),
                        "hr_digest": pixel_digest(ds.hr[i]), **names})
    _write_json(out / "manifest.json", {"split": args.split, "scale": cfg.scale, "scenes": entries})
    return {"scenes": len(entries), "out": str(out)}


def cmd_train(args) -> dict:
    values = settings(args)
    cfg = experiment_config(values)
    cfg = dataclasses.replace(cfg, log_every=args.log_every)
    resume = None
    steps = cfg.steps
    if args.resume:
        resume = load_checkpoint(args.resume, expect_config=cfg.model)
        steps = max(0, cfg.steps - resume.step)
    result = train(cfg, resume=resume, steps=steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.checkpoint)
    start = resume.step if resume is not None else 0
    with open(out.with_suffix(".loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "smoothed"])
        for i, (loss, sm) in enumerate(zip(result.losses, result.smoothed())):
            w.writerow([start + i, repr(loss), repr(sm)])
    final = result.smoothed()[-1] if result.losses else None
    return {"checkpoint": str(out), "steps": result.checkpoint.step, "runtime_s": result.runtime,
            "final_smoothed_loss": final}


def cmd_sample(args) -> dict:
    ck, cfg = _from_checkpoint(args)
    model = ck.to_model()
    ds = cfg.test_data()
    if args.count:
        ds = ds.subset(np.arange(min(args.count, len(ds))))
    sampler = dataclasses.replace(cfg.sampler, guidance=not args.no_guidance, dump_dir=args.dump_dir)
    images = sample_images(model, ds, sampler, cfg.ref_mode, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digests = []
    for i, img in enumerate(images):
        write_png(out / f"{i:04d}_sample.png", img)
        digests.append(pixel_digest(img))
    return {"samples": len(images), "omega": sampler.omega, "out": str(out), "digests": digests}


def cmd_eval(args) -> dict:
    ck, cfg = _from_checkpoint(args)
    model = ck.to_model()
    ds = cfg.test_data()
    if args.count:
        ds = ds.subset(np.arange(min(args.count, len(ds))))
    sampler = dataclasses.replace(cfg.sampler, guidance=not args.no_guidance)
    rep = evaluate(model, ds, sampler, ref_mode=cfg.ref_mode, cond_seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "metrics_rows.csv")
    rep.write_summary_csv(out / "metrics.csv")
    return {"summary": rep.summary(), "runtime_s": rep.runtime, "out": str(out)}


def cmd_sweep_omega(args) -> dict:
    ck, cfg = _from_checkpoint(args)
    omegas = [float(w) for w in args.omegas.split(",")] if args.omegas else list(DEFAULT_OMEGA_GRID)
    for w in omegas:
        if not OMEGA_RANGE[0] <= w <= OMEGA_RANGE[1]:
            raise CliError(f"omega {w} outside [{OMEGA_RANGE[0]}, {OMEGA_RANGE[1]}]", "config")
    ds = cfg.test_data()
    if args.count:
        ds = ds.subset(np.arange(min(args.count, len(ds))))
    report, _ = sweep_omega(ck.to_model(), ds, omegas, cfg.sampler, out_dir=args.out)
    return {"summary": report.summary(), "out": args.out}


def cmd_ablate(args) -> dict:
    cfg = experiment_config(settings(args))
    cfg = dataclasses.replace(cfg, log_every=args.log_every)
    rows, identical = ablate_injection(cfg, out_dir=args.out)
    return {"rows": rows, "step0_identical": identical, "out": args.out}


def cmd_grad_check(args) -> dict:
    cfg = ModelConfig(image_size=8, patch=4, dim=8, heads=2, blocks=2, temb_dim=8,
                      arch=args.arch, injection="none" if args.arch == "m3dit" else args.injection,
                      seed=args.seed or 0)
    report = model_grad_check(cfg, args.seed or 0)
    ok = report.worst <= args.tol
    result = {"worst_relative_error": report.worst, "tolerance": args.tol, "ok": ok,
              "parameters": len(report.errors)}
    if not ok:
        raise CliError(json.dumps(result), "gradcheck")
    return result


def cmd_fixtures(args) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(args.seed or 0)
    fixtures = {}

    def emit(name, arr, note):
        T.write_dtns(out / f"{name}.dtns", np.asarray(arr, dtype=np.float64))
        fixtures[name] = {"sha256": hashlib.sha256((out / f"{name}.dtns").read_bytes()).hexdigest(),
                          "shape": list(np.shape(arr)), "note": note}

    ramp = np.repeat((0.1 + 0.05 * np.arange(8.0))[None, :, None], 3, axis=2).repeat(8, axis=0)
    emit("bicubic_ramp_in", ramp, "8x8 horizontal ramp")
    emit("bicubic_ramp_x8", bicubic_resize(ramp, 64, 64), "ramp upsampled to 64x64")
    pz, pc = BranchProjection.init(rng, 8, 0.5), BranchProjection.init(rng, 8, 0.5)
    z, c = rng.normal((5, 8)), rng.normal((3, 8))
    hz, hc = joint_attention(Tensor(z), Tensor(c), pz, pc, heads=2)
    emit("attn_z", z, "noisy tokens")
    emit("attn_c", c, "condition tokens")
    for tag, proj in (("z", pz), ("c", pc)):
        for key in ("wq", "wk", "wv"):
            emit(f"attn_{tag}_{key}", getattr(proj, key).data, "x @ W projection")
    emit("attn_out_z", hz.data, "joint attention, 2 heads")
    emit("attn_out_c", hc.data, "joint attention, 2 heads")
    vs, vw = rng.normal((4, 4)), rng.normal((4, 4))
    emit("guide_strong", vs, "strong velocity")
    emit("guide_weak", vw, "weak velocity")
    emit("guide_out_1p2", autoguide(vs, vw, DEFAULT_OMEGA), "omega 1.2")
    x1 = rng.normal((4,))
    emit("euler_x1", x1, "start state for v = x")
    emit("euler_linear_40", euler_sample(lambda x, *a: x, x1, None, None, SamplerConfig(guidance=False)),
         "40 Euler steps of v = x, equals x1 * (39/40)**40")
    board = checkerboard(16, 4)
    emit("checkerboard_16_4", board, f"pixel digest {pixel_digest(board)}")
    a, b = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
    emit("psnr_a", a, "")
    emit("psnr_b", b, f"psnr(a, b) = {psnr(a, b)!r}")
    _write_json(out / "manifest.json", {"seed": args.seed or 0, "fixtures": fixtures})
    return {"fixtures": len(fixtures), "out": str(out)}


# ---------------------------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="dsdit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", help="write synthetic scenes as PNGs plus a manifest")
    add_config_flags(p)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a DSCK checkpoint")
    add_config_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from (--steps is the total)")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("sample", cmd_sample, "sample held-out scenes to PNGs"),
                             ("eval", cmd_eval, "PSNR/SSIM report against HR, with the bicubic row")):
        p = sub.add_parser(name, help=text,
                           epilog=f"omega {DEFAULT_OMEGA} suits SECOND-like data, {FUSU_OMEGA} FUSU-like")
        add_config_flags(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--count", type=int)
        p.add_argument("--no-guidance", action="store_true")
        if name == "sample":
            p.add_argument("--dump-dir", help="write per-step DTNS tensors of x_t and v")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep-omega", help="evaluate over a grid of guidance coefficients")
    add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--omegas", help="comma-separated list (default 0,1,1.1,...,1.5)")
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_omega)

    p = sub.add_parser("ablate-injection", help="train and compare none / variant_a / variant_b / plw")
    add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of a 2-block toy model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arch", choices=("dsdit", "m3dit"), default="dsdit")
    p.add_argument("--injection", choices=("none", "variant_a", "variant_b", "plw"), default="plw")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("fixtures", help="emit DTNS oracle fixtures with a manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fixtures)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        return _fail(exc.kind, str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "ablate-injection")
                        else logging.WARNING, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), 2 if exc.kind in ("usage", "config") else 1)
    except (T.NumericError, T.DimensionError, T.ContractError, ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
