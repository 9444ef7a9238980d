import csv
import dataclasses
import math

import numpy as np
import pytest

from dsdit import experiment as ex
from dsdit.experiment import (ExperimentConfig, ablate_injection, desk_config, draw_batch, evaluate,
                              image_metrics, injection_step0_identical, sample_images, sweep_omega,
                              to_model_space, train)
from dsdit.flow import SamplerConfig
from dsdit.model import ModelConfig
from dsdit.tensor import NumericError, SeededRng


def small_config(**kw):
    base = dict(model=ModelConfig(image_size=16, patch=4, dim=8, heads=2, blocks=1, temb_dim=8),
                sampler=SamplerConfig(steps=3), steps=4, batch=2, lr=1e-3, train_count=6,
                test_count=3, scale=4, log_every=0)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def setup():
    cfg = small_config()
    return cfg, cfg.train_data(), cfg.test_data()


def test_desk_config_routes_keys():
    cfg = desk_config(steps=123, sampler_steps=7, dim=32, omega=1.1)
    assert cfg.steps == 123 and cfg.sampler.steps == 7
    assert cfg.model.dim == 32 and cfg.sampler.omega == 1.1
    assert (cfg.model.image_size, cfg.model.patch, cfg.model.blocks, cfg.batch, cfg.scale) == (32, 4, 4, 16, 8)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(scale=3)
    with pytest.raises(ValueError):
        small_config(ref_mode="other")


def test_step0_loss_is_target_energy(setup):
    cfg, train_ds, _ = setup
    result = train(cfg, train_ds, steps=1)
    x0, x1, *_ = draw_batch(SeededRng(cfg.seed), train_ds, cfg)
    # zero head: the prediction is 0, so the loss is the target energy (up to summation order)
    assert result.losses[0] == pytest.approx(float(np.mean((x1 - x0) ** 2)), rel=1e-14)


def test_training_is_deterministic(setup):
    cfg, train_ds, _ = setup
    a, b = train(cfg, train_ds), train(cfg, train_ds)
    assert a.losses == b.losses
    assert a.checkpoint.tensors.keys() == b.checkpoint.tensors.keys()
    assert all(np.array_equal(a.checkpoint.tensors[k], b.checkpoint.tensors[k]) for k in a.checkpoint.tensors)


def test_resume_matches_uninterrupted(setup):
    cfg, train_ds, _ = setup
    full = train(cfg, train_ds, steps=4)
    half = train(cfg, train_ds, steps=2)
    rest = train(cfg, train_ds, resume=half.checkpoint, steps=2)
    assert half.losses + rest.losses == full.losses
    assert rest.checkpoint.step == 4
    zero = train(cfg, train_ds, resume=full.checkpoint, steps=0)
    assert all(np.array_equal(zero.checkpoint.tensors[k], v) for k, v in full.checkpoint.tensors.items())


def test_nonfinite_loss_reports_step(setup, monkeypatch):
    cfg, train_ds, _ = setup
    real = ex.batch_loss
    calls = []

    def flaky(*args):
        calls.append(1)
        if len(calls) == 3:
            raise NumericError("overflow")
        return real(*args)

    monkeypatch.setattr(ex, "batch_loss", flaky)
    with pytest.raises(NumericError, match="step 2"):
        train(cfg, train_ds)


def test_self_metrics():
    hr = np.random.default_rng(0).uniform(size=(16, 16, 3))
    m = image_metrics(hr, hr, np.zeros((16, 16), bool))
    assert m["psnr"] == math.inf and m["ssim"] == 1.0
    assert math.isnan(m["psnr_changed"])


def test_report_consistency(setup, tmp_path):
    cfg, train_ds, test_ds = setup
    model = train(cfg, train_ds).checkpoint.to_model()
    rep = evaluate(model, test_ds, cfg.sampler)
    assert rep.methods() == ["bicubic", "model"]
    for method in rep.methods():
        rows = [r for r in rep.rows if r["method"] == method]
        assert len(rows) == len(test_ds)
        assert rep.aggregate(method)["psnr"] == pytest.approx(np.mean([r["psnr"] for r in rows]), abs=1e-12)
        for r in rows:
            f = r["changed_fraction"]
            assert abs((1 - f) * r["mse_unchanged"] + f * r["mse_changed"] - r["mse"]) <= 1e-9
    other = evaluate(model, test_ds, SamplerConfig(steps=2, seed=5))
    assert [r for r in rep.rows if r["method"] == "bicubic"] == \
        [r for r in other.rows if r["method"] == "bicubic"]
    rep.write_csv(tmp_path / "rows.csv")
    rep.write_summary_csv(tmp_path / "summary.csv")
    with open(tmp_path / "summary.csv") as fh:
        assert [r["method"] for r in csv.DictReader(fh)] == ["bicubic", "model"]


def test_sampling_is_deterministic(setup):
    cfg, train_ds, test_ds = setup
    model = train(cfg, train_ds).checkpoint.to_model()
    a = sample_images(model, test_ds, cfg.sampler)
    assert np.array_equal(a, sample_images(model, test_ds, cfg.sampler))


def test_omega_sweep_identities(setup, tmp_path):
    cfg, train_ds, test_ds = setup
    model = train(cfg, train_ds).checkpoint.to_model()
    base = SamplerConfig(steps=3)
    _, samples = sweep_omega(model, test_ds, (0.0, 1.0, 1.2), base, out_dir=tmp_path)
    unguided = sample_images(model, test_ds, dataclasses.replace(base, guidance=False))
    weak_only = sample_images(model, test_ds, base,
                              velocity=lambda m, x, t, lr, ref, c: m(x, t, lr, ref, c.lambda_weak))
    assert np.array_equal(samples[1.0], unguided)
    assert np.array_equal(samples[0.0], weak_only)
    assert not np.array_equal(samples[1.2], unguided)
    assert (tmp_path / "omega_sweep.csv").exists() and (tmp_path / "omega_sweep.png").exists()


def test_noise_reference_mode(setup):
    cfg, _, test_ds = setup
    lr, ref = ex.conditions(test_ds, np.arange(2), "noise", 0)
    lr2, ref2 = ex.conditions(test_ds, np.arange(2), "noise", 0)
    assert np.array_equal(ref, ref2)
    assert np.array_equal(lr, to_model_space(test_ds.lr_up[:2]))
    assert not np.allclose(ref, to_model_space(test_ds.ref[:2]))


def test_ablation(setup, tmp_path):
    cfg, train_ds, test_ds = setup
    cfg = dataclasses.replace(cfg, steps=2)
    assert injection_step0_identical(cfg, test_ds)
    rows, identical = ablate_injection(cfg, train_ds, test_ds, out_dir=tmp_path)
    assert identical
    assert [r["injection"] for r in rows] == ["none", "variant_a", "variant_b", "plw"]
    again, _ = ablate_injection(cfg, train_ds, test_ds)
    assert again == rows
    assert (tmp_path / "ablate_injection.csv").exists()
