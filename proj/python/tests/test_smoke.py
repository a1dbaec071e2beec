import math

import numpy as np
import pytest

import las


def test_version():
    assert las.__version__


def test_fs_two_step_schedule():
    p = las.FSParams(theta=[0.5, 0.25], h=[0.5, 0.25], d=[0.5, 0.25])
    assert las.fs_encode(0.75, p) == [0.5, 0.25]
    assert las.fs_eval(0.75, p) == 0.75


def test_mt_matches_its_bound():
    c = las.MTConfig(tau=1.0, levels=5, steps=8)
    rng = np.random.default_rng(3)
    xs = rng.uniform(-c.max_decodable(), c.max_decodable(), 2000)
    worst = max(abs(las.mt_eval(x, c) - x) for x in xs)
    assert worst <= c.quantization_bound()
    assert sum(las.mt_encode(0.3, c)) == pytest.approx(las.mt_eval(0.3, c), abs=1e-15)


def test_oat_roundtrip_shape_and_routing():
    c = las.OATConfig(theta_nor=1.0, theta_out=20.0, levels=5, steps=16)
    x = np.array([[0.1, -0.7, 15.0], [3.0, 0.0, -19.0]])
    y = las.oat_roundtrip(x, c)
    assert y.shape == x.shape
    assert np.max(np.abs(y - x)) <= c.quantization_bound()
    assert c.is_outlier(3.0) and not c.is_outlier(0.5)


def test_hg_fit_gelu():
    fit = las.fit_hg_range("gelu", -5.0, 5.0, ranges=8, steps=16, samples=256, seed=7)
    assert fit.config.ranges == 8
    assert fit.report.max_abs_err() <= 0.05
    for x in np.linspace(-5, 5, 101):
        assert abs(fit.config(x) - las.gelu(x)) <= fit.report.sup_bound(1.13)
    assert fit.report.to_json()["target"] == "gelu"


def test_errors_map_to_exceptions():
    with pytest.raises(las.ConfigError):
        las.MTConfig(tau=1.0, levels=0, steps=4)
    with pytest.raises(las.UndefinedRatioError):
        las.energy_ratio(10, 0)
    with pytest.raises(las.Error):
        las.fit_hg_range("tanhh", -1.0, 1.0)
    assert issubclass(las.EmptyInputError, las.InputError)


def test_energy():
    assert las.energy_ratio(100, 10) == pytest.approx(100 * 0.9 / (10 * 4.6))
    assert (las.flop_cost("gelu"), las.flop_cost("exp"), las.flop_cost("sqrt")) == (70, 20, 12)
    assert las.sop_weight(las.SopRule.per_level_bits, 5) == math.ceil(math.log2(10))
    ledger = las.EnergyLedger()
    ledger.record_sop("a", 9)
    ledger.record_flop("b", 2)
    assert ledger.ratio() == pytest.approx(9 * 0.9 / (2 * 4.6))


def test_model_pipeline_small():
    cfg = las.ModelConfig({"N_per_nonlinearity": 8, "fit_samples": 256})
    w = las.random_weights(cfg, 1)
    calib = las.sample_inputs(cfg, 2)
    x = calib[: cfg.seq_len]
    ref = las.float_forward(cfg, w, x)
    assert ref.shape == (cfg.seq_len, cfg.d_model)
    block = las.convert(cfg, w, calib)
    run = las.spike_forward(block, x, steps=16)
    assert run.output.shape == ref.shape
    assert np.allclose(run.reference, ref, atol=1e-12)
    assert run.mean_rel_err <= 1e-2
    assert run.ledger.sops > 0 and run.ledger.flops > 0
    again = las.spike_forward(block, x, steps=16)
    assert np.array_equal(run.output, again.output)
    with pytest.raises(las.ConfigError):
        las.spike_forward(block, x, steps=0)
