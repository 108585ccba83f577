import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from headscale import search
from headscale.errors import ContractError, DataError, ParameterError
from headscale.evaluate import mean_nll
from headscale.model import ModelConfig, ScaleVector, init_model
from headscale.search import SweepResult, fit_scale_curve, scale_grid

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=32, train_len=8, d_ff=24, seed=3)
D = CFG.d_head


@pytest.fixture(scope="module")
def model():
    return init_model(CFG)


@pytest.fixture(scope="module")
def valset():
    return np.random.default_rng(0).integers(0, 32, size=(6, 33))


def test_grid_spacing():
    g = scale_grid(32)
    assert g[0] == pytest.approx(0.8 / math.sqrt(32)) and g[-1] == pytest.approx(2.0 / math.sqrt(32))
    assert g.size == 121
    assert np.allclose(np.diff(g), 0.01 / math.sqrt(32), rtol=1e-9)


def test_singleton_grid(model, valset):
    sw = search.uniform_scale_sweep(model, valset, [CFG.default_scale], 32)
    assert (sw.best_scale == CFG.default_scale).all()
    vec = search.init_head_scales(CFG, sw, 32)
    assert (vec.values == CFG.default_scale).all()


def test_sweep_argmin_consistency(model, valset):
    grid = scale_grid(D, 0.5, 3.0, 0.5)
    sw = search.uniform_scale_sweep(model, valset, grid, 32, bucket=4)
    assert sw.positions.tolist() == [4, 8, 12, 16, 20, 24, 28, 32]
    assert np.array_equal(sw.best_log_ppl, sw.log_ppl.min(axis=1))
    for i in range(sw.positions.size):
        assert sw.log_ppl[i, sw.best_index[i]] == sw.log_ppl[i].min()
    back = SweepResult.from_json(sw.to_json())
    assert np.array_equal(back.log_ppl, sw.log_ppl) and np.array_equal(back.grid, sw.grid)


def test_sweep_column_matches_direct_evaluation(model, valset):
    lam = 1.3 / math.sqrt(D)
    sw = search.uniform_scale_sweep(model, valset, [lam], 32)
    assert sw.log_ppl[:, 0].mean() == pytest.approx(mean_nll(model, valset, lam), rel=1e-12)


def test_ties_go_to_smaller_scale():
    sw = SweepResult(np.array([0.1, 0.2, 0.3]), np.array([1, 2]),
                     np.array([[1.0, 0.5, 0.5], [0.7, 0.7, 0.7]]), 8, 16)
    assert sw.best_scale.tolist() == [0.2, 0.1]


def test_sweep_errors(model, valset):
    with pytest.raises(ParameterError):
        search.uniform_scale_sweep(model, valset, [], 32)
    with pytest.raises(DataError):
        search.uniform_scale_sweep(model, valset, [0.2], 64)
    with pytest.raises(ParameterError):
        SweepResult(np.array([0.1]), np.array([4, 8]), np.zeros((2, 1)), 8, 16).best_at(12)


# -- fit ------------------------------------------------------------------------

def test_planted_fit_recovers_c():
    s = np.linspace(1.0, 8.0, 57)
    fit = fit_scale_curve(s, 1 + 0.25 * np.log(s))
    assert abs(fit.c - 0.25) < 1e-9
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


def test_fit_normal_equation_by_hand():
    # s = (2, 4): ln s = (a, 2a) with a = ln 2, y - 1 = (1, 1)
    # c = (a + 2a) / (a^2 + 4a^2) = 3 / (5a)
    fit = fit_scale_curve([2.0, 4.0], [2.0, 2.0])
    assert fit.c == pytest.approx(3 / (5 * math.log(2)), rel=1e-14)


def test_fit_degenerate_inputs():
    with pytest.raises(DataError):
        fit_scale_curve([2.0, 2.0, 2.0], [1.1, 1.2, 1.3])
    with pytest.raises(DataError):
        fit_scale_curve([0.5, 1.0, 1.5], [1.0, 1.0, 1.1])


def test_fit_render_format():
    fit = search.FitResult(0.30101, 0.99537, 2048, 16384, 100)
    assert fit.render().startswith("λ=(1+0.3010 ln s)/√d, R²=0.9954")


@given(c=st.floats(-0.5, 1.0), noise_seed=st.integers(0, 100))
def test_fit_residual_orthogonality(c, noise_seed):
    s = np.linspace(1.1, 8.0, 40)
    y = 1 + c * np.log(s) + np.random.default_rng(noise_seed).normal(0, 0.01, s.size)
    fit = fit_scale_curve(s, y)
    resid = y - (1 + fit.c * np.log(s))
    assert abs(np.dot(resid, np.log(s))) < 1e-9
    assert fit.r2 <= 1.0


def test_fit_residuals_sum_to_zero_on_planted_data():
    s = np.linspace(1.0, 8.0, 30)
    y = 1 + 0.4 * np.log(s)
    resid = y - (1 + fit_scale_curve(s, y).c * np.log(s))
    assert abs(resid.sum()) < 1e-9


def test_fit_from_sweep_uses_best_scales():
    pos = np.array([8, 16, 32, 64])
    grid = np.array([1.0, 1.5, 2.0]) / math.sqrt(16)
    table = np.array([[0, 1, 2], [1, 0, 2], [2, 0, 1], [2, 1, 0]], dtype=float)
    sw = SweepResult(grid, pos, table, 8, 16)
    fit = search.fit_from_sweep(sw)
    expect = fit_scale_curve([1.0, 2.0, 4.0, 8.0], [1.0, 1.5, 1.5, 2.0])
    assert fit.c == expect.c and (fit.i_min, fit.i_max) == (8, 64)


# -- init and tuning --------------------------------------------------------------

def test_default_init():
    vec = search.init_head_scales(ModelConfig(), None, 256, mode="default")
    assert (vec.values == 1 / math.sqrt(32)).all() and vec.values.shape == (4, 4)


def test_best_uniform_needs_sweep():
    with pytest.raises(ParameterError):
        search.init_head_scales(CFG, None, 16)


def test_zero_steps_returns_init(model, valset):
    init = ScaleVector.constant(CFG, 0.4)
    out = search.tune_head_scales(model, valset, init, steps=0)
    assert np.array_equal(out.scales.values, init.values)


def test_constant_init_matches_uniform(model, valset):
    init = ScaleVector.constant(CFG, 0.37)
    out = search.tune_head_scales(model, valset, init, steps=0)
    a = mean_nll(model, valset, out.scales)
    assert a == mean_nll(model, valset, 0.37)


def test_exact_gradient_matches_finite_differences(model, valset):
    vals = np.array([[0.3, 0.5], [0.25, 0.4]])
    _, exact = search.scale_loss_and_grad(model, valset[:3], vals)
    fd = search.scale_grad_fd(model, valset[:3], vals)
    assert np.abs(exact - fd).max() / np.abs(fd).max() < 1e-6


def test_tuning_keeps_model_bytes_and_floor(model, valset):
    before = model.to_bytes()
    init = ScaleVector.constant(CFG)
    out = search.tune_head_scales(model, valset, init, steps=5, lr=0.1, batch_size=2, warmup=1,
                                  check_finite=True)
    assert model.to_bytes() == before
    assert out.scales.values.min() >= 1 / math.sqrt(D)
    assert len(out.losses) == 5 and out.scales.values.size == CFG.total_heads


def test_tuning_is_deterministic(model, valset):
    init = ScaleVector.constant(CFG, 0.4)
    a = search.tune_head_scales(model, valset, init, steps=3, batch_size=2, warmup=1, seed=5, check_finite=True)
    b = search.tune_head_scales(model, valset, init, steps=3, batch_size=2, warmup=1, seed=5, check_finite=True)
    assert np.array_equal(a.scales.values, b.scales.values) and a.losses == b.losses


def test_populated_base_gradient_is_a_contract_error(valset):
    m = init_model(CFG)
    m.params["layers.0.wq"].requires_grad = True
    with pytest.raises(ContractError, match="layers.0.wq"):
        search.scale_loss_and_grad(m, valset[:2], np.full((2, 2), 0.25))


# -- correlation ----------------------------------------------------------------

def test_anti_monotone_layer_gives_minus_one():
    ent = np.array([[1.0, 2.0, 3.0, 4.0]])
    lam = np.array([[0.9, 0.7, 0.5, 0.2]])
    rep = search.correlation_table(ent, lam, 64)
    assert rep.spearman[0] == pytest.approx(-1.0) and not rep.degenerate[0]
    assert len(rep.rows) == 4
    assert rep.to_csv().splitlines()[0] == "layer,head,entropy,scale,layer_spearman,degenerate"


def test_identical_heads_are_degenerate():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, vocab_size=16, train_len=8, d_ff=8)
    m = init_model(cfg)
    for name in ("wq", "wk", "wv"):
        w = m.params[f"layers.0.{name}"].data
        w[:, 4:] = w[:, :4]
    data = np.random.default_rng(1).integers(0, 16, size=(3, 12))
    rep = search.scale_entropy_correlation(m, ScaleVector.constant(cfg, 0.6), data, 10)
    assert rep.degenerate[0] and math.isnan(rep.spearman[0])


def test_correlation_position_out_of_range(model, valset):
    with pytest.raises(ParameterError):
        search.scale_entropy_correlation(model, ScaleVector.constant(CFG), valset, 40)
