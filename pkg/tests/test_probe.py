import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headscale import probe
from headscale import tensor as T
from headscale.errors import ContractError, DataError, ParameterError
from headscale.model import ModelConfig, init_model
from headscale.probe import EntropyCurve, entropy_upper_bound, find_inflection, head_entropy


class HandBuiltAttention:
    """One layer, one head; row i attends with the given fixed weights."""

    def __init__(self, rows):
        self.rows = rows

    def forward(self, tokens, scales=None, trace=False):
        from headscale.model import AttentionTrace, row_entropy
        tokens = np.atleast_2d(tokens)
        n = tokens.shape[1]
        ent = np.array([row_entropy(np.asarray(self.rows[i])) for i in range(n)])
        return None, AttentionTrace(np.broadcast_to(ent, (1, 1, tokens.shape[0], n)).copy())


def test_one_hot_is_zero():
    assert head_entropy([0.0, 1.0, 0.0]) == 0.0


@pytest.mark.parametrize("i", [1, 2, 3, 17, 1000])
def test_uniform_reaches_bound(i):
    assert abs(head_entropy(np.full(i, 1.0 / i)) - math.log(i)) < 1e-12


def test_quarter_half_quarter():
    # -(0.5 ln 0.5 + 2 * 0.25 ln 0.25) = 0.5 ln 2 + ln 2
    assert head_entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), abs=1e-15)


def test_unnormalized_row_rejected():
    with pytest.raises(ContractError):
        head_entropy([0.5, 0.4])
    with pytest.raises(ContractError):
        head_entropy([1.2, -0.2])


def test_upper_bound_values():
    assert entropy_upper_bound(1) == 0.0
    assert entropy_upper_bound(math.e) == pytest.approx(1.0, abs=1e-15)
    assert entropy_upper_bound(2048) == pytest.approx(7.6246, abs=5e-5)
    with pytest.raises(ParameterError):
        entropy_upper_bound(0)


def test_singleton_average_equals_head_entropy():
    rows = [[1.0], [0.3, 0.7], [0.5, 0.25, 0.25], [0.1, 0.2, 0.3, 0.4]]
    model = HandBuiltAttention(rows)
    curve = probe.average_entropy_curve(model, [np.zeros(4, dtype=int)], positions=[1, 2, 3, 4])
    expect = [head_entropy(r) for r in rows]
    assert np.allclose(curve.mean_entropy, expect, atol=1e-15)
    assert curve.n == 1


@pytest.fixture(scope="module")
def fresh_model():
    return init_model(ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=32, train_len=16, d_ff=24))


def test_fresh_model_within_bound(fresh_model):
    data = np.random.default_rng(0).integers(0, 32, size=(4, 64))
    curve = probe.average_entropy_curve(fresh_model, data, positions=probe.decimated_positions(64, 8))
    assert curve.within_bound()
    later = curve.positions > 8
    assert (curve.mean_entropy[later] < np.log(curve.positions[later])).all()


def test_halves_average_to_whole(fresh_model):
    data = np.random.default_rng(1).integers(0, 32, size=(6, 40))
    pos = probe.decimated_positions(40, 4)
    whole = probe.average_entropy_curve(fresh_model, data, positions=pos, batch_size=2)
    a = probe.average_entropy_curve(fresh_model, data[:3], positions=pos, batch_size=2)
    b = probe.average_entropy_curve(fresh_model, data[3:], positions=pos, batch_size=2)
    assert np.allclose(whole.mean_entropy, (a.mean_entropy + b.mean_entropy) / 2, rtol=0, atol=1e-12)


def test_head_scope_and_short_sequence(fresh_model):
    data = np.random.default_rng(2).integers(0, 32, size=(2, 20))
    curve = probe.average_entropy_curve(fresh_model, data, scope=(1, 0), positions=[1, 10, 20])
    assert curve.scope == (1, 0) and curve.within_bound()
    with pytest.raises(DataError, match="sequence 1"):
        probe.average_entropy_curve(fresh_model, [data[0], data[1][:5]], positions=[1, 10])


def test_raising_scales_never_raises_row_entropy():
    # logits held fixed while every head's temperature grows
    scores = np.random.default_rng(4).normal(size=(2, 24, 24)) * 3
    prev = None
    for lam in (0.1, 0.2, 0.3, 0.5, 1.0):
        p = T.softmax_temp(T.Tensor(scores), lam, T.causal_mask(24)).data
        ent = np.array([[head_entropy(p[h, i, :i + 1]) for i in range(24)] for h in range(2)])
        if prev is not None:
            assert (ent <= prev + 1e-12).all()
        prev = ent


def test_curve_invariants():
    with pytest.raises(ContractError):
        EntropyCurve([1, 3, 2], [0.0, 0.1, 0.2], 1)
    c = EntropyCurve([1, 2, 4], [0.0, 0.5, 1.0], 3)
    assert c.within_bound()
    assert not EntropyCurve([1, 2], [0.0, 0.8], 3).within_bound()


def test_decimated_grid():
    assert probe.decimated_positions(64, 16).tolist() == [1, 16, 32, 48, 64]
    assert probe.decimated_positions(50, 16).tolist() == [1, 16, 32, 48, 50]


def test_csv_round_trip(tmp_path):
    curves = [EntropyCurve([1, 16], [0.0, 1.25], 4), EntropyCurve([1, 16], [0.0, 0.5], 4, (0, 1))]
    path = tmp_path / "c.csv"
    text = probe.write_curves_csv(curves, path)
    assert text.splitlines()[0] == "position,value,scope,n"
    back = probe.read_curves_csv(path)
    assert back["L0H1"][1].tolist() == [0.0, 0.5]
    assert back["model"][0].tolist() == [1, 16]


# -- inflection -------------------------------------------------------------

L = 128


def test_flat_curve_has_no_inflection():
    x = np.arange(1, 4 * L + 1)
    assert find_inflection(x, np.full(x.size, 3.0), L) is None


@pytest.mark.parametrize("every", [1, 4, 16])
def test_known_breakpoint(every):
    x = np.arange(1, 4 * L + 1, every)
    y = np.where(x <= 2 * L, 2.0 + 0.001 * x, 2.0 + 0.001 * x + 0.05 * (x - 2 * L))
    pos = find_inflection(x, y, L, window=64, threshold=4.0)
    assert pos is not None and abs(pos - 2 * L) <= 64


def test_zero_threshold_fires_right_after_train_len():
    x = np.arange(1, 3 * L + 1)
    y = np.log(x) + 0.0001 * x
    assert find_inflection(x, y, L, threshold=0.0) == L + 1


def test_insufficient_points():
    with pytest.raises(DataError):
        find_inflection([1, 2], [0.0, 1.0], L)
    with pytest.raises(DataError):
        find_inflection(np.arange(1, 100), np.zeros(99), L)


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-1e3, 1e3), seed=st.integers(0, 1000), brk=st.integers(150, 400))
def test_translation_invariance(shift, seed, brk):
    x = np.arange(1, 4 * L + 1, 8)
    rng = np.random.default_rng(seed)
    y = 0.002 * x + np.where(x > brk, 0.03 * (x - brk), 0.0) + rng.normal(0, 1e-4, x.size)
    assert find_inflection(x, y, L) == find_inflection(x, y + shift, L)
