import math

import numpy as np
import pytest

from helpers import small_params
from sglstm.errors import ConfigurationError, DataError, NonFiniteGradientError, ParameterError
from sglstm.network import Dims, ModelParams
from sglstm.tensor_math import make_rng
from sglstm.training import (
    EpochRecord,
    OptimizerState,
    TrainingConfig,
    batch_cost,
    encode_set,
    gradient_check,
    loss_and_grads,
    perplexity,
    read_cost_log,
    relative_error,
    rmsprop_update,
    sentence_nll,
    train,
    write_cost_log,
)


def make_set(params, seqs, seed=0, guides=True):
    r = make_rng(seed)
    images = r.normal(size=(len(seqs), params.dims.img))
    g = r.normal(size=(len(seqs), params.dims.gtf)) if params.dims.guided and guides else None
    return encode_set([f"i{k}" for k in range(len(seqs))], images, seqs, "vh", g)


def uniform_model(vocab, img=3):
    """Output weights zero: every next-token distribution is uniform."""
    p = small_params(seed=1, vocab=vocab, img=img)
    p["W_s"] = np.zeros_like(p["W_s"])
    p["b_s"] = np.zeros_like(p["b_s"])
    return p


# --- sentence and batch costs --------------------------------------------------


def test_sentence_nll_perfect_model():
    rows = np.eye(4)
    assert sentence_nll(rows, [0, 1, 2, 3]) == (0.0, 4)


def test_sentence_nll_half_probability():
    rows = np.full((4, 2), 0.5)
    assert sentence_nll(rows, [0, 1, 1, 0])[0] == 4.0


def test_sentence_nll_uniform_v8():
    rows = np.full((2, 8), 1 / 8)
    assert sentence_nll(rows, [3, 5])[0] == pytest.approx(6.0, abs=1e-12)


def test_sentence_nll_floor_counts_hits():
    diag = {}
    bits, _ = sentence_nll(np.array([[1.0, 0.0]]), [1], diag)
    assert bits == pytest.approx(-math.log2(1e-12))
    assert diag["floor_hits"] == 1


def test_batch_cost_half_probability_any_composition():
    p = uniform_model(vocab=2)
    for seqs in ([[0, 1]], [[0, 0, 0, 1]], [[0, 1], [0, 0, 0, 0, 0, 1], [0, 0, 1]]):
        assert batch_cost(p, make_set(p, seqs), l2=0.0) == pytest.approx(1.0, abs=1e-6)


def test_batch_cost_uniform_over_v():
    p = uniform_model(vocab=10)
    data = make_set(p, [[0, 4, 5, 1], [0, 9, 1], [0, 3, 3, 3, 3, 1]])
    assert batch_cost(p, data, l2=0.0) == pytest.approx(math.log2(10), abs=1e-6)
    assert perplexity(p, data) == pytest.approx(10.0, rel=1e-6)


def _zero_bit_model():
    p = ModelParams.zeros(Dims(vocab=3, embed=2, lstm=2, mm=2, img=2), np.float64)
    p["b_s"] = np.array([0.0, 1000.0, 0.0])  # always predicts the end token
    return p


def test_batch_cost_perfect_sentence_is_zero():
    p = _zero_bit_model()
    assert batch_cost(p, make_set(p, [[0, 1]]), l2=0.0) == 0.0


def test_batch_cost_regularizer_isolated():
    p = _zero_bit_model()
    p["W_e"] = np.array([[0.5, 0.0, 0.0], [0.0, 0.0, 0.0]])
    p["b_i"] = np.array([3.0, 3.0])  # biases are not regularized
    assert batch_cost(p, make_set(p, [[0, 1]]), l2=1.0) == pytest.approx(0.25, abs=1e-12)


def test_batch_cost_chunking_is_invisible():
    p = small_params(seed=3)
    data = make_set(p, [[0, 3, 1], [0, 4, 5, 1], [0, 6, 1], [0, 7, 8, 9, 1], [0, 2, 1]])
    assert batch_cost(p, data, chunk=2) == pytest.approx(batch_cost(p, data, chunk=256), rel=1e-12)


def test_batch_cost_guide_mismatch():
    p = small_params(gtf=4)
    with pytest.raises(ConfigurationError):
        batch_cost(p, make_set(p, [[0, 3, 1]], guides=False))


def test_batch_cost_empty():
    p = small_params()
    with pytest.raises(DataError):
        batch_cost(p, make_set(p, []))


def test_encode_set_truncates_long_sentences():
    data = encode_set(["a"], np.zeros((1, 2)), [[0, 5, 6, 7, 8, 1]], "h", max_sentence_len=2)
    assert data.sequences[0].tolist() == [0, 5, 6, 1]
    assert data.truncated == 1


# --- RMSProp -------------------------------------------------------------------


def _const_grads(params, value):
    return {n: np.full(t.shape, value, dtype=t.dtype) for n, t in params.items()}


def test_rmsprop_first_step_closed_form():
    p = small_params(seed=2)
    before = p.copy()
    cfg = TrainingConfig(learning_rate=1e-3, rho=0.9, eps=1e-8)
    rmsprop_update(p, _const_grads(p, 0.7), OptimizerState.zeros_like(p), cfg)
    expected = 1e-3 * 0.7 / (math.sqrt(0.1 * 0.49) + 1e-8)
    assert expected == pytest.approx(1e-3 / math.sqrt(0.1), rel=1e-6)
    for name, t in p.items():
        np.testing.assert_allclose(before[name] - t, expected, rtol=1e-9)


def test_rmsprop_zero_gradient_leaves_params():
    p = small_params(seed=2)
    before = p.copy()
    state = OptimizerState.zeros_like(p)
    rmsprop_update(p, _const_grads(p, 0.0), state, TrainingConfig(learning_rate=0.1))
    for name, t in p.items():
        assert np.array_equal(before[name], t)
    assert state.step == 1


def test_rmsprop_rejects_non_finite_gradient():
    p = small_params()
    grads = _const_grads(p, 0.1)
    grads["W_l"][0, 0] = np.nan
    with pytest.raises(NonFiniteGradientError, match="W_l"):
        rmsprop_update(p, grads, OptimizerState.zeros_like(p), TrainingConfig())


def test_rmsprop_clipping_bounds_global_norm():
    p = small_params()
    grads = _const_grads(p, 10.0)
    state = OptimizerState.zeros_like(p)
    rmsprop_update(p, grads, state, TrainingConfig(clip_norm=1.0, rho=0.0))
    total = math.sqrt(sum(float(np.sum(a)) for a in state.acc.values()))
    assert total == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"rho": 1.0}, {"eps": 0.0}, {"dropout": 1.0},
                                    {"learning_rate": -1.0}, {"l2": -1.0}])
def test_training_config_validation(kwargs):
    with pytest.raises(ParameterError):
        TrainingConfig(**kwargs)


def test_training_config_dict_round_trip():
    cfg = TrainingConfig(learning_rate=3e-3, clip_norm=5.0, max_steps=7)
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg


# --- training loop -------------------------------------------------------------

SEQS = [[0, 3, 4, 1], [0, 5, 1], [0, 6, 7, 8, 1], [0, 9, 3, 1], [0, 4, 4, 5, 6, 1]]


def _run(seed=0, **kw):
    p = small_params(seed=5)
    p = p.astype(np.float32)
    data = make_set(p, SEQS)
    cfg = TrainingConfig(learning_rate=kw.pop("lr", 1e-2), batch_size=2, max_epochs=kw.pop("epochs", 3), seed=seed,
                         **kw)
    result = train(p, data, cfg, "vh", heldout=make_set(p, SEQS[:2], seed=9))
    return p, result


def test_training_is_deterministic():
    p1, r1 = _run()
    p2, r2 = _run()
    for name, t in p1.items():
        assert t.tobytes() == p2[name].tobytes()
    assert [rec.line() for rec in r1.log] == [rec.line() for rec in r2.log]


def test_different_seed_changes_trajectory():
    p1, _ = _run(seed=0)
    p2, _ = _run(seed=1)
    assert any(t.tobytes() != p2[n].tobytes() for n, t in p1.items())


def test_zero_learning_rate_leaves_params():
    start = small_params(seed=5).astype(np.float32)
    p, result = _run(lr=0.0, epochs=4)
    for name, t in p.items():
        assert np.array_equal(t, start[name])
    assert result.opt_state.step == 4 * 3


def test_training_reduces_cost():
    p = small_params(seed=5).astype(np.float32)
    data = make_set(p, SEQS)
    before = batch_cost(p, data)
    train(p, data, TrainingConfig(learning_rate=1e-2, batch_size=5, dropout=0.0, max_epochs=60), "vh")
    assert batch_cost(p, data) < 0.5 * before


def test_max_steps_stops_early():
    _, result = _run(epochs=10, max_steps=4)
    assert result.opt_state.step == 4
    assert result.epochs == 2


def test_vocab_hash_mismatch_refused():
    p = small_params()
    with pytest.raises(ConfigurationError):
        train(p, make_set(p, SEQS), TrainingConfig(), "other")


def test_heldout_nan_without_heldout_set():
    p = small_params(seed=5).astype(np.float32)
    result = train(p, make_set(p, SEQS), TrainingConfig(max_epochs=2, batch_size=5), "vh")
    assert all(math.isnan(r.heldout_cost) for r in result.log)


def test_cost_log_round_trip(tmp_path):
    records = [EpochRecord(1, 3.5, float("nan")), EpochRecord(2, 2.25, 2.5)]
    write_cost_log(records, tmp_path / "log.tsv")
    assert (tmp_path / "log.tsv").read_text().splitlines()[1] == "2\t2.250000\t2.500000"
    back = read_cost_log(tmp_path / "log.tsv")
    assert back[1] == records[1]
    assert math.isnan(back[0].heldout_cost)


# --- gradient-check harness ----------------------------------------------------


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-2)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5


def test_gradient_check_passes_on_fresh_model():
    p = small_params(seed=8, vocab=6, embed=3, lstm=4, mm=4, img=2)
    report = gradient_check(p, make_set(p, [[0, 3, 4, 1], [0, 5, 1]]), l2=1e-2)
    assert report.passed, report.errors
    assert set(report.errors) == set(dict(p.items()))


def test_gradient_check_flags_corrupted_tensor():
    p = small_params(seed=8, vocab=6, embed=3, lstm=4, mm=4, img=2)

    def corrupted(params, data, l2, masks):
        cost, grads = loss_and_grads(params, data, l2, masks)
        grads["W_l"] = 2.0 * grads["W_l"]
        return cost, grads

    report = gradient_check(p, make_set(p, [[0, 3, 4, 1]]), grad_fn=corrupted)
    assert not report.passed
    assert report.failing == ["W_l"]


def test_gradient_check_covers_guide_weights():
    p = small_params(seed=8, vocab=6, embed=3, lstm=4, mm=4, img=2, gtf=3)
    report = gradient_check(p, make_set(p, [[0, 3, 4, 1], [0, 2, 1]]))
    assert "W_t" in report.errors
    assert report.passed, report.errors
