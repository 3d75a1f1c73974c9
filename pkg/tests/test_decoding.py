import math

import numpy as np
import pytest

from helpers import chain_model, exhaustive_best, small_params
from sglstm.decoding import beam_search, greedy_decode, top1_sentence
from sglstm.errors import ParameterError
from sglstm.network import forward_sentence
from sglstm.tensor_math import make_rng
from sglstm.text import build_vocab


@pytest.fixture(scope="module")
def cp_vocab():
    v = build_vocab([["central", "park"]], min_count=1)
    assert (v.id("central"), v.id("park")) == (3, 4)
    return v


def test_peaked_model_yields_central_park(cp_vocab):
    params = chain_model({0: 3, 3: 4, 4: 1, 2: 1}, len(cp_vocab))
    assert top1_sentence(params, cp_vocab, np.zeros(3)) == ["central", "park"]


def test_immediate_end_is_empty(cp_vocab):
    params = chain_model({0: 1, 3: 1, 4: 1, 2: 1}, len(cp_vocab))
    assert top1_sentence(params, cp_vocab, np.zeros(3)) == []


def test_peaked_model_beam_equals_greedy(cp_vocab):
    params = chain_model({0: 3, 3: 4, 4: 1, 2: 1}, len(cp_vocab))
    hyps = beam_search(params, np.zeros(3), beam_size=3)
    tokens, _ = greedy_decode(params, np.zeros(3))
    assert hyps[0].tokens == tokens == (3, 4, 1)


@pytest.mark.parametrize("seed", range(10))
def test_beam_one_is_greedy(seed):
    p = small_params(seed=seed, vocab=8, half_range=1.5)
    img = make_rng(seed).normal(size=6)
    hyps = beam_search(p, img, beam_size=1, max_len=8)
    tokens, lp = greedy_decode(p, img, max_len=8)
    assert hyps[0].tokens == tokens
    assert hyps[0].logprob == pytest.approx(lp, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_wide_beam_matches_exhaustive(seed):
    p = small_params(seed=100 + seed, vocab=4, embed=3, lstm=4, mm=4, img=2, half_range=2.0)
    img = make_rng(seed).normal(size=2)
    best, score = exhaustive_best(p, img, max_len=4)
    hyps = beam_search(p, img, beam_size=64, max_len=4)
    assert hyps[0].tokens == best
    assert hyps[0].score() == pytest.approx(score, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_widest_beam_scores_at_least_as_well(seed):
    p = small_params(seed=200 + seed, vocab=5, embed=3, lstm=4, mm=4, img=2, half_range=2.0)
    img = make_rng(seed).normal(size=2)
    widest = beam_search(p, img, beam_size=64, max_len=4)[0].score()
    for b in (1, 2, 3, 5, 10):
        assert beam_search(p, img, beam_size=b, max_len=4)[0].score() <= widest + 1e-12


def test_hypothesis_logprob_matches_forward():
    p = small_params(seed=3, vocab=9, half_range=1.0)
    img = np.linspace(-1, 1, 6)
    for h in beam_search(p, img, beam_size=4, max_len=6):
        probs, _ = forward_sentence(p, img, (0,) + h.tokens)
        lp = sum(math.log2(probs[t, tok]) for t, tok in enumerate(h.tokens))
        assert h.logprob == pytest.approx(lp, abs=1e-9)


def test_results_sorted_and_start_excluded():
    p = small_params(seed=4, vocab=9, half_range=1.0)
    hyps = beam_search(p, np.ones(6), beam_size=5, max_len=7)
    scores = [h.score() for h in hyps]
    assert scores == sorted(scores, reverse=True)
    assert all(0 not in h.tokens for h in hyps)
    assert all(h.finished == (h.tokens[-1] == 1) for h in hyps)
    assert all(len(h.tokens) <= 7 for h in hyps)


def test_unnormalized_ranking_uses_raw_sum():
    p = small_params(seed=4, vocab=9, half_range=1.0)
    hyps = beam_search(p, np.ones(6), beam_size=5, max_len=7, normalize=False)
    raw = [h.logprob for h in hyps]
    assert raw == sorted(raw, reverse=True)


def test_decoding_is_deterministic():
    p = small_params(seed=6, vocab=9, gtf=3)
    a = beam_search(p, np.ones(6), np.ones(3), beam_size=3)
    b = beam_search(p, np.ones(6), np.ones(3), beam_size=3)
    assert [(h.tokens, h.logprob) for h in a] == [(h.tokens, h.logprob) for h in b]


@pytest.mark.parametrize("kwargs", [{"beam_size": 0}, {"max_len": 0}])
def test_invalid_search_parameters(kwargs):
    with pytest.raises(ParameterError):
        beam_search(small_params(), np.ones(6), **kwargs)
