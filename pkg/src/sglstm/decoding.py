"""Beam-search caption generation."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateOutputError, ParameterError
from .network import LstmState, _Stacked, fixed_input, lstm_step
from .tensor_math import scaled_tanh_g2, softmax
from .text import END, START

LOG_FLOOR = 1e-12


@dataclass
class BeamHypothesis:
    tokens: tuple  # generated ids, including the end id when finished
    logprob: float  # cumulative log2 probability
    state: LstmState | None = None
    finished: bool = False

    def score(self, normalize=True):
        if normalize:
            return self.logprob / max(len(self.tokens), 1)
        return self.logprob


def _rank_key(normalize):
    return lambda h: (-h.score(normalize), h.tokens)


def _can_improve(alive, done, beam_size, max_len, normalize):
    """Whether some live hypothesis could still enter the top ``beam_size``.

    Log probabilities only fall as tokens are added, so a live hypothesis
    with sum L scores at most L / max_len (normalized) or L (raw sum).
    """
    kth = sorted((h.score(normalize) for h in done), reverse=True)[beam_size - 1]
    best = max(h.logprob for h in alive)
    return (best / max_len if normalize else best) > kth


def next_token_logprobs(params, const, x_ids, state, stacked=None):
    """log2 next-token distributions for a batch of hypotheses."""
    e = params["W_e"].T[x_ids]
    state, _ = lstm_step(params, e, state, stacked)
    mm = scaled_tanh_g2(const + e @ params["W_d"].T + state.h @ params["W_l"].T)
    p = softmax(mm @ params["W_s"].T + params["b_s"])
    return np.log2(np.maximum(p.astype(np.float64), LOG_FLOOR)), state


def beam_search(params, image_feat, guide=None, beam_size=3, max_len=20, normalize=True,
                start_id=0, end_id=1):
    """Decode one image. Returns finished hypotheses, best first.

    Each step expands every live hypothesis by every token except the start
    token, keeps the ``beam_size`` best expansions by cumulative log2
    probability, and retires those ending in the end token. Search stops when
    no hypothesis is live, when ``max_len`` tokens are generated (live ones are
    then retired unfinished), or once ``beam_size`` hypotheses are retired and
    no live one can still outscore the ``beam_size``-th of them. Final
    ranking uses log2 probability per generated token (``normalize``) or the
    raw sum, with ties broken by lexicographic token ids.
    """
    if beam_size < 1:
        raise ParameterError(f"beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ParameterError(f"max_len must be >= 1, got {max_len}")
    const = fixed_input(params, image_feat, guide)
    stacked = _Stacked(params)
    V = params.dims.vocab
    alive = [BeamHypothesis((), 0.0, LstmState.zeros(1, params.dims, params.dtype))]
    done = []
    for step in range(max_len):
        C = np.concatenate([h.state.C for h in alive])
        H = np.concatenate([h.state.h for h in alive])
        x = np.array([h.tokens[-1] if h.tokens else start_id for h in alive])
        logp, state = next_token_logprobs(params, np.repeat(const, len(alive), axis=0), x, LstmState(C, H), stacked)
        logp[:, start_id] = -np.inf
        cands = []
        # a global top-k expansion is always within its parent's top-k
        k = min(beam_size, V - 1)
        for a, hyp in enumerate(alive):
            for v in np.argsort(-logp[a], kind="stable")[:k]:
                cands.append((hyp.logprob + logp[a, v], hyp.tokens + (int(v),), a))
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for lp, tokens, a in cands[:beam_size]:
            hyp = BeamHypothesis(tokens, float(lp), LstmState(state.C[a : a + 1], state.h[a : a + 1]))
            if tokens[-1] == end_id:
                hyp.finished = True
                done.append(hyp)
            elif step == max_len - 1:
                done.append(hyp)
            else:
                alive.append(hyp)
        if not alive or (len(done) >= beam_size and not _can_improve(alive, done, beam_size, max_len, normalize)):
            break
    for hyp in done:
        hyp.state = None
    done.sort(key=_rank_key(normalize))
    return done


def greedy_decode(params, image_feat, guide=None, max_len=20, start_id=0, end_id=1):
    """Step-wise argmax decoding (start token excluded). Returns (tokens, log2 prob)."""
    const = fixed_input(params, image_feat, guide)
    stacked = _Stacked(params)
    state = LstmState.zeros(1, params.dims, params.dtype)
    tokens, total, x = [], 0.0, start_id
    for _ in range(max_len):
        logp, state = next_token_logprobs(params, const, np.array([x]), state, stacked)
        logp[0, start_id] = -np.inf
        x = int(np.argmax(logp[0]))
        total += float(logp[0, x])
        tokens.append(x)
        if x == end_id:
            break
    return tuple(tokens), total


def strip_special(tokens, vocab):
    return [vocab.token(t) for t in tokens if vocab.token(t) not in (START, END)]


def top1_sentence(params, vocab, image_feat, guide=None, beam_size=3, max_len=20):
    """Best beam caption as a token list (start/end removed).

    An empty list means the model ended immediately; callers treat that as a
    degenerate sentence.
    """
    results = beam_search(params, image_feat, guide, beam_size, max_len,
                          start_id=vocab.start_id, end_id=vocab.end_id)
    if not results or not math.isfinite(results[0].logprob):
        raise DegenerateOutputError("beam search produced no usable hypothesis")
    return strip_special(results[0].tokens, vocab)
