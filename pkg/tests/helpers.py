"""Shared constructors and oracles for the test modules."""

import itertools
import math

import numpy as np

from sglstm.network import Dims, ModelParams, forward_sentence
from sglstm.tensor_math import make_rng

# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def small_params(seed=0, vocab=10, embed=8, lstm=12, mm=12, img=6, gtf=0, cell_tanh=False,
                 dtype=np.float64, half_range=0.3):
    dims = Dims(vocab=vocab, embed=embed, lstm=lstm, mm=mm, img=img, gtf=gtf, cell_tanh=cell_tanh)
    params = ModelParams.init(dims, make_rng(seed), half_range, dtype)
    # nonzero biases so their gradients are exercised too
    r = make_rng(seed + 1)
    for name, t in params.items():
        if name.startswith("b_"):
            params[name] = r.uniform(-0.3, 0.3, t.shape).astype(dtype)
    return params


def exhaustive_best(params, image, guide=None, max_len=4, start_id=0, end_id=1, floor=1e-12):
    """Best sequence by mean log2 probability, enumerating every candidate.

    Candidates are sequences over the non-start tokens that either end with
    the end token (length <= max_len, end only at the last position) or reach
    max_len without it. Each is scored by an independent forward pass.
    """
    V = params.dims.vocab
    words = [t for t in range(V) if t not in (start_id, end_id)]
    cands = []
    for n in range(0, max_len):
        for body in itertools.product(words, repeat=n):
            cands.append(body + (end_id,))
    cands += list(itertools.product(words, repeat=max_len))
    best = None
    for seq in cands:
        probs, _ = forward_sentence(params, image, (start_id,) + tuple(seq), guide)
        lp = sum(math.log2(max(float(probs[t, tok]), floor)) for t, tok in enumerate(seq))
        key = (-lp / len(seq), tuple(seq))
        if best is None or key < best[0]:
            best = (key, tuple(seq))
    return best[1], -best[0][0]


def chain_model(next_of, vocab, sharpness=20.0):
    """Toy model whose next token is a fixed function of the current one.

    ``next_of`` maps token id -> next id. The image and LSTM paths are zero,
    so only the embedding of the fed token reaches the softmax.
    """
    V = vocab
    params = ModelParams.zeros(Dims(vocab=V, embed=V, lstm=2, mm=V, img=3), np.float64)
    params["W_e"] = np.eye(V)
    params["W_d"] = 3.0 * np.eye(V)
    ws = np.zeros((V, V))
    for cur, nxt in next_of.items():
        ws[nxt, cur] = sharpness
    params["W_s"] = ws
    return params
