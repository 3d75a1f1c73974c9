"""m-LSTM / sg-LSTM forward and backward passes.

Per timestep, with row vectors and ``x @ W.T`` products::

    e   = W_e[:, w]                                   word embedding
    i   = sigmoid(C' W_ic + h' W_ih + e W_ie + b_i)   C', h' from step t-1
    f   = sigmoid(C' W_fc + h' W_fh + e W_fe + b_f)
    C   = f * C' + i * tanh(h' W_ch + e W_ce + b_c)
    o   = sigmoid(C W_oc + h' W_oh + e W_oe + b_o)    peeks at the new cell
    h   = o * C
    mm  = g2(I W_i + e W_d + h W_l [+ T W_t])         T only in sg-LSTM
    p   = softmax(mm W_s + b_s)

Sequences are processed in padded batches. ``forward`` returns a trace that
``backward`` consumes; both operate on whole (unsegmented) sentences.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError, ParameterError
from .tensor_math import DEFAULT_DTYPE, init_uniform, scaled_tanh_g2, scaled_tanh_grad, sigmoid, softmax

LSTM_PEEP = ("W_ic", "W_fc", "W_oc")
LSTM_HIDDEN = ("W_ih", "W_fh", "W_ch", "W_oh")
LSTM_EMBED = ("W_ie", "W_fe", "W_ce", "W_oe")
LSTM_BIAS = ("b_i", "b_f", "b_c", "b_o")


@dataclass(frozen=True)
class Dims:
    vocab: int
    embed: int = 1024
    lstm: int = 2048
    mm: int = 2048
    img: int = 2048
    gtf: int = 0  # 0 means no guiding input (m-LSTM)
    cell_tanh: bool = False  # h = o * tanh(C) instead of o * C

    @property
    def guided(self):
        return self.gtf > 0

    def to_dict(self):
        return asdict(self)


def param_shapes(dims):
    V, E, H, M = dims.vocab, dims.embed, dims.lstm, dims.mm
    shapes = {"W_e": (E, V)}
    for name in LSTM_PEEP + LSTM_HIDDEN:
        shapes[name] = (H, H)
    for name in LSTM_EMBED:
        shapes[name] = (H, E)
    for name in LSTM_BIAS:
        shapes[name] = (H,)
    shapes["W_i"] = (M, dims.img)
    shapes["W_d"] = (M, E)
    shapes["W_l"] = (M, H)
    if dims.guided:
        shapes["W_t"] = (M, dims.gtf)
    shapes["W_s"] = (V, M)
    shapes["b_s"] = (V,)
    return shapes


def is_bias(name):
    return name.startswith("b_")


class ModelParams:
    """Named weight tensors of one m-LSTM or sg-LSTM instance."""

    def __init__(self, dims, tensors):
        self.dims = dims
        shapes = param_shapes(dims)
        if set(tensors) != set(shapes):
            missing = set(shapes) - set(tensors)
            extra = set(tensors) - set(shapes)
            raise ConfigurationError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"{name} has shape {tensors[name].shape}, expected {shape}")
        self.tensors = {name: tensors[name] for name in shapes}

    @classmethod
    def init(cls, dims, rng, half_range=0.08, dtype=DEFAULT_DTYPE):
        tensors = {}
        for name, shape in param_shapes(dims).items():
            if is_bias(name):
                tensors[name] = np.zeros(shape, dtype=dtype)
            else:
                tensors[name] = init_uniform(shape, half_range, rng, dtype)
        return cls(dims, tensors)

    @classmethod
    def zeros(cls, dims, dtype=DEFAULT_DTYPE):
        return cls(dims, {n: np.zeros(s, dtype=dtype) for n, s in param_shapes(dims).items()})

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        if value.shape != self.tensors[name].shape:
            raise DimensionError(f"{name} has shape {self.tensors[name].shape}, got {value.shape}")
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return self.tensors["W_e"].dtype

    def copy(self):
        return ModelParams(self.dims, {n: t.copy() for n, t in self.items()})

    def astype(self, dtype):
        return ModelParams(self.dims, {n: t.astype(dtype) for n, t in self.items()})

    def weight_sq_norm(self):
        """Squared L2 norm over weight matrices (biases excluded)."""
        return sum(float(np.sum(t.astype(np.float64) ** 2)) for n, t in self.items() if not is_bias(n))

    def without_guide(self):
        """m-LSTM sharing every weight except ``W_t``."""
        dims = Dims(**{**self.dims.to_dict(), "gtf": 0})
        return ModelParams(dims, {n: t for n, t in self.items() if n != "W_t"})


@dataclass
class LstmState:
    C: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, batch, dims, dtype=DEFAULT_DTYPE):
        return cls(np.zeros((batch, dims.lstm), dtype), np.zeros((batch, dims.lstm), dtype))


class _Stacked:
    """Gate weights concatenated in (i, f, c, o) order for fewer matmuls."""

    def __init__(self, p):
        self.Wx = np.concatenate([p[n] for n in LSTM_EMBED])
        self.Wh = np.concatenate([p[n] for n in LSTM_HIDDEN])
        self.Wpc = np.concatenate([p["W_ic"], p["W_fc"]])
        self.b = np.concatenate([p[n] for n in LSTM_BIAS])


def embed(params, token_id):
    V = params.dims.vocab
    if not 0 <= int(token_id) < V:
        raise DataError(f"token id {token_id} outside vocabulary of size {V}")
    return params["W_e"][:, int(token_id)]


def lstm_step(params, e, prev, stacked=None):
    """One peephole LSTM step for a batch. Returns ``(state, gates)``.

    ``e`` is (B, embed); ``gates`` holds the i, f, g (cell input) and o
    activations needed by the backward pass.
    """
    e = np.atleast_2d(e)
    H = params.dims.lstm
    if e.shape[1] != params.dims.embed or prev.C.shape != (e.shape[0], H):
        raise DimensionError(f"lstm_step got e{e.shape}, C{prev.C.shape} for dims {params.dims}")
    s = stacked or _Stacked(params)
    pre = e @ s.Wx.T + prev.h @ s.Wh.T + s.b
    pre[:, : 2 * H] += prev.C @ s.Wpc.T
    i = sigmoid(pre[:, :H])
    f = sigmoid(pre[:, H : 2 * H])
    g = np.tanh(pre[:, 2 * H : 3 * H])
    C = f * prev.C + i * g
    o = sigmoid(pre[:, 3 * H :] + C @ params["W_oc"].T)
    h = o * np.tanh(C) if params.dims.cell_tanh else o * C
    return LstmState(C, h), (i, f, g, o)


def _check_guide(params, guide):
    if params.dims.guided and guide is None:
        raise ConfigurationError("sg-LSTM requires a guiding feature")
    if not params.dims.guided and guide is not None:
        raise ConfigurationError("m-LSTM does not accept a guiding feature")


def fixed_input(params, images, guides=None):
    """Per-sentence constant part of the multimodal pre-activation."""
    _check_guide(params, guides)
    images = np.atleast_2d(images)
    if images.shape[1] != params.dims.img:
        raise DimensionError(f"image feature of size {images.shape[1]}, model expects {params.dims.img}")
    const = images @ params["W_i"].T
    if guides is not None:
        guides = np.atleast_2d(guides)
        if guides.shape[1] != params.dims.gtf:
            raise DimensionError(f"guiding feature of size {guides.shape[1]}, model expects {params.dims.gtf}")
        const = const + guides @ params["W_t"].T
    return const


def multimodal_fuse(params, e, h, image_feat, guide=None):
    """mm = g2(W_i I + W_d e + W_l h [+ W_t T]) for single vectors."""
    const = fixed_input(params, image_feat, guide)[0]
    return scaled_tanh_g2(const + params["W_d"] @ e + params["W_l"] @ h)


def apply_dropout(x, rate, rng, training=True):
    """Inverted dropout. Returns ``(output, mask)``; mask is None when inactive."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def make_dropout_masks(dims, steps, batch, rate, rng, dtype=DEFAULT_DTYPE):
    """Masks for the embedding, LSTM-hidden and multimodal activations."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return None
    scale = dtype(1.0 / (1.0 - rate))

    def draw(width):
        return (rng.random((steps, batch, width)) >= rate).astype(dtype) * scale

    return {"embed": draw(dims.embed), "hidden": draw(dims.lstm), "mm": draw(dims.mm)}


@dataclass
class Batch:
    inputs: np.ndarray  # (T, B) ids fed at each step
    targets: np.ndarray  # (T, B) ids to predict
    weights: np.ndarray  # (T, B) 1 for real positions, 0 for padding

    @property
    def steps(self):
        return self.inputs.shape[0]

    @property
    def size(self):
        return self.inputs.shape[1]

    @property
    def n_words(self):
        return int(self.weights.sum())


def make_batch(sequences, pad_id=1):
    """Pack encoded sentences (each starting with the start id) into a Batch."""
    if not sequences:
        raise DataError("empty batch")
    for seq in sequences:
        if len(seq) < 2:
            raise DataError(f"sequence of length {len(seq)} is too short to predict from")
    T = max(len(s) for s in sequences) - 1
    B = len(sequences)
    inputs = np.full((T, B), pad_id, dtype=np.int64)
    targets = np.full((T, B), pad_id, dtype=np.int64)
    weights = np.zeros((T, B))
    for b, seq in enumerate(sequences):
        n = len(seq) - 1
        inputs[:n, b] = seq[:-1]
        targets[:n, b] = seq[1:]
        weights[:n, b] = 1.0
    return Batch(inputs, targets, weights)


@dataclass
class StepTrace:
    inputs: np.ndarray
    images: np.ndarray
    guides: np.ndarray | None
    masks: dict | None
    e: list
    C_prev: list
    h_prev: list
    gates: list
    C: list
    h: list
    h_drop: list
    z: list
    mm_drop: list
    probs: np.ndarray  # (T, B, V)

    def __len__(self):
        return len(self.e)


def forward(params, images, inputs, guides=None, masks=None):
    """Run a padded batch. ``inputs`` is (T, B); returns ``(probs, trace)``.

    ``probs[t, b]`` is the distribution over the token following
    ``inputs[t, b]``. Dropout is applied only when ``masks`` is given.
    """
    inputs = np.asarray(inputs)
    T, B = inputs.shape
    dims = params.dims
    images = np.atleast_2d(images).astype(params.dtype, copy=False)
    if guides is not None:
        guides = np.atleast_2d(guides).astype(params.dtype, copy=False)
    if images.shape[0] != B:
        raise DimensionError(f"{images.shape[0]} images for a batch of {B}")
    if inputs.min() < 0 or inputs.max() >= dims.vocab:
        raise DataError("token id outside vocabulary")
    const = fixed_input(params, images, guides)
    stacked = _Stacked(params)
    WeT = params["W_e"].T
    state = LstmState.zeros(B, dims, params.dtype)
    tr = StepTrace(inputs, images, guides, masks, [], [], [], [], [], [], [], [], [], None)
    probs = np.empty((T, B, dims.vocab), dtype=params.dtype)
    for t in range(T):
        e = WeT[inputs[t]]
        if masks is not None:
            e = e * masks["embed"][t]
        tr.C_prev.append(state.C)
        tr.h_prev.append(state.h)
        state, gates = lstm_step(params, e, state, stacked)
        h_drop = state.h if masks is None else state.h * masks["hidden"][t]
        z = const + e @ params["W_d"].T + h_drop @ params["W_l"].T
        mm = scaled_tanh_g2(z)
        if masks is not None:
            mm = mm * masks["mm"][t]
        probs[t] = softmax(mm @ params["W_s"].T + params["b_s"])
        tr.e.append(e)
        tr.gates.append(gates)
        tr.C.append(state.C)
        tr.h.append(state.h)
        tr.h_drop.append(h_drop)
        tr.z.append(z)
        tr.mm_drop.append(mm)
    tr.probs = probs
    return probs, tr


def backward(params, trace, targets, weights=None, scale=1.0):
    """Gradients of ``scale * sum_t weights[t] * -log2 p(targets[t])``.

    Returns a dict with one array per parameter name (``W_t`` only for
    sg-LSTM).
    """
    targets = np.asarray(targets)
    T = len(trace)
    if targets.shape != trace.inputs.shape:
        raise DataError(f"targets {targets.shape} do not match trace {trace.inputs.shape}")
    if weights is None:
        weights = np.ones(targets.shape)
    dims = params.dims
    H = dims.lstm
    dt = params.dtype
    B = targets.shape[1]
    stacked = _Stacked(params)
    masks = trace.masks

    g = {n: np.zeros_like(t) for n, t in params.items()}
    dWx = np.zeros_like(stacked.Wx)
    dWh = np.zeros_like(stacked.Wh)
    dWpc = np.zeros_like(stacked.Wpc)
    db = np.zeros_like(stacked.b)
    dz_total = np.zeros((B, dims.mm), dtype=dt)
    dWeT = g["W_e"].T  # view: rows indexed by token id

    dC_next = np.zeros((B, H), dtype=dt)
    dh_next = np.zeros((B, H), dtype=dt)
    rows = np.arange(B)
    coef = (np.asarray(weights, dtype=dt) * dt.type(scale / math.log(2.0)))
    for t in reversed(range(T)):
        dlogits = trace.probs[t].copy()
        dlogits[rows, targets[t]] -= 1.0
        dlogits *= coef[t][:, None]

        g["W_s"] += dlogits.T @ trace.mm_drop[t]
        g["b_s"] += dlogits.sum(axis=0)
        dmm = dlogits @ params["W_s"]
        if masks is not None:
            dmm = dmm * masks["mm"][t]
        dz = dmm * scaled_tanh_grad(trace.z[t])
        dz_total += dz
        e = trace.e[t]
        g["W_d"] += dz.T @ e
        g["W_l"] += dz.T @ trace.h_drop[t]
        de = dz @ params["W_d"]
        dh_drop = dz @ params["W_l"]
        if masks is not None:
            dh_drop = dh_drop * masks["hidden"][t]
        dh = dh_drop + dh_next

        i, f, gc, o = trace.gates[t]
        C, C_prev = trace.C[t], trace.C_prev[t]
        if dims.cell_tanh:
            tC = np.tanh(C)
            do = dh * tC
            dC = dC_next + dh * o * (1.0 - tC * tC)
        else:
            do = dh * C
            dC = dC_next + dh * o
        da_o = do * o * (1.0 - o)
        dC = dC + da_o @ params["W_oc"]
        g["W_oc"] += da_o.T @ C

        da_i = dC * gc * i * (1.0 - i)
        da_f = dC * C_prev * f * (1.0 - f)
        da_c = dC * i * (1.0 - gc * gc)
        dpre = np.concatenate([da_i, da_f, da_c, da_o], axis=1)
        h_prev = trace.h_prev[t]
        dWx += dpre.T @ e
        dWh += dpre.T @ h_prev
        db += dpre.sum(axis=0)
        dWpc += dpre[:, : 2 * H].T @ C_prev

        dC_next = dC * f + dpre[:, : 2 * H] @ stacked.Wpc
        dh_next = dpre @ stacked.Wh
        de = de + dpre @ stacked.Wx
        if masks is not None:
            de = de * masks["embed"][t]
        np.add.at(dWeT, trace.inputs[t], de)

    g["W_i"] += dz_total.T @ trace.images
    if dims.guided:
        g["W_t"] += dz_total.T @ trace.guides
    for k, name in enumerate(LSTM_EMBED):
        g[name] += dWx[k * H : (k + 1) * H]
    for k, name in enumerate(LSTM_HIDDEN):
        g[name] += dWh[k * H : (k + 1) * H]
    for k, name in enumerate(LSTM_BIAS):
        g[name] += db[k * H : (k + 1) * H]
    g["W_ic"] += dWpc[:H]
    g["W_fc"] += dWpc[H:]
    return g


def forward_sentence(params, image_feat, id_sequence, guide=None, masks=None):
    """Single-sentence forward. Returns ``(probs (T, V), trace)``.

    ``id_sequence`` starts with the start id; position t of the output
    predicts ``id_sequence[t + 1]``. ``masks`` arrays are (T, 1, width).
    """
    seq = np.asarray(id_sequence)
    if seq.ndim != 1 or len(seq) < 2:
        raise DataError(f"sentence needs at least 2 ids, got {len(seq)}")
    probs, trace = forward(params, image_feat, seq[:-1, None], guide, masks)
    return probs[:, 0], trace


def backward_sentence(params, trace, target_ids, scale=1.0):
    target_ids = np.asarray(target_ids)
    if target_ids.ndim != 1 or len(target_ids) != len(trace):
        raise DataError(f"{len(target_ids)} targets for a trace of {len(trace)} steps")
    return backward(params, trace, target_ids[:, None], None, scale)
