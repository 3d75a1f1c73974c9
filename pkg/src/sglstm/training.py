"""Perplexity cost, RMSProp mini-batch training and gradient checking."""

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigurationError, DataError, NonFiniteGradientError, ParameterError
from .network import ModelParams, backward, forward, is_bias, make_batch, make_dropout_masks
from .tensor_math import make_rng

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    batch_size: int = 64
    l2: float = 1e-5
    dropout: float = 0.5
    max_epochs: int = 10
    max_steps: int | None = None  # stop after this many optimizer steps
    seed: int = 0
    max_sentence_len: int = 60
    clip_norm: float | None = None  # off unless set

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not 0 <= self.rho < 1:
            raise ParameterError("rho must be in [0, 1)")
        if not self.eps > 0:
            raise ParameterError("eps must be positive")
        if self.l2 < 0:
            raise ParameterError("l2 must be nonnegative")
        if not 0 <= self.dropout < 1:
            raise ParameterError("dropout must be in [0, 1)")
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class OptimizerState:
    acc: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({n: np.zeros_like(t) for n, t in params.items()})


@dataclass
class EncodedSet:
    """Training-ready sentences with their image (and guide) features."""

    ids: list
    images: np.ndarray  # (N, d_img)
    sequences: list  # encoded id arrays, start ... end
    vocab_hash: str
    guides: np.ndarray | None = None  # (N, d_gtf)
    truncated: int = 0

    def __len__(self):
        return len(self.ids)

    def subset(self, index):
        index = list(index)
        return EncodedSet(
            [self.ids[i] for i in index],
            self.images[index],
            [self.sequences[i] for i in index],
            self.vocab_hash,
            None if self.guides is None else self.guides[index],
        )

    @property
    def n_words(self):
        return sum(len(s) - 1 for s in self.sequences)


def encode_set(ids, images, sequences, vocab_hash, guides=None, max_sentence_len=None, end_id=1):
    """Build an EncodedSet, capping sentences at ``max_sentence_len`` words."""
    seqs, truncated = [], 0
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        if max_sentence_len is not None and len(seq) - 2 > max_sentence_len:
            seq = np.concatenate([seq[: max_sentence_len + 1], [end_id]])
            truncated += 1
        seqs.append(seq)
    images = np.asarray(images, dtype=np.float32)
    if guides is not None:
        guides = np.asarray(guides, dtype=np.float32)
    return EncodedSet(list(ids), images, seqs, vocab_hash, guides, truncated)


def sentence_nll(prob_rows, target_ids, diagnostics=None):
    """Bits (negative log2-likelihood) of a sentence and its predicted-token count."""
    prob_rows = np.asarray(prob_rows)
    target_ids = np.asarray(target_ids)
    if len(prob_rows) != len(target_ids):
        raise DataError(f"{len(prob_rows)} probability rows for {len(target_ids)} targets")
    p = prob_rows[np.arange(len(target_ids)), target_ids].astype(np.float64)
    floored = p < PROB_FLOOR
    if diagnostics is not None and floored.any():
        diagnostics["floor_hits"] = diagnostics.get("floor_hits", 0) + int(floored.sum())
    return float(-np.log2(np.maximum(p, PROB_FLOOR)).sum()), len(target_ids)


def _batch_bits(params, data, masks=None, diagnostics=None):
    batch = make_batch(data.sequences)
    probs, trace = forward(params, data.images, batch.inputs, data.guides, masks)
    T, B = batch.inputs.shape
    p = probs[np.arange(T)[:, None], np.arange(B)[None, :], batch.targets].astype(np.float64)
    floored = (p < PROB_FLOOR) & (batch.weights > 0)
    if diagnostics is not None and floored.any():
        diagnostics["floor_hits"] = diagnostics.get("floor_hits", 0) + int(floored.sum())
    bits = float(-(np.log2(np.maximum(p, PROB_FLOOR)) * batch.weights).sum())
    return bits, batch, trace


def _check_data(params, data):
    if params.dims.guided != (data.guides is not None):
        kind = "sg-LSTM" if params.dims.guided else "m-LSTM"
        raise ConfigurationError(f"{kind} given data {'without' if data.guides is None else 'with'} guiding features")


def batch_cost(params, data, l2=0.0, chunk=256, diagnostics=None):
    """Mean bits per word over ``data`` plus ``l2 * ||weights||^2``."""
    if len(data) == 0:
        raise DataError("empty batch")
    _check_data(params, data)
    bits = 0.0
    for start in range(0, len(data), chunk):
        b, _, _ = _batch_bits(params, data.subset(range(start, min(start + chunk, len(data)))), diagnostics=diagnostics)
        bits += b
    cost = bits / data.n_words
    if l2:
        cost += l2 * params.weight_sq_norm()
    return cost


def perplexity(params, data):
    return 2.0 ** batch_cost(params, data, l2=0.0)


def loss_and_grads(params, data, l2=0.0, masks=None):
    """Cost and gradients for one mini-batch (dropout via ``masks``)."""
    _check_data(params, data)
    bits, batch, trace = _batch_bits(params, data, masks)
    n_words = batch.n_words
    grads = backward(params, trace, batch.targets, batch.weights, scale=1.0 / n_words)
    cost = bits / n_words
    if l2:
        cost += l2 * params.weight_sq_norm()
        for name, t in params.items():
            if not is_bias(name):
                grads[name] += (2.0 * l2) * t
    return cost, grads


def rmsprop_update(params, grads, state, config):
    """In-place RMSProp step; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    if config.clip_norm is not None:
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if norm > config.clip_norm:
            grads = {n: g * (config.clip_norm / norm) for n, g in grads.items()}
    rho, lr, eps = config.rho, config.learning_rate, config.eps
    for name, g in grads.items():
        acc = state.acc[name]
        acc *= rho
        acc += (1.0 - rho) * g * g
        if lr:
            params.tensors[name] -= (lr * g / (np.sqrt(acc) + eps)).astype(params.tensors[name].dtype)
    state.step += 1
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    train_cost: float
    heldout_cost: float

    def line(self):
        return f"{self.epoch}\t{self.train_cost:.6f}\t{self.heldout_cost:.6f}"


@dataclass
class TrainResult:
    params: ModelParams
    opt_state: OptimizerState
    log: list = field(default_factory=list)
    epochs: int = 0


def train(params, data, config, vocab_hash, heldout=None, opt_state=None, on_epoch=None):
    """Mini-batch RMSProp over seeded per-epoch shuffles of ``data``.

    ``params`` is updated in place. The per-epoch log holds the mean
    mini-batch training cost and the inference-mode cost on ``heldout``
    (NaN when no held-out slice is given).
    """
    if data.vocab_hash != vocab_hash:
        raise ConfigurationError(f"data encoded with vocabulary {data.vocab_hash}, model uses {vocab_hash}")
    if heldout is not None and heldout.vocab_hash != vocab_hash:
        raise ConfigurationError("held-out data encoded with a different vocabulary")
    if len(data) == 0:
        raise DataError("empty training set")
    _check_data(params, data)
    rng = make_rng(config.seed)
    opt_state = opt_state or OptimizerState.zeros_like(params)
    result = TrainResult(params, opt_state)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(data))
        costs = []
        for start in range(0, len(data), config.batch_size):
            if config.max_steps is not None and opt_state.step >= config.max_steps:
                break
            mb = data.subset(order[start : start + config.batch_size])
            masks = None
            if config.dropout > 0:
                steps = max(len(s) for s in mb.sequences) - 1
                masks = make_dropout_masks(params.dims, steps, len(mb), config.dropout, rng, params.dtype.type)
            cost, grads = loss_and_grads(params, mb, config.l2, masks)
            rmsprop_update(params, grads, opt_state, config)
            costs.append(cost)
        if not costs:
            break
        held = batch_cost(params, heldout, config.l2) if heldout is not None and len(heldout) else float("nan")
        rec = EpochRecord(epoch, float(np.mean(costs)), held)
        result.log.append(rec)
        result.epochs = epoch
        log.debug("epoch %d cost %.4f heldout %.4f", epoch, rec.train_cost, held)
        if on_epoch is not None:
            on_epoch(rec)
    return result


def write_cost_log(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(rec.line() + "\n")


def read_cost_log(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            e, tr, ho = line.rstrip("\n").split("\t")
            records.append(EpochRecord(int(e), float(tr), float(ho)))
    return records


@dataclass
class GradCheckReport:
    errors: dict  # tensor name -> max relative error
    tolerance: float

    @property
    def passed(self):
        return all(err < self.tolerance for err in self.errors.values())

    @property
    def failing(self):
        return [n for n, err in self.errors.items() if not err < self.tolerance]

    @property
    def worst(self):
        return max(self.errors.values())


def relative_error(analytic, numeric, floor=1e-7):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradient_check(params, data, tolerance=1e-4, l2=0.0, masks=None, step=1e-4, grad_fn=None):
    """Compare analytic gradients with central differences, in float64.

    ``grad_fn(params, data, l2, masks) -> (cost, grads)`` defaults to
    ``loss_and_grads``; it is injectable so the harness itself can be tested.
    """
    p64 = params.astype(np.float64)
    data = EncodedSet(data.ids, data.images.astype(np.float64), data.sequences, data.vocab_hash,
                      None if data.guides is None else data.guides.astype(np.float64))
    if masks is not None:
        masks = {k: v.astype(np.float64) for k, v in masks.items()}
    _, grads = (grad_fn or loss_and_grads)(p64, data, l2, masks)

    def cost():
        bits, batch, _ = _batch_bits(p64, data, masks)
        c = bits / batch.n_words
        return c + l2 * p64.weight_sq_norm() if l2 else c

    errors = {}
    for name, tensor in p64.items():
        numeric = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        num_flat = numeric.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            up = cost()
            flat[k] = old - step
            down = cost()
            flat[k] = old
            num_flat[k] = (up - down) / (2 * step)
        errors[name] = float(relative_error(grads[name], numeric).max())
    return GradCheckReport(errors, tolerance)
