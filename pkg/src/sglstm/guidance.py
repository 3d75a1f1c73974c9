"""Guiding textual features: word vectors, sentence fusion, extraction and caching.

A guiding feature for an image is the top beam caption from the short-caption
m-LSTM, turned into one vector by averaging (or TF-IDF weighting) word vectors
from one of three sources: a pretrained table, vectors trained locally with
skip-gram negative sampling, or the m-LSTM's own embedding columns.
"""

import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoding import top1_sentence
from .errors import ConfigurationError, DataError, DegenerateInputError, DegenerateOutputError, DimensionError, ParseError
from .tensor_math import make_rng
from .text import RESERVED, Sample

log = logging.getLogger(__name__)

SOURCES = ("pretrained", "local", "embedding")
FUSIONS = ("average", "tfidf")


@dataclass(frozen=True)
class Scheme:
    source: str
    dim: int
    fusion: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigurationError(f"unknown vector source {self.source!r}; expected one of {SOURCES}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.dim < 1:
            raise ConfigurationError("scheme dimension must be positive")

    @property
    def descriptor(self):
        return f"{self.source}-{self.dim}+{self.fusion}"

    @classmethod
    def parse(cls, text):
        """Parse ``"pretrained-50+tfidf"`` style descriptors."""
        try:
            table, fusion = text.split("+")
            source, dim = table.rsplit("-", 1)
            return cls(source, int(dim), fusion)
        except ValueError:
            raise ConfigurationError(f"bad scheme descriptor {text!r}") from None

    def __str__(self):
        return self.descriptor


# the eight combinations evaluated at full scale
STANDARD_SCHEMES = tuple(
    Scheme(src, dim, fusion)
    for src, dim in (("pretrained", 50), ("pretrained", 300), ("local", 128), ("embedding", 1024))
    for fusion in FUSIONS
)


class WordVectorTable:
    def __init__(self, tokens, matrix, source):
        matrix = np.asarray(matrix)
        if not np.issubdtype(matrix.dtype, np.floating):
            matrix = matrix.astype(np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(tokens):
            raise DimensionError(f"{len(tokens)} tokens for a matrix of shape {matrix.shape}")
        self.tokens = list(tokens)
        self.matrix = matrix
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.source = source

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def get(self, token):
        i = self.index.get(token)
        return None if i is None else self.matrix[i]

    def cosine(self, a, b):
        u, v = self.get(a).astype(np.float64), self.get(b).astype(np.float64)
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

    def save(self, path):
        """Write in the plain-text ``token v1 ... vd`` format."""
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok, row in zip(self.tokens, self.matrix):
                f.write(tok + " " + " ".join(repr(float(x)) for x in row) + "\n")


def load_pretrained_vectors(path, expect_dim=None):
    tokens, rows, widths, lines = [], [], [], []
    seen = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if not parts[0]:
                if line.strip():
                    raise ParseError("row starts with a separator", lineno)
                continue
            tok = parts[0]
            if tok in seen:
                raise ParseError(f"duplicate token {tok!r} (first on line {seen[tok]})", lineno)
            seen[tok] = lineno
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError:
                raise ParseError(f"non-numeric value in row for {tok!r}", lineno) from None
            tokens.append(tok)
            widths.append(len(parts) - 1)
            lines.append(lineno)
    if not tokens:
        raise ParseError("no vectors in file")
    if expect_dim is not None and all(w == widths[0] for w in widths) and widths[0] != expect_dim:
        raise DimensionError(f"{path}: vectors have dimension {widths[0]}, expected {expect_dim}")
    d = expect_dim if expect_dim is not None else widths[0]
    for w, lineno in zip(widths, lines):
        if w != d:
            raise ParseError(f"row has {w} values, expected {d}", lineno)
    return WordVectorTable(tokens, np.array(rows, dtype=np.float32), "pretrained")


@dataclass
class SkipGramConfig:
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    min_count: int = 3
    seed: int = 0


def train_local_vectors(corpus, dim=128, config=None):
    """Skip-gram with negative sampling over tokenized sentences.

    Updates are applied one sentence at a time (all pairs of the sentence in
    one vectorized step); the learning rate decays linearly to 1e-4 of its
    start value. Deterministic given ``config.seed``.
    """
    config = config or SkipGramConfig()
    sentences = [_tokens(s) for s in corpus]
    counts = Counter(t for s in sentences for t in s)
    words = sorted((t for t, c in counts.items() if c >= config.min_count), key=lambda t: (-counts[t], t))
    if not words:
        raise DataError("no tokens meet the minimum count; cannot train word vectors")
    index = {t: i for i, t in enumerate(words)}
    encoded = [np.array([index[t] for t in s if t in index], dtype=np.int64) for s in sentences]
    encoded = [s for s in encoded if len(s) > 1]
    if not encoded:
        raise DataError("no sentence has two in-vocabulary tokens")

    rng = make_rng(config.seed)
    n = len(words)
    w_in = (rng.random((n, dim)) - 0.5) / dim
    w_out = np.zeros((n, dim))
    noise = np.array([counts[t] for t in words], dtype=np.float64) ** 0.75
    noise /= noise.sum()

    total = config.epochs * len(encoded)
    done = 0
    for _ in range(config.epochs):
        for si in rng.permutation(len(encoded)):
            sent = encoded[si]
            lr = config.learning_rate * max(1e-4, 1.0 - done / total)
            done += 1
            centers, contexts = [], []
            spans = rng.integers(1, config.window + 1, size=len(sent))
            for pos, span in enumerate(spans):
                lo, hi = max(0, pos - span), min(len(sent), pos + span + 1)
                for cpos in range(lo, hi):
                    if cpos != pos:
                        centers.append(sent[pos])
                        contexts.append(sent[cpos])
            centers = np.array(centers)
            contexts = np.array(contexts)
            negs = rng.choice(n, size=(len(centers), config.negatives), p=noise)

            v = w_in[centers]
            u_pos = w_out[contexts]
            u_neg = w_out[negs]
            g_pos = lr * (1.0 - _sigmoid(np.einsum("pd,pd->p", v, u_pos)))
            g_neg = -lr * _sigmoid(np.einsum("pd,pkd->pk", v, u_neg))
            dv = g_pos[:, None] * u_pos + np.einsum("pk,pkd->pd", g_neg, u_neg)
            np.add.at(w_out, contexts, g_pos[:, None] * v)
            np.add.at(w_out, negs, g_neg[..., None] * v[:, None, :])
            np.add.at(w_in, centers, dv)
    return WordVectorTable(words, w_in, "local")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _tokens(item):
    if isinstance(item, Sample):
        return item.caption.tokens
    return item


def embedding_vectors(params, vocab):
    """Embedding columns of a trained m-LSTM, reserved tokens excluded."""
    words = vocab.words()
    cols = [vocab.stoi[w] for w in words]
    return WordVectorTable(words, params["W_e"][:, cols].T, "embedding")


@dataclass
class IdfTable:
    idf: dict
    n_docs: int

    def weight(self, token):
        w = self.idf.get(token)
        if w is None:
            return math.log((1 + self.n_docs) / 1) + 1.0
        return w


def compute_idf(corpus):
    """Smoothed idf(w) = ln((1 + N) / (1 + df(w))) + 1, one document per caption."""
    docs = [_tokens(s) for s in corpus]
    if not docs:
        raise DataError("cannot compute idf over an empty corpus")
    df = Counter()
    for doc in docs:
        df.update(set(doc))
    n = len(docs)
    return IdfTable({t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}, n)


def _in_table(tokens, table, diagnostics):
    kept = [t for t in tokens if t in table]
    if diagnostics is not None:
        diagnostics["oov"] = diagnostics.get("oov", 0) + len(tokens) - len(kept)
    return kept


def fuse_average(tokens, table, diagnostics=None):
    kept = _in_table(tokens, table, diagnostics)
    if not kept:
        raise DegenerateInputError("no token of the sentence has a vector")
    return np.mean([table.get(t).astype(np.float64) for t in kept], axis=0)


def fuse_tfidf(tokens, table, idf, diagnostics=None):
    """Sum of tf * idf * vec over distinct tokens, divided by the total weight."""
    kept = _in_table(tokens, table, diagnostics)
    tf = Counter(kept)
    total = np.zeros(table.dim)
    weight = 0.0
    for tok in sorted(tf):
        w = tf[tok] * idf.weight(tok)
        total += w * table.get(tok).astype(np.float64)
        weight += w
    if weight <= 0:
        raise DegenerateInputError("sentence has zero total tf-idf weight")
    return total / weight


@dataclass
class GuidingFeature:
    vector: np.ndarray
    scheme: str
    tokens: tuple
    degenerate: bool = False


def fuse(tokens, scheme, table, idf=None, diagnostics=None):
    if table.dim != scheme.dim:
        raise DimensionError(f"scheme {scheme} expects {scheme.dim}-dim vectors, table has {table.dim}")
    if scheme.fusion == "tfidf":
        if idf is None:
            raise ConfigurationError("tf-idf fusion needs an idf table")
        return fuse_tfidf(tokens, table, idf, diagnostics)
    return fuse_average(tokens, table, diagnostics)


def extract_gtf(params, vocab, image_feat, scheme, table, idf=None, beam_size=3, max_len=20):
    """Vectorize the m-LSTM's top beam caption for one image.

    Degenerate sentences (empty, or with no in-table token) give a zero
    vector with ``degenerate=True``.
    """
    if params.dims.guided:
        raise ConfigurationError("guiding features are extracted with an m-LSTM, got an sg-LSTM")
    try:
        tokens = top1_sentence(params, vocab, image_feat, None, beam_size, max_len)
    except DegenerateOutputError:
        tokens = []
    tokens = [t for t in tokens if t not in RESERVED]
    try:
        if not tokens:
            raise DegenerateInputError("empty generated sentence")
        vec = fuse(tokens, scheme, table, idf)
        degenerate = False
    except DegenerateInputError:
        vec = np.zeros(scheme.dim)
        degenerate = True
    return GuidingFeature(vec.astype(np.float32), scheme.descriptor, tuple(tokens), degenerate)


# --- cache -------------------------------------------------------------------

CACHE_MAGIC = b"GTFC"


def write_gtf_cache(path, scheme, records):
    """``records`` maps image id -> vector; written in the given order.

    Layout: magic, u16 descriptor length, descriptor, u32 dimension, then per
    record u32 id length, UTF-8 id, dimension little-endian float32 values.
    """
    desc = str(scheme).encode("utf-8")
    dim = scheme.dim if isinstance(scheme, Scheme) else Scheme.parse(str(scheme)).dim
    out = bytearray(CACHE_MAGIC)
    out += struct.pack("<H", len(desc)) + desc + struct.pack("<I", dim)
    for image_id, vec in records.items():
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (dim,):
            raise DimensionError(f"guide for {image_id!r} has shape {vec.shape}, expected ({dim},)")
        ib = image_id.encode("utf-8")
        out += struct.pack("<I", len(ib)) + ib + vec.tobytes()
    Path(path).write_bytes(bytes(out))


def read_gtf_cache(path):
    """Returns ``(scheme, {image id: vector})``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: not a guiding-feature cache")
    pos = 4
    try:
        (dlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        scheme = Scheme.parse(buf[pos : pos + dlen].decode("utf-8"))
        pos += dlen
        (dim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
    except (struct.error, UnicodeDecodeError):
        raise DataError(f"{path}: truncated cache header") from None
    if dim != scheme.dim:
        raise DataError(f"{path}: header dimension {dim} disagrees with scheme {scheme}")
    records = {}
    width = 4 * dim
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise DataError(f"{path}: truncated record header after {len(records)} records")
        (ilen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + ilen > len(buf):
            raise DataError(f"{path}: truncated image id after {len(records)} records")
        try:
            image_id = buf[pos : pos + ilen].decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"{path}: undecodable image id after {len(records)} records") from None
        pos += ilen
        if pos + width > len(buf):
            raise DataError(f"{path}: record for image {image_id!r} is truncated")
        vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float32)
        pos += width
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}: record for image {image_id!r} has non-finite values")
        if image_id in records:
            raise DataError(f"{path}: duplicate record for image {image_id!r}")
        records[image_id] = vec
    return scheme, records


def build_gtf_cache(params, vocab, samples, scheme, table, path, idf=None, load_feature=None,
                    beam_size=3, max_len=20):
    """Compute and persist one guiding feature per sample image.

    Nothing is written if any image feature fails to load; the raised
    DataError lists every failing record. Returns the GuidingFeature list.
    """
    from .features import read_feature

    load_feature = load_feature or (lambda s: read_feature(s.feature_path, params.dims.img))
    feats, errors = [], []
    for s in samples:
        try:
            feats.append(load_feature(s))
        except (DataError, DimensionError) as exc:
            errors.append((s.image_id, str(exc)))
    if errors:
        detail = "; ".join(f"{i}: {m}" for i, m in errors)
        raise DataError(f"{len(errors)} image feature(s) unavailable, cache not written: {detail}")
    guides = [
        extract_gtf(params, vocab, f, scheme, table, idf, beam_size, max_len) for f in feats
    ]
    n_degenerate = sum(g.degenerate for g in guides)
    if n_degenerate:
        log.warning("%d of %d guiding sentences were degenerate (zero vectors)", n_degenerate, len(guides))
    write_gtf_cache(path, scheme, {s.image_id: g.vector for s, g in zip(samples, guides)})
    return guides


def load_guides_for(path, ids, scheme=None):
    """Guide matrix for ``ids`` from a cache, checking the scheme if given."""
    cached_scheme, records = read_gtf_cache(path)
    if scheme is not None and Scheme.parse(str(scheme)) != cached_scheme:
        raise ConfigurationError(f"cache holds scheme {cached_scheme}, expected {scheme}")
    missing = [i for i in ids if i not in records]
    if missing:
        raise DataError(f"no cached guiding feature for {len(missing)} image(s), e.g. {missing[0]!r}")
    return cached_scheme, np.stack([records[i] for i in ids]) if ids else np.zeros((0, cached_scheme.dim), np.float32)
