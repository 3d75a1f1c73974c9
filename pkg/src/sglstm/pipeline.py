"""Pipeline stages over a working directory.

Each stage reads the outputs of earlier stages from ``cfg.workdir``, writes
its own outputs there, and records a ``<stage>.manifest.json`` with the
sha256 of every input and output, the seed and timings. Reruns with the same
inputs and seed reproduce every output byte for byte; only manifests carry
timestamps.
"""

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .decoding import beam_search, top1_sentence
from .errors import ChainError, ConfigurationError, DataError, DegenerateOutputError, DimensionError, StageDependencyError
from .features import read_feature
from .guidance import (
    Scheme,
    SkipGramConfig,
    build_gtf_cache,
    compute_idf,
    embedding_vectors,
    extract_gtf,
    load_guides_for,
    load_pretrained_vectors,
    read_gtf_cache,
    train_local_vectors,
)
from .metrics import EvalPair, per_pair_scores, score_corpus, write_breakdown
from .network import Dims, ModelParams
from .plotting import plot_cost_log, plot_length_histogram, plot_metrics
from .tensor_math import make_rng
from .text import (
    Vocabulary,
    build_vocab,
    detokenize,
    encode,
    is_punctuation,
    length_stats,
    load_scrub_rules,
    read_corpus,
    split_corpus,
    write_corpus,
)
from .training import encode_set, train, write_cost_log

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("s", "l")
PARTS = ("train", "heldout", "test")

# file name -> command that produces it
PRODUCERS = {
    "corpus.clean.jsonl": "ingest",
    **{f"data_{s}.{p}.jsonl": "split" for s in SPLITS for p in PARTS},
    "vocab.tsv": "vocab",
    "mlstm.ckpt": "train-mlstm",
    "gtf.cache": "gtf",
    "local_vectors.txt": "gtf",
    "sglstm.ckpt": "train-sglstm",
}

# stages whose manifests a model's outputs depend on
LINEAGE = {
    "mlstm": ("ingest", "split", "vocab", "train-mlstm"),
    "sglstm": ("ingest", "split", "vocab", "train-mlstm", "gtf", "train-sglstm"),
}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Resolved paths plus manifest bookkeeping for one working directory."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg.workdir)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return self.root / name

    def require(self, name):
        p = self.path(name)
        if not p.exists():
            raise StageDependencyError(p, PRODUCERS.get(name, "an earlier stage"))
        return p

    def _key(self, path):
        path = Path(path)
        try:
            return path.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(path.resolve())

    def write_manifest(self, stage, inputs, outputs, started, settings=None):
        manifest = {
            "stage": stage,
            "command": f"sglstm {stage}",
            "manifest_version": MANIFEST_VERSION,
            "package_version": __version__,
            "seed": self.cfg.seed,
            "settings": settings or {},
            "inputs": {self._key(p): sha256_file(p) for p in inputs},
            "outputs": {self._key(p): sha256_file(p) for p in outputs},
            "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "seconds": round(time.time() - started, 3),
        }
        mpath = self.path(f"{stage}.manifest.json")
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
        return mpath

    def read_manifest(self, stage):
        mpath = self.path(f"{stage}.manifest.json")
        if not mpath.exists():
            raise StageDependencyError(mpath, stage)
        return json.loads(mpath.read_text("utf-8"))

    def verify_chain(self, stages):
        """Check every recorded input and output hash of ``stages``."""
        for stage in stages:
            manifest = self.read_manifest(stage)
            for kind in ("inputs", "outputs"):
                for key, digest in manifest[kind].items():
                    p = Path(key) if Path(key).is_absolute() else self.path(key)
                    if not p.exists():
                        raise ChainError(f"{key} (an {kind[:-1]} of `sglstm {stage}`) is missing")
                    if sha256_file(p) != digest:
                        raise ChainError(
                            f"{key} changed since `sglstm {stage}` recorded it; rerun that stage and its successors"
                        )


# --- helpers -----------------------------------------------------------------


def _load_split(ws, split, part):
    samples, _ = read_corpus(ws.require(f"data_{split}.{part}.jsonl"), strict=True)
    return samples


def _load_features(samples, dim):
    """Load every feature up front, reporting all failures at once."""
    feats, errors = [], []
    for s in samples:
        try:
            feats.append(read_feature(s.feature_path, dim))
        except (DataError, DimensionError) as exc:
            errors.append(f"{s.image_id}: {exc}")
    if errors:
        raise DataError(f"{len(errors)} feature file(s) unusable: " + "; ".join(errors[:5]))
    return np.stack(feats) if feats else np.zeros((0, dim), np.float32)


def _encode(samples, vocab, cfg, guides=None):
    feats = _load_features(samples, cfg.d_img)
    return encode_set(
        [s.image_id for s in samples], feats, [encode(s.caption, vocab) for s in samples],
        vocab.hash(), guides, max_sentence_len=cfg.max_sentence_len, end_id=vocab.end_id,
    )


def _dims(cfg, vocab, gtf=0):
    return Dims(vocab=len(vocab), embed=cfg.d_embed, lstm=cfg.d_lstm, mm=cfg.d_mm, img=cfg.d_img,
                gtf=gtf, cell_tanh=cfg.cell_tanh)


def _seed(cfg, offset):
    return (cfg.seed + offset) % 2**64


def _feature_paths_exist(samples):
    return [s.image_id for s in samples if not Path(s.feature_path).exists()]


def metric_tokens(tokens):
    """Tokens scored by the metrics: punctuation is not counted."""
    return tuple(t for t in tokens if not is_punctuation(t))


# --- stages ------------------------------------------------------------------


def ingest(cfg):
    """Scrub the raw corpus, drop invalid records and write length stats."""
    started = time.time()
    ws = Workspace(cfg)
    if cfg.corpus is None:
        raise ConfigurationError("no corpus configured (set `corpus = <file>`)")
    corpus = Path(cfg.corpus)
    if not corpus.is_file():
        raise DataError(f"cannot read corpus file {corpus}")
    rules = load_scrub_rules(cfg.rules)
    samples, report = read_corpus(corpus, rules, feature_root=cfg.features_dir)
    if not samples:
        raise DataError(f"{corpus}: no valid records")
    missing = _feature_paths_exist(samples)
    if missing:
        log.warning("%d record(s) reference missing feature files, e.g. %s", len(missing), missing[0])

    out_corpus = ws.path("corpus.clean.jsonl")
    write_corpus(samples, out_corpus, absolute=True)
    diag = ws.path("ingest.diagnostics.tsv")
    with open(diag, "w", encoding="utf-8", newline="\n") as f:
        for line, msg in report.malformed:
            f.write(f"{line}\tmalformed\t{msg}\n")
        for line, image_id in report.duplicates:
            f.write(f"{line}\tduplicate\t{image_id}\n")
        for image_id in missing:
            f.write(f"-\tmissing-feature\t{image_id}\n")
    hist = length_stats(samples)
    stats = ws.path("length_stats.tsv")
    with open(stats, "w", encoding="utf-8", newline="\n") as f:
        f.write("bucket\timages\n")
        for label, n in hist.items():
            f.write(f"{label}\t{n}\n")
    fig = ws.path("length_stats.png")
    plot_length_histogram(hist, fig)

    inputs = [corpus] + ([Path(cfg.rules)] if cfg.rules else [])
    ws.write_manifest("ingest", inputs, [out_corpus, diag, stats, fig], started, {
        "kept": report.kept, "dropped_empty": report.dropped_empty,
        "malformed": len(report.malformed), "duplicates": len(report.duplicates),
        "missing_features": len(missing),
    })
    return report, hist


def split(cfg):
    """Partition by caption length, then carve seeded test and held-out slices."""
    started = time.time()
    ws = Workspace(cfg)
    src = ws.require("corpus.clean.jsonl")
    samples, _ = read_corpus(src, strict=True)
    data_s, data_l = split_corpus(samples, cfg.split_threshold)
    rng = make_rng(cfg.seed)
    outputs, counts = [], {}
    for name, part in zip(SPLITS, (data_s, data_l)):
        order = rng.permutation(len(part))
        n_test = min(cfg.test_count, len(part))
        n_held = min(cfg.heldout_count, len(part) - n_test)
        test_idx = set(order[:n_test].tolist())
        held_idx = set(order[n_test : n_test + n_held].tolist())
        groups = {
            "test": [s for i, s in enumerate(part) if i in test_idx],
            "heldout": [s for i, s in enumerate(part) if i in held_idx],
            "train": [s for i, s in enumerate(part) if i not in test_idx and i not in held_idx],
        }
        for pname in PARTS:
            p = ws.path(f"data_{name}.{pname}.jsonl")
            write_corpus(groups[pname], p, absolute=True)
            outputs.append(p)
            counts[f"{name}.{pname}"] = len(groups[pname])
    ws.write_manifest("split", [src], outputs, started, {"threshold": cfg.split_threshold, **counts})
    return counts


def vocab(cfg):
    """Shared vocabulary over both training splits."""
    started = time.time()
    ws = Workspace(cfg)
    inputs = [ws.require(f"data_{s}.train.jsonl") for s in SPLITS]
    corpus = [x for p in inputs for x in read_corpus(p, strict=True)[0]]
    allow = None
    if cfg.allowlist:
        inputs.append(Path(cfg.allowlist))
        allow = {w.strip().lower() for w in Path(cfg.allowlist).read_text("utf-8").split()}
    v = build_vocab(corpus, cfg.min_count, allow)
    out = ws.path("vocab.tsv")
    v.save(out)
    ws.write_manifest("vocab", inputs, [out], started, {"size": len(v), "hash": v.hash()})
    return v


def _train_stage(cfg, ws, stage, split_name, dims, init_offset, guides=None, extra=None, extra_inputs=()):
    started = time.time()
    vpath = ws.require("vocab.tsv")
    v = Vocabulary.load(vpath)
    train_set = _load_split(ws, split_name, "train")
    held_set = _load_split(ws, split_name, "heldout")
    if not train_set:
        raise DataError(f"data_{split_name}.train.jsonl is empty")
    g_train = g_held = None
    if guides is not None:
        g_train = guides([s.image_id for s in train_set])
        g_held = guides([s.image_id for s in held_set])
    data = _encode(train_set, v, cfg, g_train)
    heldout = _encode(held_set, v, cfg, g_held) if held_set else None
    if data.truncated:
        log.warning("%d caption(s) truncated to %d tokens", data.truncated, cfg.max_sentence_len)

    tcfg = cfg.training_config(stage)
    params = ModelParams.init(dims, make_rng(_seed(cfg, init_offset)), cfg.init_range)
    result = train(params, data, tcfg, v.hash(), heldout)

    name = "mlstm" if stage == "mlstm" else "sglstm"
    ckpt_path = ws.path(f"{name}.ckpt")
    save_checkpoint(Checkpoint(params, tcfg, v.hash(), result.epochs, tcfg.seed, result.opt_state, extra or {}),
                    ckpt_path)
    cost_path = ws.path(f"{name}.costlog.tsv")
    write_cost_log(result.log, cost_path)
    fig = ws.path(f"{name}.cost.png")
    plot_cost_log(result.log, fig, f"{name} training cost")
    inputs = [vpath, ws.path(f"data_{split_name}.train.jsonl"), ws.path(f"data_{split_name}.heldout.jsonl"),
              *extra_inputs]
    ws.write_manifest(f"train-{name}", inputs, [ckpt_path, cost_path, fig], started, {
        "dims": dims.to_dict(), "training": tcfg.to_dict(), "epochs_run": result.epochs,
        "steps": result.opt_state.step, "final_cost": result.log[-1].train_cost if result.log else None,
    })
    return result


def train_mlstm(cfg):
    ws = Workspace(cfg)
    v = Vocabulary.load(ws.require("vocab.tsv"))
    return _train_stage(cfg, ws, "mlstm", "s", _dims(cfg, v), 0)


def _scheme(cfg):
    return Scheme.parse(cfg.scheme)


def _word_table(cfg, ws, scheme, mlstm):
    """The word-vector table a scheme draws from (local vectors must exist)."""
    if scheme.source == "pretrained":
        if cfg.vectors is None:
            raise ConfigurationError(f"scheme {scheme} needs `vectors = <file>`")
        return load_pretrained_vectors(cfg.vectors, scheme.dim), [Path(cfg.vectors)]
    if scheme.source == "local":
        p = ws.require("local_vectors.txt")
        return load_pretrained_vectors(p, scheme.dim), [p]
    if scheme.dim != mlstm.params.dims.embed:
        raise ConfigurationError(
            f"scheme {scheme} needs {scheme.dim}-dim embeddings, the m-LSTM has {mlstm.params.dims.embed}"
        )
    return embedding_vectors(mlstm.params, Vocabulary.load(ws.require("vocab.tsv"))), []


def _idf(ws, scheme):
    if scheme.fusion != "tfidf":
        return None, []
    p = ws.require("data_s.train.jsonl")
    return compute_idf(read_corpus(p, strict=True)[0]), [p]


def _load_model(ws, name, v):
    ckpt = load_checkpoint(ws.require(f"{name}.ckpt"))
    ckpt.check_vocab(v)
    return ckpt


def gtf(cfg):
    """Guiding features for every long-caption image, from the m-LSTM's sentences."""
    started = time.time()
    ws = Workspace(cfg)
    scheme = _scheme(cfg)
    vpath = ws.require("vocab.tsv")
    v = Vocabulary.load(vpath)
    mlstm = _load_model(ws, "mlstm", v)
    if mlstm.params.dims.guided:
        raise ConfigurationError("mlstm.ckpt holds a guided model")
    split_paths = [ws.require(f"data_l.{p}.jsonl") for p in PARTS]
    samples = [s for p in split_paths for s in read_corpus(p, strict=True)[0]]
    if not samples:
        raise DataError("no long-caption images to guide")
    inputs = [vpath, ws.path("mlstm.ckpt"), *split_paths]
    outputs = []

    if scheme.source == "local":
        corpus = [s for sp in SPLITS for s in _load_split(ws, sp, "train")]
        sg = SkipGramConfig(cfg.sgns_window, cfg.sgns_negatives, cfg.sgns_epochs,
                            min_count=cfg.sgns_min_count, seed=_seed(cfg, 4))
        table = train_local_vectors(corpus, scheme.dim, sg)
        table.save(ws.path("local_vectors.txt"))
        outputs.append(ws.path("local_vectors.txt"))
        inputs.append(ws.path("data_s.train.jsonl"))
    table, table_inputs = _word_table(cfg, ws, scheme, mlstm)
    idf, idf_inputs = _idf(ws, scheme)
    inputs += [p for p in table_inputs + idf_inputs if p not in inputs and p not in outputs]

    _load_features(samples, mlstm.params.dims.img)  # fail before decoding anything
    cache = ws.path("gtf.cache")
    guides = build_gtf_cache(mlstm.params, v, samples, scheme, table, cache, idf,
                             beam_size=cfg.beam_size, max_len=cfg.max_len_short)
    sentences = ws.path("gtf.sentences.tsv")
    with open(sentences, "w", encoding="utf-8", newline="\n") as f:
        for s, g in zip(samples, guides):
            f.write(f"{s.image_id}\t{int(g.degenerate)}\t{detokenize(g.tokens)}\n")
    outputs += [cache, sentences]
    n_deg = sum(g.degenerate for g in guides)
    ws.write_manifest("gtf", inputs, outputs, started, {"scheme": scheme.descriptor, "images": len(guides),
                                                        "degenerate": n_deg})
    return guides


def train_sglstm(cfg):
    ws = Workspace(cfg)
    scheme = _scheme(cfg)
    cache = ws.require("gtf.cache")
    cached_scheme, records = read_gtf_cache(cache)
    if cached_scheme != scheme:
        raise ConfigurationError(
            f"gtf.cache holds {cached_scheme} features ({cached_scheme.dim}-dim) but the configured scheme is "
            f"{scheme} ({scheme.dim}-dim); rerun `sglstm gtf` or fix `scheme`"
        )
    v = Vocabulary.load(ws.require("vocab.tsv"))

    def guides(ids):
        missing = [i for i in ids if i not in records]
        if missing:
            raise DataError(f"gtf.cache has no guiding feature for {missing[0]!r}; rerun `sglstm gtf`")
        return np.stack([records[i] for i in ids]) if ids else None

    return _train_stage(cfg, ws, "sglstm", "l", _dims(cfg, v, scheme.dim), 2, guides,
                        {"scheme": scheme.descriptor}, [cache])


# --- inference ---------------------------------------------------------------


@dataclass
class CaptionResult:
    sentence: str
    score: float
    tokens: tuple
    guide_sentence: str | None = None


def caption(cfg, feature_path, model="sglstm", top_k=3):
    """Top-k captions with their (length-normalized) log2 scores for one image."""
    ws = Workspace(cfg)
    v = Vocabulary.load(ws.require("vocab.tsv"))
    name = model
    ckpt = _load_model(ws, name, v)
    feat = read_feature(feature_path, ckpt.params.dims.img)
    guide = guide_sentence = None
    max_len = cfg.max_len_short
    if ckpt.params.dims.guided:
        scheme = Scheme.parse(ckpt.extra.get("scheme", cfg.scheme))
        mlstm = _load_model(ws, "mlstm", v)
        table, _ = _word_table(cfg, ws, scheme, mlstm)
        idf, _ = _idf(ws, scheme)
        g = extract_gtf(mlstm.params, v, feat, scheme, table, idf, cfg.beam_size, cfg.max_len_short)
        guide, guide_sentence = g.vector, detokenize(g.tokens)
        max_len = cfg.max_len_long
    hyps = beam_search(ckpt.params, feat, guide, max(cfg.beam_size, top_k), max_len, cfg.normalize_scores,
                       v.start_id, v.end_id)
    out = []
    for h in hyps[:top_k]:
        if not math.isfinite(h.logprob):
            continue
        toks = tuple(v.token(t) for t in h.tokens if t not in (v.start_id, v.end_id))
        out.append(CaptionResult(detokenize(toks), h.score(cfg.normalize_scores), toks, guide_sentence))
    return out


def evaluate(cfg, model="sglstm", split_name=None, subset="auto"):
    """Decode an evaluation slice, score it and write the reports.

    ``subset`` is ``test``, ``train`` or ``auto`` (test when non-empty). Refuses
    to run if any file in the model's stage chain changed since it was recorded.
    """
    started = time.time()
    ws = Workspace(cfg)
    if model not in LINEAGE:
        raise ConfigurationError(f"unknown model {model!r}; expected one of {sorted(LINEAGE)}")
    split_name = split_name or ("l" if model == "sglstm" else "s")
    ws.verify_chain(LINEAGE[model])
    vpath = ws.require("vocab.tsv")
    v = Vocabulary.load(vpath)
    ckpt = _load_model(ws, model, v)
    if subset == "auto":
        subset = "test" if _load_split(ws, split_name, "test") else "train"
        if subset == "train":
            log.warning("data_%s.test.jsonl is empty; scoring the training slice", split_name)
    data_path = ws.require(f"data_{split_name}.{subset}.jsonl")
    samples = _load_split(ws, split_name, subset)
    if not samples:
        raise DataError(f"{data_path.name} is empty")
    feats = _load_features(samples, ckpt.params.dims.img)
    inputs = [vpath, ws.path(f"{model}.ckpt"), data_path]
    guides = [None] * len(samples)
    max_len = cfg.max_len_short
    if ckpt.params.dims.guided:
        cache = ws.require("gtf.cache")
        _, g = load_guides_for(cache, [s.image_id for s in samples], ckpt.extra.get("scheme"))
        guides = list(g)
        inputs.append(cache)
        max_len = cfg.max_len_long

    pairs, n_missing = [], 0
    for s, f, g in zip(samples, feats, guides):
        try:
            toks = top1_sentence(ckpt.params, v, f, g, cfg.beam_size, max_len)
        except DegenerateOutputError:
            toks = []
        cand = metric_tokens(toks)
        if not cand:
            n_missing += 1
            continue
        pairs.append(EvalPair.make(s.image_id, cand, [metric_tokens(s.caption.tokens)]))
    if not pairs:
        raise DataError("the model produced no usable caption for any image")
    report = score_corpus(pairs, n_missing, cfg.cider_length_penalty)

    stem = f"eval.{model}.{split_name}.{subset}"
    metrics_path = ws.path(f"{stem}.metrics.tsv")
    metrics_path.write_text(report.to_tsv(), "utf-8")
    breakdown = ws.path(f"{stem}.breakdown.tsv")
    write_breakdown(per_pair_scores(pairs, cfg.cider_length_penalty), breakdown, detokenize)
    fig = ws.path(f"{stem}.png")
    plot_metrics(report, fig, f"{model} on data_{split_name} {subset}")
    ws.write_manifest(f"evaluate-{model}-{split_name}-{subset}", inputs, [metrics_path, breakdown, fig],
                      started, {"model": model, "split": split_name, "subset": subset, **report.as_dict()})
    return report, metrics_path


def run_all(cfg, evaluate_models=("mlstm", "sglstm")):
    """Every stage in order; returns the metric reports by model."""
    ingest(cfg)
    split(cfg)
    vocab(cfg)
    train_mlstm(cfg)
    gtf(cfg)
    train_sglstm(cfg)
    return {m: evaluate(cfg, m)[0] for m in evaluate_models}
