import dataclasses
import json
import shutil

import pytest

from sglstm import pipeline
from sglstm.checkpoint import load_checkpoint
from sglstm.config import load_config
from sglstm.errors import ChainError, ConfigurationError, DataError, StageDependencyError
from sglstm.fixture import fixture_dir
from sglstm.text import read_corpus


@pytest.fixture
def run_copy(toy_run, tmp_path):
    """A private, writable copy of the shared toy workdir."""
    cfg, _ = toy_run
    dst = tmp_path / "work"
    shutil.copytree(cfg.workdir, dst)
    return dataclasses.replace(cfg, workdir=str(dst))


def test_every_stage_leaves_a_manifest(toy_run):
    cfg, _ = toy_run
    ws = pipeline.Workspace(cfg)
    for stage in pipeline.LINEAGE["sglstm"]:
        m = ws.read_manifest(stage)
        assert m["stage"] == stage and m["seed"] == cfg.seed
        assert m["outputs"]


def test_split_respects_threshold(toy_run):
    cfg, _ = toy_run
    ws = pipeline.Workspace(cfg)
    short, _ = read_corpus(ws.path("data_s.train.jsonl"))
    long_, _ = read_corpus(ws.path("data_l.train.jsonl"))
    assert len(short) == len(long_) == 10
    assert all(s.caption.word_count < cfg.split_threshold for s in short)
    assert all(s.caption.word_count >= cfg.split_threshold for s in long_)


def test_report_files_and_figures(toy_run):
    cfg, reports = toy_run
    ws = pipeline.Workspace(cfg)
    for model, split in (("mlstm", "s"), ("sglstm", "l")):
        stem = f"eval.{model}.{split}.train"
        assert ws.path(f"{stem}.metrics.tsv").read_text() == reports[model].to_tsv()
        assert len(ws.path(f"{stem}.breakdown.tsv").read_text().splitlines()) == reports[model].n_pairs
        assert ws.path(f"{stem}.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    for fig in ("length_stats.png", "mlstm.cost.png", "sglstm.cost.png"):
        assert ws.path(fig).stat().st_size > 0


def test_reports_within_metric_ranges(toy_run):
    _, reports = toy_run
    for rep in reports.values():
        assert all(0 <= b <= 1 for b in rep.bleu) and 0 <= rep.rouge_l <= 1 and 0 <= rep.cider <= 10


def test_guided_checkpoint_records_scheme(toy_run):
    cfg, _ = toy_run
    ck = load_checkpoint(pipeline.Workspace(cfg).path("sglstm.ckpt"))
    assert ck.extra["scheme"] == cfg.scheme
    assert ck.params.dims.gtf == 50


def test_caption_returns_ranked_top_k(toy_run):
    cfg, _ = toy_run
    feat = fixture_dir() / "features" / "nyc_l00.nycf"
    results = pipeline.caption(cfg, feat, "sglstm", top_k=3)
    assert len(results) == 3
    assert [r.score for r in results] == sorted((r.score for r in results), reverse=True)
    assert results[0].guide_sentence
    assert pipeline.caption(cfg, feat, "mlstm", top_k=1)[0].guide_sentence is None


def test_missing_dependency_names_producer(tmp_path):
    cfg = load_config(fixture_dir() / "toy.cfg", [f"workdir={tmp_path}"])
    with pytest.raises(StageDependencyError, match="sglstm ingest"):
        pipeline.split(cfg)
    with pytest.raises(StageDependencyError, match="sglstm train-mlstm"):
        pipeline.Workspace(cfg).require("mlstm.ckpt")


def test_scheme_mismatch_refused(run_copy):
    cfg = dataclasses.replace(run_copy, scheme="pretrained-300+tfidf")
    with pytest.raises(ConfigurationError, match="300"):
        pipeline.train_sglstm(cfg)


def test_tampered_chain_refused(run_copy):
    path = pipeline.Workspace(run_copy).path("gtf.cache")
    data = bytearray(path.read_bytes())
    data[-1] ^= 1
    path.write_bytes(bytes(data))
    with pytest.raises(ChainError, match="gtf.cache"):
        pipeline.evaluate(run_copy, "sglstm")
    # the short-caption model does not depend on the cache
    pipeline.evaluate(run_copy, "mlstm")


def test_tampered_split_refused_for_both_models(run_copy):
    path = pipeline.Workspace(run_copy).path("data_l.train.jsonl")
    path.write_text(path.read_text() + "\n")
    for model in ("mlstm", "sglstm"):
        with pytest.raises(ChainError, match="data_l.train.jsonl"):
            pipeline.evaluate(run_copy, model)


def test_missing_manifest_is_dependency_error(run_copy):
    pipeline.Workspace(run_copy).path("gtf.manifest.json").unlink()
    with pytest.raises(StageDependencyError, match="sglstm gtf"):
        pipeline.evaluate(run_copy, "sglstm")


def test_ingest_scrubs_and_reports(tmp_path):
    feat = fixture_dir() / "features" / "nyc_s00.nycf"
    rows = [
        {"id": "a", "caption": "Central Park http://flic.kr/p/x in the snow", "feature_path": str(feat)},
        {"id": "b", "caption": "   ", "feature_path": str(feat)},
        {"id": "a", "caption": "duplicate id", "feature_path": str(feat)},
        {"id": "c", "caption": "missing feature file", "feature_path": "nope.nycf"},
    ]
    corpus = tmp_path / "c.jsonl"
    corpus.write_text("\n".join(json.dumps(r) for r in rows) + "\n{not json\n")
    cfg = load_config(overrides=[f"workdir={tmp_path / 'w'}", f"corpus={corpus}"])
    report, hist = pipeline.ingest(cfg)
    assert report.kept == 2 and report.dropped_empty == 1
    assert len(report.duplicates) == 1 and len(report.malformed) == 1
    kept, _ = read_corpus(tmp_path / "w" / "corpus.clean.jsonl")
    assert kept[0].caption.tokens == ("central", "park", "in", "the", "snow")
    diag = (tmp_path / "w" / "ingest.diagnostics.tsv").read_text()
    assert "duplicate" in diag and "missing-feature\tc" in diag
    assert sum(hist.values()) == 2


def test_ingest_without_records(tmp_path):
    (tmp_path / "c.jsonl").write_text("")
    cfg = load_config(overrides=[f"workdir={tmp_path / 'w'}", f"corpus={tmp_path / 'c.jsonl'}"])
    with pytest.raises(DataError):
        pipeline.ingest(cfg)


def test_stage_rerun_is_byte_identical(run_copy):
    ws = pipeline.Workspace(run_copy)
    before = {n: ws.path(n).read_bytes() for n in ("vocab.tsv", "gtf.cache", "gtf.sentences.tsv")}
    pipeline.vocab(run_copy)
    pipeline.gtf(run_copy)
    assert {n: ws.path(n).read_bytes() for n in before} == before
