import pytest

from sglstm.config import PipelineConfig, config_items, load_config
from sglstm.errors import ConfigurationError, ParseError


def test_defaults_follow_published_sizes():
    cfg = PipelineConfig()
    assert (cfg.d_embed, cfg.d_lstm, cfg.d_mm, cfg.d_img) == (1024, 2048, 2048, 2048)
    assert (cfg.batch_size, cfg.dropout, cfg.beam_size, cfg.split_threshold, cfg.min_count) == (64, 0.5, 3, 10, 3)


def test_file_and_overrides(tmp_path):
    (tmp_path / "a.cfg").write_text("# comment\nd_embed = 32  # trailing\n\nscheme = local-128+average\n"
                                    "corpus = data/c.jsonl\ncell_tanh = yes\nclip_norm = 5\n")
    cfg = load_config(tmp_path / "a.cfg", ["d_embed=16", "clip_norm=none"])
    assert cfg.d_embed == 16
    assert cfg.scheme == "local-128+average"
    assert cfg.corpus == str(tmp_path / "data/c.jsonl")
    assert cfg.cell_tanh is True
    assert cfg.clip_norm is None


def test_training_config_seed_offsets():
    cfg = load_config(overrides=["seed=10", "learning_rate=0.01", "mlstm_epochs=3", "sglstm_max_steps=7"])
    m, s = cfg.training_config("mlstm"), cfg.training_config("sglstm")
    assert (m.seed, s.seed) == (11, 13)
    assert (m.learning_rate, m.max_epochs, s.max_steps) == (0.01, 3, 7)


@pytest.mark.parametrize("item", ["nosuchkey=1", "d_embed=abc", "cell_tanh=maybe", "d_embed"])
def test_bad_overrides(item):
    with pytest.raises(ConfigurationError):
        load_config(overrides=[item])


def test_line_without_equals_is_parse_error(tmp_path):
    (tmp_path / "a.cfg").write_text("seed = 1\nbogus line\n")
    with pytest.raises(ParseError, match="line 2"):
        load_config(tmp_path / "a.cfg")


def test_config_items_lists_every_key():
    items = config_items(PipelineConfig())
    assert {"workdir", "scheme", "seed", "learning_rate"} <= set(items)
