"""Pipeline configuration: flat ``key = value`` files plus command-line overrides.

Blank lines and ``#`` comments are ignored. Keys are the field names of
:class:`PipelineConfig`; values are parsed according to the field type
(``none`` clears an optional value).
"""

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError, ParseError
from .training import TrainingConfig


@dataclass
class PipelineConfig:
    # paths
    workdir: str = "run"
    corpus: str | None = None
    rules: str | None = None  # scrub rules; bundled set when unset
    allowlist: str | None = None  # optional typo filter for alphabetic tokens
    features_dir: str | None = None  # base for relative feature paths (default: corpus dir)
    vectors: str | None = None  # pretrained word-vector file

    # corpus
    split_threshold: int = 10
    min_count: int = 3
    test_count: int = 0  # per split, held out for evaluation
    heldout_count: int = 0  # per split, held out for the cost log

    # model
    d_embed: int = 1024
    d_lstm: int = 2048
    d_mm: int = 2048
    d_img: int = 2048
    cell_tanh: bool = False
    init_range: float = 0.08

    # training (shared by both stages unless a stage override is set)
    learning_rate: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    batch_size: int = 64
    l2: float = 1e-5
    dropout: float = 0.5
    max_sentence_len: int = 60
    clip_norm: float | None = None
    mlstm_epochs: int = 10
    mlstm_max_steps: int | None = None
    sglstm_epochs: int = 10
    sglstm_max_steps: int | None = None

    # guiding features
    scheme: str = "pretrained-50+tfidf"
    sgns_window: int = 5
    sgns_negatives: int = 5
    sgns_epochs: int = 5
    sgns_min_count: int = 3

    # decoding
    beam_size: int = 3
    max_len_short: int = 20
    max_len_long: int = 60
    normalize_scores: bool = True
    cider_length_penalty: bool = False

    seed: int = 0

    def training_config(self, stage):
        epochs = self.mlstm_epochs if stage == "mlstm" else self.sglstm_epochs
        steps = self.mlstm_max_steps if stage == "mlstm" else self.sglstm_max_steps
        seed = (self.seed + (1 if stage == "mlstm" else 3)) % 2**64
        return TrainingConfig(
            learning_rate=self.learning_rate, rho=self.rho, eps=self.eps, batch_size=self.batch_size,
            l2=self.l2, dropout=self.dropout, max_epochs=epochs, max_steps=steps, seed=seed,
            max_sentence_len=self.max_sentence_len, clip_norm=self.clip_norm,
        )

    def set(self, key, raw):
        field_types = {f.name: f.type for f in fields(self)}
        if key not in field_types:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        setattr(self, key, _parse_value(key, raw, field_types[key]))


def _parse_value(key, raw, ftype):
    raw = raw.strip()
    if isinstance(ftype, str):
        ftype = eval(ftype, {"str": str, "int": int, "float": float, "bool": bool, "None": None})  # noqa: S307
    optional = type(None) in typing.get_args(ftype)
    base = next((t for t in typing.get_args(ftype) if t is not type(None)), ftype)
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if base is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return base(raw)
    except ValueError:
        raise ConfigurationError(f"bad value {raw!r} for {key}") from None


def load_config(path=None, overrides=()):
    """Read a config file (optional) and apply ``key=value`` overrides in order.

    Relative paths in the file are resolved against the file's directory.
    """
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        for lineno, line in enumerate(path.read_text("utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected key = value", lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        for key in ("workdir", "corpus", "rules", "allowlist", "features_dir", "vectors"):
            value = getattr(cfg, key)
            if value is not None and not Path(value).is_absolute():
                setattr(cfg, key, str(path.parent / value))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def config_items(cfg):
    return dataclasses.asdict(cfg)
