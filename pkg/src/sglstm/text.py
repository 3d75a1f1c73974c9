"""Tokenization, vocabulary, encoding and length-based corpus splitting.

Corpus files are UTF-8 JSON lines, one record per line::

    {"id": "img_0001", "caption": "central park in the snow", "feature_path": "features/img_0001.nycf"}

``feature_path`` is resolved relative to the corpus file's directory.
"""

import hashlib
import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import DataError, ParseError

START = "<start>"
END = "<end>"
UNK = "<unk>"
RESERVED = (START, END, UNK)

PUNCTUATION = frozenset(",.!?")

# kept verbatim (no lowercasing) and never split
EMOTICONS = (
    ":-)", ":-(", ":-P", ":-p", ":-D", ":-O", ":-o", ":-/", ":-|", ";-)",
    ":)", ":(", ":P", ":p", ":D", ":O", ":o", ";)", ":'(", "<3", "^_^", "xD", "XD",
)

_EMOTICON_RE = "|".join(
    re.escape(e) for e in sorted(EMOTICONS, key=len, reverse=True)
)
_TOKEN_RE = re.compile(
    rf"(?P<emo>(?<!\w)(?:{_EMOTICON_RE})(?!\w))"
    r"|(?P<num>\d+(?:[.,:/]\d+)+)"
    r"|(?P<word>[^\W_]+(?:['’\-][^\W_]+)*)"
    r"|(?P<punct>[,.!?])"
)

LENGTH_BUCKETS = ((1, 5), (6, 10), (11, 15), (16, 25), (26, None))
BUCKET_LABELS = ("1-5", "6-10", "11-15", "16-25", ">=26")


def tokenize(text):
    tokens = []
    for m in _TOKEN_RE.finditer(text):
        if m.lastgroup == "emo":
            tokens.append(m.group())
        else:
            tokens.append(m.group().lower().replace("’", "'"))
    return tokens


def is_punctuation(token):
    return token in PUNCTUATION


def word_count(text):
    """Number of whitespace-delimited chunks that carry at least one word.

    A chunk counts if it tokenizes to something other than bare sentence
    punctuation, so ``"snow , ice"`` has two words and ``":-)"`` has one.
    """
    n = 0
    for chunk in text.split():
        if any(not is_punctuation(t) for t in tokenize(chunk)):
            n += 1
    return n


@dataclass(frozen=True)
class Caption:
    raw: str
    tokens: tuple
    word_count: int

    @classmethod
    def from_text(cls, text):
        return cls(text, tuple(tokenize(text)), word_count(text))


@dataclass(frozen=True)
class Sample:
    image_id: str
    feature_path: str
    caption: Caption


class Vocabulary:
    """Bidirectional token/id map. Ids 0, 1, 2 are start, end and unknown."""

    def __init__(self, tokens, counts=None):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            raise DataError("vocabulary must begin with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.counts = dict(counts or {})

    start_id = 0
    end_id = 1
    unk_id = 2

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token):
        return self.stoi.get(token, self.unk_id)

    def token(self, idx):
        if not 0 <= idx < len(self.itos):
            raise DataError(f"token id {idx} outside vocabulary of size {len(self)}")
        return self.itos[idx]

    def words(self):
        """Non-reserved tokens in id order."""
        return self.itos[3:]

    def hash(self):
        h = hashlib.sha256("\n".join(self.itos).encode("utf-8"))
        return h.hexdigest()[:16]

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for i, tok in enumerate(self.itos):
                f.write(f"{i}\t{tok}\t{self.counts.get(tok, 0)}\n")

    @classmethod
    def load(cls, path):
        tokens, counts = [], {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3 or parts[0] != str(len(tokens)):
                    raise ParseError("malformed vocabulary row", lineno)
                tokens.append(parts[1])
                if parts[1] not in RESERVED:
                    counts[parts[1]] = int(parts[2])
        return cls(tokens, counts)


def build_vocab(corpus, min_count=3, allowlist=None):
    """Vocabulary of tokens seen at least ``min_count`` times in ``corpus``.

    ``corpus`` is a sequence of samples, captions or token lists. With an
    ``allowlist``, purely alphabetic tokens outside it are excluded (a stand-in
    for dictionary-based typo filtering).
    """
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for item in corpus:
        counts.update(_tokens_of(item))
    kept = [
        t for t, c in counts.items()
        if c >= min_count and t not in RESERVED
        and (allowlist is None or not t.isalpha() or t in allowlist)
    ]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept, {t: counts[t] for t in kept})


def _tokens_of(item):
    if isinstance(item, Sample):
        return item.caption.tokens
    if isinstance(item, Caption):
        return item.tokens
    return item


def encode(caption, vocab):
    tokens = _tokens_of(caption)
    return [vocab.start_id] + [vocab.id(t) for t in tokens] + [vocab.end_id]


def detokenize(tokens):
    out = ""
    for tok in tokens:
        if out and not is_punctuation(tok):
            out += " "
        out += tok
    return out


def decode(ids, vocab):
    tokens = [vocab.token(int(i)) for i in ids]
    return detokenize([t for t in tokens if t not in RESERVED])


def split_corpus(corpus, threshold=10):
    """Partition into (short, long) by caption word count."""
    data_s = [s for s in corpus if s.caption.word_count < threshold]
    data_l = [s for s in corpus if s.caption.word_count >= threshold]
    return data_s, data_l


def length_stats(corpus):
    """Caption counts per length bucket, keyed by bucket label."""
    hist = dict.fromkeys(BUCKET_LABELS, 0)
    for s in corpus:
        n = s.caption.word_count
        for (lo, hi), label in zip(LENGTH_BUCKETS, BUCKET_LABELS):
            if n >= lo and (hi is None or n <= hi):
                hist[label] += 1
                break
    return hist


# --- scrubbing and corpus IO -------------------------------------------------


@dataclass
class ScrubRule:
    pattern: re.Pattern
    replacement: str


def load_scrub_rules(path=None):
    """Read ``pattern<TAB>replacement`` rules; defaults to the bundled set."""
    if path is None:
        text = resources.files("sglstm").joinpath("data/scrub_rules.tsv").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "\t" not in line:
            raise ParseError("scrub rule must be pattern<TAB>replacement", lineno)
        pattern, replacement = line.split("\t", 1)
        try:
            rules.append(ScrubRule(re.compile(pattern, re.IGNORECASE), replacement))
        except re.error as exc:
            raise ParseError(f"bad pattern {pattern!r}: {exc}", lineno) from None
    return rules


def scrub(text, rules):
    for rule in rules:
        text = rule.pattern.sub(rule.replacement, text)
    return text.strip()


@dataclass
class IngestReport:
    kept: int = 0
    dropped_empty: int = 0
    malformed: list = field(default_factory=list)  # (line, message)
    duplicates: list = field(default_factory=list)


def read_corpus(path, rules=None, strict=False, feature_root=None):
    """Load a corpus file, applying scrub rules and dropping empty captions.

    Relative feature paths resolve against ``feature_root`` (default: the
    corpus file's directory). Returns ``(samples, report)``. Malformed lines
    are recorded in the report (or raised when ``strict``).
    """
    path = Path(path)
    base = Path(feature_root) if feature_root is not None else path.parent
    samples, seen = [], set()
    report = IngestReport()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_id = rec["id"]
                text = rec["caption"]
                feature_path = rec["feature_path"]
                if not all(isinstance(v, str) for v in (image_id, text, feature_path)):
                    raise TypeError("fields must be strings")
            except (ValueError, KeyError, TypeError) as exc:
                if strict:
                    raise ParseError(f"malformed record: {exc}", lineno) from None
                report.malformed.append((lineno, str(exc)))
                continue
            if image_id in seen:
                report.duplicates.append((lineno, image_id))
                continue
            if rules:
                text = scrub(text, rules)
            caption = Caption.from_text(text)
            if caption.word_count == 0:
                report.dropped_empty += 1
                continue
            seen.add(image_id)
            fp = Path(feature_path)
            if not fp.is_absolute():
                fp = base / fp
            samples.append(Sample(image_id, str(fp), caption))
    report.kept = len(samples)
    return samples, report


def write_corpus(samples, path, relative_to=None, absolute=False):
    """Write samples as JSON lines; feature paths are made relative to
    ``relative_to`` (default: the output file's directory), or written as
    absolute paths when ``absolute`` is set."""
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            fp = Path(s.feature_path).resolve()
            if not absolute:
                fp = os.path.relpath(fp, base.resolve())
            rec = {"id": s.image_id, "caption": s.caption.raw, "feature_path": Path(fp).as_posix()}
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
