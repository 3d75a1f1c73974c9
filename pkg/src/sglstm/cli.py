"""Command-line driver: ``sglstm <command> [--config FILE] [--seed N] ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 configuration error.
"""

import argparse
import logging
import sys

from . import __version__, pipeline
from .config import load_config
from .errors import ConfigurationError, SgLstmError
from .features import DEFAULT_DIM, pack_directory

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONFIG = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", metavar="FILE", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--workdir", help="working directory (overrides the config)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="sglstm", description="Guided LSTM image captioning pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="scrub the raw corpus and write length statistics")
    _common(p)
    p.add_argument("--corpus", help="raw corpus file (JSON lines)")
    p.add_argument("--rules", help="scrub rules file (pattern<TAB>replacement)")

    p = sub.add_parser("split", help="partition into short and long caption sets")
    _common(p)
    p.add_argument("--threshold", type=int, help="word count separating the sets")

    p = sub.add_parser("vocab", help="build the shared vocabulary")
    _common(p)
    p.add_argument("--min-count", type=int)

    for name, helptext in (("train-mlstm", "train the short-caption m-LSTM"),
                           ("train-sglstm", "train the guided LSTM on long captions")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--epochs", type=int)
        p.add_argument("--max-steps", type=int)

    p = sub.add_parser("gtf", help="build the guiding-feature cache")
    _common(p)
    p.add_argument("--scheme", help='e.g. "pretrained-50+tfidf"')

    p = sub.add_parser("caption", help="caption one image feature file")
    _common(p)
    p.add_argument("feature", help="image feature file")
    p.add_argument("--model", choices=("sglstm", "mlstm"), default="sglstm")
    p.add_argument("--top-k", type=int, default=3)

    p = sub.add_parser("evaluate", help="decode an evaluation slice and score it")
    _common(p)
    p.add_argument("--model", choices=("sglstm", "mlstm"), default="sglstm")
    p.add_argument("--split", choices=("s", "l"))
    p.add_argument("--subset", choices=("auto", "test", "train"), default="auto")

    p = sub.add_parser("feature-pack", help="convert .npy/.txt vectors into feature files")
    _common(p)
    p.add_argument("src", help="directory of vectors")
    p.add_argument("dst", help="output directory")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    return parser


# stage-specific flag -> config key
_FLAG_KEYS = {
    "corpus": "corpus", "rules": "rules", "threshold": "split_threshold", "min_count": "min_count",
    "scheme": "scheme", "workdir": "workdir", "seed": "seed",
}


def _config(args):
    overrides = list(args.overrides)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    stage = {"train-mlstm": "mlstm", "train-sglstm": "sglstm"}.get(args.command)
    if stage:
        if args.epochs is not None:
            overrides.append(f"{stage}_epochs={args.epochs}")
        if args.max_steps is not None:
            overrides.append(f"{stage}_max_steps={args.max_steps}")
    return load_config(args.config, overrides)


def _run(args, out):
    cfg = _config(args)
    cmd = args.command
    if cmd == "ingest":
        report, hist = pipeline.ingest(cfg)
        print(f"kept {report.kept}, dropped empty {report.dropped_empty}, "
              f"malformed {len(report.malformed)}, duplicates {len(report.duplicates)}", file=out)
        for line, msg in report.malformed:
            print(f"line {line}: {msg}", file=sys.stderr)
        for label, n in hist.items():
            print(f"{label}\t{n}", file=out)
    elif cmd == "split":
        for name, n in pipeline.split(cfg).items():
            print(f"{name}\t{n}", file=out)
    elif cmd == "vocab":
        v = pipeline.vocab(cfg)
        print(f"vocabulary size {len(v)}, hash {v.hash()}", file=out)
    elif cmd in ("train-mlstm", "train-sglstm"):
        fn = pipeline.train_mlstm if cmd == "train-mlstm" else pipeline.train_sglstm
        result = fn(cfg)
        for rec in result.log[-5:]:
            print(rec.line(), file=out)
    elif cmd == "gtf":
        guides = pipeline.gtf(cfg)
        print(f"{len(guides)} guiding features, {sum(g.degenerate for g in guides)} degenerate", file=out)
    elif cmd == "caption":
        if args.top_k < 1:
            raise ConfigurationError("--top-k must be at least 1")
        results = pipeline.caption(cfg, args.feature, args.model, args.top_k)
        if results and results[0].guide_sentence is not None:
            print(f"guide\t{results[0].guide_sentence}", file=out)
        for rank, r in enumerate(results, 1):
            print(f"{rank}\t{r.score:.4f}\t{r.sentence}", file=out)
    elif cmd == "evaluate":
        report, path = pipeline.evaluate(cfg, args.model, args.split, args.subset)
        out.write(report.to_tsv())
        print(f"wrote {path}", file=sys.stderr)
    elif cmd == "feature-pack":
        written, errors = pack_directory(args.src, args.dst, args.dim)
        for name, msg in errors:
            print(f"{name}: {msg}", file=sys.stderr)
        print(f"wrote {len(written)} feature file(s), refused {len(errors)}", file=out)
        if errors:
            return EXIT_DATA
    return EXIT_OK


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args, out)
    except SgLstmError as exc:
        print(f"sglstm {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"sglstm {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
