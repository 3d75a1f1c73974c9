"""Procedural 20-image toy corpus used by the end-to-end tests.

Ten scenes each get a random 2048-dim base vector. Short-caption images are
their scene vector plus a little noise; each long-caption image mixes the base
vector of a related scene with more noise, so the short-caption model has
something sensible to say about it. Every word occurs at least three times, so
the default vocabulary keeps all of them (50 ids with the reserved tokens).
"""

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .features import write_feature
from .tensor_math import make_rng
from .text import tokenize

SHORT_CAPTIONS = (
    "central park in the snow",
    "the brooklyn bridge at night",
    "times square at night",
    "sunset over the hudson river",
    "macy's thanksgiving day parade",
    "grand central terminal",
    "empire state building at sunset",
    "walking in central park",
    "snow on the brooklyn bridge",
    "the hudson river at night",
)

# (caption, index of the related short-caption scene)
LONG_CAPTIONS = (
    ("we took a long day walking in central park in the snow with my friends .", 0),
    ("view of the brooklyn bridge at night from the river , so beautiful with the lights !", 1),
    ("times square at night is full of lights , people and my friends .", 2),
    ("a beautiful sunset over the hudson river from central park with my friends .", 3),
    ("the macy's thanksgiving day parade on a cold day is so full of people !", 4),
    ("grand central terminal is full of people walking at night from a long day .", 5),
    ("view of the empire state building at sunset over the brooklyn bridge .", 6),
    ("walking in central park on a cold day , the snow is so beautiful !", 7),
    ("we took a view of grand central terminal and the macy's thanksgiving day parade .", 5),
    ("we took a long cold night in times square and the lights of the empire state building .", 2),
)

# present in the toy vector file but never in captions, like a real table
EXTRA_VECTOR_WORDS = ("bronx", "queens", "harlem", "subway", "ferry", "skyline")

FEATURE_DIM = 2048
VECTOR_DIM = 50
FEATURE_SCALE = 0.25


def fixture_dir():
    """Directory of the bundled fixture inside the installed package."""
    return Path(str(resources.files("sglstm").joinpath("fixtures/toy")))


def make_toy_fixture(out_dir, seed=20170523):
    """Write corpus.jsonl, features/*.nycf and vectors50.txt into ``out_dir``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    scenes = rng.normal(0.0, FEATURE_SCALE, size=(len(SHORT_CAPTIONS), FEATURE_DIM))

    records = []
    for k, caption in enumerate(SHORT_CAPTIONS):
        feat = scenes[k] + rng.normal(0.0, 0.3 * FEATURE_SCALE, FEATURE_DIM)
        records.append((f"nyc_s{k:02d}", caption, feat))
    for k, (caption, scene) in enumerate(LONG_CAPTIONS):
        feat = 0.6 * scenes[scene] + rng.normal(0.0, 0.8 * FEATURE_SCALE, FEATURE_DIM)
        records.append((f"nyc_l{k:02d}", caption, feat))

    with open(out / "corpus.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for image_id, caption, feat in records:
            rel = f"features/{image_id}.nycf"
            write_feature(out / rel, feat, FEATURE_DIM)
            f.write(json.dumps({"id": image_id, "caption": caption, "feature_path": rel}) + "\n")

    words = sorted({t for c in SHORT_CAPTIONS for t in tokenize(c)}
                   | {t for c, _ in LONG_CAPTIONS for t in tokenize(c)})
    words += list(EXTRA_VECTOR_WORDS)
    vecs = rng.normal(0.0, 0.5, size=(len(words), VECTOR_DIM))
    with open(out / "vectors50.txt", "w", encoding="utf-8", newline="\n") as f:
        for w, v in zip(words, vecs):
            f.write(w + " " + " ".join(f"{x:.6f}" for x in v) + "\n")
    return out
