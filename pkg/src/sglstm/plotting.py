"""Report figures written next to the tab-separated outputs."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no Software/date metadata, so reruns give identical files
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_length_histogram(hist, path, title="Description lengths"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = list(hist)
    counts = [hist[k] for k in labels]
    ax.bar(labels, counts, color="#4c72b0")
    for x, c in enumerate(counts):
        ax.annotate(str(c), (x, c), ha="center", va="bottom", fontsize=8)
    ax.set_xlabel("words per description")
    ax.set_ylabel("images")
    ax.set_title(title)
    _save(fig, path)


def plot_cost_log(records, path, title="Training cost"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = [r.epoch for r in records]
    ax.plot(epochs, [r.train_cost for r in records], label="train (dropout)", lw=1)
    held = [r.heldout_cost for r in records]
    if any(not math.isnan(h) for h in held):
        ax.plot(epochs, held, label="held-out", lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("bits per word + L2")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_metrics(report, path, title="Caption metrics"):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 3.2), gridspec_kw={"width_ratios": [5, 1]})
    values = report.as_dict()
    names = [n for n in values if n != "CIDEr"]
    ax1.bar(names, [values[n] for n in names], color="#55a868")
    ax1.set_ylim(0, 1)
    ax1.tick_params(axis="x", labelrotation=30)
    ax2.bar(["CIDEr"], [values["CIDEr"]], color="#c44e52")
    ax2.set_ylim(0, 10)
    fig.suptitle(f"{title} ({report.n_pairs} images)")
    _save(fig, path)
