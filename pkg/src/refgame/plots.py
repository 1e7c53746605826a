"""SVG renderings of report tables (needs the optional matplotlib dependency)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp, so identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "refgame"
SVG_META = {"Date": None, "Creator": None}


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def learning_curves(out: Path, rows, keys) -> None:
    col = {k: 4 + i for i, k in enumerate(keys)}
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, loss in zip(axes, ("ce", "ce_rsa")):
        val = [r for r in rows if r[0] == loss and r[1] == "validation"]
        if not val:
            ax.set_visible(False)
            continue
        epochs = [r[2] for r in val]
        for key, style in (("rsa_sl", "-"), ("rsa_si", "--"), ("rsa_li", ":")):
            ax.plot(epochs, [r[col[key]] for r in val], style, label=key)
        ax.set_title(loss)
        ax.set_xlabel("epoch")
        ax.legend()
    axes[0].set_ylabel("RSA (validation)")
    _save(fig, out / "learning_curves.svg")


def bar_summary(out: Path, bars) -> None:
    losses = sorted({b[0] for b in bars})
    datasets = list(dict.fromkeys(b[1] for b in bars))
    width = 0.8 / max(len(losses), 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, loss in enumerate(losses):
        lookup = {b[1]: b for b in bars if b[0] == loss}
        xs = [d + i * width for d in range(len(datasets))]
        ax.bar(xs, [lookup[d][3] if d in lookup else 0 for d in datasets], width,
               yerr=[lookup[d][4] if d in lookup else 0 for d in datasets], label=loss)
    ax.axhline(0.5, color="grey", lw=0.8)
    ax.set_xticks([d + width * (len(losses) - 1) / 2 for d in range(len(datasets))])
    ax.set_xticklabels(datasets)
    ax.set_ylabel("accuracy")
    ax.legend()
    _save(fig, out / "bar_summary.svg")


def topsim_scatter(out: Path, finals) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for loss in sorted({f["loss"] for f in finals}):
        mine = [f for f in finals if f["loss"] == loss]
        ax.scatter([f["rsa_sl"] for f in mine], [f["topsim"] for f in mine], label=loss)
    ax.set_xlabel("RSA speaker-listener")
    ax.set_ylabel("topsim")
    ax.legend()
    _save(fig, out / "topsim_vs_rsa_sl.svg")


def render_all(out_dir, curve_rows, curve_keys, bars, finals) -> None:
    out = Path(out_dir)
    learning_curves(out, curve_rows, curve_keys)
    bar_summary(out, bars)
    topsim_scatter(out, finals)
