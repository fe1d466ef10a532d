"""Histogram figures for the eval report path (rendered off-screen)."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import HistogramExport  # noqa: E402

# Fixed metadata keeps PNG bytes reproducible across runs.
_PNG_METADATA = {"Software": None}


def histogram_figure(hist: HistogramExport, title: str = ""):
    centers = 0.5 * (hist.edges[:-1] + hist.edges[1:])
    width = hist.edges[1] - hist.edges[0]
    fig, ax = plt.subplots(figsize=(5.0, 3.2), dpi=100)
    ax.bar(centers, hist.density_clean, width=width, alpha=0.6, color="tab:blue",
           label=f"clean (n={hist.count_clean})")
    ax.bar(centers, hist.density_backdoor, width=width, alpha=0.6, color="tab:red",
           label=f"backdoor (n={hist.count_backdoor})")
    ax.set_xlim(-1.0, 1.0)
    ax.set_xlabel("image-text similarity")
    ax.set_ylabel("fraction of pairs")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return fig


def histogram_png(hist: HistogramExport, title: str = "") -> bytes:
    fig = histogram_figure(hist, title)
    buf = io.BytesIO()
    try:
        fig.savefig(buf, format="png", metadata=_PNG_METADATA)
    finally:
        plt.close(fig)
    return buf.getvalue()


def save_histogram(hist: HistogramExport, path, title: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(histogram_png(hist, title))
