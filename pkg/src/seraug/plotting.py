"""Figure styling and the two report figures (t-SNE scatter, UAR bars)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
MARKERS = {"original": "o", "augmented": "x"}


def figsize(scale=1.0, ratio=0.75):
    width = 5.5 * scale
    return (width, width * ratio)


def plot_tsne(points, labels, origins, path, title=None):
    """Colour by class, marker by origin (original vs augmented)."""
    points = np.asarray(points)
    classes = sorted(set(labels))
    colors = plt.get_cmap("tab10")
    labels, origins = np.asarray(labels), np.asarray(origins)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8, 0.9))
        for ci, cls in enumerate(classes):
            for origin, marker in MARKERS.items():
                sel = (labels == cls) & (origins == origin)
                if not sel.any():
                    continue
                ax.scatter(points[sel, 0], points[sel, 1], s=12, marker=marker,
                           color=colors(ci % 10), alpha=0.8, label=f"{cls} ({origin})")
        ax.set_xticks([])
        ax.set_yticks([])
        if title:
            ax.set_title(title)
        ax.legend(loc="best", frameon=False, ncol=2)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_uar_bars(rows, columns, values, path, ylabel="UAR (%)"):
    """Grouped bars: one group per column, one bar per row."""
    values = np.asarray(values, dtype=float)
    x = np.arange(len(columns))
    width = 0.8 / max(1, len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.0, 0.5))
        for i, row in enumerate(rows):
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, values[i], width, label=row)
        ax.set_xticks(x)
        ax.set_xticklabels(columns)
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 100)
        ax.legend(frameon=False, ncol=min(4, len(rows)))
        fig.savefig(path)
        plt.close(fig)
    return path
