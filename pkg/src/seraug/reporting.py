"""t-SNE diagnostics and UAR result tables built from EvaluationReport records."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score

from .classifier import EvaluationReport
from .plotting import plot_tsne, plot_uar_bars

LAYOUT_ROWS = {
    "imbalanced": ("NoAUG", "AUG"),
    "ablation": ("NoAUG", "L_Model", "L_Model+L_VAR", "L_Total"),
    "cross_lingual": ("LT", "LT_AUG", "FT", "FT_AUG"),
}


class ReportError(ValueError):
    pass


@dataclass
class TsneResult:
    points: np.ndarray
    labels: list
    origins: list
    silhouette: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["x", "y", "label", "origin"])
        for (x, y), lab, org in zip(self.points, self.labels, self.origins):
            w.writerow([f"{x:.6f}", f"{y:.6f}", lab, org])
        return buf.getvalue()


def _silhouette(x, labels):
    return float(silhouette_score(x, labels)) if len(set(labels)) >= 2 and len(labels) > len(set(labels)) else None


def cluster_scores(reps, labels, origins, points=None) -> dict:
    """Silhouette of class clusters, overall and restricted to augmented samples."""
    reps, labels, origins = np.asarray(reps), np.asarray(labels), np.asarray(origins)
    aug = origins == "augmented"
    scores = {"raw": _silhouette(reps, labels)}
    if aug.any():
        scores["augmented_raw"] = _silhouette(reps[aug], labels[aug])
    if points is not None:
        points = np.asarray(points)
        scores["tsne"] = _silhouette(points, labels)
        if aug.any():
            scores["augmented_tsne"] = _silhouette(points[aug], labels[aug])
    return scores


def emit_tsne(reps, labels, origins, seed: int = 0, perplexity: float = 30.0,
              out_dir=None, stem: str = "tsne", title: str | None = None) -> TsneResult:
    """Embed representations in 2-D; optionally write ``<stem>.csv`` and ``<stem>.png``."""
    reps = np.asarray(reps, dtype=np.float64)
    labels, origins = list(labels), list(origins)
    if not (len(reps) == len(labels) == len(origins)):
        raise ReportError("representations, labels and origins must align")
    if len(set(labels)) < 2:
        raise ReportError("t-SNE diagnostic needs at least two classes")
    perplexity = min(perplexity, max(1.0, (len(reps) - 1) / 3.0))
    points = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(reps)
    result = TsneResult(points, labels, origins, cluster_scores(reps, labels, origins, points))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.csv").write_text(result.to_csv())
        plot_tsne(points, labels, origins, out_dir / f"{stem}.png", title)
    return result


# --- tables -----------------------------------------------------------------

@dataclass
class ReportTable:
    layout: str
    rows: list
    columns: list
    cells: np.ndarray  # fractions in [0, 1], NaN where a row has no data
    n_reports: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["model", *self.columns])
        for row, vals in zip(self.rows, self.cells):
            w.writerow([row, *("" if np.isnan(v) else f"{v:.6f}" for v in vals)])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| Model | " + " | ".join(self.columns) + " |",
                 "|---" * (len(self.columns) + 1) + "|"]
        for row, vals in zip(self.rows, self.cells):
            lines.append(f"| {row} | " + " | ".join("-" if np.isnan(v) else f"{100 * v:.2f}" for v in vals) + " |")
        return "\n".join(lines) + "\n"


def _row_of(rep: EvaluationReport) -> str:
    try:
        return rep.metadata["row"]
    except KeyError:
        raise ReportError("report metadata lacks a 'row' entry") from None


def _ordered_rows(layout: str, present) -> list:
    known = [r for r in LAYOUT_ROWS[layout] if r in present]
    return known + sorted(set(present) - set(known))


def emit_report(reports, layout: str, out_dir=None, stem: str = "results") -> ReportTable:
    """Aggregate per-fold reports into a table; averages are means over folds.

    ``imbalanced``/``ablation``: one column per class recall plus ``Average`` (UAR).
    ``cross_lingual``: one UAR column per ``source->target`` pair.
    """
    reports = list(reports)
    if not reports:
        raise ReportError("no evaluation reports to tabulate")
    if layout not in LAYOUT_ROWS:
        raise ReportError(f"unknown layout {layout!r}; choose from {sorted(LAYOUT_ROWS)}")
    by_row: dict[str, list[EvaluationReport]] = {}
    for rep in reports:
        by_row.setdefault(_row_of(rep), []).append(rep)
    rows = _ordered_rows(layout, by_row)

    if layout == "cross_lingual":
        pairs = sorted({r.metadata.get("pair", "") for r in reports})
        cells = np.full((len(rows), len(pairs)), np.nan)
        for i, row in enumerate(rows):
            for j, pair in enumerate(pairs):
                uars = [r.uar for r in by_row[row] if r.metadata.get("pair", "") == pair]
                if uars:
                    cells[i, j] = float(np.mean(uars))
        columns = pairs
    else:
        class_sets = {tuple(r.recall) for r in reports}
        if len(class_sets) != 1:
            raise ReportError(f"inconsistent class sets across reports: {sorted(class_sets)}")
        classes = list(class_sets.pop())
        columns = [*classes, "Average"]
        cells = np.full((len(rows), len(columns)), np.nan)
        for i, row in enumerate(rows):
            reps = by_row[row]
            for j, cls in enumerate(classes):
                cells[i, j] = float(np.mean([r.recall[cls] for r in reps]))
            cells[i, -1] = float(np.mean([r.uar for r in reps]))
    table = ReportTable(layout, rows, columns, cells, {r: len(v) for r, v in by_row.items()})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.csv").write_text(table.to_csv())
        (out_dir / f"{stem}.md").write_text(table.to_markdown())
        plot_uar_bars(rows, columns, 100 * np.nan_to_num(cells), out_dir / f"{stem}.png")
    return table
