"""
Report Service Module - Metrics and ROC Artifacts
Writes the pooled metrics JSON, one ROC CSV per aggregation method and an
SVG plot holding both ROC curves with their AUCs and the chance diagonal.
"""
import logging
from html import escape as html_escape
from pathlib import Path
from typing import Dict, List, Sequence, Union

import storage
from services.metrics_service import (
    DEFAULT_IMAGE_THRESHOLD, DEFAULT_MAX_THRESHOLD, DEFAULT_RATIO_THRESHOLD,
    MetricsSummary, RocCurve, summarize_metrics,
)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.json"
ROC_RATIO_FILE = "roc_ratio.csv"
ROC_MAX_FILE = "roc_max.csv"
ROC_SVG_FILE = "roc.svg"
ROC_CSV_HEADER = ("threshold", "fpr", "tpr")

COLORS = {
    "ratio": "#0d6efd",
    "max": "#dc3545",
    "chance": "#6c757d",
    "bg": "#ffffff",
    "grid": "#e9ecef",
    "text": "#212529",
}

FONT = "system-ui, -apple-system, 'Segoe UI', sans-serif"


def _svg_header(width: int, height: int, title: str) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="0 0 {width} {height}" '
        f'width="{width}" height="{height}" '
        f'style="font-family: {FONT}; background: {COLORS["bg"]}">\n'
        f'<title>{html_escape(title)}</title>\n'
    )


def _svg_footer() -> str:
    return "</svg>\n"


def render_roc_svg(ratio_curve: RocCurve, max_curve: RocCurve, title: str = "Patient-level ROC",
                   width: int = 480, height: int = 480) -> str:
    """
    Both ROC curves as polylines over the unit square.

    The ratio curve comes first, then the max curve; each polyline carries
    one vertex per ROC point. The chance diagonal is a plain <line>.
    """
    margin = {"top": 50, "right": 30, "bottom": 60, "left": 60}
    plot_w = width - margin["left"] - margin["right"]
    plot_h = height - margin["top"] - margin["bottom"]

    def x_pos(fpr: float) -> float:
        return margin["left"] + fpr * plot_w

    def y_pos(tpr: float) -> float:
        return margin["top"] + (1.0 - tpr) * plot_h

    parts = [_svg_header(width, height, title)]
    parts.append(
        f'<text x="{width / 2}" y="28" text-anchor="middle" '
        f'font-size="15" font-weight="600" fill="{COLORS["text"]}">'
        f'{html_escape(title)}</text>\n'
    )

    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        x, y = x_pos(tick), y_pos(tick)
        parts.append(
            f'<line x1="{margin["left"]}" y1="{y:.2f}" x2="{margin["left"] + plot_w}" y2="{y:.2f}" '
            f'stroke="{COLORS["grid"]}" stroke-width="1"/>\n'
            f'<text x="{margin["left"] - 8}" y="{y + 4:.2f}" text-anchor="end" '
            f'font-size="11" fill="{COLORS["text"]}">{tick:g}</text>\n'
            f'<text x="{x:.2f}" y="{margin["top"] + plot_h + 18}" text-anchor="middle" '
            f'font-size="11" fill="{COLORS["text"]}">{tick:g}</text>\n'
        )
    parts.append(
        f'<text x="{margin["left"] + plot_w / 2}" y="{height - 15}" text-anchor="middle" '
        f'font-size="12" fill="{COLORS["text"]}">False positive rate</text>\n'
        f'<text x="18" y="{margin["top"] + plot_h / 2}" text-anchor="middle" font-size="12" '
        f'fill="{COLORS["text"]}" transform="rotate(-90 18 {margin["top"] + plot_h / 2})">'
        f'True positive rate</text>\n'
    )

    parts.append(
        f'<line class="chance" x1="{x_pos(0):.2f}" y1="{y_pos(0):.2f}" x2="{x_pos(1):.2f}" y2="{y_pos(1):.2f}" '
        f'stroke="{COLORS["chance"]}" stroke-width="1" stroke-dasharray="4 4"/>\n'
    )

    legend_y = margin["top"] + plot_h - 40
    for row, (name, curve) in enumerate((("ratio", ratio_curve), ("max", max_curve))):
        vertices = " ".join(f"{x_pos(p.fpr):.2f},{y_pos(p.tpr):.2f}" for p in curve.points)
        parts.append(
            f'<polyline class="roc-{name}" points="{vertices}" fill="none" '
            f'stroke="{COLORS[name]}" stroke-width="2"/>\n'
        )
        y = legend_y + row * 18
        parts.append(
            f'<text x="{x_pos(0.55):.2f}" y="{y:.2f}" font-size="12" fill="{COLORS[name]}">'
            f'{name} (AUC={curve.auc:.3f})</text>\n'
        )

    parts.append(_svg_footer())
    return "".join(parts)


def roc_rows(curve: RocCurve) -> List[Sequence[float]]:
    return [(p.threshold, p.fpr, p.tpr) for p in curve.points]


def write_roc_csv(curve: RocCurve, path: Union[str, Path]) -> Path:
    return storage.write_csv(path, ROC_CSV_HEADER, roc_rows(curve))


def write_report(fold_reports: Sequence, out_dir: Union[str, Path],
                 image_threshold: float = DEFAULT_IMAGE_THRESHOLD,
                 ratio_threshold: float = DEFAULT_RATIO_THRESHOLD,
                 max_threshold: float = DEFAULT_MAX_THRESHOLD) -> MetricsSummary:
    """
    Evaluate pooled fold reports and write every report artifact.

    Args:
        fold_reports: FoldReports of one cross-validation run
        out_dir: destination directory (created if needed)

    Returns:
        MetricsSummary: the computed metrics and both ROC curves
    """
    summary = summarize_metrics(fold_reports, image_threshold, ratio_threshold, max_threshold)
    out = storage.ensure_dir(out_dir)
    storage.write_json(out / METRICS_FILE, summary.metrics)
    write_roc_csv(summary.ratio_curve, out / ROC_RATIO_FILE)
    write_roc_csv(summary.max_curve, out / ROC_MAX_FILE)
    storage.write_text(out / ROC_SVG_FILE, render_roc_svg(summary.ratio_curve, summary.max_curve))
    logger.info("Report written to %s", out)
    return summary


def metrics_line(metrics: Dict) -> str:
    """One-line human summary of a metrics dict."""
    return (
        f"patients={metrics['n_patients']} "
        f"auc_ratio={metrics['auc_ratio']:.4f} auc_max={metrics['auc_max']:.4f}"
    )
