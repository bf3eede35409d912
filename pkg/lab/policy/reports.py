"""
Results Reports
Builds a PDF summary of an evaluation or ablation CSV: overview, mean success
per swept axis (with Wilson intervals), per-task rates, the training loss curve
and a preview of the camera pool.
"""
import io
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from PIL import Image as PILImage

# ReportLab imports for PDF generation
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import HRFlowable, Image, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

# Matplotlib for chart generation
import matplotlib
matplotlib.use('Agg')  # Use non-GUI backend
import matplotlib.pyplot as plt

from .ablation import AXES, axis_summary, read_results, swept_axes
from .exceptions import DatasetIOError
from .fileio import atomic_write_bytes

logger = logging.getLogger(__name__)

SUMMARY_ROWS = ("mean", "avg_len")
CHART_COLOR = '#3b82f6'


def contact_sheet(images: Sequence[np.ndarray], columns: int = 8, pad: int = 2,
                  background=(255, 255, 255)) -> PILImage.Image:
    """Tile equally sized HxWx3 uint8 frames into one image, row-major."""
    if not len(images):
        raise ValueError("contact_sheet needs at least one image")
    if columns < 1:
        raise ValueError("columns must be >= 1")
    h, w = images[0].shape[:2]
    columns = min(columns, len(images))
    rows = -(-len(images) // columns)
    sheet = PILImage.new("RGB", (columns * (w + pad) + pad, rows * (h + pad) + pad), background)
    for i, frame in enumerate(images):
        r, c = divmod(i, columns)
        tile = PILImage.fromarray(np.asarray(frame, dtype=np.uint8))
        sheet.paste(tile, (pad + c * (w + pad), pad + r * (h + pad)))
    return sheet


def camera_preview(pool, split: str = "test", count: int = 8, seed: int = 0, image_size: int = 64
                   ) -> PILImage.Image:
    """One scene rendered through the first `count` cameras of a pool split."""
    from .env.render import render
    from .env.world import reset_scene

    state, _, _ = reset_scene(seed, "pick")
    cameras = pool.split(split)[:count]
    return contact_sheet([render(state, cam, image_size) for cam in cameras], columns=min(count, 8))


# ==================== CHARTS ====================

def _png(fig) -> io.BytesIO:
    plt.tight_layout()
    img_buffer = io.BytesIO()
    fig.savefig(img_buffer, format='png', bbox_inches='tight', facecolor='white', edgecolor='none')
    plt.close(fig)  # Close figure to free memory
    img_buffer.seek(0)
    return img_buffer


def _style_axes(ax, title, xlabel, ylabel):
    ax.set_title(title, fontsize=13, fontweight='bold', color='#1e3a5f', pad=12)
    ax.set_xlabel(xlabel, fontsize=10, color='#2c3e50')
    ax.set_ylabel(ylabel, fontsize=10, color='#2c3e50')
    ax.set_facecolor('#f8fafc')
    ax.spines['top'].set_visible(False)
    ax.spines['right'].set_visible(False)
    ax.yaxis.grid(True, linestyle='--', alpha=0.7, color='#e0e0e0')
    ax.set_axisbelow(True)


def axis_chart(summary: pd.DataFrame, axis: str) -> io.BytesIO:
    """Mean success against one swept axis, with the averaged Wilson interval as error bars."""
    fig, ax = plt.subplots(figsize=(6, 3.2), dpi=150)
    labels = [str(v) for v in summary[axis]]
    x = np.arange(len(labels))
    rate = summary["rate"].to_numpy()
    err = np.vstack([rate - summary["ci_lo"].to_numpy(), summary["ci_hi"].to_numpy() - rate])
    ax.errorbar(x, rate, yerr=np.clip(err, 0.0, None), fmt='o-', color=CHART_COLOR, capsize=4, linewidth=2)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylim(0.0, 1.05)
    _style_axes(ax, f'Success rate vs {axis}', axis, 'Mean success')
    return _png(fig)


def task_chart(rows: pd.DataFrame) -> io.BytesIO:
    fig, ax = plt.subplots(figsize=(6, 3.2), dpi=150)
    rate = rows["rate"].to_numpy()
    err = np.vstack([rate - rows["ci_lo"].to_numpy(), rows["ci_hi"].to_numpy() - rate])
    ax.bar(rows["task"], rate, yerr=np.clip(err, 0.0, None), color=CHART_COLOR, capsize=4,
           width=0.6, edgecolor='white', linewidth=1.5)
    ax.set_ylim(0.0, 1.05)
    _style_axes(ax, 'Success rate per task', 'task', 'Success')
    return _png(fig)


def loss_chart(metrics: pd.DataFrame) -> io.BytesIO:
    fig, ax = plt.subplots(figsize=(6, 3.2), dpi=150)
    ax.plot(metrics["step"], metrics["loss"], color='#f59e0b', linewidth=1.2)
    ax.set_yscale('log')
    _style_axes(ax, 'Training loss', 'step', 'loss')
    return _png(fig)


# ==================== PDF ====================

def _table(data, col_widths, header_color='#1e3a5f'):
    table = Table(data, colWidths=col_widths, repeatRows=1)
    table.setStyle(TableStyle([
        # Header row
        ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor(header_color)),
        ('TEXTCOLOR', (0, 0), (-1, 0), colors.white),
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
        ('FONTSIZE', (0, 0), (-1, -1), 9),
        ('ALIGN', (0, 0), (-1, -1), 'CENTER'),
        ('TEXTCOLOR', (0, 1), (-1, -1), colors.HexColor('#2c3e50')),
        ('TOPPADDING', (0, 0), (-1, -1), 6),
        ('BOTTOMPADDING', (0, 0), (-1, -1), 6),
        ('BOX', (0, 0), (-1, -1), 1.2, colors.HexColor(header_color)),
        ('LINEBELOW', (0, 1), (-1, -2), 0.5, colors.HexColor('#bdc3c7')),
    ]))
    # Alternating row colors for data rows
    for i in range(2, len(data), 2):
        table.setStyle(TableStyle([('BACKGROUND', (0, i), (-1, i), colors.HexColor('#f8f9fa'))]))
    return table


def _fmt(value) -> str:
    if isinstance(value, float):
        return "-" if np.isnan(value) else f"{value:.3f}"
    return str(value)


def build_report(results: pd.DataFrame, out, metrics: Optional[pd.DataFrame] = None,
                 source: str = "", preview: Optional[PILImage.Image] = None) -> Path:
    task_rows = results[~results["task"].isin(SUMMARY_ROWS)]
    axes = swept_axes(task_rows) if not task_rows.empty else []

    buffer = io.BytesIO()
    doc = SimpleDocTemplate(buffer, pagesize=letter, topMargin=0.5 * inch, bottomMargin=0.5 * inch,
                            leftMargin=0.75 * inch, rightMargin=0.75 * inch)
    styles = getSampleStyleSheet()
    title_style = ParagraphStyle('MainTitle', parent=styles['Heading1'], fontSize=22, spaceAfter=6,
                                 textColor=colors.HexColor('#1e3a5f'), alignment=TA_CENTER,
                                 fontName='Helvetica-Bold')
    subtitle_style = ParagraphStyle('Subtitle', parent=styles['Normal'], fontSize=11, spaceAfter=4,
                                    textColor=colors.HexColor('#5a6c7d'), alignment=TA_CENTER)
    section_style = ParagraphStyle('SectionHeading', parent=styles['Heading2'], fontSize=14,
                                   spaceBefore=14, spaceAfter=8, textColor=colors.HexColor('#1e3a5f'),
                                   fontName='Helvetica-Bold')
    elements = []

    # ==================== HEADER SECTION ====================
    elements.append(Paragraph("DIFFUSION POLICY LAB", title_style))
    elements.append(Paragraph("EVALUATION REPORT", title_style))
    if source:
        elements.append(Paragraph(f"Results: {source}", subtitle_style))
    generated = datetime.now(timezone.utc).strftime("%d %B %Y at %H:%M UTC")
    elements.append(Paragraph(f"Report Generated: {generated}", subtitle_style))
    elements.append(HRFlowable(width="80%", thickness=2, color=colors.HexColor('#3498db'),
                               spaceAfter=8, spaceBefore=8))

    # ==================== OVERVIEW SECTION ====================
    elements.append(Paragraph("Overview", section_style))
    cells = results[list(AXES)].drop_duplicates()
    overview = [
        ["Item", "Value"],
        ["Configurations", str(len(cells))],
        ["Tasks", ", ".join(sorted(task_rows["task"].unique()))],
        ["Episodes per task", _fmt(int(task_rows["n"].max())) if not task_rows.empty else "0"],
        ["Mean success", _fmt(float(task_rows["rate"].mean())) if not task_rows.empty else "-"],
    ]
    avg_len = results[results["task"] == "avg_len"]
    if not avg_len.empty:
        overview.append(["Avg.Len.", _fmt(float(avg_len["rate"].iloc[0]))])
    elements.append(_table(overview, [3 * inch, 3.5 * inch]))

    # ==================== AXIS SUMMARY SECTION ====================
    for axis in axes:
        summary = axis_summary(task_rows, axis)
        elements.append(Paragraph(f"Mean success by {axis}", section_style))
        data = [[axis, "Mean rate", "CI low", "CI high", "Rows"]]
        data += [[_fmt(getattr(r, axis)), _fmt(r.rate), _fmt(r.ci_lo), _fmt(r.ci_hi), str(r.cells)]
                 for r in summary.itertuples(index=False)]
        elements.append(_table(data, [1.3 * inch] * 5))
        elements.append(Spacer(1, 8))
        try:
            elements.append(Image(axis_chart(summary, axis), width=5.5 * inch, height=2.9 * inch))
        except Exception as e:
            # Fallback if chart generation fails
            logger.warning("Chart for %s failed: %s", axis, e)
            elements.append(Paragraph(f"[Chart could not be generated: {e}]", styles['Normal']))

    if not axes and not task_rows.empty:
        elements.append(Paragraph("Success per task", section_style))
        elements.append(Image(task_chart(task_rows), width=5.5 * inch, height=2.9 * inch))

    # ==================== TRAINING SECTION ====================
    if metrics is not None and not metrics.empty:
        elements.append(Paragraph("Training", section_style))
        elements.append(Image(loss_chart(metrics), width=5.5 * inch, height=2.9 * inch))

    # ==================== PER-ROW TABLE ====================
    elements.append(Paragraph("All results", section_style))
    data = [list(results.columns)]
    data += [[_fmt(v) for v in row] for row in results.itertuples(index=False, name=None)]
    elements.append(_table(data, [0.85 * inch, 0.6 * inch, 0.4 * inch, 0.4 * inch, 0.55 * inch,
                                  0.95 * inch, 0.6 * inch, 0.6 * inch, 0.6 * inch, 0.5 * inch],
                           header_color='#27ae60'))

    if preview is not None:
        elements.append(Paragraph("Held-out camera views", section_style))
        png = io.BytesIO()
        preview.save(png, format="PNG")
        png.seek(0)
        width = 6.5 * inch
        elements.append(Image(png, width=width, height=width * preview.height / preview.width))

    # ==================== FOOTER SECTION ====================
    elements.append(HRFlowable(width="100%", thickness=1, color=colors.HexColor('#e0e0e0'),
                               spaceAfter=12, spaceBefore=12))

    doc.build(elements)
    path = atomic_write_bytes(out, buffer.getvalue())
    logger.info("Report written to %s", path)
    return path


def read_metrics(path) -> pd.DataFrame:
    path = Path(path)
    try:
        return pd.read_csv(path)
    except (OSError, ValueError, pd.errors.ParserError) as exc:
        raise DatasetIOError(f"cannot read metrics {path}: {exc}") from exc


def report_from_files(results_path, out, metrics_path=None, preview=None) -> Path:
    results_path = Path(results_path)
    if not results_path.exists():
        raise DatasetIOError(f"results file not found: {results_path}")
    results = read_results(results_path)
    metrics = read_metrics(metrics_path) if metrics_path else None
    return build_report(results, out, metrics=metrics, source=results_path.name, preview=preview)
