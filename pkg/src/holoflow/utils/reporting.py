"""
Rendered outputs of a processed run: size histogram CSV, SVG histogram and a plain-text summary.
"""

from pathlib import Path
from typing import Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from src.holoflow.models import RunReport  # noqa: E402
from src.holoflow.utils import frame_io  # noqa: E402
from src.holoflow.utils.logging_setup import get_logger  # noqa: E402

logger = get_logger(__name__)

HISTOGRAM_CSV = "size_histogram.csv"
HISTOGRAM_SVG = "size_histogram.svg"
SUMMARY_TXT = "summary.txt"
HISTOGRAM_COLUMNS = ["bin_lo_um", "bin_hi_um", "target_count", "other_count"]

# Fixed ids keep the SVG byte-stable between renders
plt.rcParams["svg.hashsalt"] = "holoflow"


def histogram_frame(report: RunReport) -> pd.DataFrame:
    """One row per bin; no rows at all for a run without particles."""
    h = report.size_histogram
    if report.total_particles == 0:
        return pd.DataFrame(columns=HISTOGRAM_COLUMNS)
    return pd.DataFrame({
        "bin_lo_um": h.bin_edges_um[:-1],
        "bin_hi_um": h.bin_edges_um[1:],
        "target_count": h.target_counts,
        "other_count": h.other_counts,
    }, columns=HISTOGRAM_COLUMNS)


def write_histogram_csv(report: RunReport, path) -> Path:
    path = Path(path)
    histogram_frame(report).to_csv(path, index=False, lineterminator="\n")
    return path


def write_histogram_svg(report: RunReport, path) -> Path:
    """Stacked bars, targets red and everything else green."""
    h = report.size_histogram
    lo, hi = h.bin_edges_um[:-1], h.bin_edges_um[1:]
    widths = [b - a for a, b in zip(lo, hi)]

    fig, ax = plt.subplots(figsize=(6, 4))
    if report.total_particles:
        ax.bar(lo, h.other_counts, width=widths, align="edge", color="tab:green", label="other")
        ax.bar(lo, h.target_counts, width=widths, align="edge", bottom=h.other_counts,
               color="tab:red", label="target")
        ax.legend()
    ax.set_xlim(h.bin_edges_um[0], h.bin_edges_um[-1])
    ax.set_xlabel("equivalent diameter (µm)")
    ax.set_ylabel("objects")
    ax.set_title(f"{report.total_particles} objects, verdict {report.verdict}")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def summary_text(report: RunReport) -> str:
    lines = [
        "HOLOFLOW RUN SUMMARY",
        "=" * 40,
        f"Verdict:                 {report.verdict}",
        f"Total particles:         {report.total_particles}",
        f"Raw target count:        {report.raw_giardia_count}",
        f"Offset ({report.offset_fraction:.3%}):        {report.offset}",
        f"Corrected target count:  {report.corrected_giardia}",
        "",
        f"Frames processed:        {report.frames_processed}",
        f"Frames skipped:          {report.frames_skipped}",
        f"Candidates dropped:      {report.candidates_dropped}",
        f"Volume processed:        {report.volume_processed_ml:.4f} mL",
        f"Concentration:           {report.concentration_per_ml:.1f} objects/mL",
        f"Target concentration:    {report.target_concentration_per_ml:.1f} /mL",
        f"Mean objects per frame:  {report.mean_objects_per_frame:.2f}",
    ]
    return "\n".join(lines) + "\n"


def render_report(run_dir) -> Dict[str, Path]:
    """Render CSV, SVG and summary next to ``run_report.json``; a missing report raises ManifestError."""
    run_dir = Path(run_dir)
    report = frame_io.read_json(run_dir / frame_io.RUN_REPORT_NAME, RunReport)

    outputs = {
        "csv": write_histogram_csv(report, run_dir / HISTOGRAM_CSV),
        "svg": write_histogram_svg(report, run_dir / HISTOGRAM_SVG),
        "summary": run_dir / SUMMARY_TXT,
    }
    outputs["summary"].write_text(summary_text(report), encoding="utf-8")
    logger.info(f"📊 Rendered report for {run_dir}")
    return outputs
