"""
Test suite for rendered run outputs (histogram CSV and SVG, summary text).
"""

import pandas as pd
import pytest

import view_logs

from src.holoflow.exceptions import ManifestError
from src.holoflow.models import DetectionRecord, RunConfig
from src.holoflow.pipeline import build_report
from src.holoflow.utils import frame_io
from src.holoflow.utils.reporting import HISTOGRAM_COLUMNS, render_report, summary_text


def record(track_id, diameter_um, label):
    return DetectionRecord(
        track_id=track_id, first_frame=5, x_um=100.0, y_um=200.0, z_um=300.0,
        equivalent_diameter_um=diameter_um, z_giardia=0.0, z_non=0.0, label=label,
    )


def summary_fields(text):
    pairs = (line.split(":", 1) for line in text.splitlines() if ":" in line)
    return {k.strip(): v.strip() for k, v in pairs}


def write_run(run_dir, records):
    report = build_report(records, RunConfig(), 30, 0, 0, [len(records)], 0.05)
    frame_io.write_json(run_dir / frame_io.RUN_REPORT_NAME, report)
    return report


def test_1_empty_run_has_header_only(tmp_path):
    """Test 1: A run without particles renders a header-only CSV"""
    write_run(tmp_path, [])
    outputs = render_report(tmp_path)
    assert outputs["csv"].read_text() == ",".join(HISTOGRAM_COLUMNS) + "\n", "Expected header only"
    assert outputs["svg"].exists()
    assert summary_fields(outputs["summary"].read_text())["Verdict"] == "Negative"
    print("✅ Test 1 passed: Empty run")


def test_2_histogram_conserves_counts(tmp_path):
    """Test 2: CSV rows add up to the particle total per class"""
    records = [record(i, d, "giardia" if i % 3 == 0 else "non_giardia")
               for i, d in enumerate([3.0, 9.5, 11.0, 12.2, 25.0, 40.5, 55.0, 1.0, 10.0])]
    report = write_run(tmp_path, records)
    table = pd.read_csv(render_report(tmp_path)["csv"])
    assert list(table.columns) == HISTOGRAM_COLUMNS
    assert int(table["target_count"].sum()) == report.raw_giardia_count == 3
    assert int(table["target_count"].sum() + table["other_count"].sum()) == len(records)
    assert table["bin_lo_um"].iloc[0] == 0.0 and table["bin_hi_um"].iloc[-1] == 40.0
    print("✅ Test 2 passed: Histogram conservation")


def test_3_render_is_byte_stable(tmp_path):
    """Test 3: Rendering the same report twice gives identical files"""
    write_run(tmp_path, [record(0, 10.0, "giardia"), record(1, 6.0, "non_giardia")])
    first = {name: path.read_bytes() for name, path in render_report(tmp_path).items()}
    second = {name: path.read_bytes() for name, path in render_report(tmp_path).items()}
    for name in first:
        assert first[name] == second[name], f"{name} changed between renders"
    print("✅ Test 3 passed: Byte-stable rendering")


def test_4_missing_report(tmp_path):
    """Test 4: Rendering without run_report.json raises ManifestError"""
    with pytest.raises(ManifestError):
        render_report(tmp_path)
    print("✅ Test 4 passed: Missing report")


def test_5_summary_lists_counts():
    """Test 5: The summary states the verdict and every count"""
    records = [record(i, 10.0, "giardia") for i in range(4)]
    report = build_report(records, RunConfig(offset_fraction=0.0), 10, 1, 2, [4], 0.01)
    fields = summary_fields(summary_text(report))
    assert fields["Verdict"] == "Positive"
    assert fields["Corrected target count"] == "4"
    assert fields["Frames skipped"] == "1"
    assert fields["Candidates dropped"] == "2"
    print("✅ Test 5 passed: Summary text")


def test_6_log_filters():
    """Test 6: view_logs selects one run's block and its warnings"""
    lines = [
        "t - holoflow - INFO - 🎯 [aaaa0001] holoflow simulate\n",
        "t - holoflow.pipeline - INFO - 🚀 simulating\n",
        "t - holoflow - INFO - 🎯 [bbbb0002] holoflow process\n",
        "t - holoflow.pipeline - WARNING - ⚠️ Skipping frame 6: truncated\n",
        "t - holoflow.pipeline - INFO - 🚀 Processing 10 frames\n",
    ]
    assert view_logs.filter_lines(lines, run_id="aaaa0001") == lines[:2]
    assert view_logs.filter_lines(lines, run_id="bbbb0002") == lines[2:]
    assert view_logs.filter_lines(lines, warnings_only=True) == [lines[3]]
    assert view_logs.filter_lines(lines, warnings_only=True, run_id="aaaa0001") == []
    assert view_logs.filter_lines(lines, run_id="cccc0003") == []
    print("✅ Test 6 passed: Log filters")


def test_7_execution_summary(tmp_path):
    """Test 7: Execution CSVs from several days are summarized per command and status"""
    columns = ["run_id", "command", "start_time", "end_time", "duration_seconds", "status"]
    pd.DataFrame([
        ["a1", "process", "2026-01-01T10:00:00", "2026-01-01T10:00:04", 4.0, "success"],
        ["a2", "simulate", "2026-01-01T11:00:00", "2026-01-01T11:00:01", 1.0, "success"],
    ], columns=columns).to_csv(tmp_path / "execution_log_2026-01-01.csv", index=False)
    pd.DataFrame([
        ["b1", "process", "2026-01-02T09:00:00", "2026-01-02T09:00:02", 2.0, "failed"],
    ], columns=columns).to_csv(tmp_path / "execution_log_2026-01-02.csv", index=False)

    runs = view_logs.read_executions(str(tmp_path))
    assert list(runs["run_id"]) == ["a1", "a2", "b1"], "Rows should be ordered by start time"
    summary = view_logs.summarize_executions(runs)
    assert summary.loc["process", "runs"] == 2
    assert summary.loc["process", "mean_s"] == pytest.approx(3.0)
    assert summary.loc["process", "failed"] == 1 and summary.loc["simulate", "success"] == 1
    assert view_logs.read_executions(str(tmp_path / "none")).empty
    print("✅ Test 7 passed: Execution summary")


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    for test in (test_1_empty_run_has_header_only, test_2_histogram_conserves_counts,
                 test_3_render_is_byte_stable, test_4_missing_report):
        with tempfile.TemporaryDirectory() as d:
            test(Path(d))
    test_5_summary_lists_counts()
    test_6_log_filters()
    with tempfile.TemporaryDirectory() as d:
        test_7_execution_summary(Path(d))

    print("\n" + "="*80)
    print("ALL 7 TESTS PASSED! ✅")
    print("="*80)
