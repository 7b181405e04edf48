#!/usr/bin/env python3
"""
View holoflow logs: the debug log (tail, warnings, one run) and the daily
execution CSVs (status and duration per command).
"""

import argparse
import glob
import os
import re
from datetime import datetime
from typing import List, Optional

import pandas as pd

LOG_DIR = os.getenv("HOLOFLOW_LOG_DIR", "logs")
DEBUG_LOG = "holoflow_debug.log"
TAIL_LINES = 50

# Skipped frames, dropped candidates and failed commands
WARNING_MARKERS = (" - WARNING - ", " - ERROR - ", "⚠️", "❌")
RUN_START = re.compile(r"🎯 \[([0-9a-f]+)\] holoflow ")


def filter_lines(lines: List[str], warnings_only: bool = False, run_id: Optional[str] = None) -> List[str]:
    """Debug-log lines, optionally only one run's block and/or only warnings/errors.

    A run's block starts at its ``🎯 [run_id]`` line and ends where the next run starts.
    """
    if run_id:
        selected, inside = [], False
        for line in lines:
            start = RUN_START.search(line)
            if start:
                inside = start.group(1) == run_id
            if inside:
                selected.append(line)
        lines = selected
    if warnings_only:
        lines = [line for line in lines if any(m in line for m in WARNING_MARKERS)]
    return lines


def read_executions(log_dir: str = LOG_DIR) -> pd.DataFrame:
    """All execution_log_*.csv rows, oldest first."""
    files = sorted(glob.glob(os.path.join(log_dir, "execution_log_*.csv")))
    frames = [pd.read_csv(f) for f in files]
    frames = [f for f in frames if not f.empty]
    if not frames:
        return pd.DataFrame(columns=["run_id", "command", "start_time", "end_time", "duration_seconds", "status"])
    runs = pd.concat(frames, ignore_index=True)
    return runs.sort_values("start_time", kind="stable").reset_index(drop=True)


def summarize_executions(runs: pd.DataFrame) -> pd.DataFrame:
    """Per command: run count, one column per status, mean and max duration in seconds."""
    if runs.empty:
        return pd.DataFrame()
    status = pd.crosstab(runs["command"], runs["status"])
    durations = runs.groupby("command")["duration_seconds"].agg(["count", "mean", "max"])
    return durations.join(status).rename(columns={"count": "runs", "mean": "mean_s", "max": "max_s"})


def show_runs(log_dir: str = LOG_DIR):
    runs = read_executions(log_dir)
    if runs.empty:
        print(f"❌ No execution logs found in {log_dir}")
        return
    print(f"📊 {len(runs)} executions in {log_dir}")
    print("=" * 80)
    print(summarize_executions(runs).to_string(float_format=lambda x: f"{x:.2f}"))
    failed = runs[runs["status"] != "success"]
    if not failed.empty:
        print("\n⚠️ Unsuccessful runs:")
        print(failed[["run_id", "command", "start_time", "status"]].tail(10).to_string(index=False))


def show_debug_log(args, log_dir: str = LOG_DIR):
    log_file = os.path.join(log_dir, DEBUG_LOG)
    if not os.path.exists(log_file):
        print(f"❌ No log file found at {log_file}")
        print("Run a holoflow command first to generate logs.")
        return

    print(f"📝 Viewing logs from: {log_file}")
    print(f"📅 Last modified: {datetime.fromtimestamp(os.path.getmtime(log_file))}")
    print("=" * 80)

    with open(log_file, "r", encoding="utf-8") as f:
        lines = filter_lines(f.readlines(), args.warnings, args.run_id)

    if not args.all and len(lines) > TAIL_LINES:
        print(f"... (showing last {TAIL_LINES} of {len(lines)} matching lines, --all for everything)")
        lines = lines[-TAIL_LINES:]
    print("".join(lines))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="View holoflow debug and execution logs")
    parser.add_argument("--all", action="store_true", help="Show every matching line, not the last 50")
    parser.add_argument("--warnings", action="store_true", help="Skipped frames, dropped candidates and errors only")
    parser.add_argument("--run-id", help="Only the lines of one run (the id logged in [brackets])")
    parser.add_argument("--runs", action="store_true", help="Summarize the execution CSV logs instead")
    parser.add_argument("--log-dir", default=LOG_DIR, help="Log directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.runs:
            show_runs(args.log_dir)
        else:
            show_debug_log(args, args.log_dir)
    except (OSError, pd.errors.ParserError) as e:
        print(f"❌ Error reading logs: {e}")


if __name__ == "__main__":
    main()
