import argparse
import os
import sys
import uuid
from datetime import datetime
from pathlib import Path
from typing import Optional

# Add the repository root to the Python path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from pydantic import ValidationError

from src.holoflow import pipeline
from src.holoflow.exceptions import ConfigurationError, HoloflowError
from src.holoflow.models import RunConfig
from src.holoflow.utils.config_loader import load_config
from src.holoflow.utils.logging_setup import log_execution, logger
from src.holoflow.utils.reporting import render_report

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_CONFIG = 2


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    """Command-line flags win over the config file."""
    data = cfg.model_dump()
    if args.input:
        data["input"] = args.input
    if args.output:
        data["output"] = args.output
    if args.workers is not None:
        data["workers"] = args.workers
    if args.mode:
        data["processing_mode"] = args.mode
    if args.seed is not None:
        data["seed"] = data["simulation"]["seed"] = data["train"]["seed"] = args.seed
    # Re-validate so flag values obey the same constraints as the file
    return RunConfig.model_validate(data)


def _run_dir(cfg: RunConfig, args) -> Optional[str]:
    """The subcommand's own path flags win over config; config output wins over config input."""
    return args.output or args.input or cfg.output or cfg.input


def simulate(cfg: RunConfig, args):
    target = _run_dir(cfg, args)
    if not target:
        raise ConfigurationError("simulate needs --output or --input naming the stream directory")
    print(f"\n🧪 Simulating {cfg.simulation.frame_count} frames -> {target}")
    truth = pipeline.simulate(cfg, target)
    print(f"  ✅ {truth.count('target_cyst')} targets, {truth.count('distractor')} distractors")


def process(cfg: RunConfig, args):
    report, _ = pipeline.process_stream(cfg)
    print(f"\n📊 Total particles:   {report.total_particles}")
    print(f"🎯 Raw target count:  {report.raw_giardia_count}")
    print(f"➖ Offset:            {report.offset}")
    print(f"✅ Corrected count:   {report.corrected_giardia}")
    print(f"🧾 Verdict:           {report.verdict}")
    if report.frames_skipped:
        print(f"⚠️ Frames skipped:    {report.frames_skipped}")
    if cfg.output:
        render_report(cfg.output)
        print(f"📁 Outputs saved to: {cfg.output}")


def train(cfg: RunConfig, args):
    output = cfg.output or "output"
    print(f"\n🧠 Training reference network ({cfg.train.examples_per_class} examples per class)")
    _, metrics = pipeline.train_reference_model(cfg, output)
    print(f"  ✅ Validation accuracy {metrics.val_accuracy:.3f}, recall {metrics.val_recall:.3f}, "
          f"false-positive rate {metrics.val_false_positive_rate:.4f}")
    print(f"📁 Weights: {Path(output) / pipeline.MODEL_NAME}")


def benchmark(cfg: RunConfig, args):
    print(f"\n⏱️  Benchmarking {cfg.benchmark_frames} frames and {cfg.benchmark_objects} objects")
    report = pipeline.benchmark(cfg)
    for stage, timing in report.stages.items():
        reference = report.reference_ms.get(stage)
        print(f"  {stage:<18} {timing.mean_ms:8.1f} ms  (reference {reference:.1f} ms)")
    print(f"  frames/s {report.frames_per_s:.2f}, objects/s {report.objects_per_s:.2f} "
          f"(needed {report.required_objects_per_s:.2f})")
    if report.below_realtime_budget:
        print("⚠️ Below realtime budget at the configured flowrate; "
              f"recommended flowrate {report.recommended_flowrate_ml_per_h:.1f} mL/h")


def report(cfg: RunConfig, args):
    run_dir = _run_dir(cfg, args)
    if not run_dir:
        raise ConfigurationError("report needs --output or --input pointing at a run directory")
    outputs = render_report(run_dir)
    for name, path in outputs.items():
        print(f"  ✅ {name}: {path}")


COMMANDS = {
    "simulate": simulate,
    "process": process,
    "train": train,
    "benchmark": benchmark,
    "report": report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="holoflow", description="Holographic flow cytometry engine")
    parser.add_argument("command", choices=sorted(COMMANDS), help="Subcommand to run")
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--input", help="Input stream (or run) directory")
    parser.add_argument("--output", help="Output directory")
    parser.add_argument("--seed", type=int, help="Seed for simulation and training")
    parser.add_argument("--workers", type=int, help="Worker threads for per-object stages")
    parser.add_argument("--mode", choices=["batch", "realtime"], help="Processing mode")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start_time = datetime.now()
    run_id = uuid.uuid4().hex[:8]
    logger.info(f"🎯 [{run_id}] holoflow {args.command}")

    try:
        cfg = _apply_flags(load_config(args.config), args)
        COMMANDS[args.command](cfg, args)
    except (ConfigurationError, ValidationError) as e:
        logger.error(f"❌ [{run_id}] Invalid configuration: {e}", exc_info=True)
        print(f"❌ Invalid configuration: {e}")
        log_execution(run_id, args.command, start_time, "invalid_config")
        return EXIT_CONFIG
    except (HoloflowError, OSError) as e:
        logger.error(f"❌ [{run_id}] {args.command} failed: {e}", exc_info=True)
        print(f"❌ Error: {e}")
        print("📝 Check logs/holoflow_debug.log for detailed error information")
        log_execution(run_id, args.command, start_time, "failed")
        return EXIT_FATAL

    duration = log_execution(run_id, args.command, start_time, "success")
    logger.info(f"📊 [{run_id}] Execution logged to CSV: {duration:.2f} seconds")
    print(f"\n⏱️  Total execution time: {duration:.2f} seconds")
    return EXIT_OK


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
