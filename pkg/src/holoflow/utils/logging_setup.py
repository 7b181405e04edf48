import os
import csv
import logging
from datetime import datetime

from dotenv import load_dotenv

# Optional .env overrides for log location/level only
load_dotenv()

LOG_DIR = os.getenv("HOLOFLOW_LOG_DIR", "logs")


# Setup logging for file-based debugging (minimal console output)
def setup_logging():
    """Setup logging to files only, minimal console output"""
    os.makedirs(LOG_DIR, exist_ok=True)

    app_logger = logging.getLogger("holoflow")
    app_logger.setLevel(os.getenv("HOLOFLOW_LOG_LEVEL", "DEBUG").upper())

    # Configure once per process; re-imports must not stack handlers
    if not any(isinstance(h, logging.FileHandler) for h in app_logger.handlers):
        handler = logging.FileHandler(os.path.join(LOG_DIR, "holoflow_debug.log"))
        handler.setFormatter(
            logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
        )
        app_logger.addHandler(handler)
    app_logger.propagate = False

    # Third-party loggers that are chatty at DEBUG
    for logger_name in ["matplotlib", "PIL", "numba", "fsspec"]:
        logging.getLogger(logger_name).setLevel(logging.WARNING)

    return app_logger


# Setup CSV logging for execution tracking
def setup_csv_logging():
    """Setup CSV logging for execution tracking"""
    os.makedirs(LOG_DIR, exist_ok=True)

    today = datetime.now().strftime("%Y-%m-%d")
    csv_file = os.path.join(LOG_DIR, f"execution_log_{today}.csv")

    if not os.path.exists(csv_file):
        with open(csv_file, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["run_id", "command", "start_time", "end_time", "duration_seconds", "status"])

    return csv_file


def log_execution(run_id: str, command: str, start_time: datetime, status: str) -> float:
    """Append one row to the CSV execution log and return the elapsed seconds."""
    end_time = datetime.now()
    duration = (end_time - start_time).total_seconds()
    with open(csv_log_file, "a", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([run_id, command, start_time.isoformat(), end_time.isoformat(), duration, status])
    return duration


def get_logger(name: str) -> logging.Logger:
    """Child logger of the application logger, e.g. ``holoflow.tracker``."""
    return logger.getChild(name.rsplit(".", 1)[-1])


# Initialize logging
logger = setup_logging()

# Setup CSV logging
csv_log_file = setup_csv_logging()
logger.debug(f"📊 CSV execution log: {csv_log_file}")
