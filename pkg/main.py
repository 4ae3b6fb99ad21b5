import os
import json
import shutil
import hashlib
import logging
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from openpyxl import Workbook

try:
    import appdirs  # type: ignore
except Exception:
    appdirs = None


APP_NAME = "RobustPL"
APP_VERSION = "v1.0.0"
SETTINGS_PATH = "settings.json"
LOG_FILE_NAME = "robustpl.log"


# ---------- Errors ----------
class RobustPLError(Exception):
    """Base class for every error raised by the library."""


class InvalidInputError(RobustPLError, ValueError):
    pass


class InvalidHyperparameterError(RobustPLError, ValueError):
    pass


class NumericError(RobustPLError, ArithmeticError):
    def __init__(self, message: str, location: str = ""):
        self.location = location
        text = f"{message} (at {location})" if location else message
        super().__init__(text)


class ConfigError(RobustPLError, ValueError):
    def __init__(self, message: str, field_path: str = ""):
        self.field_path = field_path
        text = f"{field_path}: {message}" if field_path else message
        super().__init__(text)


# --- Logging setup (configurable via settings) ---
_LEVEL_MAP = {
    "CRITICAL": logging.CRITICAL,
    "ERROR": logging.ERROR,
    "WARNING": logging.WARNING,
    "WARN": logging.WARNING,
    "INFO": logging.INFO,
    "DEBUG": logging.DEBUG,
}


def _normalize_log_level(value):
    if isinstance(value, int):
        return value
    try:
        key = str(value or "").strip().upper()
    except Exception:
        key = "DEBUG"
    return _LEVEL_MAP.get(key, logging.DEBUG)


def default_log_path() -> str:
    if appdirs is None:
        return LOG_FILE_NAME
    return os.path.join(appdirs.user_log_dir(APP_NAME), LOG_FILE_NAME)


def setup_logging(level="INFO", log_path: Optional[str] = None):
    level_no = _normalize_log_level(level)
    logger = logging.getLogger(APP_NAME)
    logger.setLevel(level_no)
    logger.propagate = False

    # Ensure handlers only added once
    if not logger.handlers:
        formatter = logging.Formatter(
            fmt="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
        ch = logging.StreamHandler()
        ch.setFormatter(formatter)
        logger.addHandler(ch)
        if log_path:
            try:
                os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
                fh = logging.FileHandler(log_path, encoding="utf-8")
                fh.setFormatter(formatter)
                logger.addHandler(fh)
            except Exception:
                # If file logging fails, continue with console only
                pass
    for handler in logger.handlers:
        handler.setLevel(level_no)
    return logger


# ---------- Settings ----------
CLASSIFICATION_DEFAULTS = {"q_exponent": 0.9, "alpha": 0.1, "gamma": 0.01, "beta": 5.0, "A": -2.0}
SEGMENTATION_DEFAULTS = {"q_exponent": 0.7, "alpha": 0.01, "gamma": 1.0, "beta": 0.001, "A": -2.0}


def default_output_directory() -> str:
    if appdirs is None:
        return os.path.abspath("runs")
    return os.path.join(appdirs.user_data_dir(APP_NAME), "runs")


def load_settings(path=SETTINGS_PATH):
    try:
        with open(path, "r", encoding="utf-8") as f:
            settings = json.load(f)
    except (FileNotFoundError, json.JSONDecodeError):
        settings = {}
    if not isinstance(settings, dict):
        settings = {}
    defaults = {
        "log_level": "INFO",
        "log_to_file": True,
        "log_file_path": "",
        "output_directory": "",
        "n_jobs": 1,
        "classification_defaults": dict(CLASSIFICATION_DEFAULTS),
        "segmentation_defaults": dict(SEGMENTATION_DEFAULTS),
    }
    for key, value in defaults.items():
        settings.setdefault(key, value)

    log_to_file = settings.get("log_to_file")
    if isinstance(log_to_file, str):
        settings["log_to_file"] = log_to_file.strip().lower() not in {"false", "0", "no", "off"}
    else:
        settings["log_to_file"] = bool(log_to_file)

    try:
        settings["n_jobs"] = max(1, int(settings.get("n_jobs") or 1))
    except (TypeError, ValueError):
        settings["n_jobs"] = 1

    if not settings.get("output_directory"):
        settings["output_directory"] = default_output_directory()
    if not settings.get("log_file_path"):
        settings["log_file_path"] = default_log_path()

    for key, base in (("classification_defaults", CLASSIFICATION_DEFAULTS), ("segmentation_defaults", SEGMENTATION_DEFAULTS)):
        merged = dict(base)
        if isinstance(settings.get(key), dict):
            merged.update(settings[key])
        settings[key] = merged
    logging.getLogger(APP_NAME).debug("Settings loaded from %s", path)
    return settings


def save_settings(settings, path=SETTINGS_PATH):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(settings, f, indent=4, ensure_ascii=False)
    logging.getLogger(APP_NAME).debug("Settings saved to %s", path)


# ---------- Shared helpers ----------
def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def stable_digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _seed_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise InvalidInputError(f"seed keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


def derive_seed(master: int, *keys) -> int:
    """Derive an independent 32-bit seed from a master seed and a key path."""
    entropy = [_seed_key(master)] + [_seed_key(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])


def write_json_atomic(data, path: str, *, sort_keys: bool = False, indent: int = 2) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=indent, sort_keys=sort_keys, ensure_ascii=False)
        f.write("\n")
    try:
        os.replace(tmp, path)
    except Exception:
        shutil.move(tmp, path)
    return path


def export_to_excel(save_path, data_rows: Iterable[Sequence], headers: List[str], title: str = "Results"):
    wb = Workbook()
    ws = wb.active
    ws.title = title

    headers = list(headers or [])
    for idx, h in enumerate(headers, start=1):
        ws.cell(row=1, column=idx, value=h)

    for row_idx, row in enumerate(data_rows, start=2):
        for col_idx, value in enumerate(row, start=1):
            ws.cell(row=row_idx, column=col_idx, value=value)

    wb.save(save_path)
    return save_path


def summarize_settings(settings: Dict[str, object]) -> str:
    keys = ("log_level", "output_directory", "n_jobs")
    return ", ".join(f"{k}={settings.get(k)!r}" for k in keys)


if __name__ == "__main__":
    from robustpl_cli import main as _cli_main

    raise SystemExit(_cli_main())
