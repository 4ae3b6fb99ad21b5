"""
Result files for experiment runs: result.json, result.csv, optional
result.xlsx and the run manifest.

Everything that varies between identical runs (timestamps, wall-clock per
arm) goes into the run manifest only.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Mapping, Optional, Sequence

from humanfriendly import format_timespan
from humanfriendly.tables import format_pretty_table

from main import APP_NAME, APP_VERSION, export_to_excel, write_json_atomic
from modules.pipeline import ExperimentResult, MetricSummary

LOGGER = logging.getLogger("RobustPL.Reporting")

RESULT_JSON = "result.json"
RESULT_CSV = "result.csv"
RESULT_XLSX = "result.xlsx"
RUN_MANIFEST = "run_manifest.json"
CSV_HEADERS = ["fraction", "repeat", "arm", "metric", "value"]


def _summary_dict(summary: Optional[MetricSummary]) -> Optional[Dict[str, Any]]:
    return None if summary is None else summary.to_dict()


def result_block(result: ExperimentResult) -> Dict[str, Any]:
    return {
        "labeled_fraction": result.labeled_fraction,
        "arms": list(result.arms),
        "summary": {arm: {m: s.to_dict() for m, s in metrics.items()} for arm, metrics in result.summary.items()},
        "pseudo_label_error": _summary_dict(result.pseudo_label_error),
        "teacher_pseudo_error": _summary_dict(result.teacher_pseudo_error),
        "repeats": [
            {
                "repeat": outcome.repeat,
                "metrics": outcome.metrics,
                "pseudo_label_error": outcome.pseudo_label_error,
                "teacher_pseudo_error": outcome.teacher_pseudo_error,
            }
            for outcome in result.repeats
        ],
    }


def result_rows(results: Sequence[ExperimentResult]) -> List[List[Any]]:
    rows: List[List[Any]] = []
    for result in results:
        for outcome in result.repeats:
            for arm in result.arms:
                for metric, value in outcome.metrics[arm].items():
                    rows.append([result.labeled_fraction, outcome.repeat, arm, metric, value])
    return rows


def write_result_json(results: Sequence[ExperimentResult], config_echo: Mapping[str, Any], digest: str, path: str) -> str:
    document = {
        "tool": APP_NAME,
        "version": APP_VERSION,
        "config_digest": digest,
        "config": config_echo,
        "results": [result_block(r) for r in results],
    }
    return write_json_atomic(document, path)


def write_result_csv(results: Sequence[ExperimentResult], path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_HEADERS)
        for fraction, repeat, arm, metric, value in result_rows(results):
            writer.writerow([repr(float(fraction)), repeat, arm, metric, repr(float(value))])
    return path


def write_result_xlsx(results: Sequence[ExperimentResult], path: str) -> str:
    return export_to_excel(path, result_rows(results), CSV_HEADERS, title="Results")


def summary_table(results: Sequence[ExperimentResult]) -> str:
    """Human-readable mean ± std per fraction, arm and metric."""
    rows = []
    for result in results:
        for arm in result.arms:
            for metric, summary in result.summary[arm].items():
                spread = "n/a" if summary.std is None else f"{summary.std:.4f}"
                rows.append([f"{result.labeled_fraction:g}", arm, metric, f"{summary.mean:.4f}", spread])
    return format_pretty_table(rows, ["p", "arm", "metric", "mean", "std"])


@dataclass
class RunManifest:
    config_digest: str
    master_seed: int
    command: str
    tool_version: str = APP_VERSION
    started_at: str = ""
    finished_at: str = ""
    outputs: Dict[str, str] = field(default_factory=dict)
    arm_seconds: Dict[str, List[float]] = field(default_factory=dict)
    elapsed_seconds: float = 0.0

    def start(self) -> "RunManifest":
        self.started_at = _now()
        return self

    def finish(self, elapsed_seconds: float) -> "RunManifest":
        self.finished_at = _now()
        self.elapsed_seconds = float(elapsed_seconds)
        return self

    def record_arm_times(self, results: Sequence[ExperimentResult]) -> None:
        for result in results:
            for outcome in result.repeats:
                for arm, seconds in outcome.arm_seconds.items():
                    self.arm_seconds.setdefault(f"p={result.labeled_fraction:g}/{arm}", []).append(seconds)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tool": APP_NAME,
            "tool_version": self.tool_version,
            "command": self.command,
            "config_digest": self.config_digest,
            "master_seed": self.master_seed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "elapsed": format_timespan(self.elapsed_seconds),
            "elapsed_seconds": self.elapsed_seconds,
            "outputs": dict(self.outputs),
            "arm_seconds": dict(self.arm_seconds),
        }

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, RUN_MANIFEST)
        self.outputs.setdefault("run_manifest", path)
        return write_json_atomic(self.to_dict(), path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_experiment_outputs(
    results: Sequence[ExperimentResult],
    config_echo: Mapping[str, Any],
    digest: str,
    out_dir: str,
    xlsx: bool = False,
) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    outputs = {
        "result_json": write_result_json(results, config_echo, digest, os.path.join(out_dir, RESULT_JSON)),
        "result_csv": write_result_csv(results, os.path.join(out_dir, RESULT_CSV)),
    }
    if xlsx:
        outputs["result_xlsx"] = write_result_xlsx(results, os.path.join(out_dir, RESULT_XLSX))
    LOGGER.info("Results written to %s", out_dir)
    return outputs
