"""
Dataset files: a CSV (``f0..f{d-1},label,provenance``) with a JSON sidecar
manifest, and manifest-indexed directories of segmentation scenes.

Floats are written with ``repr`` so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from main import InvalidInputError, write_json_atomic
from modules.datagen import LabeledDataset, Lesion, SegScene

LOGGER = logging.getLogger("RobustPL.Datagen")

DATASET_FORMAT_VERSION = 1
SCENES_MANIFEST = "manifest.json"


@dataclass(frozen=True)
class DatasetManifest:
    n: int
    d: int
    num_classes: int
    seed: Optional[int]
    spec_digest: str
    format_version: int = DATASET_FORMAT_VERSION

    def to_dict(self) -> Dict[str, object]:
        return {
            "n": self.n,
            "d": self.d,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "spec_digest": self.spec_digest,
            "format_version": self.format_version,
        }


def manifest_path_for(csv_path: str) -> str:
    base, _ext = os.path.splitext(csv_path)
    return base + ".manifest.json"


def _fmt(value: float) -> str:
    return repr(float(value))


def write_dataset_csv(ds: LabeledDataset, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    header = [f"f{i}" for i in range(ds.d)] + ["label", "provenance"]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row, label, flag in zip(ds.features, ds.labels, ds.provenance):
            writer.writerow([_fmt(v) for v in row] + [int(label), str(flag)])
    return path


def read_dataset_csv(path: str, num_classes: Optional[int] = None) -> LabeledDataset:
    manifest = read_manifest(manifest_path_for(path))
    if num_classes is None and manifest is not None:
        num_classes = manifest.num_classes
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty dataset file") from None
        if len(header) < 2 or header[-2:] != ["label", "provenance"]:
            raise InvalidInputError(f"{path}: header must end with label,provenance")
        d = len(header) - 2
        if header[:d] != [f"f{i}" for i in range(d)]:
            raise InvalidInputError(f"{path}: feature columns must be named f0..f{d - 1}")
        features: List[List[float]] = []
        labels: List[int] = []
        flags: List[str] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise InvalidInputError(f"{path}:{line_no}: expected {d + 2} columns, got {len(row)}")
            try:
                features.append([float(v) for v in row[:d]])
                labels.append(int(row[d]))
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{line_no}: {exc}") from None
            flags.append(row[d + 1])
    if num_classes is None:
        num_classes = (max(labels) + 1) if labels else 1
    feats = np.array(features, dtype=float).reshape(len(labels), d)
    return LabeledDataset(feats, np.array(labels, dtype=np.int64), np.array(flags), int(num_classes))


def write_manifest(manifest: DatasetManifest, path: str) -> str:
    return write_json_atomic(manifest.to_dict(), path, sort_keys=True)


def read_manifest(path: str) -> Optional[DatasetManifest]:
    if not os.path.isfile(path):
        return None
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    return DatasetManifest(
        n=int(data["n"]),
        d=int(data["d"]),
        num_classes=int(data["num_classes"]),
        seed=data.get("seed"),
        spec_digest=str(data.get("spec_digest", "")),
        format_version=int(data.get("format_version", DATASET_FORMAT_VERSION)),
    )


def write_dataset(ds: LabeledDataset, csv_path: str, seed: Optional[int], spec_digest: str) -> Tuple[str, str]:
    write_dataset_csv(ds, csv_path)
    manifest = DatasetManifest(n=ds.n, d=ds.d, num_classes=ds.num_classes, seed=seed, spec_digest=spec_digest)
    mpath = write_manifest(manifest, manifest_path_for(csv_path))
    LOGGER.info("Dataset written to %s (n=%d, d=%d, K=%d)", csv_path, ds.n, ds.d, ds.num_classes)
    return csv_path, mpath


# ---------- Scenes ----------
def _write_grid(grid: np.ndarray, path: str, as_int: bool) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for row in grid:
            writer.writerow([int(v) for v in row] if as_int else [_fmt(v) for v in row])


def _read_grid(path: str, as_int: bool) -> np.ndarray:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        rows = [[int(v) if as_int else float(v) for v in row] for row in csv.reader(handle) if row]
    return np.array(rows, dtype=np.int64 if as_int else float)


def write_scenes(scenes: List[SegScene], out_dir: str, seed: Optional[int] = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for idx, scene in enumerate(scenes):
        image_name = f"scene_{idx:04d}_image.csv"
        labels_name = f"scene_{idx:04d}_labels.csv"
        _write_grid(scene.image, os.path.join(out_dir, image_name), as_int=False)
        _write_grid(scene.label_grid, os.path.join(out_dir, labels_name), as_int=True)
        entries.append({"image": image_name, "labels": labels_name, "lesions": [l.to_dict() for l in scene.lesions]})
    height, width = scenes[0].shape if scenes else (0, 0)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "count": len(scenes),
        "height": height,
        "width": width,
        "num_classes": scenes[0].num_classes if scenes else 0,
        "seed": seed,
        "scenes": entries,
    }
    path = write_json_atomic(manifest, os.path.join(out_dir, SCENES_MANIFEST), sort_keys=True)
    LOGGER.info("%d scenes written to %s", len(scenes), out_dir)
    return path


def read_scenes(out_dir: str) -> List[SegScene]:
    with open(os.path.join(out_dir, SCENES_MANIFEST), "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    scenes = []
    for entry in manifest.get("scenes") or []:
        lesions = tuple(Lesion(**lesion) for lesion in entry.get("lesions") or [])
        scenes.append(
            SegScene(
                image=_read_grid(os.path.join(out_dir, entry["image"]), as_int=False),
                label_grid=_read_grid(os.path.join(out_dir, entry["labels"]), as_int=True),
                num_classes=int(manifest["num_classes"]),
                lesions=lesions,
            )
        )
    return scenes
