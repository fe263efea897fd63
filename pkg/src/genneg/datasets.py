"""Point datasets with train/validation splits and CSV persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Dataset:
    train: np.ndarray
    val: np.ndarray
    meta: dict

    @property
    def dim(self) -> int:
        return self.train.shape[1]


def _write_csv(path: Path, rows: np.ndarray) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(rows.shape[1])])
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def _read_csv(path: Path) -> np.ndarray:
    with path.open() as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.asarray([[float(v) for v in row] for row in reader])


def save_dataset(directory, dataset: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_csv(directory / "train.csv", dataset.train)
    _write_csv(directory / "val.csv", dataset.val)
    (directory / "dataset.json").write_text(
        json.dumps(dataset.meta, indent=2, sort_keys=True))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    if not (directory / "train.csv").exists():
        raise ConfigError(f"no dataset at {directory}")
    return Dataset(train=_read_csv(directory / "train.csv"),
                   val=_read_csv(directory / "val.csv"),
                   meta=json.loads((directory / "dataset.json").read_text()))
