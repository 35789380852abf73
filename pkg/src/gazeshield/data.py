"""Gaze dataset model, CSV ingestion/cleaning, synthetic generation and label encoding."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import FEATURE_NAMES
from . import rng as rng_mod

logger = logging.getLogger(__name__)

COLUMNS = (
    "timestamp",
    "gaze_x",
    "gaze_y",
    "left_pupil_dia",
    "right_pupil_dia",
    "head_x",
    "head_y",
    "head_z",
    "game_level",
    "diagnosis",
    "student_id",
)
LEVELS = (1, 2, 3)

# Physical location/scale of each latent feature unit: pixels, mm, mm.
_FEATURE_BASE = np.array([960.0, 540.0, 4.5, 4.5, 0.0, 0.0, 600.0])
_FEATURE_SCALE = np.array([40.0, 30.0, 0.05, 0.05, 4.0, 3.0, 6.0])
_MIN_PUPIL_MM = 0.05
_SAMPLE_PERIOD_MS = 33


class DataError(Exception):
    """Raised for unreadable, malformed or empty datasets."""


@dataclass(frozen=True)
class GazeRecord:
    gaze_x: float
    gaze_y: float
    left_pupil_dia: float
    right_pupil_dia: float
    head_x: float
    head_y: float
    head_z: float
    timestamp: int
    game_level: int
    diagnosis: str
    student_id: int

    def __post_init__(self):
        if self.game_level not in LEVELS:
            raise ValueError(f"game_level must be one of {LEVELS}, got {self.game_level}")
        if not (self.left_pupil_dia > 0 and self.right_pupil_dia > 0):
            raise ValueError("pupil diameters must be strictly positive")
        if self.student_id < 1:
            raise ValueError(f"student_id must be >= 1, got {self.student_id}")
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")

    @property
    def features(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in FEATURE_NAMES)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store of gaze records; ``features`` is N x 7 in FEATURE_NAMES order."""

    features: np.ndarray
    timestamp: np.ndarray
    game_level: np.ndarray
    diagnosis: np.ndarray
    student_id: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self):
        n = len(self.features)
        if self.features.shape != (n, len(self.feature_names)):
            raise ValueError(f"features must be N x {len(self.feature_names)}")
        for name in ("timestamp", "game_level", "diagnosis", "student_id"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has the wrong length")
        for arr in (self.features, self.timestamp, self.game_level, self.diagnosis, self.student_id):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.features)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.feature_names == other.feature_names
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.timestamp, other.timestamp)
            and np.array_equal(self.game_level, other.game_level)
            and np.array_equal(self.diagnosis, other.diagnosis)
            and np.array_equal(self.student_id, other.student_id)
        )

    @property
    def records(self) -> list[GazeRecord]:
        return [
            GazeRecord(*map(float, self.features[i]), int(self.timestamp[i]),
                       int(self.game_level[i]), str(self.diagnosis[i]), int(self.student_id[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_records(cls, records: Sequence[GazeRecord]) -> Dataset:
        return cls(
            features=np.array([r.features for r in records], dtype=np.float64).reshape(-1, len(FEATURE_NAMES)),
            timestamp=np.array([r.timestamp for r in records], dtype=np.int64),
            game_level=np.array([r.game_level for r in records], dtype=np.int64),
            diagnosis=np.array([r.diagnosis for r in records], dtype=str),
            student_id=np.array([r.student_id for r in records], dtype=np.int64),
        )

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.timestamp[idx], self.game_level[idx],
                       self.diagnosis[idx], self.student_id[idx], self.feature_names)

    @property
    def student_ids(self) -> list[int]:
        return sorted(set(self.student_id.tolist()))

    def to_csv(self, path=None, schema: Mapping[str, str] | None = None) -> bytes:
        """Serialise with the default (or given) column names.

        Floats use ``repr`` so load(to_csv(ds)) reproduces ``ds`` exactly.
        Returns the bytes; also writes them when ``path`` is given.
        """
        header = [_resolve_schema(schema)[c] for c in COLUMNS]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(self)):
            f = self.features[i]
            writer.writerow([
                int(self.timestamp[i]), *(repr(float(v)) for v in f),
                int(self.game_level[i]), str(self.diagnosis[i]), int(self.student_id[i]),
            ])
        data = buf.getvalue().encode("utf-8")
        if path is not None:
            Path(path).write_bytes(data)
        return data


@dataclass(frozen=True)
class LoadResult:
    dataset: Dataset
    n_invalid: int
    n_duplicates: int

    @property
    def dropped(self) -> int:
        return self.n_invalid + self.n_duplicates


def _resolve_schema(schema: Mapping[str, str] | None) -> dict[str, str]:
    resolved = {c: c for c in COLUMNS}
    if schema:
        unknown = set(schema) - set(COLUMNS)
        if unknown:
            raise DataError(f"schema maps unknown fields: {sorted(unknown)}")
        resolved.update(schema)
    return resolved


def _parse_row(row: dict, cols: dict[str, str]) -> GazeRecord | None:
    try:
        values = {}
        for name in FEATURE_NAMES:
            v = float(row[cols[name]])
            if not math.isfinite(v):
                return None
            values[name] = v
        ts = row[cols["timestamp"]].strip()
        level = row[cols["game_level"]].strip()
        sid = row[cols["student_id"]].strip()
        diagnosis = row[cols["diagnosis"]].strip()
        if not diagnosis:
            return None
        return GazeRecord(**values, timestamp=int(ts), game_level=int(level),
                          diagnosis=diagnosis, student_id=int(sid))
    except (TypeError, ValueError, AttributeError):
        # missing cell (None), non-numeric text, or an invariant violation
        return None


def load_dataset(path, schema: Mapping[str, str] | None = None) -> LoadResult:
    """Read a gaze CSV, dropping unparsable/invalid rows and exact duplicates."""
    cols = _resolve_schema(schema)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [cols[c] for c in COLUMNS if cols[c] not in header]
    if missing:
        raise DataError(f"{path}: header lacks mapped columns {missing}")

    records, seen = [], set()
    n_invalid = n_dup = 0
    for row in reader:
        rec = _parse_row(row, cols)
        if rec is None:
            n_invalid += 1
            continue
        key = tuple(row.get(h) for h in header)
        if key in seen:
            n_dup += 1
            continue
        seen.add(key)
        records.append(rec)
    if not records:
        raise DataError(f"{path}: no rows survived cleaning")
    logger.info("loaded %d records from %s (%d invalid, %d duplicate)", len(records), path, n_invalid, n_dup)
    return LoadResult(Dataset.from_records(records), n_invalid, n_dup)


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic gaze population.

    Feature means are placed on a per-feature lattice: on every feature the
    students' means are a seeded permutation of a grid whose spacing is
    ``signature_separation`` within-student standard deviations (the pooled
    std, 1 in latent units).  ``level_drift`` shifts every feature mean by
    ``level_drift * (level - 1)`` lattice steps, a shared task-difficulty
    shift.  With ``signature_separation == 0`` all students share one
    distribution.

    ``outlier_offset`` moves the highest-id student outside the hull of the
    others so its mean is at least that many pooled stds from every other
    mean; ``clone_of`` instead gives it another student's mean.
    """

    n_students: int = 9
    levels: tuple[int, ...] = LEVELS
    records_per_student_per_level: int = 100
    signature_separation: float = 4.0
    level_drift: float = 0.0
    diagnosis_assignment: Mapping[int, str] | None = None
    seed: int = 42
    outlier_offset: float | None = None
    clone_of: int | None = None

    def __post_init__(self):
        if self.n_students < 1:
            raise ValueError("n_students must be >= 1")
        if not self.levels or any(l not in LEVELS for l in self.levels):
            raise ValueError(f"levels must be a non-empty subset of {LEVELS}")
        if self.records_per_student_per_level < 1:
            raise ValueError("records_per_student_per_level must be >= 1")
        if self.signature_separation < 0 or self.level_drift < 0:
            raise ValueError("signature_separation and level_drift must be >= 0")
        if self.outlier_offset is not None and self.clone_of is not None:
            raise ValueError("outlier_offset and clone_of are mutually exclusive")
        if self.clone_of is not None and not 1 <= self.clone_of < self.n_students:
            raise ValueError("clone_of must name a student other than the last")
        if self.outlier_offset is not None and (self.outlier_offset < 0 or self.n_students < 2):
            raise ValueError("outlier_offset needs >= 2 students and a non-negative offset")

    def resolved_diagnoses(self) -> dict[int, str]:
        if self.diagnosis_assignment is None:
            return default_diagnoses(self.n_students)
        assignment = {int(k): str(v) for k, v in self.diagnosis_assignment.items()}
        missing = [s for s in range(1, self.n_students + 1) if s not in assignment]
        if missing:
            raise ValueError(f"diagnosis_assignment is missing students {missing}")
        return assignment


def default_diagnoses(n_students: int) -> dict[int, str]:
    """The first two-thirds of students MDI, the rest DD."""
    n_mdi = max(1, math.ceil(2 * n_students / 3))
    return {s: ("MDI" if s <= n_mdi else "DD") for s in range(1, n_students + 1)}


def student_means(config: SyntheticConfig) -> np.ndarray:
    """Latent per-student feature means (S x 7), before level drift."""
    S, d = config.n_students, len(FEATURE_NAMES)
    rng = rng_mod.stream(config.seed, "synthetic", "means")
    grid = np.stack([rng.permutation(S) for _ in range(d)], axis=1).astype(np.float64)
    means = (grid - grid.mean(axis=0)) * config.signature_separation
    if config.clone_of is not None:
        means[S - 1] = means[config.clone_of - 1]
    elif config.outlier_offset is not None:
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        others = means[: S - 1]
        center = others.mean(axis=0)
        reach = float(((others - center) @ u).max())
        # beyond every other mean by outlier_offset along u
        means[S - 1] = center + (reach + config.outlier_offset) * u
    return means


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Seeded synthetic population; a pure function of ``config``."""
    diagnoses = config.resolved_diagnoses()
    means = student_means(config)
    noise_rng = rng_mod.stream(config.seed, "synthetic", "noise")
    R, d = config.records_per_student_per_level, len(FEATURE_NAMES)
    step = config.signature_separation
    blocks, ts, lv, dx, sid = [], [], [], [], []
    for s in range(1, config.n_students + 1):
        for level in sorted(config.levels):
            shift = config.level_drift * step * (level - 1)
            latent = means[s - 1] + shift + noise_rng.standard_normal((R, d))
            blocks.append(latent)
            ts.append(np.arange(R, dtype=np.int64) * _SAMPLE_PERIOD_MS)
            lv.append(np.full(R, level, dtype=np.int64))
            dx.extend([diagnoses[s]] * R)
            sid.append(np.full(R, s, dtype=np.int64))
    physical = _FEATURE_BASE + _FEATURE_SCALE * np.vstack(blocks)
    physical[:, 2:4] = np.maximum(physical[:, 2:4], _MIN_PUPIL_MM)
    return Dataset(physical, np.concatenate(ts), np.concatenate(lv), np.array(dx, dtype=str),
                   np.concatenate(sid))


@dataclass(frozen=True)
class LabelMap:
    """Bijection between label strings and 0-based indices (lexicographic order)."""

    labels: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be distinct")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    @classmethod
    def fit(cls, values) -> LabelMap:
        return cls(tuple(sorted({str(v) for v in values})))

    def __len__(self) -> int:
        return len(self.labels)

    def encode(self, values) -> np.ndarray:
        try:
            return np.array([self._index[str(v)] for v in values], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"label {exc.args[0]!r} is not in the map") from None

    def decode(self, indices) -> list[str]:
        out = []
        for i in np.asarray(indices, dtype=np.int64).ravel():
            if not 0 <= i < len(self.labels):
                raise IndexError(f"label index {i} outside 0..{len(self.labels) - 1}")
            out.append(self.labels[i])
        return out


def encode_labels(ds: Dataset, target: str) -> tuple[np.ndarray, np.ndarray, LabelMap]:
    """Feature matrix (N x 7), label indices and their map for ``target``.

    Labels are ordered lexicographically as strings, so student ids >= 10
    sort before 2.  Level and student id never appear as features.
    """
    if len(ds) == 0:
        raise DataError("cannot encode an empty dataset")
    if target == "diagnosis":
        raw = ds.diagnosis
    elif target == "student_id":
        raw = ds.student_id.astype(str)
    else:
        raise ValueError(f"target must be 'diagnosis' or 'student_id', got {target!r}")
    label_map = LabelMap.fit(raw)
    return np.array(ds.features, dtype=np.float64), label_map.encode(raw), label_map
