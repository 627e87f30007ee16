"""Labeled feature datasets: validation, CSV ingestion/export, splitting.

A dataset is an immutable table of (id, feature vector, binary label,
class tag). Label 0 marks normal samples, label 1 anomalies; the class
tag names the anomaly class (or normal mode) and is only used by the
evaluation protocols, never by training losses.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    ParseError,
    SchemaError,
    SplitError,
    ValidationError,
)
from .seeding import rng_for

NORMAL = 0
ANOMALY = 1


@dataclass(frozen=True)
class FeatureDataset:
    """Immutable labeled feature table.

    ``features`` is an (n, d) float64 array; rows align with ``ids``,
    ``labels`` and ``class_tags``. The array is marked read-only so the
    dataset can be shared freely across threads.
    """

    ids: tuple[str, ...]
    features: np.ndarray
    labels: np.ndarray
    class_tags: tuple[str, ...]
    _row_of: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValidationError("features must be a 2-D array")
        n = feats.shape[0]
        if not (len(self.ids) == n == labels.shape[0] == len(self.class_tags)):
            raise ValidationError("ids, features, labels, class_tags lengths differ")
        if n == 0:
            raise ValidationError("dataset is empty")
        if not np.isfinite(feats).all():
            bad = int(np.argwhere(~np.isfinite(feats))[0][0])
            raise ValidationError(f"non-finite feature value in sample {self.ids[bad]!r}")
        if not np.isin(labels, (NORMAL, ANOMALY)).all():
            bad = int(np.argwhere(~np.isin(labels, (NORMAL, ANOMALY)))[0][0])
            raise ValidationError(f"label of sample {self.ids[bad]!r} is not in {{0, 1}}")
        if len(set(self.ids)) != n:
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise ValidationError(f"duplicate sample id {dup!r}")
        if not (labels == NORMAL).any():
            raise ValidationError("dataset has no normal samples")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "class_tags", tuple(self.class_tags))
        object.__setattr__(self, "_row_of", {s: i for i, s in enumerate(self.ids)})

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_normal(self) -> int:
        return int((self.labels == NORMAL).sum())

    @property
    def n_anomaly(self) -> int:
        return int((self.labels == ANOMALY).sum())

    def normal_rows(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NORMAL)

    def anomaly_rows(self) -> np.ndarray:
        return np.flatnonzero(self.labels == ANOMALY)

    def row_of(self, sample_id: str) -> int:
        return self._row_of[sample_id]

    def take(self, rows) -> "FeatureDataset":
        """New dataset containing the given rows, in the given order."""
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureDataset(
            ids=tuple(self.ids[i] for i in rows),
            features=self.features[rows].copy(),
            labels=self.labels[rows].copy(),
            class_tags=tuple(self.class_tags[i] for i in rows),
        )


@dataclass(frozen=True)
class SplitSpec:
    """Seeded two-way split with fractions summing to 1."""

    seed: int
    fractions: tuple[float, float] = (0.75, 0.25)

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) != 2:
            raise ConfigurationError("fractions: exactly two parts are supported")
        if any(not (0.0 < f <= 1.0) for f in fr):
            raise ConfigurationError("fractions: each must lie in (0, 1]")
        if abs(sum(fr) - 1.0) > 1e-12:
            raise ConfigurationError("fractions: must sum to 1 within 1e-12")
        object.__setattr__(self, "fractions", fr)


def stratified_split(ds: FeatureDataset, spec: SplitSpec) -> tuple[FeatureDataset, FeatureDataset]:
    """Split per label class with largest-remainder rounding.

    Deterministic given ``spec.seed``; parts are disjoint, their union is
    the input, and per-class counts differ from the exact proportions by
    at most one sample. Raises :class:`SplitError` if a present class
    would end up empty in either part.
    """
    part_rows: list[list[int]] = [[], []]
    for label in sorted(set(ds.labels.tolist())):
        rows = np.flatnonzero(ds.labels == label)
        counts = _largest_remainder(len(rows), spec.fractions)
        if min(counts) == 0:
            raise SplitError(
                f"class {label}: fraction {spec.fractions} empties one part "
                f"({len(rows)} samples available)"
            )
        order = rng_for(spec.seed, "split", label).permutation(len(rows))
        chosen = rows[order[: counts[0]]]
        rest = rows[order[counts[0] :]]
        part_rows[0].extend(chosen.tolist())
        part_rows[1].extend(rest.tolist())
    return ds.take(sorted(part_rows[0])), ds.take(sorted(part_rows[1]))


def _largest_remainder(n: int, fractions) -> list[int]:
    ideal = [n * f for f in fractions]
    counts = [math.floor(x) for x in ideal]
    remainders = [x - c for x, c in zip(ideal, counts)]
    leftover = n - sum(counts)
    # ties broken toward the lower part index
    for i in sorted(range(len(fractions)), key=lambda i: (-remainders[i], i))[:leftover]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class CsvSchema:
    """Column layout of a feature CSV: ``id,label,class,f0..f{d-1}``."""

    id_column: str = "id"
    label_column: str = "label"
    class_column: str = "class"
    feature_prefix: str = "f"


def ingest_csv(path, schema: CsvSchema = CsvSchema()) -> FeatureDataset:
    """Read a feature CSV into a validated dataset, preserving row order."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        dim = _check_header(header, schema, path)
        ids, feats, labels, tags = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + dim:
                raise ParseError(
                    f"{path}: line {lineno}: expected {3 + dim} columns, got {len(row)}"
                )
            sid, label_text, tag = row[0], row[1], row[2]
            if label_text not in ("0", "1"):
                raise ParseError(f"{path}: line {lineno}: label must be 0 or 1")
            try:
                values = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            ids.append(sid)
            labels.append(int(label_text))
            tags.append(tag)
            feats.append(values)
    if not ids:
        raise SchemaError(f"{path}: no data rows")
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise ValidationError(f"{path}: duplicate sample id {dup!r}")
    return FeatureDataset(
        ids=tuple(ids),
        features=np.array(feats, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        class_tags=tuple(tags),
    )


def _check_header(header, schema: CsvSchema, path) -> int:
    expected_head = [schema.id_column, schema.label_column, schema.class_column]
    if header[:3] != expected_head:
        raise SchemaError(f"{path}: header must start with {','.join(expected_head)}")
    feature_cols = header[3:]
    if not feature_cols:
        raise SchemaError(f"{path}: no feature columns")
    for i, name in enumerate(feature_cols):
        if name != f"{schema.feature_prefix}{i}":
            raise SchemaError(
                f"{path}: feature column {i} is {name!r}, "
                f"expected {schema.feature_prefix}{i!r}"
            )
    return len(feature_cols)


def write_csv(ds: FeatureDataset, path, schema: CsvSchema = CsvSchema()) -> None:
    """Export to CSV; floats use shortest round-trip formatting so that
    ``ingest_csv(write_csv(ds)) == ds`` bitwise."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [schema.id_column, schema.label_column, schema.class_column]
            + [f"{schema.feature_prefix}{j}" for j in range(ds.dim)]
        )
        for i, sid in enumerate(ds.ids):
            writer.writerow(
                [sid, str(int(ds.labels[i])), ds.class_tags[i]]
                + [repr(float(v)) for v in ds.features[i]]
            )
