"""CSV tables written by the command-line tools.

Every table has a fixed, versioned column list. Readers compare the header
line against the expected columns and refuse anything else. Floats are
written with ``repr`` so reruns produce byte-identical files.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .exceptions import SchemaError


@dataclass(frozen=True)
class Schema:
    name: str
    version: int
    columns: tuple
    types: tuple

    @property
    def tag(self) -> str:
        return f"{self.name}/v{self.version}"

    def parse(self, row: Sequence[str]) -> dict:
        return {c: t(v) for c, t, v in zip(self.columns, self.types, row)}


def _schema(name: str, version: int, *cols: tuple) -> Schema:
    return Schema(name, version, tuple(c for c, _ in cols), tuple(t for _, t in cols))


def metrics_schema(n_modalities: int) -> Schema:
    uni = [(f"uni_acc_{k + 1}", float) for k in range(n_modalities)]
    return _schema("metrics", 1, ("epoch", int), ("split", str), ("multi_acc", float), *uni,
                   ("loss_d", float), ("loss_uni_sum", float))


def summary_schema(name: str, key: tuple, n_modalities: int) -> Schema:
    """One row per run of an ablation or sweep, keyed by ``key``."""
    uni = [(f"uni_acc_{k + 1}", float) for k in range(n_modalities)]
    return _schema(name, 1, key, ("multi_acc", float), *uni, ("loss_d", float),
                   ("loss_uni_sum", float), ("first_batch_digest", str), ("status", str))


GRADNORMS = _schema("gradnorms", 1, ("step", int), ("group", str), ("norm", float))
SUPPRESSION = _schema("suppression", 1, ("step", int), ("sample", int), ("geo_mean_s", float))
GRADCOMPARE = _schema("gradcompare", 1, ("step", int), ("norm_g_uni", float),
                      ("norm_g_multi", float), ("margin", float))


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, schema: Schema, rows: Iterable[Sequence]) -> int:
    """Write ``rows`` (sequences in column order); returns the row count."""
    n = 0
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.columns)
        for row in rows:
            if len(row) != len(schema.columns):
                raise SchemaError(f"{schema.tag}: row has {len(row)} cells, "
                                  f"expected {len(schema.columns)}")
            writer.writerow([_cell(v) for v in row])
            n += 1
    return n


def read_table(path, schema: Schema, version: Optional[int] = None) -> list:
    """Parse a table written with ``schema``; any header difference is an error."""
    if version is not None and version != schema.version:
        raise SchemaError(f"{path}: file is {schema.name}/v{version}, reader expects {schema.tag}")
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != schema.columns:
            raise SchemaError(f"{path}: header {header} does not match {schema.tag} "
                              f"columns {list(schema.columns)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(schema.columns):
                raise SchemaError(f"{path}: line {lineno} has {len(row)} cells")
            try:
                rows.append(schema.parse(row))
            except ValueError as exc:
                raise SchemaError(f"{path}: line {lineno}: {exc}") from None
    return rows
