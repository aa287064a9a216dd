"""File formats: dataset ingestion with attribute-kind inference, partition /
truth / blocks / report artifacts, and flat key=value config files."""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

from .blocking import Block
from .model import Attribute, ERError, Record

CATEGORICAL_CUTOFF = 20


class DuplicateId(ERError):
    pass


class MissingHeader(ERError):
    pass


class EmptyFile(ERError):
    pass


@dataclass
class Dataset:
    records: dict[str, Record]
    ground_truth: dict[str, str] | None = None
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.ground_truth is not None:
            missing = [r for r in self.records if r not in self.ground_truth]
            if missing:
                raise ERError(
                    f"ground truth does not cover record id {missing[0]!r}"
                )


def _infer_kind(values: list[str]) -> str:
    non_empty = [v for v in values if v]
    if non_empty:
        try:
            for v in non_empty:
                float(v)
            return "numeric"
        except ValueError:
            pass
    if len(set(non_empty)) <= CATEGORICAL_CUTOFF:
        return "categorical"
    return "textual"


def ingest(
    path: str,
    id_column: str = "id",
    truth_column: str | None = None,
    delimiter: str = ",",
) -> Dataset:
    """Read a delimited file with a header into a Dataset.

    Attribute kinds are inferred per column: numeric if every non-empty value
    parses as a number, categorical if there are at most 20 distinct values,
    textual otherwise. The truth column, when named, is stripped from the
    attributes and returned as ground truth.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path}: no header row")
        if id_column not in header:
            raise MissingHeader(f"{path}: no {id_column!r} column in header")
        if truth_column is not None and truth_column not in header:
            raise MissingHeader(f"{path}: no {truth_column!r} column in header")
        rows = [row for row in reader if row]
    if not rows:
        raise EmptyFile(f"{path}: no data rows")

    id_idx = header.index(id_column)
    truth_idx = header.index(truth_column) if truth_column else None
    attr_columns = [
        (i, name)
        for i, name in enumerate(header)
        if i != id_idx and i != truth_idx
    ]
    kinds = {
        name: _infer_kind([row[i] if i < len(row) else "" for row in rows])
        for i, name in attr_columns
    }

    records: dict[str, Record] = {}
    truth: dict[str, str] = {}
    for row_no, row in enumerate(rows, 2):
        rid = row[id_idx]
        if rid in records:
            raise DuplicateId(f"{path} row {row_no}: duplicate id {rid!r}")
        records[rid] = Record(
            id=rid,
            attributes=tuple(
                Attribute(name, row[i] if i < len(row) else "", kinds[name])
                for i, name in attr_columns
            ),
        )
        if truth_idx is not None:
            truth[rid] = row[truth_idx]
    return Dataset(records, truth or None, provenance=[path])


def atomic_write(path: str, content: str) -> None:
    """Write a file fully or not at all (temp file + atomic rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(path: str, records: dict[str, Record], truth=None) -> None:
    attr_names = list(
        dict.fromkeys(
            a.name for r in records.values() for a in r.attributes
        )
    )
    rows = [["id"] + attr_names + (["entity_id"] if truth else [])]
    for rid in sorted(records):
        values = {a.name: a.value for a in records[rid].attributes}
        row = [rid] + [values.get(name, "") for name in attr_names]
        if truth:
            row.append(truth[rid])
        rows.append(row)
    out = "\n".join(",".join(row) for row in rows) + "\n"
    atomic_write(path, out)


def save_labels(path: str, labels: dict[str, str], value_name: str) -> None:
    lines = [f"record_id,{value_name}"]
    lines.extend(f"{rid},{labels[rid]}" for rid in sorted(labels))
    atomic_write(path, "\n".join(lines) + "\n")


def load_labels(path: str) -> dict[str, str]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path}: no header row")
        if not header or header[0] != "record_id":
            raise MissingHeader(f"{path}: expected a record_id column first")
        out: dict[str, str] = {}
        for row in reader:
            if not row:
                continue
            if row[0] in out:
                raise DuplicateId(f"{path}: duplicate record id {row[0]!r}")
            out[row[0]] = row[1]
    if not out:
        raise EmptyFile(f"{path}: no data rows")
    return out


def save_blocks(path: str, blocks: list[Block]) -> None:
    lines = ["block_id,record_id"]
    for block in blocks:
        lines.extend(f"{block.block_id},{rid}" for rid in block.members)
    atomic_write(path, "\n".join(lines) + "\n")


def load_blocks(path: str) -> list[Block]:
    members: dict[str, list[str]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0] != "block_id":
            raise MissingHeader(f"{path}: expected a block_id column first")
        for row in reader:
            if row:
                members.setdefault(row[0], []).append(row[1])
    return [
        Block(block_id, tuple(ids)) for block_id, ids in sorted(members.items())
    ]


def save_report(path: str, report: dict) -> None:
    atomic_write(path, json.dumps(report, indent=2, sort_keys=True) + "\n")


def load_config(path: str) -> dict[str, str]:
    """Parse a flat key=value config file; '#' starts a comment line."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ERError(f"{path} line {line_no}: expected key=value")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
