"""Report files: tab-delimited text tables and JSON-lines records.

Floats are written with a fixed number of decimals in tables and with
``repr`` in records, so a rerun with the same inputs produces the same bytes.
NaN becomes ``nan`` in tables and ``null`` in records.
"""
from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np

TABLE_DECIMALS = 6


def _plain(v):
    """Convert numpy scalars/arrays into JSON-friendly Python values."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return None if math.isnan(v) else v
    return v


def format_cell(v, decimals: int = TABLE_DECIMALS) -> str:
    v = _plain(v)
    if v is None:
        return "nan"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.{decimals}f}"
    if isinstance(v, list):
        return " ".join(format_cell(x, decimals) for x in v)
    return str(v)


def format_table(rows, columns=None, title: str | None = None) -> str:
    """Tab-separated table with a header line; ``title`` becomes a ``#`` line."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    out = []
    if title:
        out.append(f"# {title}")
    out.append("\t".join(columns))
    for r in rows:
        out.append("\t".join(format_cell(r.get(c)) for c in columns))
    return "\n".join(out) + "\n"


def format_records(records) -> str:
    return "".join(json.dumps(_plain(r), sort_keys=True) + "\n" for r in records)


def parse_records(text: str) -> list:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def parse_table(text: str) -> list:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not lines:
        return []
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # newline="" keeps "\n" on every platform
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def write_report(out_dir, stem: str, rows, columns=None, title=None, records=None) -> list:
    """Write ``<stem>.tsv`` and ``<stem>.jsonl``; records default to the rows."""
    out_dir = os.fspath(out_dir)
    rows = list(rows)
    return [
        write_text(Path(out_dir) / f"{stem}.tsv", format_table(rows, columns, title)),
        write_text(Path(out_dir) / f"{stem}.jsonl",
                   format_records(rows if records is None else records)),
    ]


def read_records(path) -> list:
    with open(path) as fh:
        return parse_records(fh.read())
