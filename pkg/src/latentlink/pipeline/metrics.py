"""Append-only, tab-separated metric records.

Every file starts with a header line naming the schema version and the
columns. Each record is flushed as one complete line, so a crash can at
worst leave a truncated final line, which readers skip.
"""

from __future__ import annotations

import math
from pathlib import Path

SCHEMA_VERSION = 1


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


class MetricsSink:
    def __init__(self, path, columns, flush_every: int = 1):
        self.path = Path(path)
        self.columns = tuple(columns)
        self.flush_every = max(int(flush_every), 1)
        self._pending = 0
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        if not fresh:
            header = self.path.read_text().splitlines()[0]
            if header != self.header:
                raise ValueError(f"{self.path}: existing header {header!r} differs from {self.header!r}")
        self._fh = open(self.path, "a", encoding="utf-8")
        if fresh:
            self._fh.write(self.header + "\n")
            self._fh.flush()

    @property
    def header(self) -> str:
        return f"#v{SCHEMA_VERSION}\t" + "\t".join(self.columns)

    def write(self, **record) -> None:
        missing = set(self.columns) - set(record)
        if missing or set(record) - set(self.columns):
            raise ValueError(f"record fields {sorted(record)} do not match columns {self.columns}")
        if self._fh.closed:
            self._fh = open(self.path, "a", encoding="utf-8")
        self._fh.write("\t".join(_fmt(record[c]) for c in self.columns) + "\n")
        self._pending += 1
        if self._pending >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        self._fh.flush()
        self._pending = 0

    def close(self) -> None:
        if not self._fh.closed:
            self.flush()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _parse(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def read_metrics(path) -> list[dict]:
    """Parse a metrics file; a truncated final line is ignored."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or not lines[0].startswith("#v"):
        raise ValueError(f"{path}: missing metrics header")
    columns = lines[0].split("\t")[1:]
    body = lines[1:]
    # the final element is '' when the file ends with a newline, a partial record otherwise
    complete = body[:-1]
    out = []
    for line in complete:
        parts = line.split("\t")
        if len(parts) != len(columns):
            continue
        out.append({c: _parse(v) for c, v in zip(columns, parts)})
    return out
