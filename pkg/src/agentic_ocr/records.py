"""Line-delimited JSON input/output helpers with file/line error context."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

from .errors import InputUnreadable
from .geometry import NormBox


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)`` for each non-blank line."""
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputUnreadable(f"cannot open {path}: {exc}", path=str(path)) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputUnreadable(f"invalid JSON: {exc.msg}", path=str(path), line=lineno) from exc
            if not isinstance(record, dict):
                raise InputUnreadable("record must be a JSON object", path=str(path), line=lineno)
            yield lineno, record


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dumps(record) + "\n")
            n += 1
    return n


def boxes(raw, *, path: str | Path, line: int, field: str) -> list[NormBox]:
    try:
        return [NormBox.from_seq(b) for b in raw or []]
    except (TypeError, ValueError) as exc:
        raise InputUnreadable(f"{field}: {exc}", path=str(path), line=line) from exc
