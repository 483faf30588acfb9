"""Trace records: the replayable execution record of a run.

One record per line, canonical key order, so that two runs of the same
scenario with the same seed produce byte-identical files and a trace can
be diffed as a stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass


def canonical_json(obj) -> str:
    """Serialize with sorted keys and fixed separators; byte-stable."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class TraceRecord:
    seq: int
    tick: int
    pool: str
    kind: str
    payload: dict

    def to_line(self) -> str:
        return canonical_json({
            "kind": self.kind,
            "payload": self.payload,
            "pool": self.pool,
            "seq": self.seq,
            "tick": self.tick,
        })

    @classmethod
    def from_line(cls, line: str) -> "TraceRecord":
        data = json.loads(line)
        return cls(
            seq=data["seq"],
            tick=data["tick"],
            pool=data["pool"],
            kind=data["kind"],
            payload=data["payload"],
        )


class Trace:
    """Ordered record sink; sequence numbers are assigned at emission."""

    def __init__(self):
        self.records: list[TraceRecord] = []
        self._next_seq = 0

    def emit(self, tick: int, pool: str, kind: str, payload: dict) -> TraceRecord:
        record = TraceRecord(self._next_seq, tick, pool, kind, payload)
        self._next_seq += 1
        self.records.append(record)
        return record

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def to_text(self) -> str:
        return "".join(record.to_line() + "\n" for record in self.records)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.to_text())

    @classmethod
    def read(cls, path) -> "Trace":
        trace = cls()
        with open(path, "r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    trace.records.append(TraceRecord.from_line(line))
        if trace.records:
            trace._next_seq = trace.records[-1].seq + 1
        return trace

    def find(self, kind: str | None = None, **payload_filters) -> list[TraceRecord]:
        """Records matching a kind and exact payload key/value pairs."""
        out = []
        for record in self.records:
            if kind is not None and record.kind != kind:
                continue
            if all(record.payload.get(k) == v for k, v in payload_filters.items()):
                out.append(record)
        return out


def replay_verify(path_a, path_b) -> tuple[bool, str]:
    """Byte-compare two trace files; report the first divergence."""
    with open(path_a, "rb") as handle:
        lines_a = handle.read().splitlines()
    with open(path_b, "rb") as handle:
        lines_b = handle.read().splitlines()
    for i, (line_a, line_b) in enumerate(zip(lines_a, lines_b)):
        if line_a != line_b:
            seq = _seq_of(line_a) or _seq_of(line_b) or i
            return False, f"divergence at seq {seq}: {line_a[:120]!r} != {line_b[:120]!r}"
    if len(lines_a) != len(lines_b):
        longer = lines_a if len(lines_a) > len(lines_b) else lines_b
        seq = _seq_of(longer[min(len(lines_a), len(lines_b))])
        return False, f"length mismatch; first extra record has seq {seq}"
    return True, "identical"


def _seq_of(line: bytes):
    try:
        return json.loads(line.decode("utf-8"))["seq"]
    except (ValueError, KeyError):
        return None
