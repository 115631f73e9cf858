"""Append-only audit log with deterministic line-delimited JSON serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .signals import ParameterError

AUDIT_VERSION = 1

KIND_DETECTION = "detection"
KIND_TRANSITION = "transition"
KIND_SCHEDULE = "schedule"
KIND_AUTHORIZATION = "authorization"
KIND_DELIVERY = "delivery"
KIND_FAULT = "fault"

KINDS = (KIND_DETECTION, KIND_TRANSITION, KIND_SCHEDULE,
         KIND_AUTHORIZATION, KIND_DELIVERY, KIND_FAULT)


@dataclass(frozen=True)
class AuditRecord:
    ts: float
    kind: str
    payload: dict

    def to_line(self) -> str:
        return json.dumps(
            {"v": AUDIT_VERSION, "ts": self.ts, "kind": self.kind,
             "payload": self.payload},
            sort_keys=True, separators=(",", ":"))


def record_from_line(line: str, line_no: int = 0) -> AuditRecord:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"audit line {line_no}: {exc}") from None
    if doc.get("v") != AUDIT_VERSION:
        raise ParameterError(f"audit line {line_no}: unsupported version {doc.get('v')}")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise ParameterError(f"audit line {line_no}: unknown kind {kind!r}")
    return AuditRecord(float(doc["ts"]), kind, doc.get("payload", {}))


@dataclass
class AuditLog:
    records: list[AuditRecord] = field(default_factory=list)

    def append(self, record: AuditRecord) -> None:
        if self.records and record.ts < self.records[-1].ts:
            raise ParameterError("audit records must be time-ordered")
        self.records.append(record)

    def to_text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "AuditLog":
        log = cls()
        for line_no, line in enumerate(
                Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if line.strip():
                log.append(record_from_line(line, line_no))
        return log
