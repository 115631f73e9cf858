"""Prescription modeling, dose scheduling and the safety authorization gate.

Authorization reasons are stable machine-readable strings; downstream layers
(pump protocol, console) forward them verbatim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .pathway import CircadianProfile, predict_window
from .signals import ParameterError

DAY_S = 86400.0

REASON_MAX_DOSES = "max-doses-per-day"
REASON_MIN_INTERVAL = "min-interval"
REASON_DAILY_MAX = "daily-max-volume"
REASON_OVER_BOLUS = "over-bolus"

_EPS = 1e-9


class PrescriptionMode(Enum):
    PRESCRIPTION_BASED = "PrescriptionBased"
    PREDICTION_BASED = "PredictionBased"


class ModeError(ValueError):
    pass


class PrescriptionError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid prescription: " + ", ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class Prescription:
    dose_ml: float
    max_doses_per_day: int
    min_interdose_interval_s: float
    daily_max_ml: float
    mode: PrescriptionMode = PrescriptionMode.PRESCRIPTION_BASED
    fixed_times: tuple[tuple[int, int], ...] = ()   # (hour, minute) per dose
    lead_time_s: float = 1800.0


def canonical_prescription() -> Prescription:
    """5 mL three times a day, the worked toxicity-guard example."""
    return Prescription(
        dose_ml=5.0,
        max_doses_per_day=3,
        min_interdose_interval_s=6 * 3600.0,
        daily_max_ml=15.0,
        fixed_times=((8, 0), (14, 0), (20, 0)),
    )


def validate_prescription(p: Prescription) -> list[str]:
    """All constraint violations, empty when the prescription is well formed."""
    violations: list[str] = []
    if p.dose_ml <= 0:
        violations.append("dose-volume")
    if p.max_doses_per_day < 1:
        violations.append(REASON_MAX_DOSES)
    if p.daily_max_ml <= 0 or p.dose_ml * p.max_doses_per_day > p.daily_max_ml + _EPS:
        violations.append(REASON_DAILY_MAX)
    if p.min_interdose_interval_s < 0 or p.lead_time_s < 0:
        violations.append("negative-interval")
    for hour, minute in p.fixed_times:
        if not (0 <= hour < 24 and 0 <= minute < 60):
            violations.append("fixed-time-range")
            break
    if p.mode == PrescriptionMode.PRESCRIPTION_BASED and \
            len(p.fixed_times) != p.max_doses_per_day:
        violations.append("fixed-times-count")
    if len(p.fixed_times) >= 2:
        secs = sorted(h * 3600 + m * 60 for h, m in p.fixed_times)
        gaps = [b - a for a, b in zip(secs, secs[1:])]
        gaps.append(secs[0] + DAY_S - secs[-1])  # wrap to the next day
        if min(gaps) < p.min_interdose_interval_s - _EPS:
            violations.append(REASON_MIN_INTERVAL)
    return violations


@dataclass
class DoseSchedule:
    planned: list[tuple[float, float]]   # (timestamp, ml), time-ordered
    day_start_ts: float


def validate_schedule(s: DoseSchedule, p: Prescription) -> list[str]:
    violations: list[str] = []
    if len(s.planned) > p.max_doses_per_day:
        violations.append(REASON_MAX_DOSES)
    if sum(ml for _, ml in s.planned) > p.daily_max_ml + _EPS:
        violations.append(REASON_DAILY_MAX)
    times = [ts for ts, _ in s.planned]
    if any(b - a < p.min_interdose_interval_s - _EPS for a, b in zip(times, times[1:])):
        violations.append(REASON_MIN_INTERVAL)
    if any(ml > p.dose_ml + _EPS for _, ml in s.planned):
        violations.append(REASON_OVER_BOLUS)
    return violations


def schedule_prescription(p: Prescription, day_start_ts: float) -> DoseSchedule:
    """One planned dose at each fixed time of the given local day."""
    if p.mode != PrescriptionMode.PRESCRIPTION_BASED:
        raise ModeError("prescription-based scheduling requires PrescriptionBased mode")
    violations = validate_prescription(p)
    if violations:
        raise PrescriptionError(violations)
    planned = sorted((day_start_ts + h * 3600.0 + m * 60.0, p.dose_ml)
                     for h, m in p.fixed_times)
    return DoseSchedule(planned, day_start_ts)


def schedule_predictive(p: Prescription, profile: CircadianProfile,
                        day_start_ts: float, window_width_h: int = 2) -> DoseSchedule:
    """Place doses ahead of the predicted episode window, then greedily cover
    the remaining highest-mass hours under the spacing constraint.

    Raises InsufficientDataError when the profile lacks support; callers fall
    back to prescription-based scheduling.  Lead-time subtraction clamps at
    local midnight so a schedule never leaks into the previous day.
    """
    if p.mode != PrescriptionMode.PREDICTION_BASED:
        raise ModeError("predictive scheduling requires PredictionBased mode")
    violations = validate_prescription(p)
    if violations:
        raise PrescriptionError(violations)
    window = predict_window(profile, window_width_h)

    def dose_time(hour: int) -> float:
        return max(day_start_ts, day_start_ts + hour * 3600.0 - p.lead_time_s)

    placed = [dose_time(window.start_hour)]
    covered = set(window.hours())
    candidates = sorted(
        (h for h in range(24) if h not in covered),
        key=lambda h: (-profile.hourly_mass[h], h),
    )
    for hour in candidates:
        if len(placed) >= p.max_doses_per_day:
            break
        ts = dose_time(hour)
        if ts >= day_start_ts + DAY_S:
            continue
        if all(abs(ts - other) >= p.min_interdose_interval_s for other in placed):
            placed.append(ts)
    schedule = DoseSchedule(sorted((ts, p.dose_ml) for ts in placed), day_start_ts)
    bad = validate_schedule(schedule, p)
    if bad:  # hard postcondition: emitted schedules always satisfy constraints
        raise PrescriptionError(bad)
    return schedule


# ---------------------------------------------------------------------------
# Safety gate


@dataclass(frozen=True)
class DoseRequest:
    request_id: str
    ml: float


@dataclass(frozen=True)
class Decision:
    granted: bool
    request_id: str
    ml: float
    ts: float
    reason: str | None = None

    def to_json(self) -> str:
        return json.dumps({
            "granted": self.granted,
            "request_id": self.request_id,
            "ml": self.ml,
            "ts": self.ts,
            "reason": self.reason,
        })


@dataclass
class SafetyState:
    delivered_today: list[tuple[float, float]] = field(default_factory=list)
    day_boundary: float = 0.0
    last_dose_ts: float | None = None
    utc_offset_s: float = 0.0

    def day_start(self, ts: float) -> float:
        return ((ts + self.utc_offset_s) // DAY_S) * DAY_S - self.utc_offset_s

    def entries_for(self, now: float) -> list[tuple[float, float]]:
        return self.delivered_today if self.day_start(now) == self.day_boundary else []


def authorize_dose(s: SafetyState, p: Prescription, req: DoseRequest,
                   now: float) -> Decision:
    """Grant a dose only when every prescription constraint holds right now.

    Rejections carry the first violated rule, checked in the order: daily dose
    count, inter-dose spacing, daily volume, over-bolus.
    """
    if req.ml <= 0:
        raise ParameterError("requested volume must be positive")
    entries = s.entries_for(now)
    if len(entries) >= p.max_doses_per_day:
        return Decision(False, req.request_id, req.ml, now, REASON_MAX_DOSES)
    if s.last_dose_ts is not None and now - s.last_dose_ts < p.min_interdose_interval_s - _EPS:
        return Decision(False, req.request_id, req.ml, now, REASON_MIN_INTERVAL)
    if sum(ml for _, ml in entries) + req.ml > p.daily_max_ml + _EPS:
        return Decision(False, req.request_id, req.ml, now, REASON_DAILY_MAX)
    if req.ml > p.dose_ml + _EPS:
        return Decision(False, req.request_id, req.ml, now, REASON_OVER_BOLUS)
    return Decision(True, req.request_id, req.ml, now)


def record_delivery(s: SafetyState, delivered: tuple[float, float]) -> SafetyState:
    """Append an authorized delivery; daily counters reset at local midnight,
    the spacing clock (last_dose_ts) deliberately does not."""
    ts, ml = delivered
    if s.last_dose_ts is not None and ts < s.last_dose_ts:
        raise ParameterError(f"delivery at {ts} precedes last at {s.last_dose_ts}")
    day = s.day_start(ts)
    entries = list(s.delivered_today) if day == s.day_boundary else []
    entries.append((ts, ml))
    return SafetyState(entries, day, ts, s.utc_offset_s)


# ---------------------------------------------------------------------------
# Prescription document (versioned JSON)

PRESCRIPTION_VERSION = 1


def prescription_to_json(p: Prescription) -> str:
    return json.dumps({
        "prescription_version": PRESCRIPTION_VERSION,
        "dose_ml": p.dose_ml,
        "max_doses_per_day": p.max_doses_per_day,
        "min_interdose_interval_s": p.min_interdose_interval_s,
        "daily_max_ml": p.daily_max_ml,
        "mode": p.mode.value,
        "fixed_times": [f"{h:02d}:{m:02d}" for h, m in p.fixed_times],
        "lead_time_s": p.lead_time_s,
    }, indent=2)


def prescription_from_json(text: str) -> Prescription:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"prescription document: {exc}") from None
    if doc.get("prescription_version") != PRESCRIPTION_VERSION:
        raise ParameterError(
            f"unsupported prescription_version {doc.get('prescription_version')}")
    try:
        times = []
        for text_time in doc.get("fixed_times", []):
            hour, minute = text_time.split(":")
            times.append((int(hour), int(minute)))
        return Prescription(
            dose_ml=float(doc["dose_ml"]),
            max_doses_per_day=int(doc["max_doses_per_day"]),
            min_interdose_interval_s=float(doc["min_interdose_interval_s"]),
            daily_max_ml=float(doc["daily_max_ml"]),
            mode=PrescriptionMode(doc.get("mode", "PrescriptionBased")),
            fixed_times=tuple(times),
            lead_time_s=float(doc.get("lead_time_s", 1800.0)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ParameterError(f"prescription document: {exc}") from None


def load_prescription(path: str | Path) -> Prescription:
    return prescription_from_json(Path(path).read_text(encoding="utf-8"))
