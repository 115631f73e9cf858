"""Patient pathway: screening state machine, episode log, circadian profile,
clinical risk scores and report assembly.

Timestamps are UTC epoch seconds; circadian binning applies a configurable
utc offset so the 24-hour histogram is patient-local.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

from .signals import Channel, ParameterError, RhythmClass

SCREEN_CONFIDENCE = 0.8     # PPG confidence required to escalate
SCREEN_CONSECUTIVE = 3      # consecutive positive windows before escalation
MERGE_GAP_S = 120.0
MIN_PROFILE_SUPPORT = 5


class Stage(Enum):
    SCREENING = "Screening"
    ECG_CONFIRM = "EcgConfirm"
    DATA_COLLECTION = "DataCollection"
    CLINICIAN_REVIEW = "ClinicianReview"
    TIMED_DELIVERY = "TimedDelivery"


_STAGE_ORDER = list(Stage)


def stage_index(stage: Stage) -> int:
    return _STAGE_ORDER.index(stage)


class TransitionError(ValueError):
    def __init__(self, stage: Stage, event) -> None:
        super().__init__(f"event {event!r} not applicable in stage {stage.value}")
        self.stage = stage
        self.event = event


class OrderingError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionEvent:
    ts: float                  # UTC seconds
    source: Channel
    predicted: RhythmClass
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ParameterError("confidence must be in [0, 1]")

    @property
    def positive(self) -> bool:
        return self.predicted != RhythmClass.NSR


@dataclass(frozen=True)
class ReportComplete:
    ts: float


@dataclass(frozen=True)
class PrescriptionIssued:
    ts: float


@dataclass(frozen=True)
class PathwayState:
    stage: Stage
    entered_at: float
    patient_id: str


def initial_state(patient_id: str, ts: float = 0.0) -> PathwayState:
    return PathwayState(Stage.SCREENING, ts, patient_id)


def step(s: PathwayState, event, threshold: float = SCREEN_CONFIDENCE) -> PathwayState:
    """Advance the five-stage pathway by one event.

    Detection events are always applicable while monitoring: a qualifying one
    escalates, the rest leave the stage unchanged.  Milestone events
    (report-complete, prescription-issued) are applicable only in their stage.
    """
    if isinstance(event, DetectionEvent):
        if s.stage == Stage.SCREENING:
            if event.source == Channel.PPG and event.positive and event.confidence >= threshold:
                return replace(s, stage=Stage.ECG_CONFIRM, entered_at=event.ts)
            return s
        if s.stage == Stage.ECG_CONFIRM:
            if event.source == Channel.ECG_LEAD_I:
                if event.positive:
                    return replace(s, stage=Stage.DATA_COLLECTION, entered_at=event.ts)
                return replace(s, stage=Stage.SCREENING, entered_at=event.ts)
            return s
        return s  # later stages keep monitoring without transitioning
    if isinstance(event, ReportComplete):
        if s.stage == Stage.DATA_COLLECTION:
            return replace(s, stage=Stage.CLINICIAN_REVIEW, entered_at=event.ts)
        raise TransitionError(s.stage, event)
    if isinstance(event, PrescriptionIssued):
        if s.stage == Stage.CLINICIAN_REVIEW:
            return replace(s, stage=Stage.TIMED_DELIVERY, entered_at=event.ts)
        raise TransitionError(s.stage, event)
    raise TransitionError(s.stage, event)


@dataclass(frozen=True)
class EpisodeSpan:
    start: float
    end: float
    rhythm: RhythmClass

    @property
    def duration_s(self) -> float:
        return self.end - self.start


@dataclass
class EpisodeLog:
    events: list[DetectionEvent] = field(default_factory=list)
    episodes: list[EpisodeSpan] = field(default_factory=list)
    merge_gap_s: float = MERGE_GAP_S


def log_episode(log: EpisodeLog, e: DetectionEvent) -> EpisodeLog:
    """Append a detection; arrhythmic events coalesce into episode spans.

    A new arrhythmic event extends the latest span when it has the same class
    and falls within the merge gap; NSR detections are recorded but never
    open or extend a span.
    """
    if log.events and e.ts < log.events[-1].ts:
        raise OrderingError(
            f"event at {e.ts} precedes last logged event at {log.events[-1].ts}")
    episodes = list(log.episodes)
    if e.positive:
        if (episodes
                and episodes[-1].rhythm == e.predicted
                and e.ts - episodes[-1].end <= log.merge_gap_s):
            episodes[-1] = replace(episodes[-1], end=e.ts)
        else:
            episodes.append(EpisodeSpan(e.ts, e.ts, e.predicted))
    return EpisodeLog(log.events + [e], episodes, log.merge_gap_s)


def merge_spans(events: list[DetectionEvent], merge_gap_s: float = MERGE_GAP_S) -> list[EpisodeSpan]:
    """Recompute episode spans from scratch; oracle for the incremental path."""
    log = EpisodeLog(merge_gap_s=merge_gap_s)
    for e in events:
        log = log_episode(log, e)
    return log.episodes


@dataclass
class CircadianProfile:
    hourly_mass: list[float]   # 24 bins summing to 1 (all zero when empty)
    n_episodes: int


def circadian_profile(log: EpisodeLog, utc_offset_s: float = 0.0) -> CircadianProfile:
    """Normalized histogram of episode start hours in patient-local time."""
    counts = [0] * 24
    for span in log.episodes:
        hour = int(((span.start + utc_offset_s) // 3600) % 24)
        counts[hour] += 1
    n = len(log.episodes)
    if n == 0:
        return CircadianProfile([0.0] * 24, 0)
    return CircadianProfile([c / n for c in counts], n)


@dataclass(frozen=True)
class HourWindow:
    start_hour: int
    width_h: int
    mass: float

    def hours(self) -> list[int]:
        return [(self.start_hour + i) % 24 for i in range(self.width_h)]


def predict_window(p: CircadianProfile, width_h: int,
                   min_support: int = MIN_PROFILE_SUPPORT) -> HourWindow:
    """Circular hour window of the given width with maximum episode mass."""
    if not 1 <= width_h <= 24:
        raise ParameterError("width_h must be in [1, 24]")
    if p.n_episodes < min_support:
        raise InsufficientDataError(
            f"{p.n_episodes} episodes < minimum support {min_support}")
    best_start, best_mass = 0, -1.0
    for start in range(24):
        mass = sum(p.hourly_mass[(start + i) % 24] for i in range(width_h))
        if mass > best_mass + 1e-12:
            best_start, best_mass = start, mass
    return HourWindow(best_start, width_h, best_mass)


# ---------------------------------------------------------------------------
# Clinical risk scores


@dataclass(frozen=True)
class HasBledFactors:
    hypertension: bool = False
    abnormal_renal: bool = False
    abnormal_liver: bool = False
    stroke_history: bool = False
    bleeding_history: bool = False
    labile_inr: bool = False
    elderly_over_65: bool = False
    antiplatelet_or_nsaid: bool = False
    alcohol_excess: bool = False


def score_has_bled(f: HasBledFactors) -> int:
    """One point per factor; renal and liver abnormality count separately (max 9)."""
    return sum((
        f.hypertension, f.abnormal_renal, f.abnormal_liver, f.stroke_history,
        f.bleeding_history, f.labile_inr, f.elderly_over_65,
        f.antiplatelet_or_nsaid, f.alcohol_excess,
    ))


@dataclass(frozen=True)
class ChadsVascFactors:
    chf: bool = False
    hypertension: bool = False
    age_75_plus: bool = False
    diabetes: bool = False
    stroke_tia_history: bool = False
    vascular_disease: bool = False
    age_65_74: bool = False
    female: bool = False


def score_cha2ds2_vasc(f: ChadsVascFactors) -> int:
    """Stroke risk: age >= 75 and stroke/TIA history score double (max 9)."""
    if f.age_75_plus and f.age_65_74:
        raise ParameterError("age_75_plus and age_65_74 are mutually exclusive")
    return (f.chf + f.hypertension + 2 * f.age_75_plus + f.diabetes
            + 2 * f.stroke_tia_history + f.vascular_disease + f.age_65_74
            + f.female)


# ---------------------------------------------------------------------------
# Report generation

REPORT_VERSION = 1


@dataclass
class PatientRecord:
    patient_id: str
    age: int
    sex: str
    questionnaire: dict = field(default_factory=dict)
    has_bled: HasBledFactors = field(default_factory=HasBledFactors)
    chads_vasc: ChadsVascFactors = field(default_factory=ChadsVascFactors)


def _day_key(ts: float, utc_offset_s: float) -> str:
    return datetime.fromtimestamp(ts + utc_offset_s, tz=timezone.utc).date().isoformat()


def generate_report(patient: PatientRecord, log: EpisodeLog, state: PathwayState,
                    profile: CircadianProfile | None = None,
                    utc_offset_s: float = 0.0) -> dict:
    """Assemble the clinician-facing report document (schema version 1)."""
    if stage_index(state.stage) < stage_index(Stage.DATA_COLLECTION):
        raise TransitionError(state.stage, "generate-report")
    profile = profile if profile is not None else circadian_profile(log, utc_offset_s)
    ecg_per_day: dict[str, int] = {}
    for e in log.events:
        if e.source == Channel.ECG_LEAD_I:
            key = _day_key(e.ts, utc_offset_s)
            ecg_per_day[key] = ecg_per_day.get(key, 0) + 1
    return {
        "report_version": REPORT_VERSION,
        "patient": {
            "id": patient.patient_id,
            "age": patient.age,
            "sex": patient.sex,
            "questionnaire": dict(patient.questionnaire),
        },
        "scores": {
            "has_bled": score_has_bled(patient.has_bled),
            "cha2ds2_vasc": score_cha2ds2_vasc(patient.chads_vasc),
        },
        "pathway_stage": state.stage.value,
        "episodes": [
            {
                "start": span.start,
                "end": span.end,
                "class": span.rhythm.name,
                "duration_s": span.duration_s,
            }
            for span in log.episodes
        ],
        "circadian_histogram": list(profile.hourly_mass),
        "n_episodes": profile.n_episodes,
        "ecg_readings_per_day": ecg_per_day,
    }


_REPORT_REQUIRED = ("report_version", "patient", "scores", "pathway_stage",
                    "episodes", "circadian_histogram", "n_episodes",
                    "ecg_readings_per_day")


def parse_report(text: str) -> dict:
    """Validate a serialized report against its own schema."""
    doc = json.loads(text)
    if doc.get("report_version") != REPORT_VERSION:
        raise ParameterError(f"unsupported report_version {doc.get('report_version')}")
    for key in _REPORT_REQUIRED:
        if key not in doc:
            raise ParameterError(f"report missing field {key!r}")
    if len(doc["circadian_histogram"]) != 24:
        raise ParameterError("circadian_histogram must have 24 bins")
    for row in doc["episodes"]:
        if row["end"] < row["start"]:
            raise ParameterError("episode span end precedes start")
    return doc


def render_report_text(report: dict) -> str:
    """Plain-markdown rendering of a report document."""
    lines = [
        f"# Patient report ({report['patient']['id']})",
        "",
        f"- Age: {report['patient']['age']}  Sex: {report['patient']['sex']}",
        f"- Pathway stage: {report['pathway_stage']}",
        f"- HAS-BLED: {report['scores']['has_bled']}  "
        f"CHA2DS2-VASc: {report['scores']['cha2ds2_vasc']}",
        "",
        f"## Episodes ({report['n_episodes']})",
        "",
        "| start | end | class | duration (s) |",
        "| --- | --- | --- | --- |",
    ]
    for row in report["episodes"]:
        lines.append(f"| {row['start']:.0f} | {row['end']:.0f} | {row['class']} "
                     f"| {row['duration_s']:.0f} |")
    lines += ["", "## Circadian histogram", ""]
    for hour, mass in enumerate(report["circadian_histogram"]):
        bar = "#" * int(round(40 * mass))
        lines.append(f"{hour:02d}h {mass:6.3f} {bar}")
    lines += ["", "## ECG readings per day", ""]
    for day, count in sorted(report["ecg_readings_per_day"].items()):
        lines.append(f"- {day}: {count}")
    for key, value in report["patient"]["questionnaire"].items():
        lines.append(f"- {key}: {value}")
    return "\n".join(lines) + "\n"


# Line-delimited JSON event ingestion: {ts, source, class, confidence}

def parse_event_line(line: str, line_no: int = 0) -> DetectionEvent:
    try:
        doc = json.loads(line)
        source = Channel.PPG if doc["source"] == "PPG" else Channel.ECG_LEAD_I
        return DetectionEvent(float(doc["ts"]), source,
                              RhythmClass[doc["class"]], float(doc["confidence"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise ParameterError(f"event line {line_no}: {exc}") from None


def load_event_log(path: str | Path, merge_gap_s: float = MERGE_GAP_S) -> EpisodeLog:
    log = EpisodeLog(merge_gap_s=merge_gap_s)
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            log = log_episode(log, parse_event_line(line, line_no))
    return log


def event_to_json(e: DetectionEvent) -> str:
    return json.dumps({
        "ts": e.ts,
        "source": "PPG" if e.source == Channel.PPG else "ECG",
        "class": e.predicted.name,
        "confidence": e.confidence,
    })
