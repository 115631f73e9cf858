"""Closed-loop orchestration: simulated signal -> detection -> pathway ->
scheduling -> authorization -> pump, on an accelerated simulated clock,
with a replayable audit trail.

The monitor evaluates one waveform window per sampling interval (the sensor
runs continuously; the loop scores it at a configurable cadence).  Milestone
events that stand in for the human steps (report completion, the clinician
issuing the prescription) fire a configurable delay after their stage is
reached.  Everything is seeded and timestamped from the simulated clock, so
identical configurations produce byte-identical audit logs.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audit import (
    KIND_AUTHORIZATION,
    KIND_DELIVERY,
    KIND_DETECTION,
    KIND_SCHEDULE,
    KIND_TRANSITION,
    AuditLog,
)
from .cnn import Model, load_checkpoint
from .dosing import (
    DAY_S,
    DoseRequest,
    Prescription,
    PrescriptionMode,
    SafetyState,
    authorize_dose,
    prescription_from_json,
    record_delivery,
    schedule_prescription,
    schedule_predictive,
)
from .pathway import (
    DetectionEvent,
    InsufficientDataError,
    PrescriptionIssued,
    ReportComplete,
    Stage,
    circadian_profile,
)
from .pipeline import classify_window
from .pump import PumpGeometry
from .server import LiveSystem
from .signals import Channel, ParameterError, RhythmClass, SimConfig, rr_to_ecg, rr_to_ppg, steady_rr
from .spectro import MorletParams


class SimClock:
    """Forward-only simulated clock; the loop never consults wall time."""

    def __init__(self, start_s: float = 0.0):
        self._now = start_s

    def now(self) -> float:
        return self._now

    def advance_to(self, ts: float) -> None:
        if ts < self._now:
            raise ParameterError(f"clock cannot move back from {self._now} to {ts}")
        self._now = ts


@dataclass(frozen=True)
class EpisodeSpec:
    day: int
    hour: int
    duration_min: float
    rhythm: RhythmClass = RhythmClass.AFIB
    minute: int = 0

    @property
    def start_ts(self) -> float:
        return self.day * DAY_S + self.hour * 3600.0 + self.minute * 60.0

    @property
    def end_ts(self) -> float:
        return self.start_ts + self.duration_min * 60.0


@dataclass
class LoopConfig:
    days: int
    prescription: Prescription
    ppg_model: Model
    episodes: list[EpisodeSpec] = field(default_factory=list)
    geometry: PumpGeometry = field(default_factory=PumpGeometry)
    ecg_model: Model | None = None
    ecg_confirm_confidence: float = 0.99
    sim: SimConfig = field(default_factory=lambda: SimConfig(seed=0))
    morlet: MorletParams = field(default_factory=MorletParams)
    sample_every_s: float = 900.0
    window_s: float = 10.0
    report_delay_s: float = 4 * 3600.0
    prescription_delay_s: float = 4 * 3600.0
    predict_width_h: int = 2
    utc_offset_s: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.days < 1:
            raise ParameterError("days must be >= 1")
        if self.sample_every_s <= 0 or self.window_s <= 0:
            raise ParameterError("sampling cadence and window must be positive")


def _truth_at(cfg: LoopConfig, ts: float) -> RhythmClass:
    for spec in cfg.episodes:
        if spec.start_ts <= ts < spec.end_ts:
            return spec.rhythm
    return RhythmClass.NSR


_SAMPLE, _MILESTONE, _DOSE = 0, 1, 2


def run_closed_loop(cfg: LoopConfig, audit_path=None) -> AuditLog:
    """Drive the full pipeline for cfg.days simulated days; returns the audit log."""
    clock = SimClock(0.0)
    system = LiveSystem(cfg.prescription, cfg.geometry, step_time_s=0.0,
                        utc_offset_s=cfg.utc_offset_s, time_fn=clock.now,
                        audit_path=audit_path)
    system.record_loop_config()
    seeds = np.random.SeedSequence(cfg.seed).generate_state(
        2 * (int(cfg.days * DAY_S / cfg.sample_every_s) + 4), np.uint32)

    queue: list[tuple[float, int, int, tuple]] = []
    counter = 0

    def push(ts: float, kind: int, payload: tuple) -> None:
        nonlocal counter
        heapq.heappush(queue, (ts, kind, counter, payload))
        counter += 1

    n_samples = int(cfg.days * DAY_S / cfg.sample_every_s)
    for i in range(n_samples):
        push(i * cfg.sample_every_s, _SAMPLE, (i,))
    scheduled_days: set[int] = set()

    def schedule_day(day_start: float, now: float) -> None:
        day_index = int(day_start // DAY_S)
        if day_index in scheduled_days or day_index >= cfg.days:
            return
        if system.pathway.stage != Stage.TIMED_DELIVERY:
            return
        scheduled_days.add(day_index)
        p = system.prescription
        schedule = None
        mode = p.mode.value
        if p.mode == PrescriptionMode.PREDICTION_BASED:
            profile = circadian_profile(system.log, cfg.utc_offset_s)
            try:
                schedule = schedule_predictive(p, profile, day_start,
                                               cfg.predict_width_h)
            except InsufficientDataError:
                mode = "prescription-fallback"
                if p.fixed_times:
                    fallback = replace(p, mode=PrescriptionMode.PRESCRIPTION_BASED,
                                       max_doses_per_day=len(p.fixed_times))
                    schedule = schedule_prescription(fallback, day_start)
        else:
            schedule = schedule_prescription(p, day_start)
        if schedule is None:
            return
        system.record_schedule(schedule, mode)
        for i, (ts, ml) in enumerate(schedule.planned):
            if ts >= now:
                push(ts, _DOSE, (f"day{day_index}-dose{i}", ml))

    def on_stage_change(before: Stage, after: Stage, now: float) -> None:
        if before == after:
            return
        if after == Stage.DATA_COLLECTION:
            push(now + cfg.report_delay_s, _MILESTONE, ("report",))
        elif after == Stage.CLINICIAN_REVIEW:
            push(now + cfg.prescription_delay_s, _MILESTONE, ("prescription",))
        elif after == Stage.TIMED_DELIVERY:
            schedule_day((now // DAY_S) * DAY_S, now)

    try:
        while queue:
            ts, kind, _, payload = heapq.heappop(queue)
            if ts >= cfg.days * DAY_S:
                continue
            clock.advance_to(ts)
            if kind == _SAMPLE:
                index = payload[0]
                schedule_day((ts // DAY_S) * DAY_S, ts)
                truth = _truth_at(cfg, ts)
                before = system.pathway.stage
                event = _make_detection(cfg, system, truth, ts, seeds, index)
                after = system.ingest_detection(event)
                on_stage_change(before, after, ts)
            elif kind == _MILESTONE:
                before = system.pathway.stage
                if payload[0] == "report" and before == Stage.DATA_COLLECTION:
                    after = system.milestone(ReportComplete(ts))
                    on_stage_change(before, after, ts)
                elif payload[0] == "prescription" and before == Stage.CLINICIAN_REVIEW:
                    after = system.milestone(PrescriptionIssued(ts))
                    on_stage_change(before, after, ts)
            elif kind == _DOSE:
                request_id, ml = payload
                if system.pathway.stage != Stage.TIMED_DELIVERY:
                    continue
                resp = system.deliver(request_id, ml)
                if not resp["ok"] and resp.get("error") not in (
                        "max-doses-per-day", "min-interval",
                        "daily-max-volume", "over-bolus"):
                    system.record_fault(
                        f"delivery {request_id} failed: {resp.get('error')}")
                    break
    except Exception as exc:  # halt safely: pump idle, fault on record
        system.record_fault(f"loop halted: {exc}")
    finally:
        system.close()
    return system.audit


def _make_detection(cfg: LoopConfig, system: LiveSystem, truth: RhythmClass,
                    ts: float, seeds, index: int) -> DetectionEvent:
    if system.pathway.stage == Stage.ECG_CONFIRM:
        if cfg.ecg_model is None:
            return DetectionEvent(ts, Channel.ECG_LEAD_I, truth,
                                  cfg.ecg_confirm_confidence)
        rr = steady_rr(truth, cfg.window_s + 2.0, cfg.sim, int(seeds[2 * index]))
        rec = rr_to_ecg(rr, cfg.sim.fs_ecg)
        n = int(cfg.window_s * cfg.sim.fs_ecg)
        predicted, confidence = classify_window(
            cfg.ecg_model, rec.samples[:n], cfg.sim.fs_ecg,
            Channel.ECG_LEAD_I, cfg.morlet)
        return DetectionEvent(ts, Channel.ECG_LEAD_I, predicted, confidence)
    rr = steady_rr(truth, cfg.window_s + 2.0, cfg.sim, int(seeds[2 * index + 1]))
    rec = rr_to_ppg(rr, cfg.sim.fs_ppg)
    n = int(cfg.window_s * cfg.sim.fs_ppg)
    predicted, confidence = classify_window(
        cfg.ppg_model, rec.samples[:n], cfg.sim.fs_ppg, Channel.PPG, cfg.morlet)
    return DetectionEvent(ts, Channel.PPG, predicted, confidence)


# ---------------------------------------------------------------------------
# Replay verification


@dataclass(frozen=True)
class Verdict:
    consistent: bool
    divergence_index: int | None = None
    reason: str | None = None


def replay(audit: AuditLog) -> Verdict:
    """Re-run every authorization and delivery against the logged sequence."""
    if not audit.records:
        return Verdict(True)
    prescription: Prescription | None = None
    geometry: PumpGeometry | None = None
    safety: SafetyState | None = None
    pending: dict[str, float] = {}   # granted, undelivered request -> requested ml
    total_steps = 0

    for i, record in enumerate(audit.records):
        if record.kind == KIND_SCHEDULE and record.payload.get("mode") == "loop-config":
            # later config records update the constraint set (prescription or
            # geometry change) without resetting the accumulated safety state
            prescription = prescription_from_json(
                json.dumps(record.payload["prescription"]))
            geometry = PumpGeometry.from_json_dict(record.payload["geometry"])
            if safety is None:
                offset = float(record.payload.get("utc_offset_s", 0.0))
                base = SafetyState(utc_offset_s=offset)
                safety = SafetyState([], base.day_start(record.ts), None, offset)
            continue
        if record.kind == KIND_AUTHORIZATION:
            if record.payload.get("reason") == "denied-by-operator":
                continue
            if prescription is None or safety is None:
                return Verdict(False, i, "authorization before loop-config")
            req = DoseRequest(record.payload["request_id"],
                              float(record.payload["requested_ml"]))
            decision = authorize_dose(safety, prescription, req, record.ts)
            if decision.granted != bool(record.payload["granted"]):
                return Verdict(False, i, "authorization decision diverges")
            if not decision.granted and decision.reason != record.payload.get("reason"):
                return Verdict(False, i, "rejection reason diverges")
            if decision.granted:
                pending[req.request_id] = req.ml
            continue
        if record.kind == KIND_DELIVERY:
            if prescription is None or safety is None or geometry is None:
                return Verdict(False, i, "delivery before loop-config")
            request_id = record.payload["request_id"]
            if request_id not in pending:
                return Verdict(False, i, "delivery without prior authorization")
            requested = pending.pop(request_id)
            delivered = float(record.payload["delivered_ml"])
            steps = int(record.payload.get("steps", 0))
            q = geometry.step_volume_ml
            if abs(delivered - steps * q) > 1e-9:
                return Verdict(False, i, "delivered volume inconsistent with steps")
            if abs(delivered - requested) > q / 2 + 1e-9:
                return Verdict(False, i, "delivery exceeds quantization bound")
            total_steps += steps
            if total_steps * geometry.step_displacement_mm > \
                    geometry.plunger_travel_mm + 1e-9:
                return Verdict(False, i, "plunger travel exceeded")
            safety = record_delivery(safety, (record.ts, delivered))
            continue
    return Verdict(True)


def check_causality(audit: AuditLog) -> Verdict:
    """Every EcgConfirm entry must follow a qualifying PPG detection."""
    last_ppg_positive = False
    for i, record in enumerate(audit.records):
        if record.kind == KIND_DETECTION:
            last_ppg_positive = (record.payload["source"] == "PPG"
                                 and record.payload["class"] != "NSR"
                                 and record.payload["confidence"] >= 0.8)
        elif record.kind == KIND_TRANSITION and \
                record.payload.get("to") == Stage.ECG_CONFIRM.value:
            if not last_ppg_positive:
                return Verdict(False, i, "EcgConfirm without qualifying detection")
    return Verdict(True)


# ---------------------------------------------------------------------------
# Scenario files (single JSON document embedding all sub-configs)

SCENARIO_VERSION = 1


def scenario_to_json(cfg: LoopConfig, ppg_checkpoint: str,
                     ecg_checkpoint: str | None = None) -> str:
    return json.dumps({
        "scenario_version": SCENARIO_VERSION,
        "days": cfg.days,
        "seed": cfg.seed,
        "sample_every_s": cfg.sample_every_s,
        "window_s": cfg.window_s,
        "report_delay_s": cfg.report_delay_s,
        "prescription_delay_s": cfg.prescription_delay_s,
        "predict_width_h": cfg.predict_width_h,
        "utc_offset_s": cfg.utc_offset_s,
        "ecg_confirm_confidence": cfg.ecg_confirm_confidence,
        "episodes": [
            {"day": e.day, "hour": e.hour, "minute": e.minute,
             "duration_min": e.duration_min, "class": e.rhythm.name}
            for e in cfg.episodes
        ],
        "prescription": json.loads(_prescription_doc(cfg.prescription)),
        "geometry": cfg.geometry.to_json_dict(),
        "ppg_checkpoint": ppg_checkpoint,
        "ecg_checkpoint": ecg_checkpoint,
        "sim_seed": cfg.sim.seed,
    }, indent=2)


def _prescription_doc(p: Prescription) -> str:
    from .dosing import prescription_to_json

    return prescription_to_json(p)


def scenario_from_json(text: str, base_dir: str | Path = ".") -> LoopConfig:
    doc = json.loads(text)
    if doc.get("scenario_version") != SCENARIO_VERSION:
        raise ParameterError(f"unsupported scenario_version {doc.get('scenario_version')}")
    base = Path(base_dir)
    prescription = prescription_from_json(json.dumps(doc["prescription"]))
    ppg_model = load_checkpoint(base / doc["ppg_checkpoint"])
    ecg_model = (load_checkpoint(base / doc["ecg_checkpoint"])
                 if doc.get("ecg_checkpoint") else None)
    episodes = [
        EpisodeSpec(int(e["day"]), int(e["hour"]), float(e["duration_min"]),
                    RhythmClass[e.get("class", "AFIB")], int(e.get("minute", 0)))
        for e in doc.get("episodes", [])
    ]
    geometry = (PumpGeometry.from_json_dict(doc["geometry"])
                if doc.get("geometry") else PumpGeometry())
    return LoopConfig(
        days=int(doc["days"]),
        prescription=prescription,
        ppg_model=ppg_model,
        episodes=episodes,
        geometry=geometry,
        ecg_model=ecg_model,
        ecg_confirm_confidence=float(doc.get("ecg_confirm_confidence", 0.99)),
        sim=SimConfig(seed=int(doc.get("sim_seed", 0))),
        sample_every_s=float(doc.get("sample_every_s", 900.0)),
        window_s=float(doc.get("window_s", 10.0)),
        report_delay_s=float(doc.get("report_delay_s", 4 * 3600.0)),
        prescription_delay_s=float(doc.get("prescription_delay_s", 4 * 3600.0)),
        predict_width_h=int(doc.get("predict_width_h", 2)),
        utc_offset_s=float(doc.get("utc_offset_s", 0.0)),
        seed=int(doc.get("seed", 0)),
    )


def load_scenario(path: str | Path) -> LoopConfig:
    path = Path(path)
    return scenario_from_json(path.read_text(encoding="utf-8"), path.parent)
