"""Live system state and the line-delimited JSON TCP service.

One port speaks two frame families: device commands carry "cmd"
(STATUS/DELIVER/PRIME/STOP/CONFIG) and operator/console frames carry "op".
Responses echo the request id and report per-request latency.  A connection
that sends subscribe_stream switches to server-push mode and receives the
event stream (detections, transitions, authorizations, deliveries, pending
doses), each frame carrying a monotonically increasing event_id so clients
can deduplicate across reconnects.

Lock discipline: LiveSystem state is guarded by one lock; nothing may call
into the pump while holding it (the pump calls back into the dosing link
from its own command lock).
"""

from __future__ import annotations

import json
import socket
import threading
import time
from collections import deque
from queue import Empty, Queue

from .audit import (
    KIND_AUTHORIZATION,
    KIND_DELIVERY,
    KIND_DETECTION,
    KIND_FAULT,
    KIND_SCHEDULE,
    KIND_TRANSITION,
    AuditLog,
    AuditRecord,
)
from .dosing import (
    DoseRequest,
    DoseSchedule,
    Prescription,
    SafetyState,
    authorize_dose,
    prescription_from_json,
    record_delivery,
    validate_prescription,
)
from .pathway import (
    SCREEN_CONFIDENCE,
    SCREEN_CONSECUTIVE,
    DetectionEvent,
    EpisodeLog,
    PrescriptionIssued,
    Stage,
    TransitionError,
    circadian_profile,
    initial_state,
    log_episode,
    step,
)
from .pump import PumpGeometry, VirtualPump
from .signals import Channel, ParameterError, RhythmClass

STREAM_BUFFER = 1000


class LiveSystem:
    """Pathway + episode log + dosing safety + pump, with an event stream.

    Implements the pump's dosing link (authorize/record), so every delivery
    path - wire DELIVER, console manual dose, closed-loop schedule - passes
    the same safety gate atomically.
    """

    def __init__(self, prescription: Prescription, geometry: PumpGeometry, *,
                 patient_id: str = "patient-1", step_time_s: float = 0.0,
                 utc_offset_s: float = 0.0, time_fn=time.time,
                 screen_consecutive: int = SCREEN_CONSECUTIVE,
                 screen_confidence: float = SCREEN_CONFIDENCE,
                 audit_path=None):
        self._lock = threading.RLock()
        self.time_fn = time_fn
        self.prescription = prescription
        self.utc_offset_s = utc_offset_s
        base = SafetyState(utc_offset_s=utc_offset_s)
        self.safety = SafetyState([], base.day_start(time_fn()), None, utc_offset_s)
        self.pathway = initial_state(patient_id, time_fn())
        self.log = EpisodeLog()
        self.pump = VirtualPump(geometry, step_time_s=step_time_s,
                                dosing_link=self, time_fn=time_fn)
        self.pending: dict[str, dict] = {}
        self.screen_consecutive = screen_consecutive
        self.screen_confidence = screen_confidence
        self._consecutive_positive = 0
        self.audit = AuditLog()
        self._audit_fh = open(audit_path, "a", encoding="utf-8") if audit_path else None
        self._subscribers: list[Queue] = []
        self._buffer: deque[str] = deque(maxlen=STREAM_BUFFER)
        self._event_seq = 0

    # -- audit + stream ------------------------------------------------------

    def _audit(self, kind: str, payload: dict) -> None:
        record = AuditRecord(self.time_fn(), kind, payload)
        with self._lock:
            self.audit.append(record)
            if self._audit_fh is not None:
                self._audit_fh.write(record.to_line() + "\n")
                self._audit_fh.flush()

    def _broadcast(self, kind: str, payload: dict) -> None:
        with self._lock:
            self._event_seq += 1
            frame = {"event": kind, "event_id": self._event_seq}
            frame.update(payload)
            line = json.dumps(frame, sort_keys=True)
            self._buffer.append(line)
            targets = list(self._subscribers)
        for q in targets:
            q.put(line)

    def subscribe(self, since: int = 0) -> tuple[Queue, list[str], int]:
        """Register a stream consumer; returns (queue, replay lines, last id)."""
        q: Queue = Queue()
        with self._lock:
            replay = [line for line in self._buffer
                      if json.loads(line)["event_id"] > since]
            self._subscribers.append(q)
            return q, replay, self._event_seq

    def unsubscribe(self, q: Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def close(self) -> None:
        if self._audit_fh is not None:
            self._audit_fh.close()
            self._audit_fh = None

    # -- dosing link (called by the pump under its command lock) -------------

    def authorize(self, request_id: str, ml: float, now: float) -> tuple[bool, str | None]:
        with self._lock:
            decision = authorize_dose(self.safety, self.prescription,
                                      DoseRequest(request_id, ml), now)
        self._audit(KIND_AUTHORIZATION, {
            "request_id": request_id, "granted": decision.granted,
            "reason": decision.reason, "requested_ml": ml,
        })
        self._broadcast("authorization", {
            "ts": now, "request_id": request_id, "granted": decision.granted,
            "reason": decision.reason, "ml": ml,
        })
        return decision.granted, decision.reason

    def record(self, request_id: str, delivered_ml: float, now: float,
               steps: int = 0) -> None:
        with self._lock:
            self.safety = record_delivery(self.safety, (now, delivered_ml))
            remaining = self.pump.state.remaining_ml
        self._audit(KIND_DELIVERY, {
            "request_id": request_id, "delivered_ml": delivered_ml, "steps": steps,
        })
        self._broadcast("delivery", {
            "ts": now, "request_id": request_id, "delivered_ml": delivered_ml,
            "remaining_ml": remaining,
        })

    # -- detections -----------------------------------------------------------

    def ingest_detection(self, event: DetectionEvent) -> Stage:
        """Log a detection, debounce the screening trigger, step the pathway."""
        with self._lock:
            self.log = log_episode(self.log, event)
            before = self.pathway.stage
            qualifies = True
            if before == Stage.SCREENING and event.source == Channel.PPG:
                if event.positive and event.confidence >= self.screen_confidence:
                    self._consecutive_positive += 1
                else:
                    self._consecutive_positive = 0
                qualifies = self._consecutive_positive >= self.screen_consecutive
                if qualifies:
                    self._consecutive_positive = 0
            if qualifies:
                self.pathway = step(self.pathway, event, self.screen_confidence)
            after = self.pathway.stage
        self._audit(KIND_DETECTION, {
            "ts": event.ts, "source": event.source.value,
            "class": event.predicted.name, "confidence": event.confidence,
        })
        self._broadcast("detection", {
            "ts": event.ts, "source": event.source.value,
            "class": event.predicted.name, "confidence": event.confidence,
            "stage": after.value,
        })
        if after != before:
            self._audit(KIND_TRANSITION, {"from": before.value, "to": after.value})
            self._broadcast("transition",
                            {"ts": event.ts, "from": before.value, "to": after.value})
        return after

    def milestone(self, event) -> Stage:
        """Apply a report-complete / prescription-issued pathway event."""
        with self._lock:
            before = self.pathway.stage
            self.pathway = step(self.pathway, event)
            after = self.pathway.stage
        if after != before:
            self._audit(KIND_TRANSITION, {"from": before.value, "to": after.value})
            self._broadcast("transition",
                            {"ts": event.ts, "from": before.value, "to": after.value})
        return after

    def record_schedule(self, schedule: DoseSchedule, mode: str) -> None:
        self._audit(KIND_SCHEDULE, {
            "day_start_ts": schedule.day_start_ts, "mode": mode,
            "planned": [[ts, ml] for ts, ml in schedule.planned],
        })

    def record_loop_config(self) -> None:
        """Header record so an audit log is replayable standalone."""
        self._audit(KIND_SCHEDULE, {
            "mode": "loop-config",
            "prescription": self.prescription_payload(),
            "geometry": self.pump.geometry.to_json_dict(),
            "utc_offset_s": self.utc_offset_s,
        })

    def record_fault(self, message: str) -> None:
        self._audit(KIND_FAULT, {"message": message})

    # -- dose paths -----------------------------------------------------------

    def deliver(self, request_id: str, ml: float) -> dict:
        """Run one dose through authorize -> pump -> record; returns the pump response."""
        return self.pump.handle_command(
            {"id": request_id, "cmd": "DELIVER", "volume_ml": ml})

    def propose_dose(self, dose_id: str, ml: float, at_ts: float | None = None) -> dict:
        with self._lock:
            entry = {"dose_id": dose_id, "ml": ml,
                     "ts": self.time_fn() if at_ts is None else at_ts}
            self.pending[dose_id] = entry
        self._broadcast("pending", {"action": "added", **entry})
        return entry

    def approve_dose(self, dose_id: str) -> dict | None:
        with self._lock:
            entry = self.pending.pop(dose_id, None)
        if entry is None:
            return None
        self._broadcast("pending", {"action": "removed", "dose_id": dose_id})
        return self.deliver(dose_id, entry["ml"])

    def deny_dose(self, dose_id: str) -> bool:
        with self._lock:
            entry = self.pending.pop(dose_id, None)
        if entry is None:
            return False
        self._audit(KIND_AUTHORIZATION, {
            "request_id": dose_id, "granted": False, "reason": "denied-by-operator",
            "requested_ml": entry["ml"],
        })
        self._broadcast("pending", {"action": "removed", "dose_id": dose_id})
        return True

    # -- snapshots ------------------------------------------------------------

    def status_payload(self) -> dict:
        with self._lock:
            now = self.time_fn()
            pump_state = self.pump.snapshot()
            geometry = self.pump.geometry
            entries = self.safety.entries_for(now)
            return {
                "pump": {
                    "status": pump_state.status.value,
                    "plunger_mm": pump_state.plunger_pos_mm,
                    "remaining_ml": pump_state.remaining_ml,
                    "capacity_ml": geometry.syringe_capacity_ml,
                    "step_volume_ml": geometry.step_volume_ml,
                },
                "stage": self.pathway.stage.value,
                "ledger": {
                    "delivered_today": [[ts, ml] for ts, ml in entries],
                    "doses_today": len(entries),
                    "volume_today_ml": sum(ml for _, ml in entries),
                    "daily_max_ml": self.prescription.daily_max_ml,
                    "max_doses_per_day": self.prescription.max_doses_per_day,
                    "min_interdose_interval_s": self.prescription.min_interdose_interval_s,
                    "dose_ml": self.prescription.dose_ml,
                    "last_dose_ts": self.safety.last_dose_ts,
                },
                "pending": sorted(self.pending.values(), key=lambda e: e["dose_id"]),
                "now": now,
            }

    def episodes_payload(self) -> dict:
        with self._lock:
            return {
                "episodes": [
                    {"start": s.start, "end": s.end, "class": s.rhythm.name,
                     "duration_s": s.duration_s}
                    for s in self.log.episodes
                ],
                "n_events": len(self.log.events),
            }

    def profile_payload(self) -> dict:
        with self._lock:
            profile = circadian_profile(self.log, self.utc_offset_s)
        return {"hourly_mass": profile.hourly_mass, "n_episodes": profile.n_episodes}

    def prescription_payload(self) -> dict:
        p = self.prescription
        return {
            "prescription_version": 1,
            "dose_ml": p.dose_ml,
            "max_doses_per_day": p.max_doses_per_day,
            "min_interdose_interval_s": p.min_interdose_interval_s,
            "daily_max_ml": p.daily_max_ml,
            "mode": p.mode.value,
            "fixed_times": [f"{h:02d}:{m:02d}" for h, m in p.fixed_times],
            "lead_time_s": p.lead_time_s,
        }

    def put_prescription(self, doc: dict) -> tuple[bool, list[str], Stage]:
        new_p = prescription_from_json(json.dumps(doc))
        violations = validate_prescription(new_p)
        if violations:
            return False, violations, self.pathway.stage
        with self._lock:
            self.prescription = new_p
            stage = self.pathway.stage
        self.record_loop_config()  # keep the audit trail replayable
        if stage == Stage.CLINICIAN_REVIEW:
            stage = self.milestone(PrescriptionIssued(self.time_fn()))
        return True, [], stage

    def record_config(self) -> None:
        """Pump geometry changed (CONFIG command); re-anchor the audit trail."""
        self.record_loop_config()


class PumpServer:
    """Threaded TCP front end for a LiveSystem."""

    def __init__(self, system: LiveSystem, host: str = "127.0.0.1", port: int = 0):
        self.system = system
        self._sock = socket.create_server((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._threads: list[threading.Thread] = []
        self._closing = threading.Event()
        self._accept_thread: threading.Thread | None = None

    def start(self) -> "PumpServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._closing.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self.system.close()

    def wait(self, timeout: float | None = None) -> None:
        if self._accept_thread is not None:
            self._accept_thread.join(timeout)

    def __enter__(self) -> "PumpServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve_connection, args=(conn,),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_connection(self, conn: socket.socket) -> None:
        try:
            reader = conn.makefile("r", encoding="utf-8", newline="\n")
            for raw in reader:
                raw = raw.strip()
                if not raw:
                    continue
                t0 = time.perf_counter()
                try:
                    frame = json.loads(raw)
                    if not isinstance(frame, dict):
                        raise ValueError("frame must be an object")
                except (json.JSONDecodeError, ValueError):
                    self._send(conn, {"ok": False, "error": "parse"})
                    continue
                if "cmd" in frame:
                    response = self.system.pump.handle_command(frame)
                elif frame.get("op") == "subscribe_stream":
                    self._stream(conn, frame, t0)
                    return  # connection is now stream-only
                elif "op" in frame:
                    response = self._gateway(frame)
                    response["latency_ms"] = (time.perf_counter() - t0) * 1000.0
                else:
                    response = {"id": frame.get("id"), "ok": False,
                                "error": "bad-frame",
                                "latency_ms": (time.perf_counter() - t0) * 1000.0}
                self._send(conn, response)
        except (OSError, ValueError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _send(self, conn: socket.socket, payload: dict) -> None:
        conn.sendall((json.dumps(payload) + "\n").encode("utf-8"))

    def _stream(self, conn: socket.socket, frame: dict, t0: float) -> None:
        since = int(frame.get("since", 0) or 0)
        q, replay, last_id = self.system.subscribe(since)
        try:
            self._send(conn, {
                "id": frame.get("id"), "ok": True, "last_event_id": last_id,
                "latency_ms": (time.perf_counter() - t0) * 1000.0,
            })
            for line in replay:
                conn.sendall((line + "\n").encode("utf-8"))
            while not self._closing.is_set():
                try:
                    line = q.get(timeout=0.2)
                except Empty:
                    continue
                conn.sendall((line + "\n").encode("utf-8"))
        except OSError:
            pass
        finally:
            self.system.unsubscribe(q)
            try:
                conn.close()
            except OSError:
                pass

    # -- gateway ops ----------------------------------------------------------

    def _gateway(self, frame: dict) -> dict:
        frame_id = frame.get("id")
        op = frame.get("op")
        base = {"id": frame_id, "ok": True}
        if not isinstance(frame_id, str) or not frame_id:
            return {"id": frame_id, "ok": False, "error": "bad-frame"}
        try:
            if op == "get_status":
                return {**base, **self.system.status_payload()}
            if op == "get_episodes":
                return {**base, **self.system.episodes_payload()}
            if op == "get_profile":
                return {**base, **self.system.profile_payload()}
            if op == "get_prescription":
                return {**base, "prescription": self.system.prescription_payload()}
            if op == "put_prescription":
                ok, violations, stage = self.system.put_prescription(
                    frame.get("prescription") or {})
                if not ok:
                    return {"id": frame_id, "ok": False,
                            "error": "invalid-prescription",
                            "violations": violations, "stage": stage.value}
                return {**base, "stage": stage.value}
            if op == "manual_dose":
                ml = frame.get("ml", self.system.prescription.dose_ml)
                if not isinstance(ml, (int, float)) or ml <= 0:
                    return {"id": frame_id, "ok": False, "error": "bad-volume"}
                pump_resp = self.system.deliver(frame_id, float(ml))
                return {
                    "id": frame_id, "ok": pump_resp["ok"],
                    "error": pump_resp.get("error"),
                    "delivered_ml": pump_resp.get("delivered_ml", 0.0),
                    "steps": pump_resp.get("steps", 0),
                    "pump": {k: pump_resp[k] for k in
                             ("status", "plunger_mm", "remaining_ml")},
                }
            if op == "propose_dose":
                ml = frame.get("ml", self.system.prescription.dose_ml)
                if not isinstance(ml, (int, float)) or ml <= 0:
                    return {"id": frame_id, "ok": False, "error": "bad-volume"}
                entry = self.system.propose_dose(frame_id, float(ml), frame.get("at"))
                return {**base, "dose_id": entry["dose_id"]}
            if op == "approve_dose":
                pump_resp = self.system.approve_dose(str(frame.get("dose_id")))
                if pump_resp is None:
                    return {"id": frame_id, "ok": False, "error": "unknown-dose"}
                return {
                    "id": frame_id, "ok": pump_resp["ok"],
                    "error": pump_resp.get("error"),
                    "delivered_ml": pump_resp.get("delivered_ml", 0.0),
                    "steps": pump_resp.get("steps", 0),
                }
            if op == "deny_dose":
                if not self.system.deny_dose(str(frame.get("dose_id"))):
                    return {"id": frame_id, "ok": False, "error": "unknown-dose"}
                return base
            if op == "inject_detection":
                event = DetectionEvent(
                    float(frame.get("ts", self.system.time_fn())),
                    Channel.PPG if frame.get("source", "PPG") == "PPG"
                    else Channel.ECG_LEAD_I,
                    RhythmClass[frame["class"]],
                    float(frame.get("confidence", 1.0)),
                )
                stage = self.system.ingest_detection(event)
                return {**base, "stage": stage.value}
            if op == "report_complete":
                from .pathway import ReportComplete

                stage = self.system.milestone(ReportComplete(self.system.time_fn()))
                return {**base, "stage": stage.value}
            return {"id": frame_id, "ok": False, "error": "unknown-op"}
        except (ParameterError, TransitionError, KeyError) as exc:
            return {"id": frame_id, "ok": False, "error": str(exc)}


def serve(bind: str, geometry: PumpGeometry, prescription: Prescription, *,
          step_time_s: float = 0.005, audit_path=None,
          screen_consecutive: int = SCREEN_CONSECUTIVE) -> PumpServer:
    """Bind the pump/gateway service; returns the started server."""
    host, _, port_text = bind.partition(":")
    system = LiveSystem(prescription, geometry, step_time_s=step_time_s,
                        audit_path=audit_path,
                        screen_consecutive=screen_consecutive)
    system.record_loop_config()
    server = PumpServer(system, host or "127.0.0.1", int(port_text or 0))
    return server.start()
