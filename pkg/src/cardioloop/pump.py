"""Virtual syringe pump: stepper/rack-and-pinion kinematics and device core.

The rack and pinion converts motor rotation to plunger travel, so one step
displaces the plunger by 2*pi*pinion_radius/steps_per_rev and expels one step
quantum of volume.  Deliveries are all-or-nothing against the travel limit:
a request that would overrun the syringe moves nothing and reports a fault.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum

from .signals import ParameterError


@dataclass(frozen=True)
class PumpGeometry:
    steps_per_rev: int = 200
    pinion_radius_mm: float = 6.0
    syringe_inner_radius_mm: float = 7.0
    plunger_travel_mm: float = 65.0
    syringe_capacity_ml: float | None = None

    def __post_init__(self):
        if min(self.steps_per_rev, self.pinion_radius_mm,
               self.syringe_inner_radius_mm, self.plunger_travel_mm) <= 0:
            raise ParameterError("all geometry fields must be positive")
        computed = (math.pi * self.syringe_inner_radius_mm ** 2
                    * self.plunger_travel_mm / 1000.0)
        if self.syringe_capacity_ml is None:
            object.__setattr__(self, "syringe_capacity_ml", computed)
        elif abs(self.syringe_capacity_ml - computed) > 1e-3 * computed:
            raise ParameterError(
                f"capacity {self.syringe_capacity_ml} inconsistent with "
                f"bore/travel ({computed:.4f} mL)")

    @property
    def step_displacement_mm(self) -> float:
        return 2.0 * math.pi * self.pinion_radius_mm / self.steps_per_rev

    @property
    def step_volume_ml(self) -> float:
        return (math.pi * self.syringe_inner_radius_mm ** 2
                * self.step_displacement_mm / 1000.0)

    def remaining_at(self, plunger_pos_mm: float) -> float:
        return (math.pi * self.syringe_inner_radius_mm ** 2
                * (self.plunger_travel_mm - plunger_pos_mm) / 1000.0)

    def to_json_dict(self) -> dict:
        return {
            "steps_per_rev": self.steps_per_rev,
            "pinion_radius_mm": self.pinion_radius_mm,
            "syringe_inner_radius_mm": self.syringe_inner_radius_mm,
            "plunger_travel_mm": self.plunger_travel_mm,
            "syringe_capacity_ml": self.syringe_capacity_ml,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PumpGeometry":
        try:
            return cls(
                steps_per_rev=int(doc["steps_per_rev"]),
                pinion_radius_mm=float(doc["pinion_radius_mm"]),
                syringe_inner_radius_mm=float(doc["syringe_inner_radius_mm"]),
                plunger_travel_mm=float(doc["plunger_travel_mm"]),
                syringe_capacity_ml=(float(doc["syringe_capacity_ml"])
                                     if doc.get("syringe_capacity_ml") is not None
                                     else None),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParameterError(f"geometry document: {exc}") from None


def volume_to_steps(g: PumpGeometry, v: float) -> tuple[int, float]:
    """Whole steps nearest the requested volume plus the signed residual."""
    if v <= 0:
        raise ParameterError("volume must be positive")
    q = g.step_volume_ml
    steps = int(math.floor(v / q + 0.5))
    return steps, v - steps * q


def steps_to_volume(g: PumpGeometry, steps: int) -> float:
    if steps < 0:
        raise ParameterError("steps must be >= 0")
    return steps * g.step_volume_ml


class Status(Enum):
    IDLE = "Idle"
    DELIVERING = "Delivering"
    FAULT = "Fault"


@dataclass(frozen=True)
class PumpState:
    plunger_pos_mm: float
    remaining_ml: float
    status: Status = Status.IDLE
    last_command_id: str | None = None


def fresh_state(g: PumpGeometry) -> PumpState:
    return PumpState(0.0, g.remaining_at(0.0))


@dataclass(frozen=True)
class DeliveryResult:
    delivered_ml: float
    steps: int
    duration_s: float
    fault: str | None = None


class FaultRefusal(RuntimeError):
    pass


def actuate(s: PumpState, g: PumpGeometry, steps: int,
            step_time_s: float = 0.005) -> tuple[PumpState, DeliveryResult]:
    """Advance the plunger by whole steps, all-or-nothing at the travel limit."""
    if s.status == Status.FAULT:
        raise FaultRefusal("pump is in Fault state")
    if s.status != Status.IDLE:
        raise FaultRefusal("pump is busy")
    if steps < 0:
        raise ParameterError("steps must be >= 0")
    new_pos = s.plunger_pos_mm + steps * g.step_displacement_mm
    if new_pos > g.plunger_travel_mm + 1e-9:
        return s, DeliveryResult(0.0, 0, 0.0, fault="travel-limit")
    delivered = steps_to_volume(g, steps)
    new_state = replace(s, plunger_pos_mm=new_pos, remaining_ml=g.remaining_at(new_pos))
    return new_state, DeliveryResult(delivered, steps, steps * step_time_s)


PRIME_STEPS = 2


class VirtualPump:
    """Thread-safe device wrapper: serialized actuation, duplicate-id replay,
    interruptible delivery.

    All state-mutating commands funnel through one command lock; STATUS reads
    take only the brief state lock, so they stay responsive mid-delivery.
    STOP bypasses the command lock entirely (it must interrupt a holder).
    """

    CHUNK_STEPS = 8

    def __init__(self, geometry: PumpGeometry, *, step_time_s: float = 0.005,
                 dosing_link=None, time_fn=time.time):
        self.geometry = geometry
        self.state = fresh_state(geometry)
        self.step_time_s = step_time_s
        self.dosing_link = dosing_link
        self.time_fn = time_fn
        self._cmd_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._stop = threading.Event()
        self._responses: dict[str, dict] = {}

    # -- snapshots ---------------------------------------------------------

    def snapshot(self) -> PumpState:
        with self._state_lock:
            return self.state

    def _base_response(self, frame_id, ok: bool, **extra) -> dict:
        s = self.snapshot()
        resp = {
            "id": frame_id,
            "ok": ok,
            "status": s.status.value,
            "plunger_mm": s.plunger_pos_mm,
            "remaining_ml": s.remaining_ml,
        }
        resp.update(extra)
        return resp

    # -- motion ------------------------------------------------------------

    def _run_steps(self, steps: int) -> tuple[int, str | None]:
        """Chunked, stoppable advance; returns (steps done, fault)."""
        with self._state_lock:
            if self.state.status == Status.FAULT:
                return 0, "fault"
            target = self.state.plunger_pos_mm + steps * self.geometry.step_displacement_mm
            if target > self.geometry.plunger_travel_mm + 1e-9:
                return 0, "travel-limit"
            self._stop.clear()  # a STOP only applies to an in-progress delivery
            self.state = replace(self.state, status=Status.DELIVERING)
        done = 0
        try:
            while done < steps:
                if self._stop.is_set():
                    break
                n = min(self.CHUNK_STEPS, steps - done)
                if self.step_time_s > 0:
                    time.sleep(n * self.step_time_s)
                with self._state_lock:
                    pos = self.state.plunger_pos_mm + n * self.geometry.step_displacement_mm
                    self.state = replace(self.state, plunger_pos_mm=pos,
                                         remaining_ml=self.geometry.remaining_at(pos))
                done += n
        finally:
            self._stop.clear()
            with self._state_lock:
                self.state = replace(self.state, status=Status.IDLE)
        return done, None

    # -- command dispatch ----------------------------------------------------

    def handle_command(self, frame: dict) -> dict:
        t0 = time.perf_counter()
        resp = self._dispatch(frame)
        if "latency_ms" not in resp:
            resp["latency_ms"] = (time.perf_counter() - t0) * 1000.0
        return resp

    def _dispatch(self, frame: dict) -> dict:
        frame_id = frame.get("id")
        cmd = frame.get("cmd")
        if not isinstance(frame_id, str) or not frame_id:
            return self._base_response(frame_id, False, error="bad-frame")
        if cmd == "STATUS":
            return self._base_response(frame_id, True)
        if cmd == "STOP":
            with self._state_lock:
                delivering = self.state.status == Status.DELIVERING
            if delivering:
                self._stop.set()
            return self._base_response(frame_id, True)
        if cmd == "DELIVER":
            return self._deliver(frame_id, frame)
        if cmd == "PRIME":
            return self._mutating(frame_id, self._prime)
        if cmd == "CONFIG":
            return self._mutating(frame_id, lambda fid: self._config(fid, frame))
        return self._base_response(frame_id, False, error="unknown-cmd")

    def _mutating(self, frame_id: str, fn) -> dict:
        with self._cmd_lock:
            if frame_id in self._responses:
                return self._responses[frame_id]
            resp = fn(frame_id)
            self._responses[frame_id] = resp
            with self._state_lock:
                self.state = replace(self.state, last_command_id=frame_id)
            return resp

    def _deliver(self, frame_id: str, frame: dict) -> dict:
        volume = frame.get("volume_ml")
        if not isinstance(volume, (int, float)) or volume <= 0:
            return self._base_response(frame_id, False, error="bad-volume")

        def run(fid: str) -> dict:
            now = self.time_fn()
            if self.dosing_link is not None:
                granted, reason = self.dosing_link.authorize(fid, float(volume), now)
                if not granted:
                    return self._base_response(fid, False, error=reason,
                                               delivered_ml=0.0, steps=0)
            steps, _ = volume_to_steps(self.geometry, float(volume))
            done, fault = self._run_steps(steps)
            delivered = steps_to_volume(self.geometry, done)
            if fault:
                return self._base_response(fid, False, error=fault,
                                           delivered_ml=0.0, steps=0)
            if self.dosing_link is not None:
                self.dosing_link.record(fid, delivered, now, done)
            if done < steps:
                return self._base_response(fid, False, error="stopped",
                                           delivered_ml=delivered, steps=done)
            return self._base_response(fid, True, delivered_ml=delivered, steps=done)

        return self._mutating(frame_id, run)

    def _prime(self, frame_id: str) -> dict:
        done, fault = self._run_steps(PRIME_STEPS)
        delivered = steps_to_volume(self.geometry, done)
        if fault:
            return self._base_response(frame_id, False, error=fault,
                                       delivered_ml=0.0, steps=0)
        return self._base_response(frame_id, True, delivered_ml=delivered, steps=done)

    def _config(self, frame_id: str, frame: dict) -> dict:
        with self._state_lock:
            busy = self.state.status != Status.IDLE
        if busy:
            return self._base_response(frame_id, False, error="not-idle")
        try:
            geometry = PumpGeometry.from_json_dict(frame.get("geometry") or {})
        except ParameterError:
            return self._base_response(frame_id, False, error="bad-geometry")
        with self._state_lock:
            conflict = self.state.plunger_pos_mm > geometry.plunger_travel_mm
            if not conflict:
                self.geometry = geometry
                pos = self.state.plunger_pos_mm
                self.state = replace(self.state,
                                     remaining_ml=geometry.remaining_at(pos))
        if conflict:
            return self._base_response(frame_id, False, error="travel-limit")
        if self.dosing_link is not None and hasattr(self.dosing_link, "record_config"):
            self.dosing_link.record_config()
        return self._base_response(frame_id, True)
