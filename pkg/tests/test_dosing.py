import json

import numpy as np
import pytest

from cardioloop.dosing import (
    DAY_S,
    Decision,
    DoseRequest,
    ModeError,
    Prescription,
    PrescriptionError,
    PrescriptionMode,
    SafetyState,
    authorize_dose,
    canonical_prescription,
    load_prescription,
    prescription_from_json,
    prescription_to_json,
    record_delivery,
    schedule_prescription,
    schedule_predictive,
    validate_prescription,
    validate_schedule,
)
from cardioloop.pathway import CircadianProfile, InsufficientDataError, predict_window
from cardioloop.signals import ParameterError


class TestValidatePrescription:
    def test_canonical_is_valid(self):
        assert validate_prescription(canonical_prescription()) == []

    def test_daily_max_overflow(self):
        p = Prescription(5.0, 3, 6 * 3600.0, 10.0,
                         fixed_times=((8, 0), (14, 0), (20, 0)))
        assert "daily-max-volume" in validate_prescription(p)

    def test_fixed_time_spacing(self):
        p = Prescription(5.0, 2, 6 * 3600.0, 15.0,
                         fixed_times=((8, 0), (9, 0)))
        assert "min-interval" in validate_prescription(p)

    def test_fixed_times_count(self):
        p = Prescription(5.0, 3, 6 * 3600.0, 15.0, fixed_times=((8, 0),))
        assert "fixed-times-count" in validate_prescription(p)


class TestSchedulePrescription:
    def test_canonical_three_doses(self):
        sched = schedule_prescription(canonical_prescription(), 0.0)
        assert [(ts / 3600.0, ml) for ts, ml in sched.planned] == [
            (8.0, 5.0), (14.0, 5.0), (20.0, 5.0)]

    def test_single_daily_dose(self):
        p = Prescription(2.0, 1, 0.0, 2.0, fixed_times=((9, 0),))
        sched = schedule_prescription(p, DAY_S)
        assert sched.planned == [(DAY_S + 9 * 3600.0, 2.0)]

    def test_invalid_refused(self):
        p = Prescription(5.0, 3, 6 * 3600.0, 10.0,
                         fixed_times=((8, 0), (14, 0), (20, 0)))
        with pytest.raises(PrescriptionError):
            schedule_prescription(p, 0.0)

    def test_wrong_mode(self):
        p = Prescription(5.0, 1, 0.0, 5.0, mode=PrescriptionMode.PREDICTION_BASED)
        with pytest.raises(ModeError):
            schedule_prescription(p, 0.0)


def predictive_rx(max_doses=1, lead_s=1800.0):
    return Prescription(5.0, max_doses, 6 * 3600.0, 15.0,
                        mode=PrescriptionMode.PREDICTION_BASED,
                        lead_time_s=lead_s)


class TestSchedulePredictive:
    def test_first_dose_leads_predicted_window(self):
        mass = [0.0] * 24
        mass[3] = 1.0
        profile = CircadianProfile(mass, 10)
        sched = schedule_predictive(predictive_rx(), profile, 0.0)
        # oracle: compose predict_window with the lead-time subtraction
        window = predict_window(profile, 2)
        assert 3 in window.hours()
        expected = max(0.0, window.start_hour * 3600.0 - 1800.0)
        assert sched.planned == [(expected, 5.0)]

    def test_midnight_clamp(self):
        profile = CircadianProfile([1 / 24] * 24, 24)
        sched = schedule_predictive(predictive_rx(), profile, 0.0)
        # uniform profile ties to window [0, 2); lead would wrap: clamped to 00:00
        assert sched.planned == [(0.0, 5.0)]

    def test_fallback_signal_on_empty_profile(self):
        with pytest.raises(InsufficientDataError):
            schedule_predictive(predictive_rx(), CircadianProfile([0.0] * 24, 0), 0.0)

    def test_multi_dose_schedule_respects_constraints(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            raw = rng.uniform(size=24)
            profile = CircadianProfile(list(raw / raw.sum()), 30)
            p = predictive_rx(max_doses=3)
            sched = schedule_predictive(p, profile, 7 * DAY_S)
            assert validate_schedule(sched, p) == []
            assert 1 <= len(sched.planned) <= 3
            for ts, _ in sched.planned:
                assert 7 * DAY_S <= ts < 8 * DAY_S

    def test_wrong_mode(self):
        with pytest.raises(ModeError):
            schedule_predictive(canonical_prescription(),
                                CircadianProfile([1 / 24] * 24, 24), 0.0)


def fresh_state(now=0.0):
    s = SafetyState()
    return SafetyState([], s.day_start(now), None)


class TestAuthorizeDose:
    def test_fresh_day_grant(self):
        d = authorize_dose(fresh_state(), canonical_prescription(),
                           DoseRequest("r1", 5.0), 8 * 3600.0)
        assert d.granted

    def test_min_interval_rejection(self):
        p = canonical_prescription()
        s = fresh_state()
        s = record_delivery(s, (8 * 3600.0, 5.0))
        s = record_delivery(s, (14 * 3600.0, 5.0))
        d = authorize_dose(s, p, DoseRequest("r3", 5.0), 18 * 3600.0)  # 4 h gap
        assert not d.granted
        assert d.reason == "min-interval"

    def test_max_doses_rejection(self):
        p = canonical_prescription()
        s = fresh_state()
        for ts in (2 * 3600.0, 8 * 3600.0, 14 * 3600.0):
            s = record_delivery(s, (ts, 5.0))
        d = authorize_dose(s, p, DoseRequest("r4", 1.0), 23 * 3600.0)
        assert not d.granted
        assert d.reason == "max-doses-per-day"

    def test_daily_volume_rejection(self):
        p = Prescription(5.0, 3, 0.0, 12.0, fixed_times=((8, 0), (14, 0), (20, 0)))
        s = fresh_state()
        s = record_delivery(s, (3600.0, 5.0))
        s = record_delivery(s, (7200.0, 5.0))
        d = authorize_dose(s, p, DoseRequest("r5", 5.0), 10800.0)
        assert not d.granted
        assert d.reason == "daily-max-volume"

    def test_over_bolus_rejection(self):
        d = authorize_dose(fresh_state(), canonical_prescription(),
                           DoseRequest("r6", 7.5), 3600.0)
        assert not d.granted
        assert d.reason == "over-bolus"

    def test_nonpositive_volume(self):
        with pytest.raises(ParameterError):
            authorize_dose(fresh_state(), canonical_prescription(),
                           DoseRequest("r7", 0.0), 0.0)

    def test_deterministic(self):
        p = canonical_prescription()
        s = record_delivery(fresh_state(), (3600.0, 5.0))
        req = DoseRequest("r8", 5.0), 4 * 3600.0
        a = authorize_dose(s, p, *req)
        b = authorize_dose(s, p, *req)
        assert a == b

    def test_decision_json(self):
        d = Decision(False, "r9", 5.0, 10.0, "min-interval")
        doc = json.loads(d.to_json())
        assert doc["granted"] is False
        assert doc["reason"] == "min-interval"


class TestRecordDelivery:
    def test_appends(self):
        s = record_delivery(fresh_state(), (100.0, 5.0))
        assert s.delivered_today == [(100.0, 5.0)]
        assert s.last_dose_ts == 100.0

    def test_midnight_rollover_resets_day(self):
        s = record_delivery(fresh_state(), (23.5 * 3600.0, 5.0))
        s = record_delivery(s, (DAY_S + 60.0, 5.0))
        assert s.delivered_today == [(DAY_S + 60.0, 5.0)]
        assert s.day_boundary == DAY_S

    def test_spacing_enforced_across_midnight(self):
        p = canonical_prescription()
        s = record_delivery(fresh_state(), (23.5 * 3600.0, 5.0))
        d = authorize_dose(s, p, DoseRequest("r", 5.0), DAY_S + 3600.0)  # 1.5 h later
        assert not d.granted
        assert d.reason == "min-interval"

    def test_unordered_rejected(self):
        s = record_delivery(fresh_state(), (100.0, 5.0))
        with pytest.raises(ParameterError):
            record_delivery(s, (50.0, 5.0))


def replay_oracle(granted, p):
    """Re-scan an authorized-delivery trace for any constraint breach."""
    by_day = {}
    for ts, ml in granted:
        by_day.setdefault(int(ts // DAY_S), []).append((ts, ml))
    for entries in by_day.values():
        if len(entries) > p.max_doses_per_day:
            return "max-doses-per-day"
        if sum(ml for _, ml in entries) > p.daily_max_ml + 1e-9:
            return "daily-max-volume"
    times = [ts for ts, _ in granted]
    for a, b in zip(times, times[1:]):
        if b - a < p.min_interdose_interval_s - 1e-9:
            return "min-interval"
    if any(ml > p.dose_ml + 1e-9 for _, ml in granted):
        return "over-bolus"
    return None


class TestSafetyFuzz:
    def test_random_sequences_never_violate(self):
        rng = np.random.default_rng(12345)
        total_requests = 0
        for trial in range(400):
            p = Prescription(
                dose_ml=float(rng.uniform(0.5, 8.0)),
                max_doses_per_day=int(rng.integers(1, 5)),
                min_interdose_interval_s=float(rng.uniform(0, 10 * 3600)),
                daily_max_ml=float(rng.uniform(8.0, 40.0)),
                fixed_times=(),
                mode=PrescriptionMode.PREDICTION_BASED,
            )
            s = fresh_state()
            granted = []
            now = float(rng.uniform(0, DAY_S))
            for i in range(250):
                now += float(rng.exponential(2 * 3600.0))
                ml = float(rng.uniform(0.1, p.dose_ml * 1.4))
                d = authorize_dose(s, p, DoseRequest(f"t{trial}-{i}", ml), now)
                if d.granted:
                    s = record_delivery(s, (now, ml))
                    granted.append((now, ml))
                total_requests += 1
            assert replay_oracle(granted, p) is None
        assert total_requests == 100_000


class TestPrescriptionJson:
    def test_round_trip(self):
        p = canonical_prescription()
        back = prescription_from_json(prescription_to_json(p))
        assert back == p

    def test_load_file(self, tmp_path):
        path = tmp_path / "rx.json"
        path.write_text(prescription_to_json(canonical_prescription()))
        assert load_prescription(path) == canonical_prescription()

    def test_bad_version(self):
        with pytest.raises(ParameterError):
            prescription_from_json('{"prescription_version": 99}')

    def test_malformed(self):
        with pytest.raises(ParameterError):
            prescription_from_json("{not json")
