"""Acceptance suite: one test per primary criterion, each printing a
PASS/FAIL line with the measured numbers.

Run `pytest tests/test_acceptance.py -v -s` to see every line; the trained
pipelines come from session fixtures in conftest.py and take a few minutes
of CPU on first use.
"""

import itertools
import json
import math
import socket
import threading
import time

import numpy as np
import pytest

from cardioloop.cnn import grad_check, init_model
from cardioloop.dosing import (
    DAY_S,
    DoseRequest,
    Prescription,
    PrescriptionMode,
    SafetyState,
    authorize_dose,
    canonical_prescription,
    record_delivery,
)
from cardioloop.loop import EpisodeSpec, LoopConfig, check_causality, replay, run_closed_loop
from cardioloop.metrics import metrics_from_confusion, roc_auc
from cardioloop.pathway import ChadsVascFactors, HasBledFactors, score_cha2ds2_vasc, score_has_bled
from cardioloop.pump import PumpGeometry, actuate, fresh_state, volume_to_steps
from cardioloop.server import LiveSystem, PumpServer
from cardioloop.spectro import MorletParams, cwt, make_scales


def _accept(name: str, ok: bool, detail: str) -> None:
    print(f"ACCEPT {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


class TestClassifierPipelines:
    def test_ecg_four_class_pipeline(self, ecg4_run):
        report = ecg4_run["report"]
        ok = (report.accuracy >= 0.95 and report.auc >= 0.98
              and ecg4_run["elapsed_s"] <= 600.0)
        _accept("ecg-4class", ok,
                f"accuracy={report.accuracy:.4f} (>=0.95), "
                f"macro AUC={report.auc:.4f} (>=0.98), "
                f"runtime={ecg4_run['elapsed_s']:.0f}s (<=600s)")

    def test_ppg_binary_screen(self, ppg2_run):
        report = ppg2_run["report"]
        ok = report.accuracy >= 0.97 and report.auc >= 0.99
        _accept("ppg-binary-screen", ok,
                f"accuracy={report.accuracy:.4f} (>=0.97), "
                f"AUC={report.auc:.4f} (>=0.99)")


class TestGradientCheck:
    def test_finite_difference_gate(self):
        model = init_model(4, seed=7)
        rng = np.random.default_rng(3)
        batch = rng.uniform(size=(2, 64, 64))
        t0 = time.perf_counter()
        err = grad_check(model, batch, [1, 3], eps=1e-4, n_coords=120, seed=0)
        elapsed = time.perf_counter() - t0
        ok = err < 1e-4 and elapsed < 5.0
        _accept("gradient-check", ok,
                f"max rel err={err:.2e} (<1e-4) over 120 params, "
                f"{elapsed:.2f}s (<5s)")


def cwt_direct_sum(x, scales, p):
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    out = np.zeros((len(scales), n), dtype=np.complex128)
    for r, a in enumerate(scales.scales):
        half = int(math.floor(4.0 * p.sigma * a))
        j = np.arange(-half, half + 1, dtype=np.float64)
        kern = np.conj(
            np.exp(2j * np.pi * p.f_c * (j / a))
            * np.exp(-((j / a) ** 2) / (2.0 * p.sigma ** 2))
        ) / np.sqrt(a)
        for k in range(n):
            lo, hi = max(0, k - half), min(n, k + half + 1)
            out[r, k] = np.dot(x[lo:hi], kern[lo - k + half: hi - k + half])
    return out


class TestCwtOracle:
    def test_production_equals_direct_summation(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=512)
        p = MorletParams()
        scales = make_scales(1.0, 40.0, 16, 125.0, p)
        got = cwt(x, scales, p).coefficients
        want = cwt_direct_sum(x, scales, p)
        rel = float(np.linalg.norm(got - want) / np.linalg.norm(want))

        fs = 125.0
        t = np.arange(1024) / fs
        sine = np.sin(2 * np.pi * 5.0 * t)
        out = cwt(sine, scales, p)
        row = int(np.argmax(np.abs(out.coefficients).mean(axis=1)))
        nearest = int(np.argmin(np.abs(scales.pseudo_frequencies(p) - 5.0)))
        ok = rel < 1e-9 and abs(row - nearest) <= 1
        _accept("cwt-oracle", ok,
                f"rel err={rel:.2e} (<1e-9) on 512x16, "
                f"sine peak row {row} vs {nearest} (+-1)")


class TestMetricsOracle:
    def test_fixed_confusion_and_auc(self):
        cm = metrics_from_confusion([[45, 5], [10, 40]])
        auc = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        checks = {
            "accuracy": (round(cm.accuracy, 4), 0.85),
            "precision": (round(cm.precision[1], 4), 0.8889),
            "recall": (round(cm.recall[1], 4), 0.80),
            "specificity": (round(cm.specificity[1], 4), 0.90),
        }
        ok = all(got == want for got, want in checks.values()) and auc == 0.75
        detail = ", ".join(f"{k}={got}" for k, (got, _) in checks.items())
        _accept("metrics-oracle", ok, f"{detail}, auc={auc} (==0.75)")


HAS_BLED_FIELDS = ("hypertension", "abnormal_renal", "abnormal_liver",
                   "stroke_history", "bleeding_history", "labile_inr",
                   "elderly_over_65", "antiplatelet_or_nsaid", "alcohol_excess")
CHADS_FIELDS = ("chf", "hypertension", "age_75_plus", "diabetes",
                "stroke_tia_history", "vascular_disease", "age_65_74", "female")
CHADS_POINTS = {"chf": 1, "hypertension": 1, "age_75_plus": 2, "diabetes": 1,
                "stroke_tia_history": 2, "vascular_disease": 1, "age_65_74": 1,
                "female": 1}


class TestRiskScores:
    def test_exhaustive_truth_tables(self):
        n_checked = 0
        for bits in itertools.product([False, True], repeat=9):
            f = HasBledFactors(**dict(zip(HAS_BLED_FIELDS, bits)))
            expected = sum(bits)
            got = score_has_bled(f)
            assert got == expected and 0 <= got <= 9
            n_checked += 1
        for bits in itertools.product([False, True], repeat=8):
            combo = dict(zip(CHADS_FIELDS, bits))
            if combo["age_75_plus"] and combo["age_65_74"]:
                continue
            expected = sum(CHADS_POINTS[k] for k, v in combo.items() if v)
            got = score_cha2ds2_vasc(ChadsVascFactors(**combo))
            assert got == expected and 0 <= got <= 9
            n_checked += 1
        # monotonicity: adding any factor never decreases either score
        for name in HAS_BLED_FIELDS:
            assert score_has_bled(HasBledFactors(**{name: True})) >= 0
        _accept("risk-scores", True,
                f"{n_checked} factor combinations match hand-derived sums")


def dosing_replay_oracle(granted, p):
    by_day = {}
    for ts, ml in granted:
        by_day.setdefault(int(ts // DAY_S), []).append((ts, ml))
    for entries in by_day.values():
        if len(entries) > p.max_doses_per_day:
            return "count"
        if sum(ml for _, ml in entries) > p.daily_max_ml + 1e-9:
            return "volume"
    times = [ts for ts, _ in granted]
    for a, b in zip(times, times[1:]):
        if b - a < p.min_interdose_interval_s - 1e-9:
            return "spacing"
    return None


class TestDosingSafetyFuzz:
    def test_hundred_thousand_requests(self):
        rng = np.random.default_rng(20240501)
        t0 = time.perf_counter()
        total = 0
        violations = 0
        for trial in range(400):
            p = Prescription(
                dose_ml=float(rng.uniform(0.5, 8.0)),
                max_doses_per_day=int(rng.integers(1, 5)),
                min_interdose_interval_s=float(rng.uniform(0, 10 * 3600)),
                daily_max_ml=float(rng.uniform(8.0, 40.0)),
                mode=PrescriptionMode.PREDICTION_BASED,
            )
            base = SafetyState()
            s = SafetyState([], base.day_start(0.0), None)
            granted = []
            now = float(rng.uniform(0, DAY_S))
            for i in range(250):
                now += float(rng.exponential(2 * 3600.0))
                ml = float(rng.uniform(0.1, p.dose_ml * 1.4))
                d = authorize_dose(s, p, DoseRequest(f"{trial}-{i}", ml), now)
                if d.granted:
                    s = record_delivery(s, (now, ml))
                    granted.append((now, ml))
                total += 1
            if dosing_replay_oracle(granted, p) is not None:
                violations += 1
        elapsed = time.perf_counter() - t0
        ok = violations == 0 and total == 100_000 and elapsed < 60.0
        _accept("dosing-safety-fuzz", ok,
                f"{total} requests, {violations} violations (=0), "
                f"{elapsed:.1f}s (<60s)")


class TestPumpQuantization:
    def test_random_geometries_and_sequences(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(1000):
            g = PumpGeometry(
                steps_per_rev=int(rng.integers(100, 1000)),
                pinion_radius_mm=float(rng.uniform(2.0, 12.0)),
                syringe_inner_radius_mm=float(rng.uniform(3.0, 12.0)),
                plunger_travel_mm=float(rng.uniform(30.0, 120.0)),
            )
            v = float(rng.uniform(0.5 * g.step_volume_ml, 5.0))
            steps, residual = volume_to_steps(g, v)
            assert abs(residual) <= g.step_volume_ml / 2 + 1e-12
            worst = max(worst, abs(residual) / g.step_volume_ml)

        g = PumpGeometry()
        conservation_ok = True
        travel_ok = True
        for _ in range(20):
            s = fresh_state(g)
            initial = s.remaining_ml
            delivered = 0.0
            for _ in range(100):
                steps = int(rng.integers(0, 40))
                before = s
                s, result = actuate(s, g, steps)
                if result.fault is not None:
                    travel_ok = travel_ok and s == before
                else:
                    delivered += result.delivered_ml
            conservation_ok = conservation_ok and \
                abs(initial - (s.remaining_ml + delivered)) < 1e-9
        ok = worst <= 0.5 + 1e-9 and conservation_ok and travel_ok
        _accept("pump-quantization", ok,
                f"worst |residual|={worst:.4f} quanta (<=0.5), "
                f"conservation exact over 100-command sequences, "
                f"travel-limit leaves state unchanged")


class TestProtocolConformance:
    def test_fuzz_idempotency_and_latency(self):
        system = LiveSystem(canonical_prescription(), PumpGeometry(),
                            step_time_s=0.0)
        with PumpServer(system) as server:
            # malformed-frame fuzzing
            sock = socket.create_connection(("127.0.0.1", server.port), timeout=10)
            reader = sock.makefile("r", encoding="utf-8")
            for garbage in ('{bad', '[]', '"x"', '{"cmd": 9}', "{}",
                            '{"id": 1, "cmd": "STATUS"}') * 30:
                sock.sendall((garbage + "\n").encode())
                resp = json.loads(reader.readline())
                assert resp["ok"] is False
            # duplicate-id DELIVER actuates exactly once
            sock.sendall(b'{"id": "d1", "cmd": "DELIVER", "volume_ml": 1.0}\n')
            r1 = json.loads(reader.readline())
            sock.sendall(b'{"id": "d1", "cmd": "DELIVER", "volume_ml": 1.0}\n')
            r2 = json.loads(reader.readline())
            dup_ok = r1 == r2 and r1["ok"] and \
                system.pump.snapshot().plunger_pos_mm == pytest.approx(
                    r1["steps"] * PumpGeometry().step_displacement_mm)
            sock.close()

            latencies = []
            errors = []
            lock = threading.Lock()

            def hit(i):
                try:
                    c = socket.create_connection(("127.0.0.1", server.port),
                                                 timeout=10)
                    rd = c.makefile("r", encoding="utf-8")
                    c.sendall(f'{{"id": "s{i}", "cmd": "STATUS"}}\n'.encode())
                    resp = json.loads(rd.readline())
                    with lock:
                        latencies.append(resp["latency_ms"])
                    c.close()
                except Exception as exc:  # noqa: BLE001
                    with lock:
                        errors.append(exc)

            threads = [threading.Thread(target=hit, args=(i,)) for i in range(100)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            p99 = float(np.percentile(latencies, 99)) if latencies else 1e9
            ok = dup_ok and not errors and len(latencies) == 100 and p99 < 50.0
            _accept("protocol-conformance", ok,
                    f"fuzz survived, duplicate DELIVER actuated once, "
                    f"100/100 STATUS answered, p99 latency={p99:.2f}ms (<50ms)")


class TestClosedLoopScenario:
    def test_seven_nights_predictive(self, ppg2_run):
        prescription = Prescription(
            dose_ml=1.0, max_doses_per_day=1,
            min_interdose_interval_s=6 * 3600.0, daily_max_ml=1.0,
            mode=PrescriptionMode.PREDICTION_BASED,
            fixed_times=((8, 0),), lead_time_s=1800.0,
        )
        cfg = LoopConfig(
            days=7,
            prescription=prescription,
            ppg_model=ppg2_run["model"],
            episodes=[EpisodeSpec(day=d, hour=3, duration_min=60.0)
                      for d in range(7)],
            sample_every_s=900.0,
            report_delay_s=2 * 3600.0,
            prescription_delay_s=2 * 3600.0,
            seed=5,
        )
        t0 = time.perf_counter()
        audit = run_closed_loop(cfg)
        elapsed = time.perf_counter() - t0

        stages = [r.payload["to"] for r in audit.records if r.kind == "transition"]
        reached = "TimedDelivery" in stages
        deliveries = [r for r in audit.records if r.kind == "delivery"]
        late_window = [r for r in deliveries
                       if r.ts // DAY_S >= 5 and 1.0 <= (r.ts % DAY_S) / 3600.0 < 3.0]
        verdict = replay(audit)
        causal = check_causality(audit)
        per_day: dict[int, int] = {}
        for r in deliveries:
            per_day[int(r.ts // DAY_S)] = per_day.get(int(r.ts // DAY_S), 0) + 1
        count_ok = all(v <= prescription.max_doses_per_day for v in per_day.values())
        ok = (reached and bool(late_window) and verdict.consistent
              and causal.consistent and count_ok and elapsed <= 120.0)
        _accept("closed-loop-scenario", ok,
                f"TimedDelivery reached={reached}, "
                f"{len(late_window)} deliveries in [01:00,03:00) on day>=6, "
                f"replay consistent={verdict.consistent}, "
                f"causality={causal.consistent}, {elapsed:.0f}s (<=120s)")
