"""Operator command line: simulation, spectrograms, training, evaluation,
reports, the pump service, the closed loop and audit replay.

Data goes to files or stdout; diagnostics go to stderr.  Exit codes: 0 on
success, 1 on operational failure, 2 on usage errors.  Top-level scalar
fields of any JSON config can be overridden with CARDIOLOOP_<FIELD>
environment variables.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .audit import AuditLog
from .cnn import (
    TrainConfig,
    evaluate,
    init_model,
    inverse_frequency_weights,
    load_checkpoint,
    save_checkpoint,
    split_dataset,
    train,
)
from .dosing import load_prescription
from .loop import load_scenario, replay, run_closed_loop
from .pathway import (
    ChadsVascFactors,
    HasBledFactors,
    PathwayState,
    PatientRecord,
    Stage,
    circadian_profile,
    generate_report,
    load_event_log,
    render_report_text,
)
from .pipeline import dataset_to_imageset
from .pump import PumpGeometry
from .server import serve
from .signals import (
    Channel,
    ParameterError,
    SimConfig,
    load_dataset,
    load_waveform_csv,
    simulate_dataset,
    save_dataset,
)
from .spectro import MorletParams, cwt, save_spectro_pgm, scalogram_to_image, segment_windows
from .pipeline import scales_for

ENV_PREFIX = "CARDIOLOOP_"


def apply_env_overrides(doc: dict, prefix: str = ENV_PREFIX) -> dict:
    """Override top-level scalar config fields from the environment."""
    out = dict(doc)
    for key in doc:
        env_key = prefix + key.upper()
        if env_key in os.environ:
            raw = os.environ[env_key]
            try:
                out[key] = json.loads(raw)
            except json.JSONDecodeError:
                out[key] = raw
    return out


def _load_json(path: str) -> dict:
    try:
        return apply_env_overrides(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ParameterError(f"{path}: {exc}") from None


def _sim_config(doc: dict) -> SimConfig:
    fields = ("n_episodes_per_class", "rr_per_record", "median_episode_len",
              "clean_to_artifact_ratio", "fs_ppg", "fs_ecg", "seed")
    return SimConfig(**{k: doc[k] for k in fields if k in doc})


def _channel(name: str) -> Channel:
    return Channel.PPG if name.lower() == "ppg" else Channel.ECG_LEAD_I


def cmd_simulate(args) -> int:
    doc = _load_json(args.config) if args.config else apply_env_overrides({})
    cfg = _sim_config(doc)
    ds = simulate_dataset(cfg, _channel(args.channel))
    manifest = save_dataset(ds, args.out)
    print(manifest)
    return 0


def cmd_spectrogram(args) -> int:
    record = load_waveform_csv(args.infile)
    scales = scales_for(record.channel, record.fs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    p = MorletParams()
    for i, window in enumerate(segment_windows(record, args.window, args.stride)):
        scalogram = cwt(window.samples, scales, p)
        image = scalogram_to_image(scalogram, label=window.label)
        pgm, _ = save_spectro_pgm(image, out_dir / f"win_{i:04d}.pgm",
                                  window_origin=window.origin, fs=record.fs,
                                  scales=scales)
        print(pgm)
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    images = dataset_to_imageset(ds, args.classes)
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch,
                      epochs=args.epochs, seed=args.seed)
    tr, va, _ = split_dataset(images, cfg)
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch,
                      epochs=args.epochs, seed=args.seed,
                      class_weights=inverse_frequency_weights(tr.labels, args.classes))
    model, history = train(init_model(args.classes, args.seed), tr, cfg)
    save_checkpoint(model, args.out)
    if history:
        last = history[-1]
        print(f"trained {args.epochs} epochs; final loss {last['loss']:.4f}, "
              f"train accuracy {last['accuracy']:.4f}", file=sys.stderr)
    if len(va):
        val = evaluate(model, va)
        print(f"validation accuracy {val.accuracy:.4f}, AUC {val.auc:.4f}",
              file=sys.stderr)
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    images = dataset_to_imageset(ds, model.n_classes)
    report = evaluate(model, images)
    Path(args.report).write_text(json.dumps(report.to_table_json(), indent=2) + "\n",
                                 encoding="utf-8")
    print(args.report)
    return 0


def _patient_from_doc(doc: dict) -> tuple[PatientRecord, Stage]:
    patient = PatientRecord(
        patient_id=str(doc.get("patient_id", doc.get("id", "unknown"))),
        age=int(doc.get("age", 0)),
        sex=str(doc.get("sex", "U")),
        questionnaire=dict(doc.get("questionnaire", {})),
        has_bled=HasBledFactors(**doc.get("has_bled", {})),
        chads_vasc=ChadsVascFactors(**doc.get("chads_vasc", {})),
    )
    stage = Stage(doc.get("stage", "DataCollection"))
    return patient, stage


def cmd_report(args) -> int:
    patient, stage = _patient_from_doc(_load_json(args.patient))
    log = load_event_log(args.log)
    state = PathwayState(stage, 0.0, patient.patient_id)
    profile = circadian_profile(log, args.utc_offset)
    report = generate_report(patient, log, state, profile, args.utc_offset)
    out = Path(args.out)
    out.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    out.with_suffix(out.suffix + ".md").write_text(render_report_text(report),
                                                   encoding="utf-8")
    print(out)
    return 0


def cmd_serve_pump(args) -> int:
    geometry = (PumpGeometry.from_json_dict(_load_json(args.geometry))
                if args.geometry else PumpGeometry())
    prescription = load_prescription(args.prescription)
    server = serve(args.bind, geometry, prescription,
                   step_time_s=args.step_time, audit_path=args.audit)
    print(f"pump service listening on {server.host}:{server.port}", file=sys.stderr,
          flush=True)
    try:
        while True:
            server.wait(1.0)
    except KeyboardInterrupt:
        print("shutting down", file=sys.stderr)
    finally:
        server.stop()
    return 0


def cmd_closed_loop(args) -> int:
    cfg = load_scenario(args.scenario)
    audit = run_closed_loop(cfg, audit_path=args.audit)
    kinds: dict[str, int] = {}
    for record in audit.records:
        kinds[record.kind] = kinds.get(record.kind, 0) + 1
    print(f"closed loop finished: {json.dumps(kinds, sort_keys=True)}",
          file=sys.stderr)
    if not args.audit:
        print(audit.to_text(), end="")
    return 0


def cmd_replay(args) -> int:
    audit = AuditLog.read(args.audit)
    verdict = replay(audit)
    print(json.dumps({
        "consistent": verdict.consistent,
        "divergence_index": verdict.divergence_index,
        "reason": verdict.reason,
    }))
    if not verdict.consistent:
        print(f"audit log diverges at record {verdict.divergence_index}: "
              f"{verdict.reason}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardioloop")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a labeled waveform dataset")
    p.add_argument("--config", help="SimConfig JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--channel", choices=("ppg", "ecg"), default="ppg")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("spectrogram", help="export CWT spectrogram images")
    p.add_argument("--in", dest="infile", required=True, help="waveform CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--window", type=float, default=10.0)
    p.add_argument("--stride", type=float, default=None)
    p.set_defaults(func=cmd_spectrogram)

    p = sub.add_parser("train", help="train the classifier on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--classes", type=int, choices=(2, 4), default=4)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes metrics JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a patient report")
    p.add_argument("--patient", required=True, help="patient JSON")
    p.add_argument("--log", required=True, help="detection event ndjson")
    p.add_argument("--out", required=True, help="report JSON output")
    p.add_argument("--utc-offset", type=float, default=0.0)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve-pump", help="run the pump/gateway service")
    p.add_argument("--bind", default="127.0.0.1:0")
    p.add_argument("--geometry", help="pump geometry JSON")
    p.add_argument("--prescription", required=True, help="prescription JSON")
    p.add_argument("--step-time", type=float, default=0.005)
    p.add_argument("--audit", help="append-only audit file")
    p.set_defaults(func=cmd_serve_pump)

    p = sub.add_parser("closed-loop", help="run a scenario through the full loop")
    p.add_argument("--scenario", required=True)
    p.add_argument("--audit", help="audit output file")
    p.set_defaults(func=cmd_closed_loop)

    p = sub.add_parser("replay", help="verify an audit log")
    p.add_argument("--audit", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ParameterError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
