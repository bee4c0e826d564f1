"""Command-line interface.

Subcommands: ingest, policy, verify, export-geojson, report, gen, bench.
All outputs are line-oriented JSON on stdout (bench also prints a CSV block);
errors go to stderr.  Exit codes: 0 okay, 1 usage or unknown subject,
2 verification ended in warning, 3 verification ended in alert.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import statistics
import sys
import time
from datetime import datetime, timedelta, timezone
from typing import Optional

import numpy as np

from . import audit, gen, ingest, model, report, rules
from .export import LAYERS, NoGpsData, export_step_geojson
from .ledger import SimulatedLedger
from .verify import UnknownSubject, VerificationManager, VerificationRequest, VerifyConfig

EXIT_OKAY = 0
EXIT_USAGE = 1
EXIT_WARNING = 2
EXIT_ALERT = 3

OUTCOME_EXIT = {rules.OKAY: EXIT_OKAY, rules.WARNING: EXIT_WARNING, rules.ALERT: EXIT_ALERT}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; 2 is taken by "warning".
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _print(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _fail(message: str) -> int:
    sys.stderr.write(message.rstrip() + "\n")
    return EXIT_USAGE


def _load_ledger(path: str) -> SimulatedLedger:
    if os.path.exists(path):
        return SimulatedLedger.load_snapshot(path)
    return SimulatedLedger()


def _notifier_from_args(args, ledger: SimulatedLedger) -> Optional[audit.AuditorNotifier]:
    if not getattr(args, "sink", None):
        return None
    with open(args.sink, "r", encoding="utf-8") as handle:
        sinks = audit.load_sinks(json.load(handle))
    dead_letter = getattr(args, "dead_letter", None) or "dead_letter.jsonl"
    notifier = audit.AuditorNotifier(sinks, dead_letter_path=dead_letter)
    notifier.attach(ledger)
    return notifier


# -- ingest -------------------------------------------------------------------


def _iter_envelope_texts(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    if path.endswith(".jsonl"):
        return [line for line in text.splitlines() if line.strip()]
    decoded = json.loads(text)
    if isinstance(decoded, list):
        return [json.dumps(entry) for entry in decoded]
    return [text]


def cmd_ingest(args) -> int:
    ledger = _load_ledger(args.state)
    store = model.StateStore(ledger, auto_create=not args.strict)
    manager = VerificationManager(store)
    _notifier_from_args(args, ledger)

    summary = {
        "events": 0,
        "skipped": 0,
        "opened": 0,
        "closed": 0,
        "points": 0,
        "rejected": [],
        "verifications": [],
        "txIds": [],
    }
    for path in args.files:
        try:
            if path.endswith((".json", ".jsonl")):
                code = _ingest_envelopes(path, store, manager, args, summary)
            elif path.endswith(".csv"):
                code = _ingest_csv(path, store, args, summary)
            else:
                return _fail(f"{path}: unsupported input (expected .json, .jsonl or .csv)")
            if code != EXIT_OKAY:
                return code
        except (OSError, json.JSONDecodeError, ingest.IngestError, model.ModelError) as exc:
            return _fail(f"{path}: {exc}")
    ledger.save_snapshot(args.state)
    _print(summary)
    return EXIT_OKAY


def _ingest_envelopes(path, store, manager, args, summary) -> int:
    trigger_steps = frozenset(args.trigger_step) if args.trigger_step else ingest.DEFAULT_TRIGGER_STEPS
    for text in _iter_envelope_texts(path):
        envelope = ingest.parse_envelope(text)
        result = store.apply_event(envelope)
        if result.skipped:
            summary["skipped"] += 1
            continue
        summary["events"] += 1
        summary["opened"] += len(result.opened_steps)
        summary["closed"] += len(result.closed_steps)
        if result.tx_id:
            summary["txIds"].append(result.tx_id)
        if args.auto_verify and result.closed_steps:
            for journey_id, step_id in result.closed_steps:
                decision = ingest.classify_trigger(envelope.event, trigger_steps, step_ref=step_id)
                if decision.action != "auto-verify":
                    continue
                record = manager.verify_step(
                    VerificationRequest(
                        subject=step_id, trigger="auto", requested_by=envelope.topic
                    )
                )
                summary["verifications"].append(
                    {"subject": step_id, "outcome": record.outcome, "verificationId": record.verification_id}
                )
    return EXIT_OKAY


def _ingest_csv(path, store, args, summary) -> int:
    if not args.journey or not args.kind:
        return _fail(f"{path}: CSV ingestion needs --journey and --kind")
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    readings, rejects = ingest.parse_sensor_csv(text, args.kind)
    for reject in rejects:
        summary["rejected"].append({"file": path, "line": reject.line_number, "reason": reject.reason})
    rows = []
    for reading in readings:
        if args.step:
            step_id = args.step
        else:
            step = store.resolve_step_for(args.journey, reading.timestamp)
            if step is None:
                summary["rejected"].append(
                    {
                        "file": path,
                        "line": None,
                        "reason": f"no step covers {ingest.format_rfc3339(reading.timestamp)}",
                    }
                )
                continue
            step_id = step.step_id
        rows.append((step_id, reading, args.topic_default))
    accepted, rejected, record = store.append_points(args.journey, rows)
    summary["points"] += len(accepted)
    for reading, reason in rejected:
        summary["rejected"].append(
            {"file": path, "line": None, "reason": f"{reading.device_id}: {reason}"}
        )
    if record is not None:
        summary["txIds"].append(record.tx_id)
    return EXIT_OKAY


# -- policy -------------------------------------------------------------------


def cmd_policy(args) -> int:
    path = args.policy or args.policy_file
    if not path:
        return _fail("policy: a policy file is required (positional or --policy)")
    ledger = _load_ledger(args.state)
    store = model.StateStore(ledger)
    with open(path, "r", encoding="utf-8") as handle:
        document = handle.read()
    try:
        policy, record = store.load_policy(document)
    except (json.JSONDecodeError, model.SchemaViolation) as exc:
        return _fail(f"{path}: {exc}")
    ledger.save_snapshot(args.state)
    _print({"policyId": policy.policy_id, "productType": policy.product_type, "txId": record.tx_id})
    return EXIT_OKAY


# -- verify -------------------------------------------------------------------


def cmd_verify(args) -> int:
    ledger = _load_ledger(args.state)
    store = model.StateStore(ledger)
    manager = VerificationManager(store, VerifyConfig(reset_reliability=args.reset_reliability))
    _notifier_from_args(args, ledger)
    request = VerificationRequest(
        subject=args.step or args.journey,
        trigger="manual",
        requested_by=args.requested_by,
    )
    try:
        if args.step:
            record = manager.verify_step(request)
        else:
            record = manager.verify_journey(request)
    except UnknownSubject as exc:
        return _fail(f"unknown subject: {exc}")
    ledger.save_snapshot(args.state)
    _print(record.to_dict())
    return OUTCOME_EXIT[record.outcome]


# -- export-geojson -------------------------------------------------------------


def cmd_export_geojson(args) -> int:
    ledger = _load_ledger(args.state)
    store = model.StateStore(ledger)
    manager = VerificationManager(store)
    try:
        collection = export_step_geojson(store, manager, args.step, args.layer)
    except UnknownSubject as exc:
        return _fail(f"unknown step: {exc}")
    except NoGpsData as exc:
        return _fail(f"step has no position data: {exc}")
    text = json.dumps(collection, indent=1, sort_keys=True)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")
        _print({"written": args.output, "features": len(collection["features"])})
    else:
        sys.stdout.write(text + "\n")
    return EXIT_OKAY


# -- report ---------------------------------------------------------------------


def cmd_report(args) -> int:
    ledger = _load_ledger(args.state)
    store = model.StateStore(ledger)
    manager = VerificationManager(store)
    try:
        manifest = report.build_report(store, manager, args.subject, args.out)
    except UnknownSubject as exc:
        return _fail(f"unknown subject: {exc}")
    ledger.save_snapshot(args.state)
    _print(manifest)
    return EXIT_OKAY


# -- gen --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    with open(args.scenario, "r", encoding="utf-8") as handle:
        try:
            scenario = gen.Scenario.from_json(handle.read())
        except (json.JSONDecodeError, gen.ScenarioError, KeyError, ValueError) as exc:
            return _fail(f"{args.scenario}: {exc}")
    os.makedirs(args.out, exist_ok=True)
    journey_id = args.journey or f"{scenario.name}-lot"

    manifest = {"journeyId": journey_id, "seed": args.seed, "events": None, "devices": {}}
    if scenario.events_plan:
        envelopes = gen.gen_events(scenario, journey_id, args.seed)
        events_path = os.path.join(args.out, "events.jsonl")
        with open(events_path, "w", encoding="utf-8") as handle:
            for envelope in sorted(envelopes, key=lambda e: e.event.event_time):
                handle.write(envelope.to_json() + "\n")
        manifest["events"] = {"path": events_path, "count": len(envelopes)}

    for spec in scenario.devices:
        samples = gen.gen_device_samples(scenario, spec, args.seed)
        device_path = os.path.join(args.out, f"{spec.device_id}.csv")
        with open(device_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            if spec.kind == "gps":
                writer.writerow(["device_id", "timestamp", "lat", "lon"])
                for stamp, (lat, lon) in samples.samples:
                    writer.writerow(
                        [spec.device_id, ingest.format_rfc3339(stamp), f"{lat:.8f}", f"{lon:.8f}"]
                    )
            else:
                writer.writerow(["device_id", "timestamp", "value"])
                for stamp, value in samples.samples:
                    writer.writerow([spec.device_id, ingest.format_rfc3339(stamp), f"{value:.6f}"])
        manifest["devices"][spec.device_id] = {
            "path": device_path,
            "kind": spec.kind,
            "samples": len(samples.samples),
        }
    _print(manifest)
    return EXIT_OKAY


# -- bench -------------------------------------------------------------------------


def _bench_envelopes(count: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    base = datetime(2026, 1, 5, 8, 0, 0, tzinfo=timezone.utc)
    payloads = []
    for i in range(count):
        event = {
            "type": "ObjectEvent",
            "eventTime": ingest.format_rfc3339(base + timedelta(seconds=i * 30)),
            "bizStep": "shipping" if i % 2 == 0 else "receiving",
            "bizLocation": f"site-{i % 7}",
            "sourceParty": "bench",
            "action": "OBSERVE",
            "epcList": [f"lot-{i % 50:04d}"],
            "itemAttributes": {
                "productType": "benchware",
                "weightKg": round(float(rng.uniform(50, 900)), 3),
                "batch": f"b-{i % 13}",
            },
        }
        payloads.append(json.dumps({"topic": "bench", "event": event}))
    return payloads


def _stats_ms(samples: list[float]) -> dict:
    return {
        "minMs": min(samples),
        "maxMs": max(samples),
        "avgMs": statistics.fmean(samples),
        "stddevMs": statistics.pstdev(samples),
        "totalMs": sum(samples),
    }


def _bench_ingest(mode: str, count: int, seed: int) -> dict:
    """Per-transaction latencies, one ledger commit per event either way.

    The baseline stores each raw payload untouched; the engine parses it and
    stores the derived journey, step and claim objects instead.
    """
    payloads = _bench_envelopes(count, seed)
    ledger = SimulatedLedger()
    if mode == "ingest-baseline":
        def apply(index: int, text: str) -> None:
            ledger.submit({f"RawEvent\x00{index:08d}": text.encode("utf-8")})
    else:
        store = model.StateStore(ledger)

        def apply(index: int, text: str) -> None:
            store.apply_event(ingest.parse_envelope(text))
    samples = []
    for index, text in enumerate(payloads):
        start = time.perf_counter()
        apply(index, text)
        samples.append((time.perf_counter() - start) * 1000.0)
    return {"mode": mode, "events": count, **_stats_ms(samples)}


def _bench_verify_once(points: int, devices: int = 1) -> float:
    base = datetime(2026, 1, 5, 8, 0, 0, tzinfo=timezone.utc)
    ledger = SimulatedLedger()
    store = model.StateStore(ledger)
    end = base + timedelta(minutes=max(points, 10))
    open_event = ingest.parse_envelope(
        json.dumps(
            {
                "topic": "bench",
                "event": {
                    "type": "ObjectEvent",
                    "eventTime": ingest.format_rfc3339(base),
                    "bizStep": "shipping",
                    "bizLocation": "plant",
                    "action": "ADD",
                    "epcList": ["bench-lot"],
                    "itemAttributes": {"productType": "benchware"},
                },
            }
        )
    )
    close_event = ingest.parse_envelope(
        json.dumps(
            {
                "topic": "bench",
                "event": {
                    "type": "ObjectEvent",
                    "eventTime": ingest.format_rfc3339(end),
                    "bizStep": "shipping",
                    "bizLocation": "store",
                    "action": "OBSERVE",
                    "epcList": ["bench-lot"],
                },
            }
        )
    )
    applied = store.apply_event(open_event)
    step_id = applied.opened_steps[0][1]
    store.apply_event(close_event)
    rows = []
    span = (end - base).total_seconds()
    for i in range(points):
        stamp = base + timedelta(seconds=span * i / max(points - 1, 1))
        value = 3.0 + (i % 7) * 0.4
        device = f"bench-dev-{i % max(devices, 1)}"
        rows.append(
            (step_id, ingest.RawReading(device, stamp, "temperature", (value,)), "bench")
        )
    store.append_points("bench-lot", rows)
    store.load_policy(
        {
            "policyId": "bench-policy",
            "productType": "benchware",
            "mode": "SSoD",
            "phases": ["shipping"],
            "rules": [
                {
                    "ruleName": "threshold",
                    "params": {"kind": "temperature", "tMax": 4.0, "cumulativeLimit": 30.0},
                    "severity": "alert",
                },
                {
                    "ruleName": "shipmentTimeout",
                    "params": {"minDurationMin": 1.0, "maxDurationMin": 100000.0},
                    "severity": "alert",
                },
            ],
        }
    )
    manager = VerificationManager(store)
    start = time.perf_counter()
    manager.verify_step(VerificationRequest(subject=step_id))
    return (time.perf_counter() - start) * 1000.0


def _bench_verify(batches: list[int], repeat: int, devices: int) -> list[dict]:
    stats = []
    for points in batches:
        runs = [_bench_verify_once(points, devices) for _ in range(repeat)]
        stats.append(
            {
                "mode": "verify",
                "points": points,
                "devices": devices,
                "medianMs": statistics.median(runs),
                **_stats_ms(runs),
                "runs": [round(r, 3) for r in runs],
            }
        )
    return stats


def cmd_bench(args) -> int:
    rows: list[dict] = []
    if args.mode in ("ingest-baseline", "ingest-engine"):
        rows.append(_bench_ingest(args.mode, args.events, args.seed))
    elif args.mode == "verify":
        batches = [int(b) for b in args.batches.split(",") if b.strip()]
        rows.extend(_bench_verify(batches, args.repeat, args.devices))
        if len(rows) >= 2:
            smallest, largest = rows[0], rows[-1]
            rows.append(
                {
                    "mode": "verify",
                    "metric": "scalingRatio",
                    "points": f"{largest['points']}/{smallest['points']}",
                    "ratio": largest["medianMs"] / smallest["medianMs"],
                }
            )
    for row in rows:
        _print(row)
    # The same stats again as CSV, one metric per line.
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["mode", "metric", "value"])
    for row in rows:
        for key, value in row.items():
            if key == "mode" or isinstance(value, list):
                continue
            writer.writerow([row["mode"], key, value])
    sys.stdout.write(buffer.getvalue())
    return EXIT_OKAY


# -- parser ------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="veritrail", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="apply event envelopes and sensor CSVs")
    p_ingest.add_argument("files", nargs="+", help=".json/.jsonl envelopes or .csv readings")
    p_ingest.add_argument("--state", default="state.json", help="ledger snapshot path")
    p_ingest.add_argument("--journey", help="journey id for CSV points")
    p_ingest.add_argument("--step", help="step id for CSV points (default: resolve by timestamp)")
    p_ingest.add_argument("--kind", choices=ingest.READING_KINDS, help="reading kind for CSV points")
    p_ingest.add_argument(
        "--topic-default", default="default", help="claim topic for CSV points"
    )
    p_ingest.add_argument("--auto-verify", action="store_true", help="verify steps closed by trigger events")
    p_ingest.add_argument("--trigger-step", action="append", help="bizStep that triggers auto-verification")
    p_ingest.add_argument("--strict", action="store_true", help="reject events for unknown journeys")
    p_ingest.add_argument("--sink", help="sink config JSON for flagged notifications")
    p_ingest.add_argument("--dead-letter", help="dead-letter file path")
    p_ingest.set_defaults(func=cmd_ingest)

    p_policy = sub.add_parser("policy", help="validate and store a policy document")
    p_policy.add_argument("policy_file", nargs="?", help="policy JSON path")
    p_policy.add_argument("--policy", help="policy JSON path (alternative to positional)")
    p_policy.add_argument("--state", default="state.json")
    p_policy.set_defaults(func=cmd_policy)

    p_verify = sub.add_parser("verify", help="verify a step or journey")
    group = p_verify.add_mutually_exclusive_group(required=True)
    group.add_argument("--step", help="step id")
    group.add_argument("--journey", help="journey id")
    p_verify.add_argument("--state", default="state.json")
    p_verify.add_argument("--requested-by", default="", help="requesting stakeholder")
    p_verify.add_argument("--reset-reliability", action="store_true")
    p_verify.add_argument("--sink", help="sink config JSON for flagged notifications")
    p_verify.add_argument("--dead-letter", help="dead-letter file path")
    p_verify.set_defaults(func=cmd_verify)

    p_export = sub.add_parser("export-geojson", help="export a step's track as GeoJSON")
    p_export.add_argument("--step", required=True)
    p_export.add_argument("--layer", choices=LAYERS, default="fused")
    p_export.add_argument("--output", "-o", help="write to file instead of stdout")
    p_export.add_argument("--state", default="state.json")
    p_export.set_defaults(func=cmd_export_geojson)

    p_report = sub.add_parser("report", help="render figures and CSV for a subject")
    p_report.add_argument("--subject", required=True, help="step or journey id")
    p_report.add_argument("--out", required=True, help="output directory")
    p_report.add_argument("--state", default="state.json")
    p_report.set_defaults(func=cmd_report)

    p_gen = sub.add_parser("gen", help="generate scenario tracks, readings and events")
    p_gen.add_argument("--scenario", required=True, help="scenario JSON path")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--journey", help="journey id (default: <scenario name>-lot)")
    p_gen.set_defaults(func=cmd_gen)

    p_bench = sub.add_parser("bench", help="micro-benchmarks: ingest overhead and verify scaling")
    p_bench.add_argument(
        "--mode", required=True, choices=["ingest-baseline", "ingest-engine", "verify"]
    )
    p_bench.add_argument("--events", type=int, default=1000)
    p_bench.add_argument("--batches", default="10,100,1000")
    p_bench.add_argument("--repeat", type=int, default=5)
    p_bench.add_argument("--devices", type=int, default=1)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
