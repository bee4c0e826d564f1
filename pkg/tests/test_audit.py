"""Auditor notification path: sinks, retries, dead-lettering, accounting."""

import io
import json
import logging
from datetime import datetime, timedelta, timezone
from types import SimpleNamespace

import pytest
import requests
from hypothesis import given, settings
from hypothesis import strategies as st

from veritrail.audit import (
    AuditorNotifier,
    FileSink,
    Notification,
    SinkError,
    StdoutSink,
    WebhookSink,
    load_sinks,
)
from veritrail.ledger import LedgerEvent, SimulatedLedger

CLOCK = lambda: datetime(2024, 7, 8, 10, 0, tzinfo=timezone.utc)

PAYLOAD = {
    "severity": "alert",
    "subject": "s-1",
    "subjectType": "step",
    "verificationId": "vrf-x",
    "rules": [{"ruleName": "threshold", "detail": "value 6 above max bound 4"}],
}


def flagged_event(payload=PAYLOAD, tx_id="aa11"):
    return LedgerEvent("verification.flagged", json.dumps(payload).encode(), tx_id)


class MemorySink:
    """Collects payloads; fails the first fail_times deliveries."""

    def __init__(self, name="memory", fail_times=0):
        self.seen = []
        self.fail_times = fail_times
        self._name = name

    @property
    def name(self):
        return self._name

    def deliver(self, payload):
        if self.fail_times > 0:
            self.fail_times -= 1
            raise SinkError("induced failure")
        self.seen.append(payload)


def make_notifier(sinks, **kwargs):
    kwargs.setdefault("sleep", lambda _s: None)
    kwargs.setdefault("clock", CLOCK)
    return AuditorNotifier(sinks, **kwargs)


# -- sinks -------------------------------------------------------------------


def test_file_sink_appends_one_json_line_per_notification(tmp_path):
    path = tmp_path / "notify.jsonl"
    sink = FileSink(str(path))
    assert sink.name == f"file:{path}"
    sink.deliver({"b": 2, "a": 1})
    sink.deliver({"c": 3})
    lines = path.read_text().splitlines()
    assert lines == ['{"a": 1, "b": 2}', '{"c": 3}']


def test_file_sink_wraps_os_errors(tmp_path):
    sink = FileSink(str(tmp_path / "missing-dir" / "notify.jsonl"))
    with pytest.raises(SinkError):
        sink.deliver({"a": 1})


def test_stdout_sink_writes_to_the_given_stream():
    stream = io.StringIO()
    sink = StdoutSink(stream)
    assert sink.name == "stdout"
    sink.deliver({"x": 1})
    assert json.loads(stream.getvalue()) == {"x": 1}


def test_webhook_sink_posts_json_with_timeout():
    calls = []

    def post(url, json=None, timeout=None):
        calls.append((url, json, timeout))
        return SimpleNamespace(status_code=204)

    sink = WebhookSink("http://audit.example/hook", timeout_sec=7.5, post=post)
    assert sink.name == "webhook:http://audit.example/hook"
    sink.deliver({"a": 1})
    assert calls == [("http://audit.example/hook", {"a": 1}, 7.5)]


def test_webhook_sink_rejects_non_2xx():
    sink = WebhookSink("http://x", post=lambda *a, **k: SimpleNamespace(status_code=500))
    with pytest.raises(SinkError, match="HTTP 500"):
        sink.deliver({})


def test_webhook_sink_wraps_transport_errors():
    def post(*args, **kwargs):
        raise requests.ConnectionError("refused")

    sink = WebhookSink("http://x", post=post)
    with pytest.raises(SinkError, match="refused"):
        sink.deliver({})


def test_load_sinks_builds_each_kind(tmp_path):
    config = {
        "sinks": [
            {"type": "file", "path": str(tmp_path / "n.jsonl")},
            {"type": "stdout"},
            {"type": "webhook", "url": "http://x", "timeoutSec": 2.0},
        ]
    }
    sinks = load_sinks(config)
    assert [type(s) for s in sinks] == [FileSink, StdoutSink, WebhookSink]
    assert sinks[2].timeout_sec == 2.0

    [single] = load_sinks({"type": "stdout"})
    assert isinstance(single, StdoutSink)


def test_load_sinks_rejects_bad_config():
    with pytest.raises(ValueError, match="unknown sink type"):
        load_sinks([{"type": "carrier-pigeon"}])
    with pytest.raises(ValueError, match="object or a list"):
        load_sinks("stdout")


# -- event handling ----------------------------------------------------------


def test_flagged_event_becomes_a_notification():
    sink = MemorySink()
    notifier = make_notifier([sink])

    notification = notifier.on_ledger_event(flagged_event())

    assert isinstance(notification, Notification)
    assert notifier.flagged_seen == 1
    assert notifier.delivered == 1
    assert notifier.dead_lettered == 0
    assert sink.seen == [
        {
            "severity": "alert",
            "subject": "s-1",
            "rules": [{"ruleName": "threshold", "detail": "value 6 above max bound 4"}],
            "txId": "aa11",
            "emittedAt": "2024-07-08T10:00:00Z",
        }
    ]


def test_other_events_are_ignored():
    sink = MemorySink()
    notifier = make_notifier([sink])
    assert notifier.on_ledger_event(LedgerEvent("step.closed", b"{}", "t1")) is None
    assert notifier.flagged_seen == 0
    assert sink.seen == []


def test_malformed_payload_is_logged_and_dropped(caplog):
    sink = MemorySink()
    notifier = make_notifier([sink])
    with caplog.at_level(logging.WARNING, logger="veritrail.audit"):
        corrupt = LedgerEvent("verification.flagged", b"not json at all", "t1")
        assert notifier.on_ledger_event(corrupt) is None
        missing_key = {"subject": "s-1"}  # no severity
        assert notifier.on_ledger_event(
            LedgerEvent("verification.flagged", json.dumps(missing_key).encode(), "t2")
        ) is None
    assert notifier.flagged_seen == 0
    assert sink.seen == []
    assert sum("ignoring malformed" in r.message for r in caplog.records) == 2


# -- retries and dead-lettering ----------------------------------------------


def test_flaky_sink_recovers_within_the_retry_budget():
    sink = MemorySink(fail_times=2)
    sleeps = []
    notifier = make_notifier([sink], retries=2, sleep=sleeps.append)

    notifier.on_ledger_event(flagged_event())

    assert notifier.delivered == 1
    assert notifier.dead_lettered == 0
    [receipt] = notifier.receipts
    assert receipt.ok and receipt.attempts == 3
    assert sleeps == [0.5, 1.0]  # exponential backoff between attempts


def test_exhausted_retries_dead_letter_the_notification(tmp_path):
    dead = tmp_path / "dead.jsonl"
    always_down = WebhookSink(
        "http://down", post=lambda *a, **k: SimpleNamespace(status_code=503)
    )
    sleeps = []
    notifier = make_notifier(
        [always_down], dead_letter_path=str(dead), retries=2, sleep=sleeps.append
    )

    notifier.on_ledger_event(flagged_event())

    assert notifier.delivered == 0
    assert notifier.dead_lettered == 1
    [receipt] = notifier.receipts
    assert not receipt.ok and receipt.attempts == 3 and receipt.error == "HTTP 503"
    assert sleeps == [0.5, 1.0]  # no sleep after the final failure

    [line] = dead.read_text().splitlines()
    entry = json.loads(line)
    assert entry == {
        "notification": {
            "severity": "alert",
            "subject": "s-1",
            "rules": [{"ruleName": "threshold", "detail": "value 6 above max bound 4"}],
            "txId": "aa11",
            "emittedAt": "2024-07-08T10:00:00Z",
        },
        "sink": "webhook:http://down",
        "error": "HTTP 503",
        "attempts": 3,
        "deadLetteredAt": "2024-07-08T10:00:00Z",
    }


def test_dead_letter_without_path_goes_to_the_log(caplog):
    notifier = make_notifier([MemorySink(fail_times=10)], retries=0)
    with caplog.at_level(logging.ERROR, logger="veritrail.audit"):
        notifier.on_ledger_event(flagged_event())
    assert notifier.dead_lettered == 1
    assert any("no dead-letter path" in r.message for r in caplog.records)


def test_one_bad_sink_does_not_block_the_good_one(tmp_path):
    good = MemorySink(name="good")
    bad = MemorySink(name="bad", fail_times=99)
    notifier = make_notifier(
        [bad, good], dead_letter_path=str(tmp_path / "dead.jsonl"), retries=1
    )

    notifier.on_ledger_event(flagged_event())

    assert len(good.seen) == 1
    assert notifier.delivered == 1
    assert notifier.dead_lettered == 1


# -- ledger integration and accounting ----------------------------------------


def test_attach_delivers_flags_committed_on_the_ledger():
    ledger = SimulatedLedger()
    sink = MemorySink()
    notifier = make_notifier([sink])
    notifier.attach(ledger)

    tx = ledger.begin()
    tx.emit("verification.flagged", PAYLOAD)
    tx.emit("verification.completed", {"outcome": "alert"})
    record = ledger.commit(tx)

    assert notifier.flagged_seen == 1
    assert sink.seen[0]["txId"] == record.tx_id


def test_end_to_end_breach_reaches_the_auditor(tmp_path):
    # wire the whole chain: ingest -> verify -> flagged event -> file sink
    from datetime import timedelta as _td

    from veritrail.ingest import RawReading, parse_envelope
    from veritrail.model import StateStore
    from veritrail.verify import VerificationManager, VerificationRequest

    store = StateStore(SimulatedLedger())
    notify_path = tmp_path / "notify.jsonl"
    notifier = make_notifier([FileSink(str(notify_path))])
    notifier.attach(store.ledger)

    ship = {
        "topic": "producer",
        "event": {
            "type": "ObjectEvent",
            "eventTime": "2024-07-07T10:00:00Z",
            "epcList": ["lot-1"],
            "bizStep": "shipping",
            "bizLocation": "plant-1",
            "action": "ADD",
            "itemAttributes": {"productType": "cherries"},
        },
    }
    [(jid, sid)] = store.apply_event(parse_envelope(json.dumps(ship))).opened_steps
    store.load_policy(
        {
            "policyId": "cold-1",
            "productType": "cherries",
            "mode": "SSoD",
            "rules": [
                {
                    "ruleName": "threshold",
                    "params": {"kind": "temperature", "tMax": 4.0},
                    "severity": "alert",
                }
            ],
        }
    )
    t0 = datetime(2024, 7, 7, 12, 0, tzinfo=timezone.utc)
    rows = [
        (sid, RawReading("probe-1", t0 + _td(minutes=10 * i), "temperature", (6.0,)), "")
        for i in range(3)
    ]
    store.append_points(jid, rows)

    record = VerificationManager(store).verify_step(VerificationRequest(subject=sid))

    assert record.outcome == "alert"
    [line] = notify_path.read_text().splitlines()
    delivered = json.loads(line)
    assert delivered["severity"] == "alert"
    assert delivered["subject"] == sid
    assert delivered["rules"][0]["ruleName"] == "threshold"
    assert notifier.delivered == 1 and notifier.dead_lettered == 0


class ScheduledSink:
    """Fails or succeeds per a fixed schedule, one entry per delivery."""

    def __init__(self, name, schedule):
        self._name = name
        self.schedule = list(schedule)
        self.calls = 0

    @property
    def name(self):
        return self._name

    def deliver(self, payload):
        index = min(self.calls, len(self.schedule) - 1)
        self.calls += 1
        if self.schedule[index]:
            raise SinkError("scheduled failure")


@settings(max_examples=50, deadline=None)
@given(fail_matrix=st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=8))
def test_no_flag_is_ever_silently_lost(fail_matrix):
    """delivered + dead_lettered always equals flagged_seen * sink count."""
    sink_a = ScheduledSink("a", [row[0] for row in fail_matrix])
    sink_b = ScheduledSink("b", [row[1] for row in fail_matrix])
    notifier = make_notifier([sink_a, sink_b], retries=0)
    logging.getLogger("veritrail.audit").disabled = True
    try:
        for index in range(len(fail_matrix)):
            notifier.on_ledger_event(flagged_event(tx_id=f"tx-{index}"))
    finally:
        logging.getLogger("veritrail.audit").disabled = False

    assert notifier.flagged_seen == len(fail_matrix)
    assert notifier.delivered + notifier.dead_lettered == notifier.flagged_seen * 2
    expected_failures = sum(row[0] for row in fail_matrix) + sum(row[1] for row in fail_matrix)
    assert notifier.dead_lettered == expected_failures
