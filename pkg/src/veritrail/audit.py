"""Auditor notification path: a ledger-event subscriber that turns
``verification.flagged`` events into notifications and pushes them through
configured sinks.

Delivery is at-least-once with bounded retries; what cannot be delivered
lands in a dead-letter file, so flagged verifications are never silently
lost (delivered + dead-lettered always equals flagged seen).
"""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Optional, TextIO

import requests

from .ingest import format_rfc3339
from .ledger import LedgerEvent, SimulatedLedger

log = logging.getLogger(__name__)

FLAGGED_EVENT = "verification.flagged"

DEFAULT_RETRIES = 2
DEFAULT_BACKOFF_SEC = 0.5


class SinkError(Exception):
    """A sink could not accept the payload."""


@dataclass
class Notification:
    """Auditor-facing summary of one flagged verification."""

    severity: str
    subject: str
    rules: list[dict[str, str]]
    tx_id: str
    emitted_at: datetime

    def to_dict(self) -> dict:
        return {
            "severity": self.severity,
            "subject": self.subject,
            "rules": [dict(r) for r in self.rules],
            "txId": self.tx_id,
            "emittedAt": format_rfc3339(self.emitted_at),
        }


@dataclass
class DeliveryReceipt:
    """How one notification fared against one sink."""

    sink: str
    ok: bool
    attempts: int
    error: Optional[str] = None


class FileSink:
    """Appends one JSON line per notification."""

    def __init__(self, path: str):
        self.path = path

    @property
    def name(self) -> str:
        return f"file:{self.path}"

    def deliver(self, payload: dict) -> None:
        try:
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(json.dumps(payload, sort_keys=True) + "\n")
        except OSError as exc:
            raise SinkError(str(exc)) from exc


class StdoutSink:
    """Writes one JSON line per notification to a stream (stdout by default)."""

    def __init__(self, stream: Optional[TextIO] = None):
        self.stream = stream if stream is not None else sys.stdout

    @property
    def name(self) -> str:
        return "stdout"

    def deliver(self, payload: dict) -> None:
        self.stream.write(json.dumps(payload, sort_keys=True) + "\n")
        self.stream.flush()


class WebhookSink:
    """POSTs the notification as JSON; non-2xx and transport errors fail."""

    def __init__(self, url: str, timeout_sec: float = 5.0, post: Optional[Callable] = None):
        self.url = url
        self.timeout_sec = timeout_sec
        self._post = post if post is not None else requests.post

    @property
    def name(self) -> str:
        return f"webhook:{self.url}"

    def deliver(self, payload: dict) -> None:
        try:
            response = self._post(self.url, json=payload, timeout=self.timeout_sec)
        except requests.RequestException as exc:
            raise SinkError(str(exc)) from exc
        status = getattr(response, "status_code", 0)
        if not 200 <= status < 300:
            raise SinkError(f"HTTP {status}")


def load_sinks(config: Any) -> list:
    """Build sinks from a config object: one {"type": ...} dict or a list of them."""
    if isinstance(config, dict) and "sinks" in config:
        config = config["sinks"]
    if isinstance(config, dict):
        config = [config]
    if not isinstance(config, list):
        raise ValueError("sink config must be an object or a list of objects")
    sinks = []
    for entry in config:
        kind = entry.get("type")
        if kind == "file":
            sinks.append(FileSink(entry["path"]))
        elif kind == "stdout":
            sinks.append(StdoutSink())
        elif kind == "webhook":
            sinks.append(WebhookSink(entry["url"], timeout_sec=entry.get("timeoutSec", 5.0)))
        else:
            raise ValueError(f"unknown sink type {kind!r}")
    return sinks


class AuditorNotifier:
    """Subscribes to the ledger bus and fans flagged verifications out to sinks."""

    def __init__(
        self,
        sinks: list,
        dead_letter_path: Optional[str] = None,
        retries: int = DEFAULT_RETRIES,
        backoff_sec: float = DEFAULT_BACKOFF_SEC,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
    ):
        self.sinks = list(sinks)
        self.dead_letter_path = dead_letter_path
        self.retries = retries
        self.backoff_sec = backoff_sec
        self._sleep = sleep
        self._clock = clock
        self.flagged_seen = 0
        self.delivered = 0
        self.dead_lettered = 0
        self.receipts: list[DeliveryReceipt] = []

    def attach(self, ledger: SimulatedLedger) -> None:
        ledger.subscribe(self.on_ledger_event)

    def on_ledger_event(self, event: LedgerEvent) -> Optional[Notification]:
        """Handle one ledger event; anything but a well-formed flag is ignored."""
        if event.name != FLAGGED_EVENT:
            return None
        try:
            payload = json.loads(event.payload.decode("utf-8"))
            notification = Notification(
                severity=payload["severity"],
                subject=payload["subject"],
                rules=[
                    {"ruleName": str(r.get("ruleName", "")), "detail": str(r.get("detail", ""))}
                    for r in payload.get("rules", [])
                ],
                tx_id=event.tx_id,
                emitted_at=self._clock(),
            )
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            # Malformed payloads are logged, never fatal to the commit path.
            log.warning("ignoring malformed %s payload: %s", FLAGGED_EVENT, exc)
            return None
        self.flagged_seen += 1
        self.notify(notification)
        return notification

    def notify(self, notification: Notification) -> list[DeliveryReceipt]:
        payload = notification.to_dict()
        receipts = []
        for sink in self.sinks:
            receipt = self.deliver(payload, sink)
            receipts.append(receipt)
            if receipt.ok:
                self.delivered += 1
            else:
                self._dead_letter(payload, receipt)
                self.dead_lettered += 1
        self.receipts.extend(receipts)
        return receipts

    def deliver(self, payload: dict, sink) -> DeliveryReceipt:
        """Try a sink with bounded retries and exponential backoff."""
        attempts = 0
        error: Optional[str] = None
        for attempt in range(self.retries + 1):
            attempts = attempt + 1
            try:
                sink.deliver(payload)
                return DeliveryReceipt(sink=sink.name, ok=True, attempts=attempts)
            except SinkError as exc:
                error = str(exc)
                if attempt < self.retries:
                    self._sleep(self.backoff_sec * (2 ** attempt))
        return DeliveryReceipt(sink=sink.name, ok=False, attempts=attempts, error=error)

    def _dead_letter(self, payload: dict, receipt: DeliveryReceipt) -> None:
        entry = {
            "notification": payload,
            "sink": receipt.sink,
            "error": receipt.error,
            "attempts": receipt.attempts,
            "deadLetteredAt": format_rfc3339(self._clock()),
        }
        if self.dead_letter_path is None:
            log.error("no dead-letter path configured, dropping to log: %s", entry)
            return
        with open(self.dead_letter_path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(entry, sort_keys=True) + "\n")
