"""Simulated permissioned ledger: versioned world state plus an append-only
transaction log.

State entries are (value bytes, version int) pairs under string keys.  Writes
happen through transactions that snapshot the version of every key they touch;
commit applies first-committer-wins, so a concurrent writer of the same key
gets a WriteConflict and must retry against fresh state.  Committed events are
dispatched to subscribers in commit order.  The whole thing is process-local
and can be persisted to / restored from a JSON snapshot.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Iterable, Optional

log = logging.getLogger(__name__)

SEPARATOR = "\x00"


class LedgerError(Exception):
    """Base class for ledger failures."""


class SeparatorInAttribute(LedgerError):
    """A composite key part contains the reserved separator byte."""


class NotFound(LedgerError):
    """Key absent from world state."""


class WriteConflict(LedgerError):
    """Another transaction committed one of our keys first."""


def encode_composite_key(object_type: str, attributes: Iterable[str]) -> str:
    """Build the composite key ``objectType \\x00 attr1 \\x00 attr2 ...``.

    The encoding is injective as long as no part contains the separator;
    offending parts raise SeparatorInAttribute.
    """
    parts = [object_type, *attributes]
    if not object_type:
        raise SeparatorInAttribute("object type must be non-empty")
    for part in parts:
        if SEPARATOR in part:
            raise SeparatorInAttribute(f"key part {part!r} contains the separator byte")
    return SEPARATOR.join(parts)


def decode_composite_key(key: str) -> tuple[str, list[str]]:
    """Inverse of encode_composite_key."""
    parts = key.split(SEPARATOR)
    return parts[0], parts[1:]


def prefix_of(object_type: str, attributes: Iterable[str] = ()) -> str:
    """Range-scan prefix covering every key that extends the given parts.

    The trailing separator keeps the scan from matching sibling attributes
    that merely share a string prefix.
    """
    return encode_composite_key(object_type, attributes) + SEPARATOR


def canonical_bytes(value: Any) -> bytes:
    """Canonical JSON encoding (sorted keys, no whitespace) used for hashing."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def transaction_id(nonce: str, writes: dict[str, bytes]) -> str:
    """Deterministic transaction id: sha256 over the nonce and the sorted write set."""
    body = canonical_bytes(
        {
            "nonce": nonce,
            "writes": [[k, base64.b64encode(v).decode("ascii")] for k, v in sorted(writes.items())],
        }
    )
    return hashlib.sha256(body).hexdigest()


@dataclass
class LedgerEvent:
    """Event emitted by a committed transaction."""

    name: str
    payload: bytes
    tx_id: str = ""


@dataclass
class TransactionRecord:
    """Immutable log entry for one committed transaction."""

    tx_id: str
    nonce: str
    timestamp: datetime
    writes: list[tuple[str, bytes]]
    events: list[LedgerEvent] = field(default_factory=list)


class Transaction:
    """Pending write set bound to the versions observed at begin().

    Mutate through put()/emit(), then hand back to SimulatedLedger.commit().
    """

    def __init__(self, ledger: "SimulatedLedger"):
        self._ledger = ledger
        self.writes: dict[str, bytes] = {}
        self.events: list[tuple[str, bytes]] = []
        self._snapshot_versions: dict[str, int] = {}

    def put(self, key: str, value: bytes) -> None:
        if not isinstance(value, (bytes, bytearray)):
            raise TypeError("ledger values are bytes")
        if key not in self._snapshot_versions:
            self._snapshot_versions[key] = self._ledger.version_of(key)
        self.writes[key] = bytes(value)

    def put_json(self, key: str, value: Any) -> None:
        self.put(key, canonical_bytes(value))

    def emit(self, name: str, payload: bytes | dict) -> None:
        if isinstance(payload, dict):
            payload = canonical_bytes(payload)
        self.events.append((name, bytes(payload)))


class SimulatedLedger:
    """In-process world state + txLog + event bus.

    Thread-safe: begin/commit may run from worker threads.  The lock is
    re-entrant so an event subscriber may itself commit follow-up
    transactions.
    """

    def __init__(self) -> None:
        self._entries: dict[str, tuple[bytes, int]] = {}
        self._tx_log: list[TransactionRecord] = []
        self._last_writer: dict[str, str] = {}
        self._subscribers: list[Callable[[LedgerEvent], None]] = []
        self._lock = threading.RLock()
        self._nonce_counter = 0

    # -- reads ---------------------------------------------------------

    def get(self, key: str) -> bytes:
        with self._lock:
            try:
                return self._entries[key][0]
            except KeyError:
                raise NotFound(key) from None

    def try_get(self, key: str) -> Optional[bytes]:
        with self._lock:
            entry = self._entries.get(key)
            return entry[0] if entry is not None else None

    def get_json(self, key: str) -> Any:
        return json.loads(self.get(key).decode("utf-8"))

    def version_of(self, key: str) -> int:
        """Current version of a key; 0 means absent."""
        with self._lock:
            entry = self._entries.get(key)
            return entry[1] if entry is not None else 0

    def get_range(self, prefix: str) -> list[tuple[str, bytes]]:
        """All (key, value) pairs whose key starts with prefix, key-sorted."""
        with self._lock:
            return sorted(
                (key, entry[0]) for key, entry in self._entries.items() if key.startswith(prefix)
            )

    def last_writer(self, key: str) -> Optional[str]:
        """txId of the transaction that last wrote the key, if any."""
        with self._lock:
            return self._last_writer.get(key)

    @property
    def tx_log(self) -> list[TransactionRecord]:
        with self._lock:
            return list(self._tx_log)

    def keys(self) -> list[str]:
        with self._lock:
            return sorted(self._entries)

    # -- writes --------------------------------------------------------

    def begin(self) -> Transaction:
        return Transaction(self)

    def commit(self, tx: Transaction, nonce: Optional[str] = None) -> TransactionRecord:
        """Validate versions, apply writes atomically, dispatch events.

        Raises WriteConflict if any touched key changed since the
        transaction first read it; nothing is applied in that case.
        """
        if not tx.writes and not tx.events:
            raise LedgerError("empty transaction")
        with self._lock:
            if nonce is None:
                self._nonce_counter += 1
                nonce = f"tx-{self._nonce_counter:08d}"
            for key, seen_version in tx._snapshot_versions.items():
                current = self._entries.get(key)
                current_version = current[1] if current is not None else 0
                if current_version != seen_version:
                    raise WriteConflict(
                        f"key {key!r} advanced from v{seen_version} to v{current_version}"
                    )
            tx_id = transaction_id(nonce, tx.writes)
            for key, value in tx.writes.items():
                old = self._entries.get(key)
                self._entries[key] = (value, (old[1] if old else 0) + 1)
                self._last_writer[key] = tx_id
            events = [LedgerEvent(name, payload, tx_id) for name, payload in tx.events]
            record = TransactionRecord(
                tx_id=tx_id,
                nonce=nonce,
                timestamp=datetime.now(timezone.utc),
                writes=sorted(tx.writes.items()),
                events=events,
            )
            self._tx_log.append(record)
            self._dispatch(events)
            return record

    def submit(
        self,
        writes: dict[str, bytes],
        events: Iterable[tuple[str, bytes]] = (),
        nonce: Optional[str] = None,
    ) -> TransactionRecord:
        """One-shot transaction from already-prepared writes."""
        with self._lock:
            tx = self.begin()
            for key, value in writes.items():
                tx.put(key, value)
            for name, payload in events:
                tx.emit(name, payload)
            return self.commit(tx, nonce)

    # -- events --------------------------------------------------------

    def subscribe(self, callback: Callable[[LedgerEvent], None]) -> None:
        with self._lock:
            self._subscribers.append(callback)

    def _dispatch(self, events: list[LedgerEvent]) -> None:
        # A failing subscriber must not block delivery to the others.
        for event in events:
            for callback in list(self._subscribers):
                try:
                    callback(event)
                except Exception:
                    log.exception("event subscriber failed on %s", event.name)

    # -- persistence ---------------------------------------------------

    def to_snapshot(self) -> dict:
        with self._lock:
            return {
                "entries": [
                    {
                        "keyHex": key.encode("utf-8").hex(),
                        "valueB64": base64.b64encode(value).decode("ascii"),
                        "version": version,
                    }
                    for key, (value, version) in sorted(self._entries.items())
                ],
                "txLog": [
                    {
                        "txId": record.tx_id,
                        "nonce": record.nonce,
                        "timestamp": record.timestamp.isoformat().replace("+00:00", "Z"),
                        "writes": [
                            {
                                "keyHex": key.encode("utf-8").hex(),
                                "valueB64": base64.b64encode(value).decode("ascii"),
                            }
                            for key, value in record.writes
                        ],
                        "events": [
                            {
                                "name": event.name,
                                "payloadB64": base64.b64encode(event.payload).decode("ascii"),
                            }
                            for event in record.events
                        ],
                    }
                    for record in self._tx_log
                ],
            }

    def save_snapshot(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_snapshot(), handle, indent=1)

    @classmethod
    def from_snapshot(cls, snapshot: dict) -> "SimulatedLedger":
        ledger = cls()
        for row in snapshot.get("entries", []):
            key = bytes.fromhex(row["keyHex"]).decode("utf-8")
            ledger._entries[key] = (base64.b64decode(row["valueB64"]), int(row["version"]))
        for row in snapshot.get("txLog", []):
            timestamp = row["timestamp"].replace("Z", "+00:00")
            record = TransactionRecord(
                tx_id=row["txId"],
                nonce=row.get("nonce", ""),
                timestamp=datetime.fromisoformat(timestamp),
                writes=[
                    (bytes.fromhex(w["keyHex"]).decode("utf-8"), base64.b64decode(w["valueB64"]))
                    for w in row.get("writes", [])
                ],
                events=[
                    LedgerEvent(e["name"], base64.b64decode(e["payloadB64"]), row["txId"])
                    for e in row.get("events", [])
                ],
            )
            ledger._tx_log.append(record)
            for key, _ in record.writes:
                ledger._last_writer[key] = record.tx_id
        ledger._nonce_counter = len(ledger._tx_log)
        return ledger

    @classmethod
    def load_snapshot(cls, path: str) -> "SimulatedLedger":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_snapshot(json.load(handle))
