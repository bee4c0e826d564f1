"""Policy-driven verification of supply-chain sensor data on a simulated ledger.

The package wires together a versioned key-value ledger with an append-only
transaction log (`ledger`), event and sensor ingestion (`ingest`), the domain
state model (`model`), sensor preprocessing and fusion (`preprocess`), the
rule library (`rules`), verification orchestration (`verify`), notification
fan-out (`audit`), scenario generation (`gen`), and GeoJSON/report exports
(`export`, `report`).  `cli` exposes all of it as the `veritrail` command.
"""

from .audit import AuditorNotifier, Notification, load_sinks
from .gen import Scenario, corridor_polygon
from .ingest import IngestEnvelope, RawReading, parse_envelope, parse_sensor_csv
from .ledger import SimulatedLedger, WriteConflict, encode_composite_key
from .model import Policy, StateStore, VerificationRecord
from .preprocess import PreprocessConfig
from .rules import ALERT, OKAY, WARNING, RuleResult
from .verify import VerificationManager, VerificationRequest, VerifyConfig

__version__ = "0.1.0"

__all__ = [
    "ALERT",
    "AuditorNotifier",
    "IngestEnvelope",
    "Notification",
    "OKAY",
    "Policy",
    "PreprocessConfig",
    "RawReading",
    "RuleResult",
    "Scenario",
    "SimulatedLedger",
    "StateStore",
    "VerificationManager",
    "VerificationRecord",
    "VerificationRequest",
    "VerifyConfig",
    "WARNING",
    "WriteConflict",
    "__version__",
    "corridor_polygon",
    "encode_composite_key",
    "load_sinks",
    "parse_envelope",
    "parse_sensor_csv",
]
