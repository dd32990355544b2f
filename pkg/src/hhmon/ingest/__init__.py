"""Monitoring backend: event-sourced device logs, HTTP API and MQTT intake."""

from .store import (
    CorruptLogError,
    EightBlockSummary,
    IngestResult,
    IngestService,
    Status,
    UnknownDevice,
    rebuild,
)

__all__ = [
    "CorruptLogError",
    "EightBlockSummary",
    "IngestResult",
    "IngestService",
    "Status",
    "UnknownDevice",
    "rebuild",
]
