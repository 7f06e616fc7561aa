#!/usr/bin/env python3
"""
Exception hierarchy for the storage auditing toolkit.

Errors that can cross the wire carry a stable two-byte ``code`` so the
remote client can raise the same class the server raised.
"""

from __future__ import annotations

from typing import Dict, Type


class DscsError(Exception):
    """Base class for every error raised by this package."""

    code: int = 0x00FF


class GenerationTimeout(DscsError):
    """Raised when prime generation exhausts its attempt cap."""


class LengthMismatch(DscsError, ValueError):
    """Raised when paired input lists differ in length."""


class NotInvertible(DscsError, ValueError):
    """Raised when an exponent has no inverse modulo phi(N)."""


class NonInvertibleDenominator(DscsError):
    """Raised when a residue shares a factor with the modulus."""


class SegmentOutOfField(DscsError, ValueError):
    """Raised when a block segment does not fit the field."""


class BadCardinality(DscsError, ValueError):
    """Raised when a challenge size is outside [1, m]."""


class ExtractionStalled(DscsError):
    """Raised when the extractor keeps receiving useless responses."""


class UpdatesDisabled(DscsError):
    """Raised when an update is requested on a static file."""


class StaleProof(DscsError):
    """Raised when a read proof does not match the client's metadata."""


class ServiceError(DscsError):
    """Errors that the storage server reports over the wire."""

    code = 0x0009


class UnknownFid(ServiceError):
    """No file with this identifier is stored."""

    code = 0x0001


class DuplicateFid(ServiceError):
    """A file with this identifier already exists."""

    code = 0x0002


class CountMismatch(ServiceError, ValueError):
    """Blocks, tags and h-list disagree in length."""

    code = 0x0003


class IndexOutOfRange(ServiceError, IndexError):
    """Block index outside the valid range."""

    code = 0x0004


class Busy(ServiceError):
    """The file is locked by a conflicting operation."""

    code = 0x0005


class MalformedMessage(ServiceError, ValueError):
    """A frame or payload does not parse."""

    code = 0x0006


class UnknownMessageType(ServiceError):
    """Frame carries a message type the server does not know."""

    code = 0x0007


class AppendOnly(ServiceError):
    """Only appends are allowed on this file."""

    code = 0x0008


class TransportError(DscsError):
    """Raised on connection failures or truncated replies."""


class ConfigError(DscsError, ValueError):
    """Raised for invalid configuration values."""


SERVICE_ERRORS: Dict[int, Type[ServiceError]] = {
    cls.code: cls
    for cls in (
        UnknownFid,
        DuplicateFid,
        CountMismatch,
        IndexOutOfRange,
        Busy,
        MalformedMessage,
        UnknownMessageType,
        AppendOnly,
        ServiceError,
    )
}


def error_from_code(code: int, message: str) -> ServiceError:
    """Rebuild the exception a server reported with ``code``."""
    cls = SERVICE_ERRORS.get(code, ServiceError)
    return cls(message)
