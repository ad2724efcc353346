"""Client SDK for the mem4d service API."""

from .client import ApiError, ClientError, ClientSession, ConnectionFailed

__version__ = "0.1.0"  # pinned to service API v1

__all__ = ["ApiError", "ClientError", "ClientSession", "ConnectionFailed"]
