"""Error taxonomy shared by every component.

Each exception carries a stable ``code`` string that is used verbatim on the
wire protocol, in scenario expectation matching and in test assertions.
"""

from __future__ import annotations


class NusaError(Exception):
    """Base class; ``code`` is the wire-level error name."""

    code = "Error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


class AlreadyExists(NusaError):
    code = "AlreadyExists"


class NotFound(NusaError):
    code = "NotFound"


class NotAuthorized(NusaError):
    code = "NotAuthorized"


class InvalidGrant(NusaError):
    code = "InvalidGrant"


class InvalidOperation(NusaError):
    code = "InvalidOperation"


class InvalidStage(NusaError):
    code = "InvalidStage"


class InvalidPayload(NusaError):
    code = "InvalidPayload"


class InvalidInput(NusaError):
    code = "InvalidInput"


class InvalidField(NusaError):
    code = "InvalidField"


class DuplicateLayer(NusaError):
    code = "DuplicateLayer"


class LayerNotFound(NusaError):
    code = "LayerNotFound"


class DuplicateTicket(NusaError):
    code = "DuplicateTicket"


class IdentityLeakRejected(NusaError):
    code = "IdentityLeakRejected"


class AuthFailed(NusaError):
    code = "AuthFailed"


class SessionExpired(NusaError):
    code = "SessionExpired"


class NoData(NusaError):
    code = "NoData"


class RequiresMasterTerminal(NusaError):
    code = "RequiresMasterTerminal"


class ProtocolError(NusaError):
    code = "ProtocolError"


_BY_CODE = {cls.code: cls for cls in NusaError.__subclasses__()}


def error_for_code(code: str, message: str = "") -> NusaError:
    """Rehydrate an exception from its wire-level code (client side)."""
    cls = _BY_CODE.get(code, NusaError)
    err = cls(message)
    if cls is NusaError:
        err.code = code
    return err
