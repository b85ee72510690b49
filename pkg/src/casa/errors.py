"""Error codes shared by every service.

Each class carries the machine code that travels in ``.err`` envelopes, so an
error raised on one side of a connection is re-raised as the same class on the
other side.
"""


class CasaError(Exception):
    code = "internal"

    def __init__(self, message=""):
        super().__init__(message)
        self.message = message

    def to_payload(self):
        return {"code": self.code, "message": self.message}


class Unauthorized(CasaError):
    code = "unauthorized"


class Expired(CasaError):
    code = "expired"


class NotFound(CasaError):
    code = "not_found"


class BadRequest(CasaError):
    code = "bad_request"


class TooLarge(CasaError):
    code = "too_large"


class Unavailable(CasaError):
    code = "unavailable"


class Conflict(CasaError):
    code = "conflict"


class Internal(CasaError):
    code = "internal"


ERROR_CODES = {
    cls.code: cls
    for cls in (Unauthorized, Expired, NotFound, BadRequest, TooLarge, Unavailable, Conflict, Internal)
}


def from_payload(payload):
    """Rebuild an exception from an ErrorBody document."""
    code = payload.get("code", "internal") if isinstance(payload, dict) else "internal"
    message = payload.get("message", "") if isinstance(payload, dict) else str(payload)
    return ERROR_CODES.get(code, Internal)(message)
