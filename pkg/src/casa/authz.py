"""Short-lived, capability-scoped bearer tokens.

A token is ``base64url(claims) + "." + base64url(HMAC-SHA256(key, claims_b64))``
where the claims are a canonical JSON document.  Capabilities have the form
``action:resource-prefix`` and are matched by plain string prefix.
"""

import base64
import binascii
import hashlib
import hmac
import json
import re
import time
import uuid
from dataclasses import asdict, dataclass

from .errors import BadRequest, Expired, Unauthorized

ACTIONS = frozenset({"read", "write", "submit", "infer", "transform"})

DEFAULT_TTL = 600
DEFAULT_SESSION = 8 * 3600
DEFAULT_SKEW = 30

_B64URL_RE = re.compile(r"^[A-Za-z0-9_-]*$")


def b64url_encode(data):
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text):
    """Strict unpadded base64url: rejects stray characters and non-canonical tails."""
    if isinstance(text, bytes):
        try:
            text = text.decode("ascii")
        except UnicodeDecodeError:
            raise ValueError("non-ascii base64url") from None
    if not _B64URL_RE.match(text) or len(text) % 4 == 1:
        raise ValueError("invalid base64url")
    try:
        data = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except binascii.Error as exc:
        raise ValueError(str(exc)) from None
    if b64url_encode(data) != text:
        raise ValueError("non-canonical base64url")
    return data


def parse_capability(cap):
    if not isinstance(cap, str):
        raise BadRequest(f"capability must be a string, got {cap!r}")
    action, sep, prefix = cap.partition(":")
    if not sep or action not in ACTIONS or not prefix:
        raise BadRequest(f"invalid capability {cap!r}; expected <action>:<prefix> with action in {sorted(ACTIONS)}")
    return action, prefix


@dataclass(frozen=True)
class TokenClaims:
    sub: str
    aud: str
    iat: int
    exp: int
    ses_exp: int
    cap: tuple
    jti: str

    def to_doc(self):
        doc = asdict(self)
        doc["cap"] = list(self.cap)
        return doc

    @classmethod
    def from_doc(cls, doc):
        try:
            claims = cls(
                sub=doc["sub"], aud=doc["aud"], iat=doc["iat"], exp=doc["exp"],
                ses_exp=doc["ses_exp"], cap=tuple(doc["cap"]), jti=doc["jti"],
            )
        except (KeyError, TypeError):
            raise Unauthorized("malformed claims") from None
        for name in ("iat", "exp", "ses_exp"):
            if type(getattr(claims, name)) is not int:
                raise Unauthorized(f"claim {name} must be an integer")
        if not (claims.iat < claims.exp <= claims.ses_exp):
            raise Unauthorized("inconsistent validity window")
        return claims


def authorize(claims, action, resource):
    """True iff some capability grants ``action`` on a prefix of ``resource``."""
    for cap in claims.cap:
        cap_action, _, prefix = cap.partition(":")
        if cap_action == action and prefix and resource.startswith(prefix):
            return True
    return False


def require(claims, action, resource):
    if not authorize(claims, action, resource):
        raise Unauthorized(f"{claims.sub!r} lacks {action}:{resource}")
    return claims


class TokenIssuer:
    """Mints and checks tokens for one facility (audience) under one HMAC key.

    ``now`` arguments default to ``clock()``; tests pass explicit values.
    """

    def __init__(self, key, audience="casa", max_ttl=DEFAULT_TTL, skew=DEFAULT_SKEW, clock=time.time):
        if isinstance(key, str):
            key = key.encode("utf-8")
        if not key:
            raise BadRequest("signing key must be non-empty")
        self.key = key
        self.audience = audience
        self.max_ttl = max_ttl
        self.skew = skew
        self.clock = clock

    def _now(self, now):
        return int(self.clock()) if now is None else int(now)

    def _sign(self, claims):
        body = json.dumps(claims.to_doc(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        claims_b64 = b64url_encode(body.encode("utf-8"))
        sig = hmac.new(self.key, claims_b64.encode("ascii"), hashlib.sha256).digest()
        return f"{claims_b64}.{b64url_encode(sig)}"

    def mint(self, identity, caps, now=None, ttl=DEFAULT_TTL, session=DEFAULT_SESSION):
        now = self._now(now)
        caps = list(caps)
        if not caps:
            raise BadRequest("capability list must be non-empty")
        for cap in caps:
            parse_capability(cap)
        if not isinstance(identity, str) or not identity:
            raise BadRequest("subject must be a non-empty string")
        if type(ttl) is not int or ttl < 1 or ttl > self.max_ttl:
            raise BadRequest(f"ttl {ttl!r} outside [1, {self.max_ttl}]")
        if type(session) is not int or session < ttl:
            raise BadRequest(f"session {session!r} shorter than ttl {ttl}")
        claims = TokenClaims(
            sub=identity, aud=self.audience, iat=now, exp=now + ttl, ses_exp=now + session,
            cap=tuple(caps), jti=uuid.uuid4().hex,
        )
        return self._sign(claims)

    def verify(self, token, now=None):
        now = self._now(now)
        if not isinstance(token, str) or token.count(".") != 1:
            raise Unauthorized("malformed token")
        claims_b64, sig_b64 = token.split(".")
        try:
            sig = b64url_decode(sig_b64)
            body = b64url_decode(claims_b64)
        except ValueError:
            raise Unauthorized("malformed token encoding") from None
        expected = hmac.new(self.key, claims_b64.encode("ascii"), hashlib.sha256).digest()
        if not hmac.compare_digest(sig, expected):
            raise Unauthorized("bad token signature")
        try:
            doc = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            raise Unauthorized("malformed claims") from None
        if not isinstance(doc, dict):
            raise Unauthorized("malformed claims")
        claims = TokenClaims.from_doc(doc)
        if claims.aud != self.audience:
            raise Unauthorized(f"token audience {claims.aud!r} is not {self.audience!r}")
        if now >= claims.exp + self.skew:
            raise Expired(f"token expired at {claims.exp}")
        if now < claims.iat - self.skew:
            raise Unauthorized("token not yet valid")
        return claims

    def renew(self, token, now=None, ttl=DEFAULT_TTL):
        now = self._now(now)
        old = self.verify(token, now)
        if now >= old.ses_exp:
            raise Unauthorized("session expired; log in again")
        if type(ttl) is not int or ttl < 1 or ttl > self.max_ttl:
            raise BadRequest(f"ttl {ttl!r} outside [1, {self.max_ttl}]")
        claims = TokenClaims(
            sub=old.sub, aud=old.aud, iat=now, exp=min(now + ttl, old.ses_exp), ses_exp=old.ses_exp,
            cap=old.cap, jti=uuid.uuid4().hex,
        )
        return self._sign(claims)

    def check(self, token, action, resource, now=None):
        """verify + authorize in one step; returns the claims."""
        return require(self.verify(token, now), action, resource)
