"""Canonical message serialization and the protocol header vocabulary.

An envelope is an ordered header list plus an opaque body, serialized as
``Name: value CRLF`` lines, a blank line, then the body, bit-exactly.  The
author signature covers a fixed subset of headers plus the body and
deliberately excludes ``To``, so carriers can re-address a message hop by
hop without breaking the signature.  Message hashes (and the hash-chain
ledger built on them) cover the same region and are therefore stable
across re-addressing.

Also here: the reply-path codec that folds an in-system address into an
external username (``user@wxu6pped7wv3.onion`` -> ``user-wxu6pped7wv3``).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

from .identity import LABEL_LENGTH, MailAddress, RevocationRecord

CRLF = b"\r\n"
MAX_VALUE_BYTES = 996
GENESIS_HASH = "0" * 64

# Headers covered by the author signature, in this exact order.
SIGNED_HEADERS = ("From", "For", "Date", "Message-ID", "List", "Prev-Hash")

EXACTLY_ONE = ("From", "To", "Message-ID")
AT_MOST_ONE = (
    "For",
    "Date",
    "List",
    "Prev-Hash",
    "Signature",
    "Countersign",
    "Key-Request",
    "Key-Response",
    "Revoke",
    "Confirm-Delivery",
    "Delivery-Confirmed",
    "Encrypted-To",
    "Bounce",
)

_HEADER_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9-]*$")
_LABEL_RE = re.compile(r"^[a-z2-7]{12}$")
_LOCALPART_RE = re.compile(r"^[a-z0-9]{1,32}$")
_HOST_RE = re.compile(r"^[a-z0-9][a-z0-9.-]*$")


class ParseError(ValueError):
    """Malformed envelope bytes; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NotAReplyPath(ValueError):
    """The external username does not encode an in-system address."""


@dataclass
class Envelope:
    """An ordered header list plus body bytes."""

    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""

    def get(self, name: str) -> str | None:
        for header, value in self.headers:
            if header == name:
                return value
        return None

    def get_all(self, name: str) -> list[str]:
        return [value for header, value in self.headers if header == name]

    def has(self, name: str) -> bool:
        return self.get(name) is not None


def add_header(env: Envelope, name: str, value: str) -> Envelope:
    return Envelope(headers=env.headers + [(name, value)], body=env.body)


def replace_header(env: Envelope, name: str, value: str) -> Envelope:
    """Copy with the first occurrence of ``name`` replaced (or appended)."""
    headers = list(env.headers)
    for i, (header, _) in enumerate(headers):
        if header == name:
            headers[i] = (name, value)
            break
    else:
        headers.append((name, value))
    return Envelope(headers=headers, body=env.body)


def drop_header(env: Envelope, name: str) -> Envelope:
    return Envelope(
        headers=[(h, v) for h, v in env.headers if h != name], body=env.body
    )


def replace_body(env: Envelope, body: bytes) -> Envelope:
    return Envelope(headers=list(env.headers), body=body)


def _check_counts(
    env: Envelope, line_of: dict[str, int] | None = None, end_line: int = 0
) -> None:
    def fail(message: str, name: str) -> None:
        if line_of is not None:
            raise ParseError(message, line_of.get(name, end_line))
        raise ValueError(message)

    counts: dict[str, int] = {}
    for name, _ in env.headers:
        counts[name] = counts.get(name, 0) + 1
    for name in EXACTLY_ONE:
        if counts.get(name, 0) == 0:
            fail(f"missing required header {name}", name)
        if counts[name] > 1:
            fail(f"duplicate singleton header {name}", name)
    for name in AT_MOST_ONE:
        if counts.get(name, 0) > 1:
            fail(f"duplicate singleton header {name}", name)


def validate(env: Envelope) -> None:
    """Check the envelope invariants; raises ValueError on violation."""
    for name, value in env.headers:
        if not _HEADER_NAME_RE.match(name):
            raise ValueError(f"invalid header name {name!r}")
        if "\r" in value or "\n" in value:
            raise ValueError(f"header {name} value contains a line break")
        if len(value.encode("utf-8")) > MAX_VALUE_BYTES:
            raise ValueError(f"header {name} value exceeds {MAX_VALUE_BYTES} bytes")
    _check_counts(env)


def serialize(env: Envelope) -> bytes:
    """Render the envelope to canonical bytes (validates first)."""
    validate(env)
    out = bytearray()
    for name, value in env.headers:
        out += name.encode("ascii") + b": " + value.encode("utf-8") + CRLF
    out += CRLF
    out += env.body
    return bytes(out)


def parse(data: bytes) -> Envelope:
    """Parse canonical bytes back to an Envelope, bit-exactly.

    Errors (duplicate singletons, missing From/To/Message-ID, bare LF,
    non-UTF-8 values) name the offending line number.
    """
    headers: list[tuple[str, str]] = []
    line_of: dict[str, int] = {}
    pos = 0
    line_no = 1
    while True:
        idx = data.find(b"\n", pos)
        if idx == -1:
            raise ParseError("header section not terminated by blank line", line_no)
        if idx == pos or data[idx - 1 : idx] != b"\r":
            raise ParseError("bare LF (expected CRLF)", line_no)
        line = data[pos:idx - 1]
        if line == b"":
            body = data[idx + 1 :]
            break
        if b"\r" in line:
            raise ParseError("stray CR inside header line", line_no)
        sep = line.find(b": ")
        if sep == -1:
            raise ParseError("header line without ': ' separator", line_no)
        name = line[:sep].decode("ascii", errors="replace")
        if not _HEADER_NAME_RE.match(name):
            raise ParseError(f"invalid header name {name!r}", line_no)
        try:
            value = line[sep + 2 :].decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(f"header {name} value is not valid UTF-8", line_no) from None
        if len(line[sep + 2 :]) > MAX_VALUE_BYTES:
            raise ParseError(f"header {name} value exceeds {MAX_VALUE_BYTES} bytes", line_no)
        line_of[name] = line_no  # duplicates report the latest occurrence
        headers.append((name, value))
        pos = idx + 1
        line_no += 1
    env = Envelope(headers=headers, body=body)
    _check_counts(env, line_of, end_line=line_no)
    return env


def _signed_region(env: Envelope) -> bytes:
    out = bytearray()
    for name in SIGNED_HEADERS:
        value = env.get(name)
        if value is not None:
            out += name.encode("ascii") + b": " + value.encode("utf-8") + CRLF
    out += CRLF
    out += env.body
    return bytes(out)


def signing_bytes(env: Envelope) -> bytes:
    """The byte region covered by the author signature.

    Independent of To, Signature, and Countersign, so carriers may
    re-address without invalidating the author's signature.
    """
    if env.get("From") is None or env.get("Message-ID") is None:
        raise ValueError("signing bytes need From and Message-ID headers")
    return _signed_region(env)


def countersign_bytes(env: Envelope) -> bytes:
    """The region a forwarding hop signs: signed region + author signature."""
    value = env.get("Signature")
    if value is None:
        raise ValueError("cannot countersign an unsigned envelope")
    _, signature = parse_signature_value(value)
    return signing_bytes(env) + signature


def message_hash(env: Envelope) -> str:
    """Content hash over the signed region; stable across re-addressing."""
    return hashlib.sha256(signing_bytes(env)).hexdigest()


def assign_message_id(env: Envelope, sender_label: str) -> Envelope:
    """Derive and append the content-based Message-ID.

    The id is the signed-region hash computed before the Message-ID header
    exists, truncated to 16 hex chars, plus ``@`` and the sender label, so
    duplicate copies arriving via different carriers share one id.
    """
    if env.get("Message-ID") is not None:
        raise ValueError("envelope already has a Message-ID")
    digest = hashlib.sha256(_signed_region(env)).hexdigest()
    return add_header(env, "Message-ID", f"{digest[:16]}@{sender_label}")


def make_signature_value(fingerprint: str, signature: bytes) -> str:
    return f"{fingerprint} {signature.hex()}"


def parse_signature_value(value: str) -> tuple[str, bytes]:
    parts = value.split(" ")
    if len(parts) != 2:
        raise ValueError(f"malformed signature value {value!r}")
    return parts[0], bytes.fromhex(parts[1])


def make_revoke_value(record: RevocationRecord) -> str:
    return (
        f"{record.kind} {record.subject} {record.issued_at} "
        f"{record.public.hex()} {record.signature.hex()}"
    )


def parse_revoke_value(value: str) -> RevocationRecord:
    parts = (value or "").split(" ")
    if len(parts) != 5:
        raise ValueError(f"malformed Revoke value {value!r}")
    kind, subject, issued_at, public_hex, signature_hex = parts
    return RevocationRecord(
        kind=kind,
        subject=subject,
        issued_at=int(issued_at),
        public=bytes.fromhex(public_hex),
        signature=bytes.fromhex(signature_hex),
    )


def encode_reply_path(inner: MailAddress, gateway_host: str) -> str:
    """Fold an in-system address into an external gateway address."""
    if not gateway_host or not _HOST_RE.match(gateway_host):
        raise ValueError(f"invalid gateway host {gateway_host!r}")
    return f"{inner.localpart}-{inner.label}@{gateway_host}"


def decode_reply_path(external: str) -> MailAddress:
    """Recover the in-system address from a reply-path username.

    Raises NotAReplyPath when the username's tail is not ``-`` plus a
    12-char label, which is how ordinary external addresses look.
    """
    username, sep, _host = external.partition("@")
    if not sep:
        raise NotAReplyPath(f"no host part in {external!r}")
    if len(username) < LABEL_LENGTH + 2 or username[-(LABEL_LENGTH + 1)] != "-":
        raise NotAReplyPath(f"username {username!r} does not end in -<label>")
    label = username[-LABEL_LENGTH:]
    localpart = username[: -(LABEL_LENGTH + 1)]
    if not _LABEL_RE.match(label) or not _LOCALPART_RE.match(localpart):
        raise NotAReplyPath(f"username {username!r} does not encode an address")
    return MailAddress(localpart=localpart, label=label)
