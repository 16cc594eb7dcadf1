"""Per-identity contact store with provenance, carriers, and revocations.

Each identity keeps its own book; nothing here ever reads across books, so
two identities of the same user stay unlinkable unless one is explicitly
added to the other's book as an ordinary contact.

Carrier selection follows the introduction structure: explicitly
designated carriers first, then the peers who introduced the contact,
skipping anyone revoked and the destination itself.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .identity import RevocationRecord, derive_fingerprint


class UnknownContactError(KeyError):
    """The address is not an entry in this book."""


class KeyConflictError(Exception):
    """A different key is already on file and has not been revoked."""


class BookError(ValueError):
    """Invalid book operation (e.g. adding the owner's own address)."""


_CONTACT_VALUE_RE = re.compile(
    r"^(?P<display>[^<;]*?)\s*<(?P<address>[^<>\s]+)>"
    r"(?:; fp=(?P<fp>[0-9a-z]{12}))?"
    r"(?:; dir=(?P<dir>both|to-list|from-list))?$"
)


@dataclass
class Contact:
    """One known peer: key material, provenance, carriers, revocation state."""

    address: str
    display: str
    mail_public: Optional[bytes] = None
    fingerprint: Optional[str] = None
    expected_fingerprint: Optional[str] = None
    introduced_by: list[str] = field(default_factory=list)
    carriers: list[str] = field(default_factory=list)
    revoked: bool = False
    revoked_fingerprints: list[str] = field(default_factory=list)


class AddressBook:
    """Contact map owned by a single identity address."""

    def __init__(self, owner: str):
        self.owner = owner
        self.entries: dict[str, Contact] = {}
        self.pending_revocations: list[RevocationRecord] = []

    def add_contact(
        self,
        address: str,
        display: str | None = None,
        introduced_by: str | None = None,
    ) -> Contact:
        """Add or merge a contact; introductions accumulate in provenance."""
        if address == self.owner:
            raise BookError("cannot add the book owner as a contact")
        contact = self.entries.get(address)
        if contact is None:
            contact = Contact(address=address, display=display or address.split("@")[0])
            self.entries[address] = contact
            self._apply_pending(contact)
        elif display:
            contact.display = display
        if introduced_by and introduced_by != address and introduced_by not in contact.introduced_by:
            contact.introduced_by.append(introduced_by)
        return contact

    def record_key(self, address: str, mail_public: bytes) -> str:
        """Store a contact's mail key; conflicting keys are never overwritten.

        A different key for the same address is an error unless the old one
        was revoked first, and a key whose fingerprint is already revoked is
        refused outright.
        """
        contact = self._require(address)
        fingerprint = derive_fingerprint(mail_public)
        if fingerprint in contact.revoked_fingerprints or self._pending_key_revocation(fingerprint):
            raise KeyConflictError(f"key {fingerprint} for {address} is revoked")
        if contact.expected_fingerprint and contact.expected_fingerprint != fingerprint:
            raise KeyConflictError(
                f"key {fingerprint} for {address} does not match introduced "
                f"fingerprint {contact.expected_fingerprint}"
            )
        if contact.mail_public is not None and contact.mail_public != mail_public:
            raise KeyConflictError(
                f"{address} already has key {contact.fingerprint}; "
                "a new key requires a revocation first"
            )
        contact.mail_public = mail_public
        contact.fingerprint = fingerprint
        return fingerprint

    def expect_fingerprint(self, address: str, fingerprint: str) -> None:
        """Record an introduction's key hint; a later key must match it."""
        contact = self._require(address)
        if contact.expected_fingerprint is None and contact.fingerprint is None:
            contact.expected_fingerprint = fingerprint

    def add_carrier(self, address: str, carrier: str) -> None:
        """Explicitly designate a carrier for a contact (must be a contact too)."""
        contact = self._require(address)
        if carrier not in self.entries:
            raise UnknownContactError(carrier)
        if carrier != address and carrier not in contact.carriers:
            contact.carriers.append(carrier)

    def carriers_for(self, address: str) -> list[str]:
        """Carriers for a destination: explicit ones, then its introducers.

        Insertion order within each group; revoked contacts and the
        destination itself never appear.
        """
        contact = self._require(address)
        ordered: list[str] = []
        for candidate in contact.carriers + contact.introduced_by:
            if candidate == address or candidate in ordered:
                continue
            entry = self.entries.get(candidate)
            if entry is None or entry.revoked:
                continue
            ordered.append(candidate)
        return ordered

    def apply_revocation(self, record: RevocationRecord) -> str:
        """Apply a verified revocation; unknown subjects are kept pending.

        Returns "applied" or "stored-pending".
        """
        if record.kind == "address":
            contact = self.entries.get(record.subject)
            if contact is None:
                self.pending_revocations.append(record)
                return "stored-pending"
            contact.revoked = True
            return "applied"
        applied = False
        for contact in self.entries.values():
            if record.subject in contact.revoked_fingerprints:
                applied = True
                continue
            if contact.fingerprint == record.subject or contact.expected_fingerprint == record.subject:
                contact.revoked_fingerprints.append(record.subject)
                if contact.fingerprint == record.subject:
                    contact.mail_public = None
                    contact.fingerprint = None
                if contact.expected_fingerprint == record.subject:
                    contact.expected_fingerprint = None
                applied = True
        if not applied:
            self.pending_revocations.append(record)
            return "stored-pending"
        return "applied"

    def export_contacts(self) -> list[bytes]:
        """Serialize the book as one Contact envelope per entry."""
        out = []
        for contact in self.entries.values():
            env = wire.Envelope(
                headers=[
                    ("From", self.owner),
                    ("To", self.owner),
                    ("Contact", format_contact_value(contact.display, contact.address, contact.fingerprint)),
                ]
            )
            env = wire.assign_message_id(env, self.owner.split("@")[1].split(".")[0])
            out.append(wire.serialize(env))
        return out

    def import_contacts(self, serialized: list[bytes]) -> int:
        """Re-add contacts from an exported envelope list; returns the count."""
        count = 0
        for data in serialized:
            env = wire.parse(data)
            for value in env.get_all("Contact"):
                display, address, fingerprint, _ = parse_contact_value(value)
                if address == self.owner:
                    continue
                self.add_contact(address, display)
                if fingerprint:
                    self.expect_fingerprint(address, fingerprint)
                count += 1
        return count

    def _require(self, address: str) -> Contact:
        contact = self.entries.get(address)
        if contact is None:
            raise UnknownContactError(address)
        return contact

    def _pending_key_revocation(self, fingerprint: str) -> bool:
        return any(
            r.kind == "key" and r.subject == fingerprint for r in self.pending_revocations
        )

    def _apply_pending(self, contact: Contact) -> None:
        remaining = []
        for record in self.pending_revocations:
            if record.kind == "address" and record.subject == contact.address:
                contact.revoked = True
            else:
                remaining.append(record)
        self.pending_revocations = remaining


def format_contact_value(
    display: str, address: str, fingerprint: str | None = None, direction: str | None = None
) -> str:
    value = f"{display} <{address}>"
    if fingerprint:
        value += f"; fp={fingerprint}"
    if direction:
        value += f"; dir={direction}"
    return value


def parse_contact_value(value: str) -> tuple[str, str, str | None, str | None]:
    """Split a Contact header into (display, address, fingerprint, direction)."""
    m = _CONTACT_VALUE_RE.match(value)
    if m is None:
        raise ValueError(f"malformed Contact value {value!r}")
    return m.group("display"), m.group("address"), m.group("fp"), m.group("dir")
