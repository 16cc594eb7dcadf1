"""The participant state machine.

A node owns one or more identities (each with its own address book, so
identities stay unlinkable), an outbound retry queue with exponential
backoff, per-identity inboxes, hosted mailboxes for users who do not run
their own node, an optional external-mail gateway, and its mailing-list
memberships.

Everything rides one envelope vocabulary: key exchange, introductions,
revocations, carrier relay (``To`` is the next hop, ``For`` the final
recipient), delivery confirmations, bounces, and list traffic.  A message
is processed at most once per (Message-ID, For) pair regardless of how
many routes deliver it, and nothing with a plaintext body is ever queued
for a third-party hop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import gossip, wire
from .addressbook import (
    AddressBook,
    KeyConflictError,
    UnknownContactError,
    format_contact_value,
    parse_contact_value,
)
from .gossip import GossipError, ListState
from .identity import (
    AddressError,
    DecryptionError,
    IdentityKeyPair,
    MailAddress,
    MailKey,
    RevocationRecord,
    derive_address,
    generate_identity,
    generate_mail_key,
    make_revocation,
    seal,
    sign,
    unseal,
    verify,
    verify_revocation,
)
from .wire import Envelope

RETRY_BASE = 30
RETRY_CAP = 3840
QUEUE_TTL = 100_000

MODES = ("direct-only", "carrier-fallback", "fan-out")


class NodeError(Exception):
    """Invalid node operation (duplicate identity, bad hosted account, ...)."""


class SendError(Exception):
    """compose_and_send refused to produce a message."""


class UnknownRecipientError(SendError):
    pass


class RecipientRevokedError(SendError):
    pass


class KeyRequiredError(SendError):
    """Store-and-forward routes need the recipient's mail key first."""


class NoRouteError(SendError):
    pass


@dataclass
class Identity:
    """One unlinkable identity: signing keypair, mail key, derived address."""

    name: str
    keypair: IdentityKeyPair
    mail: MailKey
    address: MailAddress


@dataclass
class QueuedSend:
    """One route attempt for one envelope, with its retry schedule."""

    envelope: Envelope
    target: str
    sender: Identity
    route_kind: str  # "direct" or "carrier"
    origin: str  # "local" or "relay"
    relayed_for: Optional[str]
    message_id: str
    attempts: int = 0
    next_attempt: int = 0
    expires: int = 0
    done: bool = False


@dataclass
class StoredMessage:
    envelope: Envelope
    body: bytes
    received_at: int
    verified: Optional[bool]  # None when the author key is unknown
    channel: Optional[str]


@dataclass
class HostedMessage:
    envelope: Envelope
    received_at: int
    fetched: bool = False


@dataclass
class DeliverResult:
    outcome: str
    message_id: Optional[str]


@dataclass
class SendReport:
    message_id: Optional[str]
    routes: list[str] = field(default_factory=list)
    deferred: bool = False


def is_onion(address: str) -> bool:
    try:
        MailAddress.parse(address)
    except AddressError:
        return False
    return True


class Node:
    """One participant: identities, books, queue, mailboxes, lists."""

    def __init__(self, name: str, net):
        self.name = name
        self.net = net
        net.register_node(self)
        self.identities: dict[str, Identity] = {}
        self.books: dict[str, AddressBook] = {}
        self.outbound: list[QueuedSend] = []
        self.seen: set[tuple[str, str]] = set()
        self.inbox: dict[str, list[StoredMessage]] = {}
        self.hosted: dict[str, list[HostedMessage]] = {}
        self.gateway_host: Optional[str] = None
        self.external_outbox: list[tuple[str, Envelope]] = []
        self.lists: dict[str, ListState] = {}
        self.deferred: list[tuple[str, str, bytes, str, bool, Optional[str]]] = []
        self.client_refs: dict[str, str] = {}
        self.duplicates_suppressed = 0
        self.bounces_received: list[str] = []
        self.expired: list[str] = []
        self.confirmations: dict[str, int] = {}
        self.key_conflicts: list[str] = []
        self.notices: list[str] = []
        self.applied_revocations: set[bytes] = set()

    # ------------------------------------------------------------------
    # identities and accounts

    def add_identity(self, name: str, seed: int, localpart: str = "user") -> Identity:
        if name in self.identities:
            raise NodeError(f"identity {name!r} already exists on {self.name}")
        keypair = generate_identity(seed)
        mail = generate_mail_key(seed)
        address = derive_address(keypair.public, localpart)
        ident = Identity(name=name, keypair=keypair, mail=mail, address=address)
        self.net.register_label(address.label, self)
        self.identities[name] = ident
        self.books[address.render()] = AddressBook(address.render())
        self.inbox[address.render()] = []
        return ident

    def host_account(self, localpart: str) -> None:
        """Open a mailbox for a user who does not run their own node."""
        for ident in self.identities.values():
            if ident.address.localpart == localpart:
                raise NodeError(f"{localpart!r} is already an identity localpart")
        self.hosted.setdefault(localpart, [])

    def pull_account(self, localpart: str) -> list[Envelope]:
        """Return unfetched hosted mail in arrival order and mark it fetched."""
        if localpart not in self.hosted:
            raise NodeError(f"no hosted account {localpart!r} on {self.name}")
        out = []
        for message in self.hosted[localpart]:
            if not message.fetched:
                message.fetched = True
                out.append(message.envelope)
        return out

    def set_gateway(self, host: str) -> None:
        self.gateway_host = host

    def _identity(self, name: str) -> Identity:
        ident = self.identities.get(name)
        if ident is None:
            raise NodeError(f"no identity {name!r} on node {self.name}")
        return ident

    def _identity_for_address(self, address: str | None) -> Optional[Identity]:
        for ident in self.identities.values():
            if ident.address.render() == address:
                return ident
        return None

    def _owns_label(self, label: str) -> bool:
        return any(i.address.label == label for i in self.identities.values())

    def book_for(self, identity_name: str) -> AddressBook:
        return self.books[self._identity(identity_name).address.render()]

    # ------------------------------------------------------------------
    # composing

    def compose_and_send(
        self,
        identity_name: str,
        recipient: str,
        body: bytes,
        mode: str = "carrier-fallback",
        confirm: bool = False,
        client_ref: Optional[str] = None,
    ) -> SendReport:
        """Seal, sign, and queue a message on one or more routes.

        direct-only without the recipient's key auto-initiates key exchange
        and defers the send; carrier routes hard-require the key, since a
        message must be end-to-end encrypted before any third party may
        hold it.
        """
        if mode not in MODES:
            raise ValueError(f"unknown send mode {mode!r}")
        ident = self._identity(identity_name)
        book = self.books[ident.address.render()]
        contact = book.entries.get(recipient)
        if contact is None:
            raise UnknownRecipientError(recipient)
        if contact.revoked:
            raise RecipientRevokedError(recipient)
        if not is_onion(recipient):
            return self._finish_report(
                self._compose_external(ident, book, recipient, body, mode), client_ref
            )
        now = self.net.clock
        if contact.mail_public is None:
            if mode == "direct-only":
                self.request_key(identity_name, recipient)
                self.deferred.append((identity_name, recipient, body, mode, confirm, client_ref))
                return SendReport(message_id=None, deferred=True)
            raise KeyRequiredError(
                f"no mail key for {recipient}; store-and-forward needs one"
            )
        headers = [
            ("From", ident.address.render()),
            ("To", recipient),
            ("For", recipient),
            ("Date", str(now)),
        ]
        if confirm:
            headers.append(("Confirm-Delivery", "yes"))
        headers.append(("Encrypted-To", contact.fingerprint))
        env = Envelope(headers=headers, body=seal(contact.mail_public, body))
        env = wire.assign_message_id(env, ident.address.label)
        env = self._sign(env, ident)
        mid = env.get("Message-ID")

        direct = self._enqueue(env, recipient, ident, "direct", "local")
        outcome = self._attempt(direct)
        routes = ["direct"]
        if mode == "carrier-fallback" and not outcome.scheduled:
            carriers = book.carriers_for(recipient)
            if carriers:
                self._retire(direct)
                routes = []
                for carrier in carriers:
                    routes.append(f"carrier:{carrier}")
                    entry = self._enqueue(
                        wire.replace_header(env, "To", carrier),
                        carrier,
                        ident,
                        "carrier",
                        "local",
                    )
                    self._attempt(entry)
        elif mode == "fan-out":
            for carrier in book.carriers_for(recipient):
                routes.append(f"carrier:{carrier}")
                entry = self._enqueue(
                    wire.replace_header(env, "To", carrier),
                    carrier,
                    ident,
                    "carrier",
                    "local",
                )
                self._attempt(entry)
        return self._finish_report(SendReport(message_id=mid, routes=routes), client_ref)

    def _finish_report(self, report: SendReport, client_ref: Optional[str]) -> SendReport:
        if client_ref and report.message_id:
            self.client_refs[client_ref] = report.message_id
        return report

    def _compose_external(
        self, ident: Identity, book: AddressBook, recipient: str, body: bytes, mode: str
    ) -> SendReport:
        # External mail rides a single gateway carrier and is sealed to
        # that carrier, which must decrypt to forward it anyway.
        if mode == "direct-only":
            raise NoRouteError(f"{recipient} is external; direct contact impossible")
        carriers = book.carriers_for(recipient)
        if not carriers:
            raise NoRouteError(f"no carrier known for external recipient {recipient}")
        carrier = carriers[0]
        carrier_key = book.entries[carrier].mail_public
        if carrier_key is None:
            raise KeyRequiredError(f"no mail key for gateway carrier {carrier}")
        now = self.net.clock
        env = Envelope(
            headers=[
                ("From", ident.address.render()),
                ("To", carrier),
                ("For", recipient),
                ("Date", str(now)),
                ("Encrypted-To", book.entries[carrier].fingerprint),
            ],
            body=seal(carrier_key, body),
        )
        env = wire.assign_message_id(env, ident.address.label)
        env = self._sign(env, ident)
        entry = self._enqueue(env, carrier, ident, "carrier", "local")
        self._attempt(entry)
        return SendReport(message_id=env.get("Message-ID"), routes=[f"carrier:{carrier}"])

    def _sign(self, env: Envelope, ident: Identity) -> Envelope:
        signature = sign(ident.mail.secret, wire.signing_bytes(env))
        return wire.add_header(
            env, "Signature", wire.make_signature_value(ident.mail.fingerprint, signature)
        )

    def _control_envelope(
        self, ident: Identity, to: str, extra_headers: list[tuple[str, str]]
    ) -> Envelope:
        headers = [
            ("From", ident.address.render()),
            ("To", to),
            ("For", to),
            ("Date", str(self.net.clock)),
        ] + extra_headers
        env = wire.assign_message_id(Envelope(headers=headers), ident.address.label)
        return self._sign(env, ident)

    def request_key(self, identity_name: str, contact_address: str) -> str:
        """Queue a direct Key-Request carrying our own mail public key.

        Key exchange never rides a carrier: it only ever uses the mutually
        authenticated direct channel.
        """
        ident = self._identity(identity_name)
        book = self.books[ident.address.render()]
        contact = book.entries.get(contact_address)
        if contact is None:
            raise UnknownRecipientError(contact_address)
        if contact.revoked:
            raise RecipientRevokedError(contact_address)
        env = self._control_envelope(
            ident,
            contact_address,
            [("Key-Request", wire.make_signature_value(ident.mail.fingerprint, ident.mail.public))],
        )
        entry = self._enqueue(env, contact_address, ident, "direct", "local")
        self._attempt(entry)
        return env.get("Message-ID")

    def introduce(self, identity_name: str, to: str, subject: str) -> str:
        """Send contact details for one known peer to another."""
        ident = self._identity(identity_name)
        book = self.books[ident.address.render()]
        if to not in book.entries:
            raise UnknownRecipientError(to)
        if subject not in book.entries:
            raise UnknownContactError(subject)
        entry_subject = book.entries[subject]
        env = self._control_envelope(
            ident,
            to,
            [("Contact", format_contact_value(entry_subject.display, subject, entry_subject.fingerprint))],
        )
        entry = self._enqueue(env, to, ident, "direct", "local")
        self._attempt(entry)
        return env.get("Message-ID")

    def revoke_identity(self, identity_name: str, kind: str = "address") -> RevocationRecord:
        """Issue and fan out a self-signed revocation to all known peers."""
        ident = self._identity(identity_name)
        now = self.net.clock
        if kind == "address":
            record = make_revocation(ident.keypair, ident.address, "address", now)
        elif kind == "key":
            record = make_revocation(ident.mail, ident.mail.fingerprint, "key", now)
        else:
            raise ValueError(f"unknown revocation kind {kind!r}")
        self.applied_revocations.add(record.signature)
        value = wire.make_revoke_value(record)
        book = self.books[ident.address.render()]
        for address, contact in book.entries.items():
            if contact.revoked or not is_onion(address):
                continue
            env = self._control_envelope(ident, address, [("Revoke", value)])
            entry = self._enqueue(env, address, ident, "direct", "local")
            self._attempt(entry)
        return record

    # ------------------------------------------------------------------
    # mailing lists

    def join_list(
        self,
        list_id: str,
        identity_name: str,
        mode: str = "flood",
        ledger: bool = False,
        jitter: int = 0,
    ) -> ListState:
        if list_id in self.lists:
            raise NodeError(f"{self.name} already joined list {list_id}")
        ident = self._identity(identity_name)
        state = ListState(
            list_id,
            ident.address.render(),
            ident.mail,
            mode=mode,
            ledger=ledger,
            jitter=jitter,
        )
        self.lists[list_id] = state
        return state

    def post_to_list(self, list_id: str, identity_name: str, body: bytes) -> tuple[str, int]:
        ident = self._identity(identity_name)
        state = self.lists.get(list_id)
        if state is None or state.my_address != ident.address.render():
            raise GossipError(f"{ident.address} is not a member of list {list_id}")
        env, transmissions = gossip.post(state, body, self.net.clock)
        self._send_list_transmissions(state, ident, transmissions)
        return env.get("Message-ID"), len(transmissions)

    def invite_to_list(
        self, identity_name: str, to: str, list_id: str, direction: str = "both"
    ) -> str:
        """Invite a contact: a Contact envelope carrying the list id.

        The inviter links the invitee immediately (inviting is agreeing to
        forward); the invitee links back when the invitation arrives.
        """
        ident = self._identity(identity_name)
        book = self.books[ident.address.render()]
        if to not in book.entries:
            raise UnknownRecipientError(to)
        state = self.lists.get(list_id)
        if state is None or state.my_address != ident.address.render():
            raise GossipError(f"{ident.address} is not a member of list {list_id}")
        value = format_contact_value(
            ident.name, ident.address.render(), ident.mail.fingerprint, direction
        )
        env = self._control_envelope(ident, to, [("Contact", value), ("List", list_id)])
        state.add_link(
            to,
            outbound=direction in ("both", "from-list"),
            inbound=direction in ("both", "to-list"),
        )
        entry = self._enqueue(env, to, ident, "direct", "local")
        self._attempt(entry)
        return env.get("Message-ID")

    def _send_list_transmissions(
        self, state: ListState, ident: Identity, transmissions: list[tuple[str, Envelope]]
    ) -> None:
        now = self.net.clock
        for neighbour, env in transmissions:
            entry = self._enqueue(env, neighbour, ident, "direct", "local")
            if state.jitter:
                entry.next_attempt = now + self.net.rng.randint(0, state.jitter)
                self.net.schedule_retry(self, entry.next_attempt)
            else:
                self._attempt(entry)

    # ------------------------------------------------------------------
    # outbound queue

    def _enqueue(
        self,
        env: Envelope,
        target: str,
        sender: Identity,
        route_kind: str,
        origin: str,
        relayed_for: Optional[str] = None,
    ) -> QueuedSend:
        if (route_kind == "carrier" or origin == "relay") and env.get("Encrypted-To") is None:
            raise NodeError("refusing to queue a plaintext body for third-party relay")
        now = self.net.clock
        entry = QueuedSend(
            envelope=env,
            target=target,
            sender=sender,
            route_kind=route_kind,
            origin=origin,
            relayed_for=relayed_for,
            message_id=env.get("Message-ID") or "-",
            next_attempt=now,
            expires=now + QUEUE_TTL,
        )
        self.outbound.append(entry)
        return entry

    def _retire(self, entry: QueuedSend) -> None:
        entry.done = True
        if entry in self.outbound:
            self.outbound.remove(entry)

    def _attempt(self, entry: QueuedSend):
        now = self.net.clock
        if not self.net.node_online(self.name, now):
            if not self.net.schedule_wakeup(self):
                self._drop_all_pending()
            return self.net.refusal("sender-offline")
        outcome = self.net.send(
            self,
            entry.sender.address.render(),
            entry.target,
            wire.serialize(entry.envelope),
            message_id=entry.message_id,
            count_transmission=entry.envelope.has("List"),
        )
        if outcome.scheduled:
            self._retire(entry)
        else:
            delay = min(RETRY_BASE * (2 ** entry.attempts), RETRY_CAP)
            entry.attempts += 1
            entry.next_attempt = min(now + delay, entry.expires)
            self.net.schedule_retry(self, entry.next_attempt)
        return outcome

    def retry_tick(self) -> None:
        """Attempt every queue entry that has come due; expire stale ones."""
        now = self.net.clock
        for entry in [e for e in self.outbound if not e.done and e.next_attempt <= now]:
            if entry.done:
                continue
            if now >= entry.expires:
                self._expire(entry)
                continue
            if not self.net.node_online(self.name, now):
                if not self.net.schedule_wakeup(self):
                    self._drop_all_pending()
                return
            self._attempt(entry)

    def _expire(self, entry: QueuedSend, bounce: bool = True) -> None:
        self._retire(entry)
        self.expired.append(entry.message_id)
        if (
            bounce
            and entry.origin == "relay"
            and entry.relayed_for
            and is_onion(entry.relayed_for)
        ):
            env = self._control_envelope(
                entry.sender, entry.relayed_for, [("Bounce", entry.message_id)]
            )
            notice = self._enqueue(env, entry.relayed_for, entry.sender, "direct", "local")
            self._attempt(notice)

    def _drop_all_pending(self) -> None:
        # The node is offline with no future online interval: nothing can
        # ever be sent (bounces included), so the queue is cleared.
        for entry in list(self.outbound):
            self._expire(entry, bounce=False)

    # ------------------------------------------------------------------
    # receiving

    def on_deliver(self, data: bytes, channel: Optional[str]) -> DeliverResult:
        """Dispatch one delivered envelope.

        Fixed order: parse, route by To (identity / hosted / gateway
        reply-path), then by kind: list traffic to the gossip layer, key
        exchange, introductions, revocations, confirmations and bounces,
        and finally For-based payload handling (store / relay / gateway)."""
        now = self.net.clock
        try:
            env = wire.parse(data)
        except wire.ParseError:
            return DeliverResult("rejected:parse-error", None)
        mid = env.get("Message-ID")
        to_value = env.get("To")

        if self.gateway_host and to_value and to_value.endswith("@" + self.gateway_host):
            return self._gateway_in(env, now)

        ident = self._identity_for_address(to_value)
        if ident is None:
            return self._deliver_hosted(env, to_value, mid, now)
        book = self.books[ident.address.render()]

        list_id = env.get("List")
        if list_id is not None and not env.has("Contact"):
            return self._on_list(env, list_id, ident, book, channel, now)

        dedup_key = (mid or "-", env.get("For") or "")
        if dedup_key in self.seen:
            self.duplicates_suppressed += 1
            return DeliverResult("dropped-dup", mid)

        if env.has("Key-Request"):
            return self._on_key_request(env, ident, book, dedup_key)
        if env.has("Key-Response"):
            return self._on_key_response(env, ident, book, dedup_key)
        if env.has("Contact"):
            return self._on_contact(env, ident, book, dedup_key)
        if env.has("Revoke"):
            return self._on_revoke(env, ident, book, dedup_key)
        if env.has("Delivery-Confirmed"):
            confirmed = env.get("Delivery-Confirmed")
            self.confirmations[confirmed] = self.confirmations.get(confirmed, 0) + 1
            self.seen.add(dedup_key)
            return DeliverResult("ok", mid)
        if env.has("Bounce"):
            self.bounces_received.append(env.get("Bounce"))
            self.seen.add(dedup_key)
            return DeliverResult("ok", mid)

        for_value = env.get("For") or to_value
        if for_value == ident.address.render():
            return self._store(env, ident, book, dedup_key, channel, now)
        if is_onion(for_value):
            return self._relay(env, ident, book, for_value, dedup_key)
        return self._gateway_out(env, ident, for_value, dedup_key, now)

    def _deliver_hosted(
        self, env: Envelope, to_value: str | None, mid: str | None, now: int
    ) -> DeliverResult:
        try:
            address = MailAddress.parse(to_value or "")
        except AddressError:
            return DeliverResult("rejected:relay-denied", mid)
        if not self._owns_label(address.label):
            return DeliverResult("rejected:relay-denied", mid)
        if address.localpart not in self.hosted:
            return DeliverResult("rejected:unknown-recipient", mid)
        dedup_key = (mid or "-", env.get("For") or "")
        if dedup_key in self.seen:
            self.duplicates_suppressed += 1
            return DeliverResult("dropped-dup", mid)
        self.hosted[address.localpart].append(HostedMessage(env, now))
        self.seen.add(dedup_key)
        return DeliverResult("ok", mid)

    def _on_list(
        self,
        env: Envelope,
        list_id: str,
        ident: Identity,
        book: AddressBook,
        channel: Optional[str],
        now: int,
    ) -> DeliverResult:
        mid = env.get("Message-ID")
        state = self.lists.get(list_id)
        if state is None or state.my_address != ident.address.render():
            return DeliverResult("rejected:not-a-member", mid)
        if channel is None:
            return DeliverResult("rejected:not-a-neighbour", mid)
        result = gossip.on_list_message(state, env, channel, book, now)
        if result.outcome == "duplicate":
            self.duplicates_suppressed += 1
        self._send_list_transmissions(state, ident, result.forwards)
        return DeliverResult(result.log_token(), mid)

    def _on_key_request(
        self, env: Envelope, ident: Identity, book: AddressBook, dedup_key
    ) -> DeliverResult:
        mid = env.get("Message-ID")
        from_value = env.get("From")
        if from_value is None or not is_onion(from_value):
            return DeliverResult("rejected:malformed", mid)
        try:
            _, public = wire.parse_signature_value(env.get("Key-Request"))
        except ValueError:
            return DeliverResult("rejected:malformed", mid)
        contact = book.entries.get(from_value)
        if contact is not None and contact.revoked:
            return DeliverResult("rejected:revoked", mid)
        if contact is None:
            book.add_contact(from_value)
        try:
            book.record_key(from_value, public)
        except KeyConflictError as exc:
            self.key_conflicts.append(str(exc))
            return DeliverResult("rejected:key-conflict", mid)
        self.seen.add(dedup_key)
        reply = self._control_envelope(
            ident,
            from_value,
            [("Key-Response", wire.make_signature_value(ident.mail.fingerprint, ident.mail.public))],
        )
        entry = self._enqueue(reply, from_value, ident, "direct", "local")
        self._attempt(entry)
        return DeliverResult("ok", mid)

    def _on_key_response(
        self, env: Envelope, ident: Identity, book: AddressBook, dedup_key
    ) -> DeliverResult:
        mid = env.get("Message-ID")
        from_value = env.get("From")
        if from_value is None or from_value not in book.entries:
            return DeliverResult("rejected:unknown-contact", mid)
        try:
            _, public = wire.parse_signature_value(env.get("Key-Response"))
        except ValueError:
            return DeliverResult("rejected:malformed", mid)
        try:
            book.record_key(from_value, public)
        except KeyConflictError as exc:
            self.key_conflicts.append(str(exc))
            return DeliverResult("rejected:key-conflict", mid)
        self.seen.add(dedup_key)
        self._release_deferred(ident, from_value)
        return DeliverResult("ok", mid)

    def _release_deferred(self, ident: Identity, recipient: str) -> None:
        ready = [
            d
            for d in self.deferred
            if d[1] == recipient and self.identities.get(d[0]) is ident
        ]
        for item in ready:
            self.deferred.remove(item)
            identity_name, recipient, body, mode, confirm, client_ref = item
            self.compose_and_send(
                identity_name, recipient, body, mode=mode, confirm=confirm, client_ref=client_ref
            )

    def _on_contact(
        self, env: Envelope, ident: Identity, book: AddressBook, dedup_key
    ) -> DeliverResult:
        mid = env.get("Message-ID")
        from_value = env.get("From")
        own = ident.address.render()
        direction = None
        try:
            for value in env.get_all("Contact"):
                display, address, fingerprint, direction = parse_contact_value(value)
                if address == own:
                    continue
                book.add_contact(address, display or None, introduced_by=from_value)
                if fingerprint:
                    book.expect_fingerprint(address, fingerprint)
        except ValueError:
            return DeliverResult("rejected:malformed", mid)
        list_id = env.get("List")
        if list_id and from_value and list_id not in self.lists:
            # A list invitation: joining links back to the inviter with the
            # offered direction (from the invitee's perspective).
            state = ListState(list_id, own, ident.mail)
            state.add_link(
                from_value,
                outbound=(direction or "both") in ("both", "to-list"),
                inbound=(direction or "both") in ("both", "from-list"),
            )
            self.lists[list_id] = state
        self.seen.add(dedup_key)
        return DeliverResult("ok", mid)

    def _on_revoke(
        self, env: Envelope, ident: Identity, book: AddressBook, dedup_key
    ) -> DeliverResult:
        mid = env.get("Message-ID")
        value = env.get("Revoke")
        try:
            record = wire.parse_revoke_value(value)
        except ValueError:
            return DeliverResult("rejected:malformed", mid)
        if not verify_revocation(record, record.public):
            return DeliverResult("rejected:bad-revocation", mid)
        book.apply_revocation(record)
        self.seen.add(dedup_key)
        if record.signature not in self.applied_revocations:
            self.applied_revocations.add(record.signature)
            for address, contact in book.entries.items():
                if contact.revoked or address == env.get("From") or address == record.subject:
                    continue
                if not is_onion(address):
                    continue
                fwd = self._control_envelope(ident, address, [("Revoke", value)])
                entry = self._enqueue(fwd, address, ident, "direct", "local")
                self._attempt(entry)
        return DeliverResult("ok", mid)

    def _store(
        self,
        env: Envelope,
        ident: Identity,
        book: AddressBook,
        dedup_key,
        channel: Optional[str],
        now: int,
    ) -> DeliverResult:
        mid = env.get("Message-ID")
        from_value = env.get("From")
        verified = None
        sig_value = env.get("Signature")
        author = book.entries.get(from_value) if from_value else None
        if sig_value is not None and author is not None and author.mail_public is not None:
            try:
                _, signature = wire.parse_signature_value(sig_value)
            except ValueError:
                return DeliverResult("rejected:bad-author-sig", mid)
            verified = verify(author.mail_public, wire.signing_bytes(env), signature)
            if not verified:
                return DeliverResult("rejected:bad-author-sig", mid)
        body = env.body
        encrypted_to = env.get("Encrypted-To")
        if encrypted_to is not None:
            if encrypted_to != ident.mail.fingerprint:
                self.notices.append(f"undecryptable {mid} from {from_value}: sealed to {encrypted_to}")
                self.seen.add(dedup_key)
                return DeliverResult("ok", mid)
            try:
                body = unseal(ident.mail.secret, env.body)
            except DecryptionError:
                self.notices.append(f"undecryptable {mid} from {from_value}: unseal failed")
                self.seen.add(dedup_key)
                return DeliverResult("ok", mid)
        self.inbox[ident.address.render()].append(
            StoredMessage(env, body, now, verified, channel)
        )
        self.seen.add(dedup_key)
        if env.get("Confirm-Delivery") and from_value and is_onion(from_value):
            confirmation = self._control_envelope(
                ident, from_value, [("Delivery-Confirmed", mid)]
            )
            entry = self._enqueue(confirmation, from_value, ident, "direct", "local")
            self._attempt(entry)
        return DeliverResult("ok", mid)

    def _relay(
        self, env: Envelope, ident: Identity, book: AddressBook, for_value: str, dedup_key
    ) -> DeliverResult:
        mid = env.get("Message-ID")
        from_value = env.get("From")
        sender = book.entries.get(from_value) if from_value else None
        if sender is None or sender.revoked:
            return DeliverResult("rejected:relay-denied", mid)
        if env.get("Encrypted-To") is None:
            return DeliverResult("rejected:relay-denied", mid)
        relayed = wire.replace_header(env, "To", for_value)
        entry = self._enqueue(relayed, for_value, ident, "direct", "relay", relayed_for=from_value)
        self.seen.add(dedup_key)
        self._attempt(entry)
        return DeliverResult("ok", mid)

    def _gateway_out(
        self, env: Envelope, ident: Identity, for_value: str, dedup_key, now: int
    ) -> DeliverResult:
        mid = env.get("Message-ID")
        if self.gateway_host is None:
            return DeliverResult("rejected:relay-denied", mid)
        from_value = env.get("From")
        if from_value is None or not is_onion(from_value):
            return DeliverResult("rejected:relay-denied", mid)
        body = env.body
        encrypted_to = env.get("Encrypted-To")
        if encrypted_to is not None:
            if encrypted_to != ident.mail.fingerprint:
                return DeliverResult("rejected:gateway-unseal", mid)
            try:
                body = unseal(ident.mail.secret, env.body)
            except DecryptionError:
                return DeliverResult("rejected:gateway-unseal", mid)
        reply_path = wire.encode_reply_path(MailAddress.parse(from_value), self.gateway_host)
        external = Envelope(
            headers=[("From", reply_path), ("To", for_value), ("Date", str(now))],
            body=body,
        )
        external = wire.assign_message_id(external, ident.address.label)
        self.external_outbox.append((for_value, external))
        self.seen.add(dedup_key)
        return DeliverResult("ok", mid)

    def _gateway_in(self, env: Envelope, now: int) -> DeliverResult:
        mid = env.get("Message-ID")
        try:
            inner = wire.decode_reply_path(env.get("To") or "")
        except wire.NotAReplyPath:
            return DeliverResult("rejected:not-a-reply-path", mid)
        inner_str = inner.render()
        for ident in self.identities.values():
            contact = self.books[ident.address.render()].entries.get(inner_str)
            if contact is not None and contact.mail_public is not None and not contact.revoked:
                break
        else:
            return DeliverResult("rejected:gateway-no-key", mid)
        wrapped = Envelope(
            headers=[
                ("From", env.get("From") or "external"),
                ("To", inner_str),
                ("For", inner_str),
                ("Date", str(now)),
                ("Encrypted-To", contact.fingerprint),
            ],
            body=seal(contact.mail_public, env.body),
        )
        if mid is not None:
            # Forwarding, not authoring: keep the external message id.
            wrapped = wire.add_header(wrapped, "Message-ID", mid)
        else:
            wrapped = wire.assign_message_id(wrapped, ident.address.label)
        entry = self._enqueue(
            wrapped, inner_str, ident, "direct", "relay", relayed_for=env.get("From")
        )
        self._attempt(entry)
        return DeliverResult("ok", wrapped.get("Message-ID"))

    # ------------------------------------------------------------------
    # inspection helpers

    def find_inbox_message(self, message_id: str) -> Optional[StoredMessage]:
        for messages in self.inbox.values():
            for message in messages:
                if message.envelope.get("Message-ID") == message_id:
                    return message
        return None

    def inbox_count(self, identity_name: str | None = None) -> int:
        if identity_name is not None:
            return len(self.inbox[self._identity(identity_name).address.render()])
        return sum(len(messages) for messages in self.inbox.values())
