"""Identities, self-certifying mail addresses, and the crypto surface.

Each identity is an Ed25519 keypair whose public half derives a
self-certifying onion-style address: the address label is a base32 rendering
of the leading bits of the key digest, so holding the key proves ownership
of the name.  A separate long-term mail key (Ed25519 for signatures plus
X25519 for sealing) is what peers exchange in-band and use for end-to-end
encryption and message signatures.

All key material is generated deterministically from a 64-bit seed, and
sealing derives its ephemeral key from the recipient key and payload, so a
simulation run is a pure function of its seeds.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

LABEL_LENGTH = 12
FINGERPRINT_LENGTH = 12

_B32_ALPHABET = "abcdefghijklmnopqrstuvwxyz234567"
_B36_ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyz"

_LOCALPART_RE = re.compile(r"^[a-z0-9]{1,32}$")
_ADDRESS_RE = re.compile(r"^([a-z0-9]{1,32})@([a-z2-7]{12})\.onion$")

_SEAL_OVERHEAD = 32 + 16  # ephemeral public key + AES-GCM tag
_SEAL_NONCE = b"\x00" * 12  # safe: every seal derives a fresh single-use key


class AddressError(ValueError):
    """Raised for malformed localparts or unparseable addresses."""


class DecryptionError(Exception):
    """Raised when sealed bytes cannot be opened with the given secret."""


class RevocationError(ValueError):
    """Raised when a revocation request does not match its subject."""


def _digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _seed_bytes(seed: int) -> bytes:
    return (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big")


def _ed25519_private(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret[:32])


def _raw_public(key) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


@dataclass(frozen=True)
class MailAddress:
    """An in-system address, rendered as ``localpart@label.onion``.

    The label commits to an identity public key, so the address is
    self-certifying; the localpart is free-form but must never contain
    ``-``, which is reserved for the gateway reply-path encoding.
    """

    localpart: str
    label: str

    def render(self) -> str:
        return f"{self.localpart}@{self.label}.onion"

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str) -> "MailAddress":
        m = _ADDRESS_RE.match(text)
        if m is None:
            raise AddressError(f"not a valid mail address: {text!r}")
        return cls(localpart=m.group(1), label=m.group(2))


@dataclass(frozen=True)
class IdentityKeyPair:
    """Ed25519 signing keypair behind one unlinkable identity."""

    secret: bytes
    public: bytes
    seed: int


@dataclass(frozen=True)
class MailKey:
    """Long-term correspondence key: sign (Ed25519) plus seal (X25519).

    ``secret`` and ``public`` each concatenate the signing half followed by
    the sealing half (32 bytes apiece).  The fingerprint is the base36
    rendering of the leading 62 bits of the public digest.
    """

    secret: bytes
    public: bytes
    fingerprint: str


@dataclass(frozen=True)
class RevocationRecord:
    """A self-signed announcement retiring an address or a mail key.

    ``public`` carries the subject's own public key so that any peer can
    check the record: first that the key really is the subject (address
    derivation or fingerprint), then that the signature verifies under it.
    """

    kind: str  # "address" or "key"
    subject: str  # rendered address, or mail-key fingerprint
    issued_at: int
    public: bytes
    signature: bytes


def derive_label(public: bytes) -> str:
    """Base32-render the first 60 bits of the key digest (12 chars)."""
    word = int.from_bytes(_digest(public)[:8], "big") >> 4
    return "".join(
        _B32_ALPHABET[(word >> (5 * i)) & 0x1F] for i in range(LABEL_LENGTH - 1, -1, -1)
    )


def derive_fingerprint(public: bytes) -> str:
    """Base36-render the first 62 bits of the key digest (12 chars)."""
    word = int.from_bytes(_digest(public)[:8], "big") >> 2
    chars = []
    for _ in range(FINGERPRINT_LENGTH):
        word, rem = divmod(word, 36)
        chars.append(_B36_ALPHABET[rem])
    return "".join(reversed(chars))


def generate_identity(seed: int) -> IdentityKeyPair:
    """Deterministically generate an identity keypair from a 64-bit seed."""
    secret = _digest(b"peermail/identity-key" + _seed_bytes(seed))
    key = Ed25519PrivateKey.from_private_bytes(secret)
    return IdentityKeyPair(secret=secret, public=_raw_public(key), seed=seed)


def public_from_secret(secret: bytes) -> bytes:
    """Recover the identity public key from its secret."""
    return _raw_public(_ed25519_private(secret))


def generate_mail_key(seed: int) -> MailKey:
    """Deterministically generate a mail (sign+seal) key from a seed."""
    sign_secret = _digest(b"peermail/mail-sign-key" + _seed_bytes(seed))
    seal_secret = _digest(b"peermail/mail-seal-key" + _seed_bytes(seed))
    sign_pub = _raw_public(Ed25519PrivateKey.from_private_bytes(sign_secret))
    seal_pub = _raw_public(X25519PrivateKey.from_private_bytes(seal_secret))
    public = sign_pub + seal_pub
    return MailKey(
        secret=sign_secret + seal_secret,
        public=public,
        fingerprint=derive_fingerprint(public),
    )


def validate_localpart(localpart: str) -> str:
    if not _LOCALPART_RE.match(localpart):
        raise AddressError(
            f"invalid localpart {localpart!r}: need 1-32 chars of [a-z0-9], no '-'"
        )
    return localpart


def derive_address(public: bytes, localpart: str) -> MailAddress:
    """Derive the self-certifying address for a key and localpart."""
    return MailAddress(localpart=validate_localpart(localpart), label=derive_label(public))


def verify_address(address: MailAddress, public: bytes) -> bool:
    """True iff the address label was derived from this public key."""
    try:
        return derive_address(public, address.localpart) == address
    except AddressError:
        return False


def sign(secret: bytes, message: bytes) -> bytes:
    """Sign with an identity secret (32 bytes) or mail secret (64 bytes)."""
    return _ed25519_private(secret).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """Check a signature against an identity or mail public key."""
    try:
        Ed25519PublicKey.from_public_bytes(public[:32]).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def _seal_key(shared: bytes, ephemeral_public: bytes) -> bytes:
    return _digest(b"peermail/seal-key" + shared + ephemeral_public)


def seal(recipient_public: bytes, plaintext: bytes) -> bytes:
    """Encrypt to a mail public key; only the matching secret can unseal.

    The ephemeral X25519 key is derived from the recipient key and the
    payload, making the output deterministic for reproducible runs.
    """
    curve_public = recipient_public[32:] if len(recipient_public) == 64 else recipient_public
    recipient_key = X25519PublicKey.from_public_bytes(curve_public)
    ephemeral_secret = _digest(b"peermail/seal-ephemeral" + curve_public + plaintext)
    ephemeral = X25519PrivateKey.from_private_bytes(ephemeral_secret)
    ephemeral_public = _raw_public(ephemeral)
    key = _seal_key(ephemeral.exchange(recipient_key), ephemeral_public)
    return ephemeral_public + AESGCM(key).encrypt(_SEAL_NONCE, plaintext, None)


def unseal(mail_secret: bytes, sealed: bytes) -> bytes:
    """Open sealed bytes with the recipient's mail secret.

    Raises DecryptionError on any mismatch; never returns garbage.
    """
    if len(sealed) < _SEAL_OVERHEAD:
        raise DecryptionError("sealed data too short")
    ephemeral_public = sealed[:32]
    secret = X25519PrivateKey.from_private_bytes(mail_secret[32:64])
    shared = secret.exchange(X25519PublicKey.from_public_bytes(ephemeral_public))
    try:
        return AESGCM(_seal_key(shared, ephemeral_public)).decrypt(
            _SEAL_NONCE, sealed[32:], None
        )
    except InvalidTag:
        raise DecryptionError("sealed data does not open with this secret") from None


def _revocation_signing_bytes(kind: str, subject: str, issued_at: int) -> bytes:
    return f"peermail-revocation\n{kind}\n{subject}\n{issued_at}\n".encode()


def make_revocation(
    keypair: Union[IdentityKeyPair, MailKey],
    subject: Union[MailAddress, str],
    kind: str,
    issued_at: int,
) -> RevocationRecord:
    """Sign a revocation of the caller's own address or mail key.

    The keypair must actually match the subject: an address revocation is
    signed by the identity key that derives the address, a key revocation
    by the mail key with that fingerprint.
    """
    if kind == "address":
        if not isinstance(subject, MailAddress) or not isinstance(keypair, IdentityKeyPair):
            raise RevocationError("address revocation needs a MailAddress and identity keypair")
        if not verify_address(subject, keypair.public):
            raise RevocationError("keypair does not derive the subject address")
        subject_text = subject.render()
    elif kind == "key":
        if not isinstance(subject, str) or not isinstance(keypair, MailKey):
            raise RevocationError("key revocation needs a fingerprint and mail key")
        if keypair.fingerprint != subject:
            raise RevocationError("mail key fingerprint does not match subject")
        subject_text = subject
    else:
        raise RevocationError(f"unknown revocation kind {kind!r}")
    signature = sign(keypair.secret, _revocation_signing_bytes(kind, subject_text, issued_at))
    return RevocationRecord(
        kind=kind,
        subject=subject_text,
        issued_at=issued_at,
        public=keypair.public,
        signature=signature,
    )


def verify_revocation(record: RevocationRecord, public: bytes) -> bool:
    """Check that a revocation is self-signed by the subject it retires."""
    if record.kind == "address":
        try:
            address = MailAddress.parse(record.subject)
        except AddressError:
            return False
        if not verify_address(address, public):
            return False
    elif record.kind == "key":
        if derive_fingerprint(public) != record.subject:
            return False
    else:
        return False
    payload = _revocation_signing_bytes(record.kind, record.subject, record.issued_at)
    return verify(public, payload, record.signature)


def export_keypair(identity: IdentityKeyPair, mail: MailKey) -> dict:
    """Serialize a keypair bundle for copying to another device."""
    return {
        "seed": identity.seed,
        "identity_secret": identity.secret.hex(),
        "identity_public": identity.public.hex(),
        "mail_secret": mail.secret.hex(),
        "mail_public": mail.public.hex(),
    }


def import_keypair(data: dict) -> tuple[IdentityKeyPair, MailKey]:
    """Rebuild a keypair bundle exported by export_keypair."""
    identity = IdentityKeyPair(
        secret=bytes.fromhex(data["identity_secret"]),
        public=bytes.fromhex(data["identity_public"]),
        seed=int(data["seed"]),
    )
    public = bytes.fromhex(data["mail_public"])
    mail = MailKey(
        secret=bytes.fromhex(data["mail_secret"]),
        public=public,
        fingerprint=derive_fingerprint(public),
    )
    return identity, mail
