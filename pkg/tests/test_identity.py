"""Tests for key generation, self-certifying addresses, and sign/seal."""

import inspect
import random

import pytest

from peermail import identity
from peermail.identity import (
    AddressError,
    DecryptionError,
    IdentityKeyPair,
    MailAddress,
    RevocationError,
    derive_address,
    derive_fingerprint,
    export_keypair,
    generate_identity,
    generate_mail_key,
    import_keypair,
    make_revocation,
    seal,
    sign,
    unseal,
    verify,
    verify_address,
    verify_revocation,
)

LABEL_ALPHABET = set("abcdefghijklmnopqrstuvwxyz234567")


def test_generate_identity_deterministic():
    assert generate_identity(1).public == generate_identity(1).public


def test_distinct_seeds_distinct_keys():
    assert generate_identity(1).public != generate_identity(2).public


def test_seed_17_golden_label():
    # Frozen from the reference run of the chosen digest rule.
    keypair = generate_identity(17)
    assert derive_address(keypair.public, "user").render() == "user@mdpn7bva24vu.onion"


def test_seed_17_golden_fingerprint():
    assert generate_mail_key(17).fingerprint == "yfxvi7mw62dz"


def test_public_recoverable_from_secret():
    keypair = generate_identity(99)
    assert identity.public_from_secret(keypair.secret) == keypair.public


def test_derive_address_format():
    keypair = generate_identity(5)
    address = derive_address(keypair.public, "user")
    assert len(address.label) == 12
    assert set(address.label) <= LABEL_ALPHABET
    assert address.render() == f"user@{address.label}.onion"


@pytest.mark.parametrize("bad", ["a-b", "User", "", "x" * 33, "sp ce"])
def test_derive_address_rejects_bad_localparts(bad):
    keypair = generate_identity(5)
    with pytest.raises(AddressError):
        derive_address(keypair.public, bad)


def test_address_round_trips_through_parse():
    keypair = generate_identity(5)
    address = derive_address(keypair.public, "alice99")
    assert MailAddress.parse(address.render()) == address


def test_verify_address_round_trip():
    keypair = generate_identity(7)
    address = derive_address(keypair.public, "user")
    assert verify_address(address, keypair.public)


def test_verify_address_wrong_key():
    address = derive_address(generate_identity(7).public, "user")
    assert not verify_address(address, generate_identity(8).public)


def test_verify_address_every_label_mutation_fails():
    keypair = generate_identity(7)
    address = derive_address(keypair.public, "user")
    alphabet = sorted(LABEL_ALPHABET)
    for position in range(12):
        original = address.label[position]
        replacement = next(c for c in alphabet if c != original)
        mutated = MailAddress(
            "user", address.label[:position] + replacement + address.label[position + 1 :]
        )
        assert not verify_address(mutated, keypair.public)


def test_sign_verify_round_trip():
    key = generate_mail_key(3)
    assert verify(key.public, b"payload", sign(key.secret, b"payload"))


def test_verify_wrong_key():
    sig = sign(generate_mail_key(3).secret, b"payload")
    assert not verify(generate_mail_key(4).public, b"payload", sig)


def test_verify_detects_every_byte_mutation():
    key = generate_mail_key(3)
    message = bytes(range(64))
    signature = sign(key.secret, message)
    for i in range(64):
        mutated = bytes(message[:i] + bytes([message[i] ^ 0x01]) + message[i + 1 :])
        assert not verify(key.public, mutated, signature)


def test_identity_key_signs_too():
    keypair = generate_identity(12)
    assert verify(keypair.public, b"m", sign(keypair.secret, b"m"))


def test_seal_unseal_round_trip():
    key = generate_mail_key(6)
    assert unseal(key.secret, seal(key.public, b"hello")) == b"hello"


def test_unseal_with_other_key_fails():
    sealed = seal(generate_mail_key(6).public, b"hello")
    with pytest.raises(DecryptionError):
        unseal(generate_mail_key(7).secret, sealed)


def test_unseal_truncated_fails():
    with pytest.raises(DecryptionError):
        unseal(generate_mail_key(6).secret, b"short")


def test_seal_round_trips_1000_random_payloads():
    rng = random.Random(20240917)
    for _ in range(1000):
        key = generate_mail_key(rng.getrandbits(63))
        payload = rng.randbytes(rng.randint(0, 200))
        assert unseal(key.secret, seal(key.public, payload)) == payload


def test_sealed_bytes_reveal_no_plaintext():
    rng = random.Random(7)
    for _ in range(50):
        key = generate_mail_key(rng.getrandbits(63))
        payload = rng.randbytes(64)
        sealed = seal(key.public, payload)
        for i in range(len(payload) - 8 + 1):
            assert payload[i : i + 8] not in sealed


def test_fingerprint_format():
    fp = generate_mail_key(123).fingerprint
    assert len(fp) == 12
    assert set(fp) <= set("0123456789abcdefghijklmnopqrstuvwxyz")


def test_revocation_round_trip():
    keypair = generate_identity(30)
    address = derive_address(keypair.public, "user")
    record = make_revocation(keypair, address, "address", issued_at=50)
    assert verify_revocation(record, keypair.public)


def test_revocation_tampered_subject_fails():
    keypair = generate_identity(30)
    address = derive_address(keypair.public, "user")
    record = make_revocation(keypair, address, "address", issued_at=50)
    other = derive_address(generate_identity(31).public, "user")
    forged = identity.RevocationRecord(
        record.kind, other.render(), record.issued_at, record.public, record.signature
    )
    assert not verify_revocation(forged, keypair.public)


def test_key_revocation_round_trip():
    mail = generate_mail_key(30)
    record = make_revocation(mail, mail.fingerprint, "key", issued_at=9)
    assert verify_revocation(record, mail.public)


def test_key_revocation_against_identity_key_fails():
    # Wrong key class: a key revocation never verifies under an identity key.
    mail = generate_mail_key(30)
    record = make_revocation(mail, mail.fingerprint, "key", issued_at=9)
    assert not verify_revocation(record, generate_identity(30).public)


def test_revocation_subject_mismatch_rejected():
    keypair = generate_identity(30)
    other_address = derive_address(generate_identity(31).public, "user")
    with pytest.raises(RevocationError):
        make_revocation(keypair, other_address, "address", issued_at=1)
    mail = generate_mail_key(30)
    with pytest.raises(RevocationError):
        make_revocation(mail, "000000000000", "key", issued_at=1)


def test_export_import_keypair_round_trip():
    keypair = generate_identity(44)
    mail = generate_mail_key(44)
    restored_keypair, restored_mail = import_keypair(export_keypair(keypair, mail))
    assert restored_keypair == keypair
    assert restored_mail == mail


def test_mismatched_keys_never_verify():
    keypairs = [generate_identity(seed) for seed in range(40)]
    for a, b in zip(keypairs, keypairs[1:]):
        address = derive_address(a.public, "user")
        assert not verify_address(address, b.public)


def test_no_operation_links_two_identities():
    # Unlinkability surface: no public operation accepts two identity
    # keypairs, so the module cannot be used to attest a linkage.
    for name, fn in inspect.getmembers(identity, inspect.isfunction):
        if name.startswith("_"):
            continue
        annotations = [
            p.annotation for p in inspect.signature(fn).parameters.values()
        ]
        keypair_params = [
            a
            for a in annotations
            if a is IdentityKeyPair or (isinstance(a, str) and "IdentityKeyPair" in a)
        ]
        assert len(keypair_params) <= 1, f"{name} accepts two identities"


def test_derive_fingerprint_distinct():
    fingerprints = {derive_fingerprint(generate_identity(s).public) for s in range(200)}
    assert len(fingerprints) == 200
