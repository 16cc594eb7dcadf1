"""Tests for the contact store: provenance, carriers, key conflicts."""

import inspect

import pytest

from peermail import addressbook
from peermail.addressbook import (
    AddressBook,
    BookError,
    KeyConflictError,
    UnknownContactError,
    format_contact_value,
    parse_contact_value,
)
from peermail.identity import (
    derive_address,
    generate_identity,
    generate_mail_key,
    make_revocation,
)

ALICE = "user@aaaaaaaaaaaa.onion"
BOB = "user@bbbbbbbbbbbb.onion"
CAROL = "user@cccccccccccc.onion"
DAVID = "user@dddddddddddd.onion"


def book():
    return AddressBook(owner=ALICE)


def test_add_contact_with_provenance():
    b = book()
    b.add_contact(CAROL, "Carol", introduced_by=BOB)
    assert b.entries[CAROL].introduced_by == [BOB]


def test_manual_then_introduced_merges():
    b = book()
    b.add_contact(CAROL, "Carol")
    b.add_contact(CAROL, introduced_by=BOB)
    assert len(b.entries) == 1
    assert b.entries[CAROL].introduced_by == [BOB]


def test_two_introducers_accumulate():
    b = book()
    b.add_contact(CAROL, "Carol", introduced_by=BOB)
    b.add_contact(CAROL, introduced_by=DAVID)
    assert b.entries[CAROL].introduced_by == [BOB, DAVID]


def test_provenance_only_grows():
    b = book()
    b.add_contact(CAROL, introduced_by=BOB)
    b.add_contact(CAROL)
    b.add_contact(CAROL, introduced_by=BOB)
    assert b.entries[CAROL].introduced_by == [BOB]


def test_adding_owner_rejected():
    with pytest.raises(BookError):
        book().add_contact(ALICE)


def test_record_key_and_read_back():
    b = book()
    b.add_contact(CAROL)
    key = generate_mail_key(1)
    fp = b.record_key(CAROL, key.public)
    assert fp == key.fingerprint
    assert b.entries[CAROL].mail_public == key.public


def test_record_same_key_twice_is_idempotent():
    b = book()
    b.add_contact(CAROL)
    key = generate_mail_key(1)
    b.record_key(CAROL, key.public)
    b.record_key(CAROL, key.public)
    assert b.entries[CAROL].fingerprint == key.fingerprint


def test_record_conflicting_key_fails():
    b = book()
    b.add_contact(CAROL)
    b.record_key(CAROL, generate_mail_key(1).public)
    with pytest.raises(KeyConflictError):
        b.record_key(CAROL, generate_mail_key(2).public)


def test_record_key_for_unknown_contact_fails():
    with pytest.raises(UnknownContactError):
        book().record_key(CAROL, generate_mail_key(1).public)


def test_expected_fingerprint_mismatch_is_conflict():
    b = book()
    b.add_contact(CAROL)
    b.expect_fingerprint(CAROL, generate_mail_key(1).fingerprint)
    with pytest.raises(KeyConflictError):
        b.record_key(CAROL, generate_mail_key(2).public)
    b.record_key(CAROL, generate_mail_key(1).public)


def test_carriers_for_introducer_rule():
    b = book()
    b.add_contact(BOB)
    b.add_contact(CAROL, introduced_by=BOB)
    assert b.carriers_for(CAROL) == [BOB]


def test_carriers_for_explicit_then_introducers():
    b = book()
    b.add_contact(BOB)
    b.add_contact(DAVID)
    b.add_contact(CAROL, introduced_by=BOB)
    b.add_carrier(CAROL, DAVID)
    assert b.carriers_for(CAROL) == [DAVID, BOB]


def test_carriers_exclude_revoked():
    b = book()
    bob_keys = generate_identity(2)
    bob_address = derive_address(bob_keys.public, "user")
    b.add_contact(bob_address.render())
    b.add_contact(CAROL, introduced_by=bob_address.render())
    record = make_revocation(bob_keys, bob_address, "address", issued_at=1)
    assert b.apply_revocation(record) == "applied"
    assert b.carriers_for(CAROL) == []


def test_carriers_exclude_destination_and_unknown():
    b = book()
    b.add_contact(CAROL, introduced_by=CAROL)
    b.add_contact(DAVID, introduced_by=BOB)  # BOB not a contact
    assert b.carriers_for(CAROL) == []
    assert b.carriers_for(DAVID) == []


def test_carriers_for_unknown_contact_errors():
    with pytest.raises(UnknownContactError):
        book().carriers_for(CAROL)


def test_add_carrier_requires_known_contact():
    b = book()
    b.add_contact(CAROL)
    with pytest.raises(UnknownContactError):
        b.add_carrier(CAROL, DAVID)


def test_key_revocation_clears_key_and_allows_new_one():
    b = book()
    b.add_contact(CAROL)
    old = generate_mail_key(1)
    b.record_key(CAROL, old.public)
    record = make_revocation(old, old.fingerprint, "key", issued_at=5)
    assert b.apply_revocation(record) == "applied"
    assert b.entries[CAROL].mail_public is None
    b.record_key(CAROL, generate_mail_key(2).public)


def test_recording_a_revoked_key_is_refused():
    b = book()
    b.add_contact(CAROL)
    old = generate_mail_key(1)
    b.record_key(CAROL, old.public)
    b.apply_revocation(make_revocation(old, old.fingerprint, "key", issued_at=5))
    with pytest.raises(KeyConflictError):
        b.record_key(CAROL, old.public)


def test_revocation_for_unknown_subject_is_pending():
    b = book()
    keys = generate_identity(3)
    address = derive_address(keys.public, "user")
    record = make_revocation(keys, address, "address", issued_at=1)
    assert b.apply_revocation(record) == "stored-pending"
    assert len(b.entries) == 0
    # Applied when the contact shows up later.
    b.add_contact(address.render())
    assert b.entries[address.render()].revoked


def test_export_import_round_trip():
    b = book()
    b.add_contact(BOB, "Bob")
    key = generate_mail_key(4)
    b.add_contact(CAROL, "Carol")
    b.record_key(CAROL, key.public)
    serialized = b.export_contacts()
    assert len(serialized) == 2
    restored = AddressBook(owner=ALICE)
    assert restored.import_contacts(serialized) == 2
    assert restored.entries[BOB].display == "Bob"
    assert restored.entries[CAROL].expected_fingerprint == key.fingerprint


def test_contact_value_round_trip():
    value = format_contact_value("Carol", CAROL, "0k4jnr1l701a")
    assert value == f"Carol <{CAROL}>; fp=0k4jnr1l701a"
    display, address, fp, direction = parse_contact_value(value)
    assert (display, address, fp, direction) == ("Carol", CAROL, "0k4jnr1l701a", None)


def test_contact_value_with_direction():
    value = format_contact_value("Bob", BOB, None, "to-list")
    display, address, fp, direction = parse_contact_value(value)
    assert (display, address, fp, direction) == ("Bob", BOB, None, "to-list")


def test_no_operation_reads_across_books():
    # Unlinkability: no public AddressBook method accepts a second book,
    # so cross-identity reads cannot happen implicitly.
    for name, fn in inspect.getmembers(AddressBook, inspect.isfunction):
        if name.startswith("_"):
            continue
        annotations = [
            p.annotation
            for p in inspect.signature(fn).parameters.values()
            if p.name != "self"
        ]
        book_params = [
            a for a in annotations if a is AddressBook or a == "AddressBook"
        ]
        assert not book_params, f"AddressBook.{name} accepts another book"
    for name, fn in inspect.getmembers(addressbook, inspect.isfunction):
        params = [
            p.annotation
            for p in inspect.signature(fn).parameters.values()
        ]
        ab_params = [a for a in params if a is AddressBook or a == "AddressBook"]
        assert len(ab_params) <= 1, f"{name} accepts two books"
