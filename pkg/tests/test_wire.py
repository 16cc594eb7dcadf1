"""Tests for envelope serialization, signing regions, and the reply path."""

import random
from pathlib import Path

import pytest

from peermail import wire
from peermail.identity import MailAddress
from peermail.wire import (
    Envelope,
    NotAReplyPath,
    ParseError,
    assign_message_id,
    countersign_bytes,
    decode_reply_path,
    encode_reply_path,
    message_hash,
    parse,
    replace_header,
    serialize,
    signing_bytes,
)

TESTDATA = Path(__file__).parent / "testdata"


def minimal():
    return Envelope(
        headers=[
            ("From", "user@aaaaaaaaaaaa.onion"),
            ("To", "user@bbbbbbbbbbbb.onion"),
            ("Message-ID", "0123456789abcdef@aaaaaaaaaaaa"),
        ]
    )


def test_minimal_round_trip():
    env = minimal()
    assert parse(serialize(env)) == env


def test_spaces_in_values_preserved():
    env = minimal()
    env.headers.append(("Contact", "  padded value  "))
    data = serialize(env)
    assert b"Contact:   padded value  \r\n" in data
    assert parse(data).get("Contact") == "  padded value  "


def test_serialize_format():
    env = minimal()
    env.body = b"body bytes"
    data = serialize(env)
    assert data.endswith(b"\r\n\r\nbody bytes")
    assert data.startswith(b"From: user@aaaaaaaaaaaa.onion\r\n")


def _random_envelope(rng):
    headers = [
        ("From", f"user@{rng.choice('abcdefgh') * 12}.onion"),
        ("To", f"user@{rng.choice('ijklmnop') * 12}.onion"),
        ("Message-ID", f"{rng.getrandbits(64):016x}@{rng.choice('qrst') * 12}"),
    ]
    for _ in range(rng.randint(0, 5)):
        name = "X-" + "".join(rng.choice("abcdefghij") for _ in range(6))
        value = "".join(
            rng.choice("abc def ghi\tjkl:= mno") for _ in range(rng.randint(0, 40))
        )
        headers.append((name, value))
    body = rng.randbytes(rng.randint(0, 300))
    return Envelope(headers=headers, body=body)


def test_500_random_envelopes_round_trip():
    rng = random.Random(501)
    for _ in range(500):
        env = _random_envelope(rng)
        assert parse(serialize(env)) == env


def test_serialize_then_parse_then_serialize_is_stable():
    rng = random.Random(77)
    for _ in range(50):
        data = serialize(_random_envelope(rng))
        assert serialize(parse(data)) == data


def test_duplicate_from_names_line():
    data = b"From: a\r\nFrom: b\r\nTo: c\r\nMessage-ID: d\r\n\r\n"
    with pytest.raises(ParseError) as err:
        parse(data)
    assert err.value.line == 2


def test_missing_message_id_rejected():
    data = b"From: a\r\nTo: c\r\n\r\n"
    with pytest.raises(ParseError, match="Message-ID"):
        parse(data)


def test_bare_lf_names_line():
    data = b"From: a\r\nTo: c\nMessage-ID: d\r\n\r\n"
    with pytest.raises(ParseError) as err:
        parse(data)
    assert err.value.line == 2


def test_non_utf8_value_names_line():
    data = b"From: a\r\nTo: \xff\xfe\r\nMessage-ID: d\r\n\r\n"
    with pytest.raises(ParseError) as err:
        parse(data)
    assert err.value.line == 2


def test_missing_separator_rejected():
    with pytest.raises(ParseError, match="separator"):
        parse(b"From a\r\n\r\n")


def test_signing_bytes_ignore_to():
    env = minimal()
    env.body = b"payload"
    readdressed = replace_header(env, "To", "user@zzzzzzzzzzzz.onion")
    assert signing_bytes(env) == signing_bytes(readdressed)
    assert message_hash(env) == message_hash(readdressed)


def test_signing_bytes_cover_body():
    env = minimal()
    other = Envelope(headers=list(env.headers), body=b"x")
    assert signing_bytes(env) != signing_bytes(other)


def test_signing_bytes_golden_vector_with_list_headers():
    # Frozen from the reference run; checks the fixed header order
    # From, For, Date, Message-ID, List, Prev-Hash.
    env = Envelope(
        headers=[
            ("To", "user@aaaaaaaaaaaa.onion"),
            ("Prev-Hash", "0" * 64),
            ("From", "user@bbbbbbbbbbbb.onion"),
            ("List", "xyz"),
            ("Date", "42"),
            ("Message-ID", "0123456789abcdef@bbbbbbbbbbbb"),
        ],
        body=b"list body",
    )
    expected = (
        b"From: user@bbbbbbbbbbbb.onion\r\n"
        b"Date: 42\r\n"
        b"Message-ID: 0123456789abcdef@bbbbbbbbbbbb\r\n"
        b"List: xyz\r\n"
        b"Prev-Hash: " + b"0" * 64 + b"\r\n"
        b"\r\n"
        b"list body"
    )
    assert signing_bytes(env) == expected
    assert (
        message_hash(env)
        == "40a22b3c45c12e6f631ce23517160fb2718d22af14b4713fab0ae58255fc00ef"
    )


def test_message_hash_stable_and_sensitive():
    env = minimal()
    assert message_hash(env) == message_hash(minimal())
    other = Envelope(headers=list(env.headers), body=b"different")
    assert message_hash(env) != message_hash(other)
    assert len(message_hash(env)) == 64


def test_countersign_bytes_appends_author_signature():
    env = minimal()
    signature = bytes(range(64))
    signed = wire.add_header(
        env, "Signature", wire.make_signature_value("0" * 12, signature)
    )
    assert countersign_bytes(signed) == signing_bytes(signed) + signature


def test_countersign_bytes_requires_signature():
    with pytest.raises(ValueError):
        countersign_bytes(minimal())


def test_countersign_bytes_changes_with_signature():
    env = minimal()
    a = wire.add_header(env, "Signature", wire.make_signature_value("0" * 12, b"\x01" * 64))
    b = wire.add_header(env, "Signature", wire.make_signature_value("0" * 12, b"\x02" * 64))
    assert countersign_bytes(a) != countersign_bytes(b)


def test_assign_message_id_format_and_determinism():
    base = Envelope(
        headers=[
            ("From", "user@wxu6pped7wv3.onion"),
            ("To", "user@2gqisa2z13oj.onion"),
            ("For", "user@2gqisa2z13oj.onion"),
            ("Date", "7"),
        ],
        body=b"hello",
    )
    env = assign_message_id(base, "wxu6pped7wv3")
    assert env.get("Message-ID") == "23deb9912738805e@wxu6pped7wv3"
    with pytest.raises(ValueError):
        assign_message_id(env, "wxu6pped7wv3")


def test_reply_path_paper_vector():
    inner = MailAddress("user", "wxu6pped7wv3")
    assert encode_reply_path(inner, "bobsmail.net") == "user-wxu6pped7wv3@bobsmail.net"
    assert decode_reply_path("user-wxu6pped7wv3@bobsmail.net") == inner


def test_decode_reply_path_rejects_plain_external_address():
    with pytest.raises(NotAReplyPath):
        decode_reply_path("david@googlemail.com")


def test_decode_reply_path_rejects_bad_label_alphabet():
    # '1' is outside the label alphabet.
    with pytest.raises(NotAReplyPath):
        decode_reply_path("user-wxu1pped7wv3@bobsmail.net")


def test_decode_reply_path_rejects_missing_dash():
    with pytest.raises(NotAReplyPath):
        decode_reply_path("userxwxu6pped7wv3@bobsmail.net")


def test_reply_path_round_trip_many():
    rng = random.Random(99)
    alphabet = "abcdefghijklmnopqrstuvwxyz234567"
    for _ in range(200):
        localpart = "".join(
            rng.choice("abcdefghijklmnopqrstuvwxyz0123456789")
            for _ in range(rng.randint(1, 32))
        )
        label = "".join(rng.choice(alphabet) for _ in range(12))
        inner = MailAddress(localpart, label)
        host = rng.choice(["bobsmail.net", "relay.example", "mx1.a.b"])
        assert decode_reply_path(encode_reply_path(inner, host)) == inner


def test_golden_vector_files_round_trip():
    for path in sorted(TESTDATA.glob("*.eml")):
        data = path.read_bytes()
        env = parse(data)
        assert serialize(env) == data


def test_golden_vector_hash_frozen():
    env = parse((TESTDATA / "list-post.eml").read_bytes())
    assert message_hash(env) == (TESTDATA / "list-post.hash").read_text().strip()
