import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dipnet.packet import (
    DipMarking,
    Longevity,
    MalformedHeader,
    Packet,
    decode_dscp,
    encode_dscp,
    int_to_ip,
    internet_checksum,
    ip_to_int,
    packet_digest,
    parse,
    serialize,
)


def words_checksum(header: bytes) -> int:
    # independent oracle: fold the 16-bit word sum by hand
    total = 0
    for (word,) in struct.iter_unpack("!H", header):
        total += word
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


@pytest.mark.parametrize("klass, longevity, code", [
    (0, Longevity.SECONDS, 1),
    (7, Longevity.DAYS, 63),
    (3, Longevity.MINUTES, 27),
])
def test_encode_examples(klass, longevity, code):
    assert encode_dscp(DipMarking(klass, longevity)) == code
    assert decode_dscp(code) == DipMarking(klass, longevity)


def test_even_codepoint_is_not_dip():
    assert decode_dscp(0b101110) is None


def test_codec_exhaustive():
    seen = set()
    for klass in range(8):
        for lon in Longevity:
            m = DipMarking(klass, lon)
            code = encode_dscp(m)
            assert code & 1 and 0 <= code < 64
            assert decode_dscp(code) == m
            seen.add(code)
    assert seen == set(range(1, 64, 2))
    assert all(decode_dscp(c) is None for c in range(0, 64, 2))


def test_marking_rejects_bad_class():
    with pytest.raises(ValueError):
        DipMarking(8, Longevity.DAYS)
    with pytest.raises(ValueError):
        decode_dscp(64)


def test_ip_text_round_trip():
    assert ip_to_int("10.1.2.3") == 0x0A010203
    assert int_to_ip(0x0A010203) == "10.1.2.3"
    with pytest.raises(ValueError):
        ip_to_int("10.1.2")


packets = st.builds(
    Packet,
    src=st.integers(0, 2**32 - 1),
    dst=st.integers(0, 2**32 - 1),
    payload=st.binary(max_size=64),
    dscp=st.integers(0, 63),
    ecn=st.integers(0, 3),
    ip_id=st.integers(0, 0xFFFF),
    dont_fragment=st.booleans(),
    more_fragments=st.booleans(),
    frag_offset=st.integers(0, 0x1FFF),
    ttl=st.integers(0, 255),
    protocol=st.integers(0, 255),
)


@given(packets)
def test_serialize_parse_round_trip(p):
    data = serialize(p)
    assert len(data) == p.total_length
    assert parse(data) == p


@given(packets)
def test_checksum_matches_word_oracle(p):
    header = bytearray(serialize(p)[:20])
    stored = struct.unpack_from("!H", header, 10)[0]
    header[10:12] = b"\0\0"
    assert words_checksum(bytes(header)) == stored
    assert internet_checksum(bytes(header)) == stored
    # a header including its checksum sums to zero
    assert words_checksum(serialize(p)[:20]) == 0


def test_parse_rejects_short_buffer():
    with pytest.raises(MalformedHeader):
        parse(bytes(19))


def test_parse_rejects_corruption():
    data = bytearray(serialize(Packet("10.0.0.1", "10.0.0.2", b"hello")))
    data[8] ^= 0xFF  # ttl, checksum no longer matches
    with pytest.raises(MalformedHeader, match="checksum"):
        parse(bytes(data))
    good = serialize(Packet("10.0.0.1", "10.0.0.2", b"hello"))
    with pytest.raises(MalformedHeader):
        parse(good + b"x")  # total_length disagrees with the buffer
    bad_version = bytearray(good)
    bad_version[0] = 0x65
    with pytest.raises(MalformedHeader):
        parse(bytes(bad_version))


def test_packet_rejects_out_of_range_fields():
    with pytest.raises(ValueError):
        Packet(1, 2, ttl=256)
    with pytest.raises(ValueError):
        Packet(1, 2, payload=bytes(70000))


class TestDigest:
    base = Packet("10.0.0.1", "10.0.0.2", b"abcdefghij", dscp=encode_dscp(DipMarking(2, Longevity.HOURS)), ip_id=9)

    def test_ttl_excluded(self):
        a = Packet(**{**self.base.__dict__, "ttl": 64})
        b = Packet(**{**self.base.__dict__, "ttl": 3})
        assert packet_digest(a) == packet_digest(b)

    def test_dscp_and_ecn_excluded(self):
        b = Packet(**{**self.base.__dict__, "dscp": 0, "ecn": 3})
        assert packet_digest(self.base) == packet_digest(b)

    def test_payload_byte_covered(self):
        payload = bytearray(self.base.payload)
        payload[3] ^= 1
        b = Packet(**{**self.base.__dict__, "payload": bytes(payload)})
        assert packet_digest(self.base) != packet_digest(b)

    def test_bytes_past_eight_not_covered(self):
        b = Packet(**{**self.base.__dict__, "payload": self.base.payload[:8] + b"ZZ"})
        assert packet_digest(self.base) == packet_digest(b)

    def test_zero_padding_changes_total_length(self):
        short = Packet("10.0.0.1", "10.0.0.2", b"12345")
        padded = Packet("10.0.0.1", "10.0.0.2", b"12345\0\0\0")
        assert padded.total_length == short.total_length + 3
        assert packet_digest(short) != packet_digest(padded)

    def test_keyed(self):
        assert len(packet_digest(self.base)) == 16
        assert packet_digest(self.base, b"k1") != packet_digest(self.base, b"k2")
