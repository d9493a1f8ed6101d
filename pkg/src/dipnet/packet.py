"""IPv4 datagram model, DIP DSCP marking codec and packet digests.

A DIP marking lives entirely in the 6-bit DSCP field::

    DSCP bit  5    4    3  |  2    1  |  0
              service class | longevity | 1

The least significant bit is always set so that every DIP codepoint falls in
the RFC 2474 experimental/local-use pools (``xxxx11`` and ``xxxx01``).
"""

from __future__ import annotations

import enum
import hashlib
import ipaddress
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

HEADER_LEN = 20
MAX_TOTAL_LENGTH = 0xFFFF

_HEADER = struct.Struct("!BBHHHBBHII")
_DIGEST_FIELDS = struct.Struct("!BBHHBHBII8s")

FLAG_DONT_FRAGMENT = 0x2
FLAG_MORE_FRAGMENTS = 0x1


class MalformedHeader(ValueError):
    """Raised by :func:`parse` when a buffer is not a valid IPv4 datagram."""


class Longevity(enum.IntEnum):
    SECONDS = 0
    MINUTES = 1
    HOURS = 2
    DAYS = 3

    @classmethod
    def from_name(cls, name: str) -> "Longevity":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown longevity {name!r}") from None


@dataclass(frozen=True)
class DipMarking:
    service_class: int
    longevity: Longevity

    def __post_init__(self) -> None:
        if not 0 <= self.service_class <= 7:
            raise ValueError(f"service_class out of range: {self.service_class}")
        object.__setattr__(self, "longevity", Longevity(self.longevity))


def encode_dscp(marking: DipMarking) -> int:
    return (marking.service_class << 3) | (int(marking.longevity) << 1) | 1


def decode_dscp(dscp: int) -> Optional[DipMarking]:
    """Return the DIP marking carried by ``dscp``, or None for plain IP.

    Even codepoints are not DIP markings; packets carrying them are never
    parked.
    """
    if not 0 <= dscp <= 0x3F:
        raise ValueError(f"dscp out of range: {dscp}")
    if not dscp & 1:
        return None
    return DipMarking(dscp >> 3, Longevity((dscp >> 1) & 0b11))


def ip_to_int(address: str | int) -> int:
    if isinstance(address, int):
        if not 0 <= address <= 0xFFFFFFFF:
            raise ValueError(f"address out of range: {address}")
        return address
    return int(ipaddress.IPv4Address(address))


def int_to_ip(address: int) -> str:
    return str(ipaddress.IPv4Address(address))


@dataclass(frozen=True)
class Packet:
    """An IPv4 datagram without options.

    ``total_length`` is derived from the payload, so the length invariant
    cannot be broken by construction.
    """

    src: int
    dst: int
    payload: bytes = b""
    dscp: int = 0
    ecn: int = 0
    ip_id: int = 0
    dont_fragment: bool = False
    more_fragments: bool = False
    frag_offset: int = 0
    ttl: int = 64
    protocol: int = 17
    version: int = field(default=4, repr=False)
    header_len_words: int = field(default=5, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "src", ip_to_int(self.src))
        object.__setattr__(self, "dst", ip_to_int(self.dst))
        object.__setattr__(self, "payload", bytes(self.payload))
        _check_range("dscp", self.dscp, 0x3F)
        _check_range("ecn", self.ecn, 0x3)
        _check_range("ip_id", self.ip_id, 0xFFFF)
        _check_range("frag_offset", self.frag_offset, 0x1FFF)
        _check_range("ttl", self.ttl, 0xFF)
        _check_range("protocol", self.protocol, 0xFF)
        if self.version != 4 or self.header_len_words != 5:
            raise ValueError("only IPv4 without options is supported")
        if self.total_length > MAX_TOTAL_LENGTH:
            raise ValueError(f"datagram too long: {self.total_length} bytes")

    @property
    def total_length(self) -> int:
        return HEADER_LEN + len(self.payload)

    @property
    def is_fragment(self) -> bool:
        return self.more_fragments or self.frag_offset > 0

    @property
    def fragment_key(self) -> tuple[int, int, int, int]:
        return (self.src, self.dst, self.ip_id, self.protocol)

    @property
    def marking(self) -> Optional[DipMarking]:
        return decode_dscp(self.dscp)

    def with_marking(self, marking: DipMarking) -> "Packet":
        return replace(self, dscp=encode_dscp(marking))

    def __str__(self) -> str:
        return (
            f"{int_to_ip(self.src)} -> {int_to_ip(self.dst)} id={self.ip_id} "
            f"len={self.total_length} ttl={self.ttl} dscp={self.dscp:#04x}"
        )


def _check_range(name: str, value: int, upper: int) -> None:
    if not 0 <= value <= upper:
        raise ValueError(f"{name} out of range: {value}")


def internet_checksum(data: bytes) -> int:
    """Ones-complement sum of 16-bit big-endian words, complemented."""
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _flags_word(packet: Packet) -> int:
    flags = (FLAG_DONT_FRAGMENT if packet.dont_fragment else 0) | (
        FLAG_MORE_FRAGMENTS if packet.more_fragments else 0
    )
    return (flags << 13) | packet.frag_offset


def _pack_header(packet: Packet, checksum: int) -> bytes:
    return _HEADER.pack(
        (packet.version << 4) | packet.header_len_words,
        (packet.dscp << 2) | packet.ecn,
        packet.total_length,
        packet.ip_id,
        _flags_word(packet),
        packet.ttl,
        packet.protocol,
        checksum,
        packet.src,
        packet.dst,
    )


def serialize(packet: Packet) -> bytes:
    checksum = internet_checksum(_pack_header(packet, 0))
    return _pack_header(packet, checksum) + packet.payload


def parse(data: bytes) -> Packet:
    if len(data) < HEADER_LEN:
        raise MalformedHeader(f"need {HEADER_LEN} bytes, got {len(data)}")
    (ver_ihl, tos, total_length, ip_id, frag, ttl, proto, _csum, src, dst) = _HEADER.unpack_from(data)
    if ver_ihl >> 4 != 4:
        raise MalformedHeader(f"bad version {ver_ihl >> 4}")
    if ver_ihl & 0xF != 5:
        raise MalformedHeader(f"unsupported header length {ver_ihl & 0xF}")
    if internet_checksum(bytes(data[:HEADER_LEN])) != 0:
        raise MalformedHeader("header checksum mismatch")
    if total_length != len(data):
        raise MalformedHeader(f"total_length {total_length} != buffer length {len(data)}")
    flags = frag >> 13
    if flags & 0x4:
        raise MalformedHeader("reserved flag bit set")
    return Packet(
        src=src,
        dst=dst,
        payload=bytes(data[HEADER_LEN:]),
        dscp=tos >> 2,
        ecn=tos & 0x3,
        ip_id=ip_id,
        dont_fragment=bool(flags & FLAG_DONT_FRAGMENT),
        more_fragments=bool(flags & FLAG_MORE_FRAGMENTS),
        frag_offset=frag & 0x1FFF,
        ttl=ttl,
        protocol=proto,
    )


def packet_digest(packet: Packet, key: bytes = b"") -> bytes:
    """128-bit keyed digest over the fields that do not change in transit.

    TTL, DSCP, ECN and the header checksum are excluded, so a packet keeps its
    digest across hops and remarking.  Only the first eight payload bytes are
    covered (zero padded when shorter).
    """
    covered = _DIGEST_FIELDS.pack(
        packet.version,
        packet.header_len_words,
        packet.total_length,
        packet.ip_id,
        (FLAG_DONT_FRAGMENT if packet.dont_fragment else 0)
        | (FLAG_MORE_FRAGMENTS if packet.more_fragments else 0),
        packet.frag_offset,
        packet.protocol,
        packet.src,
        packet.dst,
        packet.payload[:8].ljust(8, b"\x00"),
    )
    return hashlib.blake2b(covered, digest_size=16, key=key[:64]).digest()
