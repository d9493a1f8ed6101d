"""Disruption-tolerant IP forwarding: a per-node engine and a deterministic simulator."""

from .dupfilter import CountingBloomFilter, dimension
from .engine import DipNode, DropReason, NodeConfig, Verdict, VerdictKind
from .lifetime import LifetimeWheel
from .packet import (
    DipMarking,
    Longevity,
    MalformedHeader,
    Packet,
    decode_dscp,
    encode_dscp,
    packet_digest,
    parse,
    serialize,
)
from .prefix import Prefix, PrefixTrie
from .routing import RouteTable, TopologyEvent
from .scenario import InvalidScenario, Scenario
from .sim import Simulator, build_data_mule, simulate
from .store import DisruptionStore, HeadDrop, Red, TailDrop

__version__ = "0.1.0"

__all__ = [
    "CountingBloomFilter",
    "DipMarking",
    "DipNode",
    "DisruptionStore",
    "DropReason",
    "HeadDrop",
    "InvalidScenario",
    "LifetimeWheel",
    "Longevity",
    "MalformedHeader",
    "NodeConfig",
    "Packet",
    "Prefix",
    "PrefixTrie",
    "Red",
    "RouteTable",
    "Scenario",
    "Simulator",
    "TailDrop",
    "TopologyEvent",
    "Verdict",
    "VerdictKind",
    "build_data_mule",
    "decode_dscp",
    "dimension",
    "encode_dscp",
    "packet_digest",
    "parse",
    "serialize",
    "simulate",
]
