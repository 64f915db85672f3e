"""Satellite-broadcast blockchain protocol: sans-IO node, simulator and harness."""

from .harness import estimate_effective_tps, success_probability, throughput_bounds
from .node import Node, NodeConfig
from .proto import Block, KeyTable, Ledger, decode, encode, verify_chain
from .sim import InvariantViolation, ScenarioConfig, Simulation, run

__version__ = "0.1.0"

__all__ = [
    "Block", "InvariantViolation", "KeyTable", "Ledger", "Node", "NodeConfig",
    "ScenarioConfig", "Simulation", "decode", "encode", "estimate_effective_tps",
    "run", "success_probability", "throughput_bounds", "verify_chain",
]
