"""Append-only ledger over trusted cloud services and erasure-coded WORM storage."""

from . import core, erasure, services, verify, ring, pipeline, durability  # noqa: F401  (registers record tags)
from .core import Block, Certificate, ControlPayload, Link, MerkleTree, Triad, TxLink, decode, encode, link

__version__ = "0.1.0"

__all__ = [
    "Block", "Certificate", "ControlPayload", "Link", "MerkleTree", "Triad", "TxLink",
    "decode", "encode", "link",
]
