"""Deterministic seed derivation: every task seed is the CRC32 of its
task name XORed with the root seed, so parallel workers and reruns agree."""

from __future__ import annotations

import zlib


def derive_seed(root, *parts):
    name = "/".join(str(p) for p in parts)
    return (int(root) ^ zlib.crc32(name.encode("utf-8"))) & 0xFFFFFFFF
