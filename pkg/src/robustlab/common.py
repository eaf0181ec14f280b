"""Shared plumbing: error types, config hashing, and seed-stream derivation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import Any

import numpy as np


class OracleFailure(RuntimeError):
    """An independent numerical oracle failed to converge."""


class NumericOverflow(RuntimeError):
    """A numerical procedure produced a non-finite value."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or violates its schema."""


def _canonical(obj: Any) -> Any:
    """Reduce an object to plain JSON types with deterministic ordering."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _canonical(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _canonical(obj[k]) for k in sorted(obj, key=str)}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and obj == int(obj) and abs(obj) < 2**53:
        # 1.0 and 1 hash identically; YAML/JSON round-trips must not flip the hash
        return float(obj)
    return obj


def config_hash(obj: Any) -> str:
    """Hash of the semantically meaningful content of a config.

    Key order, container type (list vs tuple), and numpy scalar types do not
    affect the hash; any value change does.
    """
    payload = json.dumps(_canonical(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# Named seed streams fan out from one root seed through SeedSequence spawn
# keys, so adding a stream never perturbs the existing ones.
SEED_STREAMS = {
    "data": 0,
    "noise": 1,
    "attack": 2,
    "init": 3,
    "train": 4,
    "eval": 5,
}


def derive_seed(root_seed: int, stream: str) -> int:
    """Derive a 63-bit child seed for a named stream from the root seed."""
    if stream not in SEED_STREAMS:
        raise ValueError(f"unknown seed stream {stream!r}; known: {sorted(SEED_STREAMS)}")
    ss = np.random.SeedSequence(root_seed, spawn_key=(SEED_STREAMS[stream],))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & (2**63 - 1))


def derive_rng(root_seed: int, stream: str) -> np.random.Generator:
    """Independent numpy Generator for a named stream."""
    ss = np.random.SeedSequence(root_seed, spawn_key=(SEED_STREAMS[stream],))
    return np.random.default_rng(ss)
