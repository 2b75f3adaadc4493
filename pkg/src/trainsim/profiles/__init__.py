"""Bundled synthetic profile tables.

Real deployments would load tables captured on the target machine; the
repository ships an A100-like table generated from the ring latency model
plus seeded noise so that everything runs without GPUs.  The file is clearly
marked synthetic and is NOT a measurement.
"""

from __future__ import annotations

import os
import random
from importlib import resources

from ..costdb import CollectiveTable, save_profile

# NVLink/NVSwitch-class all-reduce bus bandwidth and per-hop launch latency
_NVLINK_BUS_BITS = 1.9e12
_BASE_LATENCY_S = 10e-6
_PER_RANK_LATENCY_S = 2e-6

DEFAULT_PROFILE_NAME = "a100_like.json"
PROFILE_DIR_ENV = "TRAINSIM_PROFILE_DIR"


def synthetic_collective_rows(
    group_sizes: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8),
    min_bytes: int = 1 << 20,
    max_bytes: int = 1 << 30,
    seed: int = 7,
) -> list[tuple[str, int, int, float]]:
    """All-reduce latency rows over 1 MB..1024 MB payloads: ring model over
    an NVLink-class bus, +-4% seeded noise (small enough to keep the latency
    monotone in payload size)."""
    rng = random.Random(seed)
    rows = []
    for n in group_sizes:
        size = min_bytes
        while size <= max_bytes:
            ring = (8.0 * size / _NVLINK_BUS_BITS) * (2.0 * (n - 1) / n)
            base = _BASE_LATENCY_S + _PER_RANK_LATENCY_S * n
            noisy = (base + ring) * (1.0 + rng.uniform(-0.04, 0.04))
            rows.append(("allreduce", n, size, noisy))
            size *= 2
    return rows


def write_synthetic_profile(path: str, seed: int = 7) -> None:
    table = CollectiveTable(synthetic_collective_rows(seed=seed))
    save_profile(
        path,
        ops={},
        table=table,
        meta={
            "synthetic": True,
            "description": "A100-like intra-node all-reduce latencies generated "
            "from the ring latency-bandwidth model with seeded noise; not measured",
            "seed": seed,
        },
    )


def default_profile_path() -> str:
    """The bundled synthetic profile, unless TRAINSIM_PROFILE_DIR overrides it."""
    override_dir = os.environ.get(PROFILE_DIR_ENV)
    if override_dir:
        candidate = os.path.join(override_dir, DEFAULT_PROFILE_NAME)
        if os.path.exists(candidate):
            return candidate
    return str(resources.files(__package__) / DEFAULT_PROFILE_NAME)
