"""Environment and file-based configuration.

Recognized environment variables:

    HRT_STREAMS            compute streams per device (default 5)
    HRT_PINNED_POOL_MB     page-locked staging pool size (default 64)
    HRT_DEDICATED_THREADS  0/1, run one progress thread per device (wall clock only)
    HRT_TRANSPORT          loopback | tcp
    HRT_RANKS              world size
    HRT_RANK               this process' rank (tcp runs)
    HRT_PEERS              comma-separated host:port list, one per rank (tcp runs)
    HRT_RECV_CACHE_MB      per-device receive cache size (default 16)
    HRT_DEVICE_AWARE       0/1, payloads sourced/sunk directly from device memory
"""

from __future__ import annotations

import json
import os
from typing import Any

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - fallback for 3.10
    import tomli as tomllib


def env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return default
    return int(raw)


def env_bool(name: str, default: bool = False) -> bool:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return default
    return raw.strip().lower() not in ("0", "false", "no", "")


def default_compute_streams() -> int:
    return env_int("HRT_STREAMS", 5)


def default_pinned_pool_bytes() -> int:
    return env_int("HRT_PINNED_POOL_MB", 64) * 1024 * 1024


def default_recv_cache_bytes() -> int:
    return env_int("HRT_RECV_CACHE_MB", 16) * 1024 * 1024


def load_device_config(path: str) -> list[dict[str, Any]]:
    """Read a device-registry description from a TOML or JSON file.

    The file holds a list of device entries under the key ``devices``:
    ``{type, capacity_mb, latency_us, bandwidth_gbps, clock}``.
    """
    with open(path, "rb") as fh:
        if path.endswith(".toml"):
            data = tomllib.load(fh)
        else:
            data = json.load(fh)
    devices = data.get("devices", data if isinstance(data, list) else [])
    if not isinstance(devices, list):
        raise ValueError(f"{path}: expected a list of device entries")
    return devices
