"""Per-device timelines of kernel and transfer intervals from trace events.

Used for the overlap assertions: two intervals overlap when they share an
open span (half-open intervals; touching endpoints do not overlap).
"""

from __future__ import annotations

import json
from collections import defaultdict
from typing import Any, Optional


def emit_timeline(events: list[dict], path: Optional[str] = None) -> dict:
    """Build {device: {stream lanes with intervals}} from trace events."""
    lanes: dict = defaultdict(lambda: defaultdict(list))
    for e in events:
        if e.get("kind") not in ("kernel", "transfer"):
            continue
        lanes[e["device"]][e["stream"]].append(
            {
                "kind": e["kind"],
                "start": e["start"],
                "end": e["end"],
                "label": e.get("label", ""),
            }
        )
    timeline = {
        "devices": [
            {
                "device": device,
                "lanes": [
                    {"stream": stream, "intervals": sorted(iv, key=lambda x: (x["start"], x["end"]))}
                    for stream, iv in sorted(streams.items())
                ],
            }
            for device, streams in sorted(lanes.items())
        ]
    }
    if path:
        with open(path, "w") as fh:
            json.dump(timeline, fh, indent=2)
    return timeline


def intervals_overlap(a: dict, b: dict) -> bool:
    return a["start"] < b["end"] and b["start"] < a["end"]


def kernel_transfer_overlaps(events: list[dict]) -> list[tuple[dict, dict]]:
    """All (transfer, kernel) interval pairs overlapping on one device."""
    per_device: dict[Any, dict[str, list[dict]]] = defaultdict(lambda: {"kernel": [], "transfer": []})
    for e in events:
        if e.get("kind") in ("kernel", "transfer"):
            per_device[e["device"]][e["kind"]].append(e)
    found = []
    for device, groups in per_device.items():
        for tr in groups["transfer"]:
            for k in groups["kernel"]:
                if intervals_overlap(tr, k):
                    found.append((tr, k))
    return found


def lane_overlaps(events: list[dict]) -> list[tuple[dict, dict]]:
    """Overlapping interval pairs within a single (device, stream) lane."""
    per_lane: dict = defaultdict(list)
    for e in events:
        if e.get("kind") in ("kernel", "transfer"):
            per_lane[(e["device"], e["stream"])].append(e)
    found = []
    for lane, items in per_lane.items():
        items = sorted(items, key=lambda x: (x["start"], x["end"]))
        for a, b in zip(items, items[1:]):
            if intervals_overlap(a, b):
                found.append((a, b))
    return found
