"""Benchmark result records and CSV/JSON writers."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Any, Optional


@dataclass
class BenchReport:
    name: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, **row: Any) -> None:
        self.rows.append(row)

    def write(self, path: str) -> None:
        if path.endswith(".json"):
            self.write_json(path)
        else:
            self.write_csv(path)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns, extrasaction="ignore")
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    def write_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump({"name": self.name, "meta": self.meta, "rows": self.rows}, fh, indent=2)

    def csv_text(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(str(row.get(c, "")) for c in self.columns))
        return "\n".join(lines) + "\n"
