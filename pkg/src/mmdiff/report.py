"""MetricReport: named scalars plus the metadata needed to replay a run."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path


def _enc(v):
    # JSON has no inf/nan literals that every reader accepts; keep them as strings
    if isinstance(v, float) and not math.isfinite(v):
        return {"float": repr(v)}
    return v


def _dec(v):
    if isinstance(v, dict) and set(v) == {"float"}:
        return float(v["float"])
    return v


@dataclass
class MetricReport:
    command: str
    metrics: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    checkpoints: dict[str, str] = field(default_factory=dict)   # role -> content hash
    dataset: str = ""                                            # dataset spec hash
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {"command": self.command, "metrics": {k: _enc(float(v)) for k, v in self.metrics.items()},
             "seed": self.seed, "checkpoints": self.checkpoints, "dataset": self.dataset,
             "config": self.config, "extra": self.extra}
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> MetricReport:
        d = json.loads(text)
        d["metrics"] = {k: _dec(v) for k, v in d["metrics"].items()}
        return cls(**d)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> MetricReport:
        return cls.from_json(Path(path).read_text())
