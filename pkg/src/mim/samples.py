"""CTR training rows and their line-delimited file format."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable


@dataclass(frozen=True)
class BehaviorSample:
    user_key: int
    query_key: int
    target_key: int
    behavior_keys: tuple[int, ...]
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


def format_sample(s: BehaviorSample) -> str:
    return "\t".join([str(s.user_key), str(s.query_key), str(s.target_key),
                      ",".join(str(k) for k in s.behavior_keys), str(s.label)])


def parse_sample(line: str) -> BehaviorSample:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise ValueError(f"expected 5 tab-separated fields, got {len(parts)}")
    behaviors = tuple(int(k) for k in parts[3].split(",")) if parts[3] else ()
    return BehaviorSample(int(parts[0]), int(parts[1]), int(parts[2]), behaviors, int(parts[4]))


def write_samples(path: str | Path, samples: Iterable[BehaviorSample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(format_sample(s) + "\n")


def read_samples(path: str | Path) -> list[BehaviorSample]:
    with open(path) as fh:
        return [parse_sample(line) for line in fh if line.strip()]
