"""Training telemetry: metrics records, JSONL logging, and spike detection.

The spike rule operates on any scalar series (loss or gradient norm): at
step t, the baseline r is the plain mean of the previous `window` values
(the current value is excluded; past spike values are included, which biases
r upward slightly during long spikes and is the main reason most detected
spikes last exactly one step). A spike starts when value > r + threshold and
ends at the first later step whose value drops below r + threshold; its
duration counts the steps from start through end - 1. A series still above
threshold when the data ends yields a censored event covering the remaining
steps.

`freeze_baseline=True` switches to an alternative rule where r is pinned at
its spike-start value until the spike ends, so a spike cannot raise its own
exit bar. Off by default; the default matches the simple trailing-mean rule.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    tokens_seen: int
    loss: float
    grad_norm: float
    param_norm: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        row = json.loads(line)
        if not isinstance(row, dict):
            raise ValueError("metrics record must be a JSON object")
        missing = {f for f in cls.__dataclass_fields__} - set(row)
        if missing:
            raise ValueError(f"metrics record missing fields: {sorted(missing)}")
        extra = set(row) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"metrics record has unknown fields: {sorted(extra)}")
        return cls(
            step=int(row["step"]),
            tokens_seen=int(row["tokens_seen"]),
            loss=float(row["loss"]),
            grad_norm=float(row["grad_norm"]),
            param_norm=float(row["param_norm"]),
            lr=float(row["lr"]),
        )


class MetricsLog:
    """Append-only JSONL metrics writer enforcing strictly increasing steps."""

    def __init__(self, path: str):
        self.path = path
        self._last_step: int | None = None
        self._fh = open(path, "w", encoding="utf-8")

    def record_step(self, record: MetricsRecord) -> None:
        if self._last_step is not None and record.step <= self._last_step:
            raise ValueError(
                f"metrics steps must be strictly increasing: {record.step} after {self._last_step}"
            )
        self._last_step = record.step
        self._fh.write(record.to_json() + "\n")
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @staticmethod
    def read(path: str) -> list[MetricsRecord]:
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(MetricsRecord.from_json(line))
        return records


def global_l2(tensors) -> float:
    """Global L2 norm of a dict or iterable of arrays, in float64."""
    values = tensors.values() if isinstance(tensors, Mapping) else tensors
    total = 0.0
    for t in values:
        total += float(np.sum(np.asarray(t, dtype=np.float64) ** 2))
    return math.sqrt(total)


@dataclass(frozen=True)
class SpikeEvent:
    #: Index into the series where the spike began (0-based).
    start_step: int
    #: Number of consecutive above-threshold steps.
    duration: int
    peak_value: float
    #: Baseline mean at the start step.
    baseline: float
    #: True when the series ended while still above threshold.
    censored: bool = False


@dataclass(frozen=True)
class SpikeScan:
    events: tuple[SpikeEvent, ...]
    window: int
    threshold: float
    #: Set when the series was too short to evaluate any step.
    too_short: bool = False


def detect_spikes(
    series: Sequence[float],
    window: int = 20,
    threshold: float = 0.1,
    freeze_baseline: bool = False,
) -> SpikeScan:
    """Scan a scalar series for spikes against a trailing-mean baseline.

    See the module docstring for the exact rule. The first `window` steps
    cannot be evaluated and never start a spike.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    values = [float(v) for v in series]
    n = len(values)
    if n < window:
        return SpikeScan(events=(), window=window, threshold=threshold, too_short=True)
    events: list[SpikeEvent] = []
    in_spike = False
    start = 0
    peak = 0.0
    start_baseline = 0.0
    for t in range(window, n):
        r = sum(values[t - window : t]) / window
        if in_spike and freeze_baseline:
            r = start_baseline
        bar = r + threshold
        v = values[t]
        if not in_spike:
            if v > bar:
                in_spike = True
                start = t
                peak = v
                start_baseline = r
        else:
            if v < bar:
                events.append(
                    SpikeEvent(
                        start_step=start,
                        duration=t - start,
                        peak_value=peak,
                        baseline=start_baseline,
                    )
                )
                in_spike = False
            else:
                peak = max(peak, v)
    if in_spike:
        events.append(
            SpikeEvent(
                start_step=start,
                duration=n - start,
                peak_value=peak,
                baseline=start_baseline,
                censored=True,
            )
        )
    return SpikeScan(events=tuple(events), window=window, threshold=threshold)


def spike_histogram(events: Iterable[SpikeEvent]) -> tuple[dict[int, int], float | None]:
    """Histogram of spike durations and the fraction lasting one step.

    Returns ({duration: count}, fraction_of_single_step_spikes); the
    fraction is None when there are no events.
    """
    counts = Counter(e.duration for e in events)
    total = sum(counts.values())
    if total == 0:
        return {}, None
    return dict(sorted(counts.items())), counts.get(1, 0) / total
