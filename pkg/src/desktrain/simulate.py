"""Failure-and-recovery simulation over a checkpointed training session.

The simulator drives any object satisfying `Trainable` (the real training
session or a stub) on a logical wall clock where each step costs
`step_wall_time` seconds. Scripted failures fire after their step completes
and before any checkpoint would be written at that step, which is the worst
case: work since the last checkpoint is always lost. Recovery restores the
last checkpoint bundle, pays a recovery delay, and replays.

Time accounting: a step's wall time counts as productive the first time that
step number is reached, and as recomputation on every replay. Recovery
delays accumulate separately. The uptime fraction is
productive / (productive + recomputation + recovery); every simulated second
lands in exactly one bucket.

Checkpoints round-trip through the real binary codec on every snapshot and
restore, so the simulation also exercises serialization fidelity.

`all_reduce_mean` lives here too: the deterministic stand-in for a
data-parallel gradient reduction, averaging in float64 in fixed rank order
and optionally rounding the result once per entry.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .bf16 import RoundingMode, round_bf16_array
from .checkpoint import CheckpointBundle, bundle_from_bytes, bundle_to_bytes
from .monitor import MetricsRecord

RECOVERY_MODES = ("auto", "manual", "none")


@dataclass(frozen=True)
class FailureEvent:
    """A fault striking one rank after the given step completes."""

    step: int
    rank: int = 0


@dataclass(frozen=True)
class SimConfig:
    steps_total: int
    checkpoint_interval: int
    failures: tuple[FailureEvent, ...] = ()
    recovery_mode: str = "auto"
    num_ranks: int = 1
    step_wall_time: float = 1.0
    recovery_delay_auto: float = 50.0
    recovery_delay_manual: float = 600.0

    def __post_init__(self) -> None:
        if self.steps_total < 1 or self.checkpoint_interval < 1:
            raise ValueError("steps_total and checkpoint_interval must be >= 1")
        if self.num_ranks < 1:
            raise ValueError("num_ranks must be >= 1")
        if self.recovery_mode not in RECOVERY_MODES:
            raise ValueError(
                f"recovery_mode must be one of {RECOVERY_MODES}, got {self.recovery_mode!r}"
            )
        if self.step_wall_time <= 0:
            raise ValueError("step_wall_time must be positive")
        if self.recovery_delay_auto < 0 or self.recovery_delay_manual < 0:
            raise ValueError("recovery delays must be non-negative")
        for ev in self.failures:
            if not 1 <= ev.step <= self.steps_total:
                raise ValueError(f"failure step {ev.step} outside [1, {self.steps_total}]")
            if ev.rank < 0:
                raise ValueError("failure rank must be non-negative")
        object.__setattr__(self, "failures", tuple(sorted(self.failures, key=lambda e: e.step)))

    @property
    def recovery_delay(self) -> float:
        return self.recovery_delay_auto if self.recovery_mode == "auto" else self.recovery_delay_manual


@dataclass(frozen=True)
class UptimeReport:
    productive_time: float
    recomputation_time: float
    recovery_time: float
    failures: int
    steps_completed: int

    @property
    def total_time(self) -> float:
        return self.productive_time + self.recomputation_time + self.recovery_time

    @property
    def uptime_fraction(self) -> float:
        total = self.total_time
        return self.productive_time / total if total > 0 else 1.0

    def to_json_dict(self) -> dict:
        return {
            "productive_time": self.productive_time,
            "recomputation_time": self.recomputation_time,
            "recovery_time": self.recovery_time,
            "total_time": self.total_time,
            "uptime_fraction": self.uptime_fraction,
            "failures": self.failures,
            "steps_completed": self.steps_completed,
        }


class SimulationAborted(RuntimeError):
    """Raised when a failure strikes with recovery_mode "none".

    Carries the partial uptime report and the metric records accumulated up
    to the abort.
    """

    def __init__(self, report: UptimeReport, records: list[MetricsRecord]):
        super().__init__(
            f"failure at step {report.steps_completed} with no recovery configured"
        )
        self.report = report
        self.records = records


class Trainable(Protocol):
    step: int
    records: list[MetricsRecord]

    def run_step(self) -> MetricsRecord: ...

    def snapshot(self) -> CheckpointBundle: ...

    def restore(self, bundle: CheckpointBundle) -> None: ...


def run_sim(config: SimConfig, session: Trainable):
    """Run `session` to `steps_total` under the scripted failure schedule.

    Returns (final params or None, UptimeReport, metric records). Events
    sharing a step number fire one per execution of that step: the first on
    the original pass, the next when replay reaches the step again.
    """
    pending = deque(config.failures)
    snap = bundle_to_bytes(session.snapshot())
    productive = 0.0
    recompute = 0.0
    recovery = 0.0
    fired = 0
    furthest = session.step
    while session.step < config.steps_total:
        session.run_step()
        s = session.step
        if s > furthest:
            productive += config.step_wall_time
            furthest = s
        else:
            recompute += config.step_wall_time
        if pending and pending[0].step == s:
            pending.popleft()
            fired += 1
            if config.recovery_mode == "none":
                report = UptimeReport(
                    productive_time=productive,
                    recomputation_time=recompute,
                    recovery_time=recovery,
                    failures=fired,
                    steps_completed=s,
                )
                raise SimulationAborted(report, list(session.records))
            recovery += config.recovery_delay
            session.restore(bundle_from_bytes(snap))
        elif s % config.checkpoint_interval == 0:
            snap = bundle_to_bytes(session.snapshot())
    report = UptimeReport(
        productive_time=productive,
        recomputation_time=recompute,
        recovery_time=recovery,
        failures=fired,
        steps_completed=session.step,
    )
    return getattr(session, "params", None), report, list(session.records)


def random_failure_schedule(
    seed: int,
    steps_total: int,
    num_ranks: int,
    count: int | None = None,
    mtbf_steps: float | None = None,
) -> tuple[FailureEvent, ...]:
    """Seeded random failure schedule.

    Either draw exactly `count` failure steps uniformly (with repetition
    allowed), or draw one Bernoulli trial per step with rate
    1 / mtbf_steps. Exactly one of the two must be given.
    """
    if (count is None) == (mtbf_steps is None):
        raise ValueError("provide exactly one of count or mtbf_steps")
    rng = np.random.Generator(np.random.PCG64(seed))
    if count is not None:
        if count < 0:
            raise ValueError("count must be >= 0")
        steps = sorted(int(s) for s in rng.integers(1, steps_total + 1, size=count))
    else:
        if mtbf_steps <= 0:
            raise ValueError("mtbf_steps must be positive")
        p = min(1.0, 1.0 / mtbf_steps)
        steps = [s for s in range(1, steps_total + 1) if rng.random() < p]
    return tuple(FailureEvent(step=s, rank=int(rng.integers(num_ranks))) for s in steps)


def all_reduce_mean(
    shards: list[dict[str, np.ndarray]],
    rounding: RoundingMode | None = None,
) -> dict[str, np.ndarray]:
    """Entrywise mean over per-rank tensor dicts, in fixed rank order.

    The sum runs in float64; with a rounding mode, each entry of the mean is
    rounded exactly once, as if the reduction output were stored to bf16.
    """
    if not shards:
        raise ValueError("all_reduce_mean needs at least one shard")
    names = set(shards[0])
    for i, shard in enumerate(shards[1:], start=1):
        if set(shard) != names:
            raise ValueError(f"shard {i} tensor names disagree with shard 0")
    out = {}
    for name in shards[0]:
        acc = np.array(shards[0][name], dtype=np.float64, copy=True)
        for shard in shards[1:]:
            acc += shard[name]
        mean = acc / len(shards)
        out[name] = mean if rounding is None else round_bf16_array(mean, rounding)
    return out
