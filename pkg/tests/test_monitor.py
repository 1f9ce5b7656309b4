"""Metrics log and spike detection tests.

The spike detector is checked against `run_oracle`, a two-phase brute
force: it first materializes start/continue predicates for every step from
the trailing-mean definition, then extracts maximal runs. Random series are
compared event-for-event against the streaming implementation.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desktrain.monitor import (
    MetricsLog,
    MetricsRecord,
    SpikeEvent,
    detect_spikes,
    global_l2,
    spike_histogram,
)


def make_record(step, loss=1.0):
    return MetricsRecord(
        step=step, tokens_seen=step * 128, loss=loss,
        grad_norm=0.5, param_norm=10.0, lr=3e-4,
    )


class TestMetricsRecord:
    def test_json_roundtrip(self):
        rec = make_record(7, loss=2.25)
        assert MetricsRecord.from_json(rec.to_json()) == rec

    def test_missing_and_extra_fields_rejected(self):
        rec = make_record(1)
        import json

        row = json.loads(rec.to_json())
        del row["loss"]
        with pytest.raises(ValueError, match="missing"):
            MetricsRecord.from_json(json.dumps(row))
        row = json.loads(rec.to_json())
        row["surprise"] = 1
        with pytest.raises(ValueError, match="unknown"):
            MetricsRecord.from_json(json.dumps(row))

    def test_non_object_rejected(self):
        with pytest.raises(ValueError):
            MetricsRecord.from_json("[1, 2]")


class TestMetricsLog:
    def test_write_read_roundtrip(self, tmp_path):
        path = str(tmp_path / "metrics.jsonl")
        records = [make_record(s, loss=3.0 - s * 0.1) for s in range(1, 6)]
        with MetricsLog(path) as log:
            for rec in records:
                log.record_step(rec)
        assert MetricsLog.read(path) == records

    def test_steps_must_increase(self, tmp_path):
        with MetricsLog(str(tmp_path / "m.jsonl")) as log:
            log.record_step(make_record(3))
            with pytest.raises(ValueError, match="increasing"):
                log.record_step(make_record(3))

    def test_flushed_per_record(self, tmp_path):
        path = str(tmp_path / "m.jsonl")
        log = MetricsLog(path)
        log.record_step(make_record(1))
        # Readable before close because every record is flushed.
        assert len(MetricsLog.read(path)) == 1
        log.close()


class TestGlobalL2:
    def test_dict_and_iterable(self):
        tensors = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert global_l2(tensors) == 5.0
        assert global_l2(tensors.values()) == 5.0

    def test_empty(self):
        assert global_l2({}) == 0.0


def run_oracle(series, window, threshold, freeze_baseline=False):
    """Brute-force spike extraction from first principles."""
    values = [float(v) for v in series]
    n = len(values)
    if n < window:
        return [], True

    def trailing_mean(t):
        return sum(values[t - window : t]) / window

    events = []
    t = window
    while t < n:
        r = trailing_mean(t)
        if values[t] > r + threshold:
            start, base = t, r
            end = t + 1
            while end < n:
                bar = base if freeze_baseline else trailing_mean(end)
                if values[end] < bar + threshold:
                    break
                end += 1
            events.append(
                SpikeEvent(
                    start_step=start,
                    duration=end - start,
                    peak_value=max(values[start:end]),
                    baseline=base,
                    censored=end >= n,
                )
            )
            t = end + 1
        else:
            t += 1
    return events, False


class TestSpikeExamples:
    def test_constant_series_no_spikes(self):
        scan = detect_spikes([1.0] * 50, window=20, threshold=0.1)
        assert scan.events == ()
        assert not scan.too_short

    def test_single_step_spike(self):
        series = [1.0] * 25 + [1.2] + [1.0] * 10
        scan = detect_spikes(series, window=20, threshold=0.1)
        assert scan.events == (
            SpikeEvent(start_step=25, duration=1, peak_value=1.2, baseline=1.0),
        )

    def test_plateau_spike_duration(self):
        series = [1.0] * 25 + [1.5, 1.5, 1.5] + [1.0] * 10
        scan = detect_spikes(series, window=20, threshold=0.1)
        [event] = scan.events
        assert event.start_step == 25
        assert event.duration == 3
        assert event.peak_value == 1.5
        assert event.baseline == 1.0

    def test_threshold_is_strict(self):
        # Exactly r + threshold does not start a spike.
        series = [1.0] * 25 + [1.1] + [1.0] * 10
        assert detect_spikes(series, window=20, threshold=0.1).events == ()

    def test_censored_at_series_end(self):
        series = [1.0] * 25 + [2.0, 2.0]
        [event] = detect_spikes(series, window=20, threshold=0.1).events
        assert event.censored
        assert event.duration == 2

    def test_too_short(self):
        scan = detect_spikes([1.0] * 5, window=20)
        assert scan.too_short and scan.events == ()

    def test_window_one(self):
        scan = detect_spikes([1.0, 2.0, 1.0], window=1, threshold=0.5)
        [event] = scan.events
        assert event.start_step == 1 and event.duration == 1

    def test_invalid_window(self):
        with pytest.raises(ValueError):
            detect_spikes([1.0], window=0)

    def test_shift_invariance(self):
        gen = np.random.Generator(np.random.PCG64(3))
        series = list(2.0 + 0.02 * gen.normal(size=200))
        series[60] += 0.5
        a = detect_spikes(series, window=20, threshold=0.1)
        b = detect_spikes([v + 100.0 for v in series], window=20, threshold=0.1)
        assert len(a.events) == len(b.events)
        for ea, eb in zip(a.events, b.events):
            assert ea.start_step == eb.start_step and ea.duration == eb.duration
            assert abs((eb.peak_value - ea.peak_value) - 100.0) < 1e-9
            assert abs((eb.baseline - ea.baseline) - 100.0) < 1e-9

    def test_frozen_baseline_ends_long_spikes_sooner(self):
        # A long plateau raises its own trailing mean; with the frozen
        # baseline the exit bar stays put so the spike runs at least as long.
        series = [1.0] * 25 + [1.5] * 30 + [1.0] * 10
        moving = detect_spikes(series, window=20, threshold=0.1)
        frozen = detect_spikes(series, window=20, threshold=0.1, freeze_baseline=True)
        assert frozen.events[0].duration >= moving.events[0].duration
        assert frozen.events[0].duration == 30


class TestSpikeOracle:
    @pytest.mark.parametrize("freeze", [False, True])
    def test_random_series_match_brute_force(self, freeze):
        gen = np.random.Generator(np.random.PCG64(11))
        for case in range(300):
            n = int(gen.integers(5, 120))
            window = int(gen.integers(1, 25))
            threshold = float(gen.uniform(0.01, 0.5))
            base = gen.normal(1.0, 0.05, n)
            # Inject a few spikes of random height and width.
            for _ in range(int(gen.integers(0, 4))):
                at = int(gen.integers(0, n))
                width = int(gen.integers(1, 5))
                base[at : at + width] += gen.uniform(0.05, 1.0)
            series = list(base)
            scan = detect_spikes(series, window, threshold, freeze_baseline=freeze)
            events, too_short = run_oracle(series, window, threshold, freeze)
            assert scan.too_short == too_short, case
            assert list(scan.events) == events, case

    def test_events_ordered_and_disjoint(self):
        gen = np.random.Generator(np.random.PCG64(12))
        series = list(1.0 + 0.3 * (gen.random(500) > 0.9))
        scan = detect_spikes(series, window=10, threshold=0.1)
        spans = [(e.start_step, e.start_step + e.duration) for e in scan.events]
        assert spans == sorted(spans)
        assert all(a_end <= b_start for (_, a_end), (b_start, _) in zip(spans, spans[1:]))
        assert all(not e.censored for e in scan.events[:-1])


class TestHistogram:
    def test_counts_and_single_step_fraction(self):
        events = [
            SpikeEvent(10, 1, 1.5, 1.0),
            SpikeEvent(40, 2, 1.8, 1.0),
            SpikeEvent(80, 1, 1.4, 1.0),
        ]
        counts, fraction = spike_histogram(events)
        assert counts == {1: 2, 2: 1}
        assert math.isclose(fraction, 2 / 3)

    def test_empty(self):
        counts, fraction = spike_histogram([])
        assert counts == {} and fraction is None

    def test_keys_sorted(self):
        events = [SpikeEvent(0, d, 2.0, 1.0) for d in (5, 1, 3)]
        counts, _ = spike_histogram(events)
        assert list(counts) == [1, 3, 5]


@settings(max_examples=60, deadline=None)
@given(
    values=st.lists(
        st.floats(min_value=0.0, max_value=10.0, allow_nan=False), min_size=1, max_size=60
    ),
    window=st.integers(min_value=1, max_value=10),
    threshold=st.floats(min_value=1e-3, max_value=2.0, allow_nan=False),
    freeze=st.booleans(),
)
def test_property_matches_oracle(values, window, threshold, freeze):
    scan = detect_spikes(values, window, threshold, freeze_baseline=freeze)
    events, too_short = run_oracle(values, window, threshold, freeze)
    assert scan.too_short == too_short
    assert list(scan.events) == events
