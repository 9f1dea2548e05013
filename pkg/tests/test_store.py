"""Metric store: ingestion, windows, statistics, histograms, downsampling."""

import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterscape.model import (
    EmptySeriesError,
    MetricSample,
    MetricSeries,
    NotFoundError,
    ParseError,
    StatisticType,
    ValidationError,
)
from clusterscape.store import (
    MetricStore,
    build_histogram,
    compute_statistic,
    downsample,
    parse_sample_line,
)


def make_series(values, start=1000, step=5000, gpu="n1g0", metric="power_watts"):
    ts = [start + i * step for i in range(len(values))]
    return MetricSeries(gpu, metric, ts, [float(v) for v in values])


# -- oracles ------------------------------------------------------------------


def percentile_oracle(values, p):
    """Sort-and-interpolate, written independently of the store path."""
    s = sorted(values)
    n = len(s)
    pos = p / 100.0 * (n - 1)
    lo = math.floor(pos)
    hi = math.ceil(pos)
    frac = pos - lo
    return s[lo] * (1.0 - frac) + s[hi] * frac


def window_oracle(series, t0, t1):
    return [(t, v) for t, v in series.points if t0 <= t <= t1]


def histogram_count_oracle(values, edges):
    counts = [0] * (len(edges) - 1)
    for v in values:
        if v < edges[0] or v > edges[-1]:
            continue
        for b in range(len(counts)):
            last = b == len(counts) - 1
            if edges[b] <= v < edges[b + 1] or (last and v == edges[-1]):
                counts[b] += 1
                break
    return counts


# -- ingestion ----------------------------------------------------------------


class TestIngest:
    def test_single_line_appends(self):
        store = MetricStore()
        store.ingest_sample(
            '{"ts":1000,"gpu":"n1g0","metric":"utilization_pct","value":85.0}'
        )
        s = store.query_series("n1g0", "utilization_pct", 0, 2000)
        assert list(s.points) == [(1000, 85.0)]

    def test_non_numeric_value_is_parse_error(self):
        store = MetricStore()
        with pytest.raises(ParseError):
            store.ingest_sample(
                '{"ts":1000,"gpu":"n1g0","metric":"utilization_pct","value":"high"}'
            )

    def test_parse_error_carries_byte_offset(self):
        store = MetricStore()
        with pytest.raises(ParseError) as err:
            store.ingest_sample("{not json", offset=347)
        assert err.value.offset == 347
        assert "347" in str(err.value)

    def test_unknown_metric_rejected(self):
        with pytest.raises(ValidationError, match="unknown metric"):
            MetricStore().ingest_sample(
                '{"ts":1000,"gpu":"g","metric":"fan_rpm","value":1.0}'
            )

    def test_non_finite_rejected(self):
        with pytest.raises(ParseError):
            MetricStore().ingest_sample(
                '{"ts":1000,"gpu":"g","metric":"power_watts","value":NaN}'
            )

    def test_extra_keys_rejected(self):
        with pytest.raises(ParseError, match="exactly"):
            parse_sample_line(
                '{"ts":1,"gpu":"g","metric":"power_watts","value":1,"x":2}'
            )

    def test_out_of_range_utilization_rejected(self):
        with pytest.raises(ValidationError, match="out of range"):
            MetricStore().ingest_sample(
                '{"ts":1000,"gpu":"g","metric":"utilization_pct","value":120.0}'
            )

    def test_out_of_order_within_window_inserted(self):
        store = MetricStore()
        for ts in (100_000, 160_000, 130_000):
            store.ingest_sample(
                f'{{"ts":{ts},"gpu":"g","metric":"power_watts","value":{ts / 1000}}}'
            )
        s = store.query_series("g", "power_watts", 0, 10**9)
        assert s.timestamps == [100_000, 130_000, 160_000]

    def test_too_old_sample_rejected(self):
        store = MetricStore()
        store.ingest_sample('{"ts":200000,"gpu":"g","metric":"power_watts","value":1}')
        with pytest.raises(ValidationError, match="reorder window"):
            store.ingest_sample(
                '{"ts":100000,"gpu":"g","metric":"power_watts","value":1}'
            )

    def test_duplicate_timestamp_rejected(self):
        store = MetricStore()
        store.ingest_sample('{"ts":1000,"gpu":"g","metric":"power_watts","value":1}')
        with pytest.raises(ValidationError, match="duplicate"):
            store.ingest_sample(
                '{"ts":1000,"gpu":"g","metric":"power_watts","value":2}'
            )

    def test_replay_matches_sort_then_build_oracle(self):
        rng = random.Random(7)
        gpus = [f"n{i}g{j}" for i in range(1, 4) for j in range(4)]
        metrics = ["utilization_pct", "power_watts", "temperature_c"]
        per_key = {}
        lines = []
        for gpu in gpus:
            for metric in metrics:
                ts_list = [1000 + i * 5000 + rng.randint(0, 999) for i in range(280)]
                per_key[(gpu, metric)] = ts_list
        queues = []
        for (gpu, metric), ts_list in per_key.items():
            # permute within 12-wide blocks: reorder never exceeds 60 s
            order = []
            for b in range(0, len(ts_list), 12):
                block = list(range(b, min(b + 12, len(ts_list))))
                rng.shuffle(block)
                order.extend(block)
            queues.append(
                [
                    (gpu, metric, ts_list[i], round(rng.uniform(0, 100), 3))
                    for i in order
                ]
            )
        # random merge across keys, preserving each key's arrival order
        arrival = []
        cursors = [0] * len(queues)
        remaining = sum(len(q) for q in queues)
        while remaining:
            k = rng.randrange(len(queues))
            if cursors[k] < len(queues[k]):
                arrival.append(queues[k][cursors[k]])
                cursors[k] += 1
                remaining -= 1
        seen = {}
        for gpu, metric, ts, v in arrival:
            seen.setdefault((gpu, metric), []).append((ts, v))
        store = MetricStore()
        n = 0
        for gpu, metric, ts, v in arrival:
            line = json.dumps({"ts": ts, "gpu": gpu, "metric": metric, "value": v})
            store.ingest_sample(line)
            n += 1
        assert n == len(gpus) * len(metrics) * 280
        for (gpu, metric), pts in seen.items():
            expected = sorted(pts)  # oracle: sort then build
            got = list(store.query_series(gpu, metric, 0, 10**12).points)
            assert got == expected

    def test_retention_ring_evicts(self):
        store = MetricStore(retention_ms=10_000)
        for i in range(10):
            store.append(MetricSample(1000 + i * 5000, "g", "power_watts", 1.0))
        s = store.query_series("g", "power_watts", 0, 10**9)
        assert s.timestamps[0] >= s.timestamps[-1] - 10_000

    def test_spill_file_round_trips(self, tmp_path):
        path = tmp_path / "spill.ndjson"
        with path.open("w") as fh:
            store = MetricStore(spill=fh)
            store.append(MetricSample(1000, "g", "power_watts", 12.5))
        rebuilt = MetricStore()
        for line in path.read_text().splitlines():
            rebuilt.ingest_sample(line)
        assert list(rebuilt.query_series("g", "power_watts", 0, 10**9).points) == [
            (1000, 12.5)
        ]


class TestQuerySeries:
    def _store(self, n=1000):
        store = MetricStore()
        rng = random.Random(3)
        for i in range(n):
            store.append(
                MetricSample(1000 + i * 1000, "g", "power_watts", rng.uniform(0, 400))
            )
        return store

    def test_full_range_is_identity(self):
        store = self._store(50)
        full = store.query_series("g", "power_watts", 0, 10**12)
        assert len(full) == 50

    def test_point_window(self):
        store = self._store(10)
        s = store.query_series("g", "power_watts", 5000, 5000)
        assert s.timestamps == [5000]

    def test_unknown_gpu_not_found(self):
        with pytest.raises(NotFoundError):
            self._store(5).query_series("nope", "power_watts", 0, 1)

    def test_reversed_window_rejected(self):
        with pytest.raises(ValidationError):
            self._store(5).query_series("g", "power_watts", 10, 5)

    def test_random_windows_match_scan_oracle(self):
        store = self._store(1000)
        full = store.query_series("g", "power_watts", 0, 10**12)
        rng = random.Random(11)
        for _ in range(200):
            a = rng.randint(0, 1_200_000)
            b = rng.randint(0, 1_200_000)
            t0, t1 = min(a, b), max(a, b)
            got = list(store.query_series("g", "power_watts", t0, t1).points)
            assert got == window_oracle(full, t0, t1)


class TestStatistics:
    def test_constant_series(self):
        s = make_series([7, 7, 7])
        for stat in (
            StatisticType("min"),
            StatisticType("max"),
            StatisticType("mean"),
            StatisticType("median"),
            StatisticType("percentile", 95),
        ):
            assert compute_statistic(s, stat) == 7.0

    def test_odd_median(self):
        assert compute_statistic(make_series([1, 2, 3]), StatisticType("median")) == 2.0

    def test_percentile_interpolation(self):
        s = make_series(range(10, 101, 10))  # 10..100
        got = compute_statistic(s, StatisticType("percentile", 95))
        assert got == pytest.approx(percentile_oracle(s.values, 95), abs=1e-12)
        assert got == pytest.approx(95.5, abs=1e-12)

    def test_empty_series_raises(self):
        with pytest.raises(EmptySeriesError):
            compute_statistic(make_series([]), StatisticType("mean"))

    def test_random_series_match_oracle(self):
        rng = random.Random(5)
        for _ in range(300):
            n = rng.randint(1, 200)
            vals = [rng.uniform(-50, 450) for _ in range(n)]
            s = make_series(vals)
            assert compute_statistic(s, StatisticType("min")) == min(vals)
            assert compute_statistic(s, StatisticType("max")) == max(vals)
            assert compute_statistic(s, StatisticType("mean")) == pytest.approx(
                sum(vals) / n, rel=1e-12
            )
            for p in (5, 50, 95, 99):
                assert compute_statistic(
                    s, StatisticType("percentile", p)
                ) == pytest.approx(percentile_oracle(vals, p), abs=1e-9)

    @given(
        st.lists(
            st.floats(min_value=0, max_value=400, allow_nan=False), min_size=1,
            max_size=80,
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_min_le_median_le_max(self, vals):
        s = make_series(vals)
        lo = compute_statistic(s, StatisticType("min"))
        mid = compute_statistic(s, StatisticType("median"))
        hi = compute_statistic(s, StatisticType("max"))
        assert lo <= mid <= hi

    @given(
        st.lists(
            st.floats(min_value=0, max_value=400, allow_nan=False), min_size=2,
            max_size=50,
        ),
        st.lists(
            st.floats(min_value=0.5, max_value=99.5, allow_nan=False), min_size=2,
            max_size=6,
        ),
    )
    @settings(max_examples=60, deadline=None)
    def test_percentile_monotone_in_p(self, vals, ps):
        s = make_series(vals)
        ps = sorted(ps)
        got = [compute_statistic(s, StatisticType("percentile", p)) for p in ps]
        assert all(a <= b + 1e-12 for a, b in zip(got, got[1:]))

    def test_median_equals_percentile_50(self):
        rng = random.Random(2)
        for _ in range(50):
            vals = [rng.uniform(0, 100) for _ in range(rng.randint(1, 30))]
            s = make_series(vals)
            assert compute_statistic(s, StatisticType("median")) == compute_statistic(
                s, StatisticType("percentile", 50)
            )


class TestHistogram:
    def test_point_mass(self):
        s = make_series([50.0] * 100, metric="utilization_pct")
        h = build_histogram(s, bins=10, domain=(0, 100))
        assert h.mass[5] == 1.0
        assert sum(h.mass) == pytest.approx(1.0, abs=1e-9)

    def test_uniform_integers(self):
        s = make_series(list(range(100)), metric="utilization_pct")
        h = build_histogram(s, bins=10, domain=(0, 100))
        assert all(m == pytest.approx(0.10, abs=1e-12) for m in h.mass)

    def test_right_edge_inclusive(self):
        s = make_series([100.0], metric="utilization_pct")
        h = build_histogram(s, bins=10, domain=(0, 100))
        assert h.mass[-1] == 1.0

    def test_empty_series_flag(self):
        h = build_histogram(make_series([]), bins=5, domain=(0, 1))
        assert h.empty and sum(h.mass) == 0.0

    def test_default_domain_for_utilization(self):
        s = make_series([10, 20], metric="utilization_pct")
        h = build_histogram(s, bins=4)
        assert h.bin_edges[0] == 0.0 and h.bin_edges[-1] == 100.0

    def test_gaussianish_matches_counting_oracle(self):
        rng = random.Random(9)
        vals = [min(max(rng.gauss(60, 15), 0), 100) for _ in range(1000)]
        s = make_series(vals, metric="utilization_pct")
        h = build_histogram(s, bins=20, domain=(0, 100))
        counts = histogram_count_oracle(vals, h.bin_edges)
        assert sum(counts) == 1000
        for m, c in zip(h.mass, counts):
            assert m == pytest.approx(c / 1000.0, abs=1e-12)

    @given(
        st.lists(
            st.floats(min_value=0, max_value=100, allow_nan=False), min_size=1,
            max_size=200,
        ),
        st.integers(min_value=1, max_value=25),
    )
    @settings(max_examples=60, deadline=None)
    def test_mass_sums_to_one(self, vals, bins):
        s = make_series(vals, metric="utilization_pct")
        h = build_histogram(s, bins=bins, domain=(0, 100))
        assert sum(h.mass) == pytest.approx(1.0, abs=1e-9)


class TestDownsample:
    def test_noop_when_small(self):
        s = make_series(range(10))
        assert downsample(s, 100) is s

    def test_spike_survives(self):
        vals = [0.0] * 10_000
        vals[4321] = 100.0
        out = downsample(make_series(vals), 50)
        assert 100.0 in out.values
        assert len(out) <= 50

    def test_endpoints_and_extremes(self):
        rng = random.Random(13)
        for _ in range(100):
            n = rng.randint(5, 3000)
            vals = [rng.uniform(-10, 10) for _ in range(n)]
            s = make_series(vals)
            k = rng.randint(4, 60)
            out = downsample(s, k)
            assert len(out) <= k
            assert out.timestamps[0] == s.timestamps[0]
            assert out.timestamps[-1] == s.timestamps[-1]
            assert max(s.values) in out.values
            assert min(s.values) in out.values
            assert out.timestamps == sorted(out.timestamps)

    def test_idempotent(self):
        rng = random.Random(17)
        for _ in range(50):
            s = make_series([rng.uniform(0, 1) for _ in range(rng.randint(4, 500))])
            k = rng.randint(4, 40)
            once = downsample(s, k)
            twice = downsample(once, k)
            assert once.timestamps == twice.timestamps
            assert once.values == twice.values

    def test_max_points_validation(self):
        with pytest.raises(ValidationError):
            downsample(make_series(range(10)), 3)


class TestRoundTrip:
    @given(
        st.integers(min_value=1, max_value=10**12),
        st.floats(min_value=0, max_value=100, allow_nan=False),
    )
    @settings(max_examples=80, deadline=None)
    def test_serialize_ingest_round_trip(self, ts, value):
        sample = MetricSample(ts, "n1g0", "utilization_pct", value)
        store = MetricStore()
        store.ingest_sample(sample.to_line())
        got = store.query_series("n1g0", "utilization_pct", ts, ts)
        assert list(got.points) == [(ts, value)]
