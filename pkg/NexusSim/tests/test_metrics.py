import json
import math
import random

import pandas as pd
import pytest

from nexus_sim.domain import EmptyInputError, IncompleteRequestError, Request
from nexus_sim.metrics import (RequestMetrics, aggregate, compute_request_metrics, percentile_nearest_rank,
                               plot_rows, report_from_requests, report_to_dict, write_plot_data, write_summary)


def finished_request(rid, arrival, times, prompt=10, scheduled=None):
    req = Request(rid, arrival, prompt, len(times), prefilled_len=prompt)
    req.first_scheduled_time = scheduled
    for t in times:
        req.emit_token(t)
    return req


def test_request_metrics_arithmetic():
    m = compute_request_metrics(finished_request(1, 0.0, [0.5, 0.6, 0.7]))
    assert m.ttft_s == 0.5
    assert m.tbt_s == pytest.approx((0.1, 0.1))
    assert m.e2e_s == 0.7
    assert m.normalized_latency_s == pytest.approx(0.7 / 3)


def test_single_token_request_has_empty_tbt():
    m = compute_request_metrics(finished_request(2, 1.0, [1.25]))
    assert m.tbt_s == ()
    assert m.ttft_s == 0.25


def test_incomplete_request_is_an_error():
    with pytest.raises(IncompleteRequestError):
        compute_request_metrics(Request(3, 0.0, 10, 5))


def test_nearest_rank_convention():
    values = list(range(1, 101))
    assert percentile_nearest_rank(values, 95) == 95
    assert percentile_nearest_rank(values, 50) == 50
    assert percentile_nearest_rank(values, 99) == 99
    assert percentile_nearest_rank([7.0], 99) == 7.0
    assert percentile_nearest_rank([3.0, 1.0, 2.0], 50) == 2.0
    assert percentile_nearest_rank([4.0, 1.0, 3.0, 2.0], 50) == 2.0
    with pytest.raises(EmptyInputError):
        percentile_nearest_rank([], 50)


def test_identical_requests():
    reports = [RequestMetrics(i, 4, 0.3, (0.05, 0.05, 0.05), 0.45, 0.1125) for i in range(100)]
    summary = aggregate(reports).aggregates["ttft_s"]
    assert summary.p95 == 0.3
    assert summary.mean == pytest.approx(0.3)


def test_aggregate_matches_sort_oracle():
    rng = random.Random(11)
    reports = []
    for i in range(257):
        tbt = tuple(rng.uniform(0.01, 0.2) for _ in range(rng.randint(0, 6)))
        ttft = rng.uniform(0.05, 3.0)
        e2e = ttft + sum(tbt)
        reports.append(RequestMetrics(i, len(tbt) + 1, ttft, tbt, e2e, e2e / (len(tbt) + 1)))
    report = aggregate(reports)

    def oracle(values, p):
        ordered = sorted(values)
        return ordered[max(1, math.ceil(p / 100 * len(ordered))) - 1]

    ttfts = [r.ttft_s for r in reports]
    pooled = [g for r in reports for g in r.tbt_s]
    for p, stat in ((50, "p50"), (95, "p95"), (99, "p99")):
        assert report.stat("ttft_s", stat) == oracle(ttfts, p)
        assert report.stat("tbt_s", stat) == oracle(pooled, p)
    assert report.stat("tbt_s", "mean") == pytest.approx(sum(pooled) / len(pooled))
    assert report.aggregates["tbt_s"].count == len(pooled)


def test_aggregate_of_nothing_is_an_error():
    with pytest.raises(EmptyInputError):
        aggregate([])


def test_report_from_requests_throughput():
    requests = [finished_request(i, float(i), [i + 0.5, i + 1.0]) for i in range(4)]
    requests.append(Request(99, 0.0, 10, 5))
    report = report_from_requests(requests)
    assert len(report.requests) == 4
    assert report.makespan_s == pytest.approx(4.0)
    assert report.throughput_rps == pytest.approx(1.0)
    assert report_from_requests([Request(1, 0.0, 1, 1)]) is None


def test_summary_and_plot_files(tmp_path):
    report = report_from_requests([finished_request(i, 0.0, [0.5 + i, 0.75 + i]) for i in range(3)])
    write_summary(tmp_path / "out" / "summary.json", report_to_dict(report))
    data = json.loads((tmp_path / "out" / "summary.json").read_text(encoding="utf-8"))
    assert data["completed"] == 3
    assert data["aggregates"]["ttft_s"]["p50"] == pytest.approx(1.5)

    write_plot_data(tmp_path / "plot.csv", plot_rows("nexus", report, rate_rps=2.5))
    frame = pd.read_csv(tmp_path / "plot.csv")
    assert set(frame.columns) == {"engine", "metric", "stat", "value", "rate_rps"}
    assert (frame["engine"] == "nexus").all()
    assert not list(tmp_path.glob(".*"))


def test_latency_splits_into_queueing_and_execution():
    m = compute_request_metrics(finished_request(4, 1.0, [1.5, 1.75, 2.0], scheduled=1.25))
    assert m.queue_delay_s == 0.25
    assert m.execution_s == 0.75
    assert m.queue_delay_s + m.execution_s == m.e2e_s
    assert compute_request_metrics(finished_request(5, 0.0, [0.5])).execution_s is None


def test_execution_time_is_aggregated_and_plotted():
    requests = [finished_request(i, 0.0, [1.0 + i, 1.5 + i], scheduled=0.5 * i) for i in range(4)]
    report = report_from_requests(requests)
    executions = [1.5 + i - 0.5 * i for i in range(4)]
    assert report.aggregates["execution_s"].count == 4
    assert report.stat("execution_s") == pytest.approx(sum(executions) / 4)
    assert report.stat("execution_s", "p99") == max(executions)
    metrics = {row["metric"] for row in plot_rows("nexus", report)}
    assert {"queue_delay_s", "execution_s"} <= metrics
