import math
import sys
from fractions import Fraction

import numpy as np
import pytest


def brute_force_metrics(dist, q_ids, q_times, g_ids, g_times, protocol="time_label", max_rank=10):
    """Re-ID metrics by direct enumeration, independent of ccnet.evaluation.

    Gallery items are visited in (distance, index) order with Python's sorted();
    junk (same id and, under time_label, same time) is skipped.  AP is the
    exact rational mean of precision at each positive.  Returns
    (map_fraction, cmc_fractions, counted_queries).
    """
    aps, first_hits = [], []
    for qi in range(len(q_ids)):
        order = sorted(range(len(g_ids)), key=lambda j: (float(dist[qi][j]), j))
        kept = []
        for j in order:
            same = g_ids[j] == q_ids[qi]
            if protocol == "time_label" and same and g_times[j] == q_times[qi]:
                continue
            kept.append(same)
        if not any(kept):
            continue
        hits, precisions = 0, []
        for rank, good in enumerate(kept, 1):
            if good:
                hits += 1
                precisions.append(Fraction(hits, rank))
        aps.append(sum(precisions) / len(precisions))
        first_hits.append(kept.index(True) + 1)
    n = len(aps)
    mean_ap = sum(aps) / n if n else None
    cmc = [Fraction(sum(1 for h in first_hits if h <= k), n) for k in range(1, max_rank + 1)] if n else None
    return mean_ap, cmc, n


def euclid(a, b):
    return [[math.sqrt(sum((x - y) ** 2 for x, y in zip(u, v))) for v in b] for u in a]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_batch():
    # P=1, K=2, M=2, dim=1: f^1_1=0, f^2_1=2, f^1_2=4, f^2_2=6
    return np.array([[[[0.0], [2.0]], [[4.0], [6.0]]]])


def random_instance(rng):
    """Random retrieval problem with <= 50 gallery items.

    Half the instances use small integer features so distance ties and
    repeated ids/times occur often.
    """
    nq, ng = int(rng.integers(1, 8)), int(rng.integers(1, 51))
    dim = int(rng.integers(1, 5))
    ids = int(rng.integers(1, 6))
    if rng.random() < 0.5:
        q, g = rng.integers(-2, 3, size=(nq, dim)).astype(float), rng.integers(-2, 3, size=(ng, dim)).astype(float)
    else:
        q, g = rng.normal(size=(nq, dim)), rng.normal(size=(ng, dim))
    qm = {"id": rng.integers(ids, size=nq), "time": rng.integers(3, size=nq)}
    gm = {"id": rng.integers(ids, size=ng), "time": rng.integers(3, size=ng)}
    return q, g, qm, gm


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
