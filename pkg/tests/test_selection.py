from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmobfair.selection import (
    ClientRecord,
    ClientRegistry,
    SelectionError,
    select,
    select_cluster_stratified,
    select_group_stratified,
    select_uniform,
    stratum_quotas,
)


def registry(groups: dict[str, int], clusters=None, ineligible=()):
    recs = []
    for g, n in groups.items():
        for i in range(n):
            uid = f"{g}{i:02d}"
            c = clusters(uid, i) if clusters else None
            recs.append(ClientRecord(uid, g, c, 0.5, 10, uid not in ineligible))
    return ClientRegistry(recs)


def test_uniform_full_and_repeatable():
    reg = registry({"a": 6})
    assert select_uniform(reg, 6, 1) == reg.eligible()
    assert select_uniform(reg, 3, 9) == select_uniform(reg, 3, 9)


def test_uniform_frequencies():
    reg = registry({"c": 10})
    m, draws = 3, 2000
    freq = Counter(u for s in range(draws) for u in select_uniform(reg, m, s))
    for u in reg.eligible():
        assert abs(freq[u] / draws - m / 10) <= 0.05


def test_group_examples():
    reg = registry({"a": 10, "b": 10})
    per = Counter(reg[u].group for u in select_group_stratified(reg, 4, 0))
    assert per == {"a": 2, "b": 2}
    per = Counter(reg[u].group for u in select_group_stratified(reg, 5, 0))
    assert per == {"a": 3, "b": 2}
    reg = registry({"a": 1, "b": 9})
    per = Counter(reg[u].group for u in select_group_stratified(reg, 4, 0))
    assert per == {"a": 1, "b": 3}


def test_cluster_examples():
    reg = registry({"x": 12}, clusters=lambda u, i: i // 4)
    per = Counter(reg[u].cluster for u in select_cluster_stratified(reg, 6, 3))
    assert per == {0: 2, 1: 2, 2: 2}
    one = registry({"x": 8}, clusters=lambda u, i: 0)
    assert select_cluster_stratified(one, 3, 5) == select_uniform(one, 3, 5)
    # singleton cluster 0 with quota 2 takes 1 and hands 1 on to cluster 1
    reg = registry({"x": 7}, clusters=lambda u, i: 0 if i == 0 else 1)
    assert stratum_quotas({0: 1, 1: 6}, 4) == {0: 1, 1: 3}
    assert Counter(reg[u].cluster for u in select_cluster_stratified(reg, 4, 0)) == {0: 1, 1: 3}


def test_errors():
    reg = registry({"a": 3}, ineligible={"a00"})
    with pytest.raises(SelectionError):
        select_uniform(reg, 3, 0)
    with pytest.raises(SelectionError, match="no cluster"):
        select_cluster_stratified(reg, 1, 0)
    with pytest.raises(SelectionError, match="unknown"):
        select("roulette", reg, 1, 0)
    with pytest.raises(SelectionError, match="not declared"):
        ClientRegistry([ClientRecord("u", "z")], ["a"])


def test_registry_csv_roundtrip():
    reg = registry({"a": 2, "b": 1}, clusters=lambda u, i: i, ineligible={"b00"})
    back = ClientRegistry.from_csv(reg.to_csv())
    assert back.to_csv() == reg.to_csv()
    assert back.eligible() == ["a00", "a01"]


sizes = st.dictionaries(st.sampled_from("abcde"), st.integers(1, 8), min_size=1)


@settings(max_examples=150, deadline=None)
@given(sizes, st.data(), st.integers(0, 10**9))
def test_stratified_invariants(groups, data, seed):
    reg = registry(groups, ineligible={"a00"})
    pool = reg.eligible()
    m = data.draw(st.integers(0, len(pool)))
    for strategy in ("uniform", "group_stratified"):
        chosen = select(strategy, reg, m, seed)
        assert len(chosen) == len(set(chosen)) == m
        assert set(chosen) <= set(pool)
        assert chosen == sorted(chosen)
    cap = Counter(reg[u].group for u in pool)
    q = stratum_quotas(dict(cap), m)
    assert sum(q.values()) == m and all(q[s] <= cap[s] for s in cap)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 15), st.data(), st.integers(0, 10**9))
def test_single_stratum_equals_uniform(n, data, seed):
    reg = registry({"g": n})
    m = data.draw(st.integers(0, n))
    assert select_group_stratified(reg, m, seed) == select_uniform(reg, m, seed)
