from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpspp.encodings import featurize
from gpspp.exceptions import OversizeGraphError
from gpspp.graph import random_dataset
from gpspp.packer import PackSpec, collate, collate_pack, graphs_per_pack_histogram, pack_efficiency, pack_stream

sizes = st.lists(st.tuples(st.integers(1, 60), st.integers(0, 60)).map(lambda t: (t[0], 2 * t[1])),
                 min_size=1, max_size=80)


def test_eight_small_graphs_fill_one_pack():
    packs = pack_stream([(7, 14)] * 8)
    assert len(packs) == 1
    p = packs[0]
    assert (p.g_used, p.n_used, p.m_used) == (8, 56, 112)


def test_ninth_graph_opens_new_pack():
    packs = pack_stream([(7, 14)] * 9)
    assert [p.g_used for p in packs] == [8, 1]


def test_oversize_graph_is_named():
    with pytest.raises(OversizeGraphError, match="graph 2"):
        pack_stream([(5, 4), (3, 2), (61, 10)])
    with pytest.raises(OversizeGraphError):
        pack_stream([(10, 122)])


@settings(max_examples=200, deadline=None)
@given(sizes)
def test_capacity_bijection_and_order(stream):
    spec = PackSpec()
    packs = pack_stream(stream, spec)
    ids = [i for p in packs for i in p.graph_ids]
    assert ids == list(range(len(stream)))
    for p in packs:
        assert p.n_used <= spec.max_nodes and p.m_used <= spec.max_edges and p.g_used <= spec.max_graphs
        assert p.node_offsets == list(np.cumsum([0] + p.node_counts[:-1]))
        assert p.edge_offsets == list(np.cumsum([0] + p.edge_counts[:-1]))
    # greedy: the first graph of each pack did not fit into the previous one
    for prev, nxt in zip(packs, packs[1:]):
        n, m = stream[nxt.graph_ids[0]]
        assert not prev.fits(n, m)


@settings(max_examples=100, deadline=None)
@given(sizes)
def test_efficiency_matches_recount(stream):
    packs = pack_stream(stream)
    node_eff, edge_eff, per_pack = pack_efficiency(packs)
    total_n = sum(n for n, _ in stream)
    total_m = sum(m for _, m in stream)
    assert abs(node_eff - total_n / (60 * len(packs))) <= 1e-12
    assert abs(edge_eff - total_m / (120 * len(packs))) <= 1e-12
    assert abs(per_pack - len(stream) / len(packs)) <= 1e-12


def test_efficiency_edge_cases():
    assert pack_efficiency(pack_stream([(60, 120)]))[:2] == (1.0, 1.0)
    assert pack_efficiency(pack_stream([(30, 0)]))[0] == 0.5
    with pytest.raises(ValueError):
        pack_efficiency([])


def test_histogram():
    packs = pack_stream([(7, 14)] * 9)
    hist = graphs_per_pack_histogram(packs)
    assert hist[8] == 1 and hist[1] == 1 and sum(hist.values()) == 2


def test_packing_is_deterministic():
    ds = random_dataset(50, seed=3)
    a = [p.graph_ids for p in pack_stream(ds)]
    b = [p.graph_ids for p in pack_stream(ds)]
    assert a == b


def test_collate_layout():
    ds = random_dataset(5, seed=8)
    feats = [featurize(g) for g in ds]
    pack = pack_stream(ds)[0]
    batch = collate_pack(pack, feats)
    spec = PackSpec()
    assert batch.num_nodes == spec.max_nodes and batch.num_graphs == spec.max_graphs
    assert batch.node_mask.sum() == pack.n_used and batch.edge_mask.sum() == pack.m_used
    assert np.all(batch.senders[~batch.edge_mask] == -1)
    assert np.all(batch.node_graph[~batch.node_mask] == -1)
    # attention only within graphs
    same = batch.node_graph[:, None] == batch.node_graph[None, :]
    assert np.all(batch.attn_mask <= (same & batch.node_mask[:, None]))
    counts = Counter(batch.node_graph[batch.node_mask].tolist())
    assert [counts[k] for k in range(pack.g_used)] == pack.node_counts
    # every intra-graph pair appears exactly once
    assert len(batch.pair_i) == sum(n * n for n in pack.node_counts)
    np.testing.assert_array_equal(batch.attn_mask[batch.pair_i, batch.pair_j], True)
    np.testing.assert_allclose(batch.targets[: pack.g_used], [ds[i].target for i in pack.graph_ids])
    assert np.all(np.isnan(batch.targets[pack.g_used:]))


def test_collate_drops_positions_when_any_missing():
    ds = random_dataset(3, seed=2)
    ds[1].positions = None
    assert collate([featurize(g) for g in ds]).positions is None


def test_collate_sign_flip_only_changes_signs(rng):
    ds = random_dataset(4, seed=6)
    feats = [featurize(g) for g in ds]
    plain = collate(feats)
    flipped = collate(feats, sign_rng=rng)
    np.testing.assert_allclose(np.abs(plain.lap_vec), np.abs(flipped.lap_vec))
