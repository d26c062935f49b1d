"""Streaming packing of variable-size graphs into fixed-capacity packs."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .exceptions import ConfigError, OversizeGraphError


@dataclass(frozen=True)
class PackSpec:
    max_nodes: int = 60
    max_edges: int = 120  # directed edges
    max_graphs: int = 8

    def __post_init__(self):
        if min(self.max_nodes, self.max_edges, self.max_graphs) <= 0:
            raise ConfigError("pack capacities must be positive")


@dataclass
class Pack:
    spec: PackSpec
    graph_ids: list = field(default_factory=list)
    node_offsets: list = field(default_factory=list)
    edge_offsets: list = field(default_factory=list)
    node_counts: list = field(default_factory=list)
    edge_counts: list = field(default_factory=list)

    @property
    def n_used(self) -> int:
        return sum(self.node_counts)

    @property
    def m_used(self) -> int:
        return sum(self.edge_counts)

    @property
    def g_used(self) -> int:
        return len(self.graph_ids)

    def fits(self, n, m) -> bool:
        return (self.n_used + n <= self.spec.max_nodes
                and self.m_used + m <= self.spec.max_edges
                and self.g_used + 1 <= self.spec.max_graphs)

    def add(self, graph_id, n, m):
        self.node_offsets.append(self.n_used)
        self.edge_offsets.append(self.m_used)
        self.graph_ids.append(graph_id)
        self.node_counts.append(n)
        self.edge_counts.append(m)

    @property
    def node_mask(self) -> np.ndarray:
        mask = np.zeros(self.spec.max_nodes, dtype=bool)
        mask[: self.n_used] = True
        return mask

    @property
    def edge_mask(self) -> np.ndarray:
        mask = np.zeros(self.spec.max_edges, dtype=bool)
        mask[: self.m_used] = True
        return mask

    @property
    def graph_mask(self) -> np.ndarray:
        mask = np.zeros(self.spec.max_graphs, dtype=bool)
        mask[: self.g_used] = True
        return mask


def _sizes(g):
    return int(g.num_nodes), int(g.num_edges)


def pack_stream(graphs, spec: PackSpec = PackSpec(), ids=None) -> list[Pack]:
    """Greedy streaming packer.

    Each graph is appended to the open pack unless that would exceed a node,
    edge or graph limit, in which case the pack is closed and a new one opened.
    ``graphs`` may hold anything with ``num_nodes``/``num_edges`` or
    ``(num_nodes, num_edges)`` tuples.  ``ids`` defaults to input positions.
    """
    packs: list[Pack] = []
    current = Pack(spec)
    for pos, g in enumerate(graphs):
        n, m = g if isinstance(g, tuple) else _sizes(g)
        gid = pos if ids is None else ids[pos]
        if n > spec.max_nodes or m > spec.max_edges:
            raise OversizeGraphError(
                f"graph {gid} ({n} nodes, {m} edges) exceeds pack capacity "
                f"({spec.max_nodes} nodes, {spec.max_edges} edges)"
            )
        if not current.fits(n, m):
            packs.append(current)
            current = Pack(spec)
        current.add(gid, n, m)
    if current.g_used:
        packs.append(current)
    return packs


def pack_efficiency(packs):
    """Return ``(node_eff, edge_eff, mean_graphs_per_pack)``; totals are summed exactly."""
    if not packs:
        raise ValueError("pack efficiency is undefined for an empty pack list")
    spec = packs[0].spec
    nodes = Fraction(sum(p.n_used for p in packs), len(packs) * spec.max_nodes)
    edges = Fraction(sum(p.m_used for p in packs), len(packs) * spec.max_edges)
    graphs = Fraction(sum(p.g_used for p in packs), len(packs))
    return float(nodes), float(edges), float(graphs)


def graphs_per_pack_histogram(packs):
    counts = np.bincount([p.g_used for p in packs], minlength=packs[0].spec.max_graphs + 1 if packs else 1)
    return {k: int(c) for k, c in enumerate(counts)}


@dataclass
class PackedBatch:
    """Model-ready arrays for one pack.

    Padding rows use index ``-1`` in ``node_graph``, ``edge_graph``,
    ``senders`` and ``receivers``; padded graph slots have ``graph_mask`` False.
    """

    graph_ids: list
    num_nodes: int
    num_edges: int
    num_graphs: int
    node_cats: np.ndarray
    edge_cats: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray
    graph_mask: np.ndarray
    lap_vec: np.ndarray
    lap_val: np.ndarray
    rw: np.ndarray
    degree: np.ndarray
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_spd: np.ndarray
    attn_mask: np.ndarray
    positions: np.ndarray | None
    targets: np.ndarray

    @property
    def node_mask(self):
        return self.node_graph >= 0

    @property
    def edge_mask(self):
        return self.edge_graph >= 0

    @property
    def has_positions(self):
        return self.positions is not None


def collate(featurized, spec: PackSpec | None = None, graph_ids=None, sign_rng=None) -> PackedBatch:
    """Concatenate featurized graphs into one batch.

    With ``spec`` the arrays are padded to the pack capacity.  ``sign_rng``
    randomly flips the sign of each Laplacian eigenvector per graph (training);
    without it the stored canonical signs are used.  Positions are included
    only when every graph has them.
    """
    featurized = list(featurized)
    graphs = [f.graph for f in featurized]
    n_real = sum(g.num_nodes for g in graphs)
    m_real = sum(g.num_edges for g in graphs)
    g_real = len(graphs)
    if spec is not None:
        if n_real > spec.max_nodes or m_real > spec.max_edges or g_real > spec.max_graphs:
            raise OversizeGraphError("graphs do not fit into one pack")
        n_tot, m_tot, g_tot = spec.max_nodes, spec.max_edges, spec.max_graphs
    else:
        n_tot, m_tot, g_tot = n_real, m_real, g_real

    first = featurized[0]
    cn = first.graph.node_cats.shape[1]
    ce = first.graph.edge_cats.shape[1]
    k_lap, k_rw = first.lap_vec.shape[1], first.rw.shape[1]

    node_cats = np.zeros((n_tot, cn), dtype=np.int64)
    edge_cats = np.zeros((m_tot, ce), dtype=np.int64)
    senders = np.full(m_tot, -1, dtype=np.int64)
    receivers = np.full(m_tot, -1, dtype=np.int64)
    node_graph = np.full(n_tot, -1, dtype=np.int64)
    edge_graph = np.full(m_tot, -1, dtype=np.int64)
    lap_vec = np.zeros((n_tot, k_lap))
    lap_val = np.zeros((n_tot, k_lap))
    rw = np.zeros((n_tot, k_rw))
    degree = np.zeros(n_tot, dtype=np.int64)
    attn_mask = np.zeros((n_tot, n_tot), dtype=bool)
    with_pos = all(g.positions is not None for g in graphs)
    positions = np.zeros((n_tot, 3)) if with_pos else None
    targets = np.full(g_tot, np.nan)
    graph_mask = np.zeros(g_tot, dtype=bool)
    pair_i, pair_j, pair_spd = [], [], []

    n_off = m_off = 0
    for k, f in enumerate(featurized):
        g = f.graph
        n, m = g.num_nodes, g.num_edges
        ns = slice(n_off, n_off + n)
        es = slice(m_off, m_off + m)
        node_cats[ns] = g.node_cats
        edge_cats[es] = g.edge_cats
        senders[es] = g.senders + n_off
        receivers[es] = g.receivers + n_off
        node_graph[ns] = k
        edge_graph[es] = k
        vec = f.lap_vec
        if sign_rng is not None:
            vec = vec * sign_rng.choice([-1.0, 1.0], size=vec.shape[1])
        lap_vec[ns] = vec
        lap_val[ns] = f.lap_val
        rw[ns] = f.rw
        degree[ns] = f.degree
        attn_mask[ns, ns] = True
        if with_pos:
            positions[ns] = g.positions
        if g.target is not None:
            targets[k] = g.target
        graph_mask[k] = True
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        pair_i.append(ii.ravel() + n_off)
        pair_j.append(jj.ravel() + n_off)
        pair_spd.append(f.spd.ravel())
        n_off += n
        m_off += m

    return PackedBatch(
        graph_ids=list(range(g_real)) if graph_ids is None else list(graph_ids),
        num_nodes=n_tot,
        num_edges=m_tot,
        num_graphs=g_tot,
        node_cats=node_cats,
        edge_cats=edge_cats,
        senders=senders,
        receivers=receivers,
        node_graph=node_graph,
        edge_graph=edge_graph,
        graph_mask=graph_mask,
        lap_vec=lap_vec,
        lap_val=lap_val,
        rw=rw,
        degree=degree,
        pair_i=np.concatenate(pair_i),
        pair_j=np.concatenate(pair_j),
        pair_spd=np.concatenate(pair_spd),
        attn_mask=attn_mask,
        positions=positions,
        targets=targets,
    )


def collate_pack(pack: Pack, featurized, pad=True, sign_rng=None) -> PackedBatch:
    """Collate the graphs referenced by ``pack`` (ids index into ``featurized``)."""
    return collate([featurized[i] for i in pack.graph_ids], pack.spec if pad else None,
                   pack.graph_ids, sign_rng)
