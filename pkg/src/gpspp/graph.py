"""Molecular graph data model, JSON Lines dataset I/O and dataset splits.

Graphs are stored with directed edges in *paired* order: each chemical bond
``k`` occupies edges ``2k`` (u -> v) and ``2k + 1`` (v -> u), so the reverse
of edge ``e`` is always ``e ^ 1``.  Files store one entry per bond.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, DatasetParseError, GraphValidationError

FORMAT_VERSION = 1

# Feature Set 1 columns with the vocabulary sizes used for parameter counting.
SET1_NODE_FEATURES = (
    ("atomic_number", 119),
    ("group", 19),
    ("period", 8),
    ("element_type", 11),
    ("degree", 11),
    ("formal_charge", 17),
    ("num_hs", 10),
    ("num_radical_electrons", 6),
    ("is_aromatic", 2),
    ("is_in_ring", 2),
    ("is_chiral_center", 2),
)
SET1_EDGE_FEATURES = (
    ("bond_type", 5),
    ("bond_stereo", 6),
    ("is_in_ring", 2),
)
SET1_NODE_VOCAB = tuple(v for _, v in SET1_NODE_FEATURES)
SET1_EDGE_VOCAB = tuple(v for _, v in SET1_EDGE_FEATURES)

SPLIT_NAMES = ("original", "train_plus_valid", "train_plus_half_valid")


def _rows(values, n_rows, dtype=np.int64) -> np.ndarray:
    """Coerce ``values`` to a 2-D array with ``n_rows`` rows (columns inferred)."""
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim == 2 and arr.shape[0] == n_rows:
        return arr
    if arr.size == 0:
        return arr.reshape(n_rows, 0) if n_rows == 0 else arr.reshape(n_rows, -1)
    return arr.reshape(n_rows, -1)


@dataclass(eq=False)
class MolecularGraph:
    """One molecule: topology, categorical features, optional 3D positions."""

    num_nodes: int
    edges: np.ndarray
    node_cats: np.ndarray
    edge_cats: np.ndarray
    positions: np.ndarray | None = None
    target: float | None = None

    def __post_init__(self):
        self.num_nodes = int(self.num_nodes)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.node_cats = _rows(self.node_cats, self.num_nodes)
        self.edge_cats = _rows(self.edge_cats, len(self.edges))
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.target is not None:
            self.target = float(self.target)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def senders(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def receivers(self) -> np.ndarray:
        return self.edges[:, 1]

    @classmethod
    def from_bonds(cls, num_nodes, bonds, node_cats, bond_cats, positions=None, target=None):
        """Build a graph from undirected bonds, expanding each to two directed edges."""
        bonds = np.asarray(bonds, dtype=np.int64).reshape(-1, 2)
        bond_cats = _rows(bond_cats, len(bonds))
        edges = np.empty((2 * len(bonds), 2), dtype=np.int64)
        edges[0::2] = bonds
        edges[1::2] = bonds[:, ::-1]
        return cls(
            num_nodes=num_nodes,
            edges=edges,
            node_cats=node_cats,
            edge_cats=np.repeat(bond_cats, 2, axis=0),
            positions=positions,
            target=target,
        )

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        if self.num_edges:
            a[self.senders, self.receivers] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        return np.bincount(self.senders, minlength=self.num_nodes).astype(np.int64)

    def bonds(self):
        """Return ``(bonds, bond_cats)`` for the canonical paired edge order."""
        return self.edges[0::2].copy(), self.edge_cats[0::2].copy()

    def is_paired(self) -> bool:
        if self.num_edges % 2:
            return False
        return bool(
            np.array_equal(self.edges[1::2], self.edges[0::2, ::-1])
            and np.array_equal(self.edge_cats[1::2], self.edge_cats[0::2])
        )

    def permute(self, perm) -> "MolecularGraph":
        """Relabel nodes so that old node ``perm[k]`` becomes new node ``k``."""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return MolecularGraph(
            num_nodes=self.num_nodes,
            edges=inverse[self.edges],
            node_cats=self.node_cats[perm],
            edge_cats=self.edge_cats.copy(),
            positions=None if self.positions is None else self.positions[perm],
            target=self.target,
        )

    def replace(self, **changes) -> "MolecularGraph":
        fields = dict(
            num_nodes=self.num_nodes,
            edges=self.edges,
            node_cats=self.node_cats,
            edge_cats=self.edge_cats,
            positions=self.positions,
            target=self.target,
        )
        fields.update(changes)
        return MolecularGraph(**fields)


def validate_graph(graph: MolecularGraph, node_vocab=None, edge_vocab=None) -> None:
    """Raise :class:`GraphValidationError` if ``graph`` violates an invariant."""
    n = graph.num_nodes
    if n < 1:
        raise GraphValidationError(f"num_nodes must be >= 1, got {n}")
    edges = graph.edges
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise GraphValidationError(f"edge endpoint outside [0, {n})")
    if np.any(edges[:, 0] == edges[:, 1]):
        raise GraphValidationError("self-loops are not allowed")
    if graph.node_cats.shape[0] != n:
        raise GraphValidationError(
            f"node_cats has {graph.node_cats.shape[0]} rows for {n} nodes"
        )
    if graph.edge_cats.shape[0] != graph.num_edges:
        raise GraphValidationError(
            f"edge_cats has {graph.edge_cats.shape[0]} rows for {graph.num_edges} edges"
        )
    lookup = {}
    for k, (u, v) in enumerate(edges.tolist()):
        if (u, v) in lookup:
            raise GraphValidationError(f"duplicate edge ({u}, {v})")
        lookup[(u, v)] = k
    for k, (u, v) in enumerate(edges.tolist()):
        rev = lookup.get((v, u))
        if rev is None:
            raise GraphValidationError(f"edge ({u}, {v}) has no reverse edge")
        if not np.array_equal(graph.edge_cats[k], graph.edge_cats[rev]):
            raise GraphValidationError(f"edge ({u}, {v}) and its reverse have different categories")
    _check_vocab(graph.node_cats, node_vocab, "node")
    _check_vocab(graph.edge_cats, edge_vocab, "edge")
    if graph.positions is not None:
        if graph.positions.shape != (n, 3):
            raise GraphValidationError(f"positions must have shape ({n}, 3)")
        if not np.all(np.isfinite(graph.positions)):
            raise GraphValidationError("positions must be finite")
    if graph.target is not None and not np.isfinite(graph.target):
        raise GraphValidationError("target must be finite")


def _check_vocab(cats, vocab, kind):
    if vocab is None:
        return
    vocab = np.asarray(vocab, dtype=np.int64)
    if cats.shape[1] != len(vocab):
        raise GraphValidationError(
            f"{kind} features have {cats.shape[1]} columns, vocabulary declares {len(vocab)}"
        )
    if cats.size == 0:
        return
    bad = (cats < 0) | (cats >= vocab[None, :])
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise GraphValidationError(
            f"{kind} category {cats[row, col]} in column {col} outside vocabulary of size {vocab[col]}"
        )


class Dataset(list):
    """A list of graphs that also carries its vocabularies and validation indices."""

    def __init__(self, graphs=(), node_vocab=SET1_NODE_VOCAB, edge_vocab=SET1_EDGE_VOCAB, valid_indices=()):
        super().__init__(graphs)
        self.node_vocab = tuple(int(v) for v in node_vocab)
        self.edge_vocab = tuple(int(v) for v in edge_vocab)
        self.valid_indices = tuple(int(i) for i in valid_indices)

    def subset(self, indices) -> "Dataset":
        return Dataset([self[i] for i in indices], self.node_vocab, self.edge_vocab)


def _record_to_graph(record, lineno, directed):
    if not isinstance(record, dict):
        raise DatasetParseError("record must be a JSON object", lineno)
    for key in ("num_nodes", "edges", "node_cats", "edge_cats"):
        if key not in record:
            raise DatasetParseError(f"missing key {key!r}", lineno)
    try:
        num_nodes = int(record["num_nodes"])
        edges = np.asarray(record["edges"], dtype=np.int64).reshape(-1, 2)
        node_cats = _rows(record["node_cats"], num_nodes)
        edge_cats = _rows(record["edge_cats"], len(edges))
        positions = record.get("positions")
        if positions is not None:
            positions = np.asarray(positions, dtype=np.float64).reshape(num_nodes, 3)
        target = record.get("target")
        if target is not None:
            target = float(target)
    except (TypeError, ValueError) as exc:
        raise DatasetParseError(f"malformed record: {exc}", lineno) from exc
    if directed:
        return MolecularGraph(num_nodes, edges, node_cats, edge_cats, positions, target)
    return MolecularGraph.from_bonds(num_nodes, edges, node_cats, edge_cats, positions, target)


def load_dataset(path, directed: bool = False) -> Dataset:
    """Read a JSON Lines dataset file.

    With ``directed=False`` (the default) each ``edges`` entry is an undirected
    bond and is expanded into two directed edges.  With ``directed=True`` the
    file lists directed edges and the presence of every reverse edge, with
    identical categories, is verified.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError("empty dataset file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"invalid JSON header: {exc.msg}", 1) from exc
    if not isinstance(header, dict) or "node_vocab" not in header or "edge_vocab" not in header:
        raise DatasetParseError("header must declare node_vocab and edge_vocab", 1)
    if header.get("version") != FORMAT_VERSION:
        raise DatasetParseError(f"unsupported version {header.get('version')!r}", 1)
    dataset = Dataset(
        node_vocab=header["node_vocab"],
        edge_vocab=header["edge_vocab"],
        valid_indices=header.get("valid_indices", ()),
    )
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"invalid JSON: {exc.msg}", lineno) from exc
        graph = _record_to_graph(record, lineno, directed)
        try:
            validate_graph(graph, dataset.node_vocab, dataset.edge_vocab)
        except GraphValidationError as exc:
            raise GraphValidationError(f"line {lineno}: {exc}") from exc
        dataset.append(graph)
    bad = [i for i in dataset.valid_indices if not 0 <= i < len(dataset)]
    if bad:
        raise DatasetParseError(f"valid_indices out of range: {bad[:5]}", 1)
    return dataset


def save_dataset(path, graphs: Iterable[MolecularGraph], node_vocab=None, edge_vocab=None, valid_indices=None):
    """Write graphs as JSON Lines, one bond per ``edges`` entry."""
    graphs = list(graphs)
    if node_vocab is None:
        node_vocab = getattr(graphs, "node_vocab", SET1_NODE_VOCAB)
    if edge_vocab is None:
        edge_vocab = getattr(graphs, "edge_vocab", SET1_EDGE_VOCAB)
    header = {"version": FORMAT_VERSION, "node_vocab": list(node_vocab), "edge_vocab": list(edge_vocab)}
    if valid_indices:
        header["valid_indices"] = [int(i) for i in valid_indices]
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for g in graphs:
            if not g.is_paired():
                raise GraphValidationError("graph edges are not in paired bond order")
            bonds, bond_cats = g.bonds()
            record = {
                "num_nodes": g.num_nodes,
                "edges": bonds.tolist(),
                "node_cats": g.node_cats.tolist(),
                "edge_cats": bond_cats.tolist(),
            }
            if g.positions is not None:
                record["positions"] = g.positions.tolist()
            if g.target is not None:
                record["target"] = g.target
            fh.write(json.dumps(record) + "\n")


@dataclass
class DatasetSplit:
    name: str
    train_indices: np.ndarray
    eval_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def make_split(dataset_size: int, name: str, seed: int = 0, valid_indices: Sequence[int] = ()) -> DatasetSplit:
    """Partition ``range(dataset_size)`` into train and eval indices.

    ``valid_indices`` is the nominal validation portion.  ``original`` holds it
    out, ``train_plus_valid`` trains on everything and
    ``train_plus_half_valid`` moves a seeded random half into training.
    """
    if name not in SPLIT_NAMES:
        raise ConfigError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
    valid = np.unique(np.asarray(valid_indices, dtype=np.int64))
    if valid.size and (valid[0] < 0 or valid[-1] >= dataset_size):
        raise ConfigError("validation indices out of range")
    if name == "original":
        held = valid
    elif name == "train_plus_valid":
        held = np.zeros(0, dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        moved = np.sort(rng.permutation(valid)[: len(valid) // 2])
        held = np.setdiff1d(valid, moved)
    return DatasetSplit(name, np.setdiff1d(np.arange(dataset_size, dtype=np.int64), held), held)


def random_molecule(rng: np.random.Generator, node_vocab=SET1_NODE_VOCAB, edge_vocab=SET1_EDGE_VOCAB,
                    num_nodes=None, mean_nodes=14.0, ring_rate=2.0, with_positions=True, with_target=True):
    """Generate a random molecule-like graph: a random tree plus a few ring closures.

    Node counts are drawn around ``mean_nodes`` and ring closures from a Poisson
    distribution, which gives roughly ``N + 1`` bonds per graph on average.
    Positions place each atom about 1.5 units from its tree parent.
    """
    if num_nodes is None:
        num_nodes = int(np.clip(np.round(rng.normal(mean_nodes, 3.5)), 2, 40))
    n = num_nodes
    parents = [int(rng.integers(0, i)) for i in range(1, n)]
    bonds = {(min(p, i), max(p, i)) for i, p in zip(range(1, n), parents)}
    for _ in range(int(rng.poisson(ring_rate))):
        if n < 4:
            break
        u, v = rng.choice(n, size=2, replace=False)
        bonds.add((int(min(u, v)), int(max(u, v))))
    bonds = sorted(bonds)
    node_cats = np.stack([rng.integers(0, v, size=n) for v in node_vocab], axis=1) if node_vocab else np.zeros((n, 0))
    bond_cats = (np.stack([rng.integers(0, v, size=len(bonds)) for v in edge_vocab], axis=1)
                 if edge_vocab else np.zeros((len(bonds), 0)))
    positions = None
    if with_positions:
        positions = np.zeros((n, 3))
        for i, p in zip(range(1, n), parents):
            step = rng.normal(size=3)
            positions[i] = positions[p] + 1.5 * step / np.linalg.norm(step)
    graph = MolecularGraph.from_bonds(n, bonds, node_cats, bond_cats, positions)
    if with_target:
        graph.target = synthetic_target(graph)
    return graph


_TARGET_WEIGHTS = np.random.default_rng(20221231).normal(size=(64, 128))


def synthetic_target(graph: MolecularGraph) -> float:
    """Deterministic HOMO-LUMO-like target (eV scale) computed from the graph alone."""
    cats = graph.node_cats
    contrib = 0.0
    for col in range(cats.shape[1]):
        contrib += _TARGET_WEIGHTS[col % 64, cats[:, col] % 128].mean()
    deg = graph.degrees()
    ring_bonds = graph.num_edges // 2 - (graph.num_nodes - 1)
    value = 5.5 + 0.25 * contrib + 0.3 * np.tanh(ring_bonds - 1) - 0.4 * np.tanh((deg.max(initial=0) - 3) / 2)
    return float(value)


def random_dataset(n_graphs, seed=0, node_vocab=SET1_NODE_VOCAB, edge_vocab=SET1_EDGE_VOCAB,
                   valid_fraction=0.0, **kwargs) -> Dataset:
    rng = np.random.default_rng(seed)
    graphs = [random_molecule(rng, node_vocab, edge_vocab, **kwargs) for _ in range(n_graphs)]
    n_valid = int(round(valid_fraction * n_graphs))
    valid = range(n_graphs - n_valid, n_graphs)
    return Dataset(graphs, node_vocab, edge_vocab, valid)
