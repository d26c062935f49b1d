"""Structural, positional and 3D-derived raw features for one graph."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .exceptions import NumericError
from .graph import MolecularGraph

K_LAP = 7
K_RW = 16
MAX_SPD = 20
MAX_DEGREE = 10
MIN_SIGMA = 1e-3


@dataclass
class SpectralFeatures:
    eig_vectors: np.ndarray  # (N, k_lap)
    eig_values: np.ndarray  # (k_lap,)


@dataclass
class RandomWalkFeatures:
    probs: np.ndarray  # (N, k_rw)


@dataclass
class SpdMap:
    dist: np.ndarray  # (N, N) integer buckets
    max_spd: int

    @property
    def unreachable(self) -> int:
        return self.max_spd + 1


@dataclass
class DistanceKernels:
    psi: Tensor  # (N, N, K)
    mu: Tensor
    sigma: Tensor


def _canonical_sign(vectors, tol=1e-10):
    """Flip each column so that its first entry with magnitude above ``tol`` is positive."""
    for c in range(vectors.shape[1]):
        nz = np.flatnonzero(np.abs(vectors[:, c]) > tol)
        if nz.size and vectors[nz[0], c] < 0:
            vectors[:, c] *= -1.0
    return vectors


def laplacian_features(g: MolecularGraph, k_lap: int = K_LAP, graph_index=None) -> SpectralFeatures:
    """Eigenpairs of ``L = D - A`` after the trivial one, truncated or zero-padded to ``k_lap``.

    Eigenvectors use the first-nonzero-positive sign convention; eigenvalues
    are L2-normalised when nonzero.
    """
    a = g.adjacency()
    lap = np.diag(a.sum(axis=1)) - a
    try:
        values, vectors = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        where = f" for graph {graph_index}" if graph_index is not None else ""
        raise NumericError(f"Laplacian eigendecomposition did not converge{where}") from exc
    order = np.argsort(values, kind="stable")
    values, vectors = values[order], vectors[:, order]
    values = np.where(np.abs(values) < 1e-12, 0.0, values)
    keep = min(k_lap, g.num_nodes - 1)
    vec = np.zeros((g.num_nodes, k_lap))
    val = np.zeros(k_lap)
    if keep > 0:
        vec[:, :keep] = _canonical_sign(vectors[:, 1 : keep + 1].copy())
        val[:keep] = values[1 : keep + 1]
    norm = np.linalg.norm(val)
    if norm > 0:
        val = val / norm
    return SpectralFeatures(vec, val)


def laplacian_residual(g: MolecularGraph, k_lap: int = K_LAP) -> float:
    """Largest ``||Lv - lambda v||_inf / max(1, |lambda|)`` over the retained raw eigenpairs."""
    a = g.adjacency()
    lap = np.diag(a.sum(axis=1)) - a
    values, vectors = np.linalg.eigh(lap)
    keep = min(k_lap, g.num_nodes - 1)
    worst = 0.0
    for c in range(1, keep + 1):
        v, lam = vectors[:, c], values[c]
        worst = max(worst, np.abs(lap @ v - lam * v).max() / max(1.0, abs(lam)))
    return worst


def random_walk_features(g: MolecularGraph, k_rw: int = K_RW) -> RandomWalkFeatures:
    """Return probabilities ``(P^s)_ii`` for ``s = 1..k_rw`` with ``P = D^-1 A``; isolated nodes get zero rows."""
    a = g.adjacency()
    deg = a.sum(axis=1)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    p = inv[:, None] * a
    probs = np.zeros((g.num_nodes, k_rw))
    power = np.eye(g.num_nodes)
    for s in range(k_rw):
        power = power @ p
        probs[:, s] = np.diag(power)
    return RandomWalkFeatures(np.clip(probs, 0.0, 1.0))


def spd_map(g: MolecularGraph, max_spd: int = MAX_SPD) -> SpdMap:
    """BFS hop distances clamped to ``max_spd``; disconnected pairs get bucket ``max_spd + 1``."""
    n = g.num_nodes
    neighbours = [[] for _ in range(n)]
    for u, v in g.edges.tolist():
        neighbours[u].append(v)
    unreachable = max_spd + 1
    dist = np.full((n, n), unreachable, dtype=np.int64)
    for source in range(n):
        row = dist[source]
        row[source] = 0
        seen = np.zeros(n, dtype=bool)
        seen[source] = True
        queue = deque([(source, 0)])
        while queue:
            node, d = queue.popleft()
            for nxt in neighbours[node]:
                if not seen[nxt]:
                    seen[nxt] = True
                    row[nxt] = min(d + 1, max_spd)
                    queue.append((nxt, d + 1))
    return SpdMap(dist, max_spd)


def degree_centrality(g: MolecularGraph, max_degree: int = MAX_DEGREE) -> np.ndarray:
    return np.minimum(g.degrees(), max_degree)


def pairwise_distances(positions):
    """Differentiable ``(N, N)`` matrix of Euclidean distances."""
    positions = as_tensor(positions)
    n = positions.shape[0]
    rows = np.repeat(np.arange(n), n)
    cols = np.tile(np.arange(n), n)
    diff = ops.gather_rows(positions, rows) - ops.gather_rows(positions, cols)
    return ops.reshape(ops.row_norm(diff), (n, n))


def distance_kernels(positions, mu, sigma) -> DistanceKernels:
    """Gaussian kernel embedding of all pairwise distances, differentiable in every input."""
    pos = as_tensor(positions)
    if not np.all(np.isfinite(pos.data)):
        raise NumericError("positions contain non-finite values")
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    psi = ops.gaussian_kernels(pairwise_distances(pos), mu, sigma, MIN_SIGMA)
    return DistanceKernels(psi, mu, sigma)


@dataclass
class FeaturizedGraph:
    """A graph together with its precomputed non-learnable features."""

    graph: MolecularGraph
    lap_vec: np.ndarray
    lap_val: np.ndarray
    rw: np.ndarray
    degree: np.ndarray
    spd: np.ndarray

    @property
    def num_nodes(self):
        return self.graph.num_nodes

    @property
    def num_edges(self):
        return self.graph.num_edges

    def permute(self, perm) -> "FeaturizedGraph":
        """Relabel nodes (old ``perm[k]`` becomes ``k``) and carry the stored features along.

        Recomputing Laplacian eigenvectors after a relabeling can change their
        signs (or basis, for repeated eigenvalues); permuting keeps them fixed.
        """
        perm = np.asarray(perm, dtype=np.int64)
        return FeaturizedGraph(
            graph=self.graph.permute(perm),
            lap_vec=self.lap_vec[perm],
            lap_val=self.lap_val.copy(),
            rw=self.rw[perm],
            degree=self.degree[perm],
            spd=self.spd[np.ix_(perm, perm)],
        )


def featurize(g: MolecularGraph, k_lap=K_LAP, k_rw=K_RW, max_spd=MAX_SPD, max_degree=MAX_DEGREE,
              graph_index=None) -> FeaturizedGraph:
    spectral = laplacian_features(g, k_lap, graph_index)
    return FeaturizedGraph(
        graph=g,
        lap_vec=spectral.eig_vectors,
        lap_val=spectral.eig_values,
        rw=random_walk_features(g, k_rw).probs,
        degree=degree_centrality(g, max_degree),
        spd=spd_map(g, max_spd).dist,
    )


# Sidecar file ---------------------------------------------------------------
#
# Little-endian.  Header: b"GPSF", u32 version, u32 graph count, u32 k_lap,
# u32 k_rw, u32 max_spd, u32 max_degree.  Each record: u32 N, then
# lap_vec (N*k_lap f64), lap_val (k_lap f64), rw (N*k_rw f64),
# degree (N i32), spd (N*N i32), all row-major.

SIDECAR_MAGIC = b"GPSF"
SIDECAR_VERSION = 1


def write_sidecar(path, features, k_lap=K_LAP, k_rw=K_RW, max_spd=MAX_SPD, max_degree=MAX_DEGREE):
    chunks = [SIDECAR_MAGIC, struct.pack("<6I", SIDECAR_VERSION, len(features), k_lap, k_rw, max_spd, max_degree)]
    for f in features:
        chunks.append(struct.pack("<I", f.num_nodes))
        chunks.append(np.ascontiguousarray(f.lap_vec, "<f8").tobytes())
        chunks.append(np.ascontiguousarray(f.lap_val, "<f8").tobytes())
        chunks.append(np.ascontiguousarray(f.rw, "<f8").tobytes())
        chunks.append(np.ascontiguousarray(f.degree, "<i4").tobytes())
        chunks.append(np.ascontiguousarray(f.spd, "<i4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_sidecar(path, graphs):
    """Attach stored features to ``graphs`` (which must be in file order)."""
    buf = Path(path).read_bytes()
    if buf[:4] != SIDECAR_MAGIC:
        raise ValueError(f"{path}: not a feature sidecar")
    version, count, k_lap, k_rw, _max_spd, _max_degree = struct.unpack_from("<6I", buf, 4)
    if version != SIDECAR_VERSION or count != len(graphs):
        raise ValueError(f"{path}: version {version} / count {count} does not match {len(graphs)} graphs")
    pos = 28
    out = []

    def take(dtype, count, shape):
        nonlocal pos
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += arr.nbytes
        return arr.astype(np.float64 if dtype == "<f8" else np.int64)

    for g in graphs:
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if n != g.num_nodes:
            raise ValueError(f"{path}: node count {n} does not match graph with {g.num_nodes} nodes")
        out.append(FeaturizedGraph(
            graph=g,
            lap_vec=take("<f8", n * k_lap, (n, k_lap)),
            lap_val=take("<f8", k_lap, (k_lap,)),
            rw=take("<f8", n * k_rw, (n, k_rw)),
            degree=take("<i4", n, (n,)),
            spd=take("<i4", n * n, (n, n)),
        ))
    return out
