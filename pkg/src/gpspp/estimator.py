"""scikit-learn style wrappers: a graph featurizer and a GPS++ regressor."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .encodings import FeaturizedGraph, featurize
from .exceptions import GraphValidationError
from .graph import SET1_EDGE_VOCAB, SET1_NODE_VOCAB, Dataset, DatasetSplit, MolecularGraph, validate_graph
from .model import ModelConfig
from .packer import PackSpec
from .training import TrainConfig, predict, train


def check_graphs(X, node_vocab=None, edge_vocab=None) -> list:
    """Return ``X`` as a list of validated :class:`MolecularGraph`.

    Already-featurized graphs are accepted and validated through their graph.
    """
    if isinstance(X, (MolecularGraph, FeaturizedGraph)):
        raise GraphValidationError("expected a sequence of graphs, got a single graph")
    graphs = list(X)
    if not graphs:
        raise GraphValidationError("expected at least one graph")
    for k, item in enumerate(graphs):
        g = item.graph if isinstance(item, FeaturizedGraph) else item
        if not isinstance(g, MolecularGraph):
            raise GraphValidationError(f"item {k} is {type(item).__name__}, not a MolecularGraph")
        try:
            validate_graph(g, node_vocab, edge_vocab)
        except GraphValidationError as exc:
            raise GraphValidationError(f"graph {k}: {exc}") from exc
    return graphs


def check_targets(y, n) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) != n:
        raise ValueError(f"got {len(y)} targets for {n} graphs")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    return y


class GraphFeaturizer(TransformerMixin, BaseEstimator):
    """Attach Laplacian, random-walk, degree and shortest-path encodings to graphs."""

    def __init__(self, k_lap=7, k_rw=16, max_spd=20, max_degree=10):
        self.k_lap = k_lap
        self.k_rw = k_rw
        self.max_spd = max_spd
        self.max_degree = max_degree

    def fit(self, X, y=None):
        check_graphs(X)
        self.n_graphs_seen_ = len(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_graphs_seen_")
        out = []
        for item in check_graphs(X):
            if isinstance(item, FeaturizedGraph):
                out.append(item)
            else:
                out.append(featurize(item, self.k_lap, self.k_rw, self.max_spd, self.max_degree))
        return out


class GPSRegressor(RegressorMixin, BaseEstimator):
    """Graph-level regressor built from GPS++ blocks.

    ``X`` is a sequence of :class:`MolecularGraph` (or featurized graphs).
    Targets come from ``y`` when given, otherwise from each graph's ``target``.
    Vocabularies default to those of a :class:`Dataset` input, then Set 1.
    """

    def __init__(self, model_config=None, train_config=None, pack_spec=None, node_vocab=None, edge_vocab=None):
        self.model_config = model_config
        self.train_config = train_config
        self.pack_spec = pack_spec
        self.node_vocab = node_vocab
        self.edge_vocab = edge_vocab

    def _vocab(self, X):
        node = self.node_vocab or getattr(X, "node_vocab", None) or SET1_NODE_VOCAB
        edge = self.edge_vocab or getattr(X, "edge_vocab", None) or SET1_EDGE_VOCAB
        return tuple(node), tuple(edge)

    def fit(self, X, y=None):
        node_vocab, edge_vocab = self._vocab(X)
        graphs = check_graphs(X, node_vocab, edge_vocab)
        cfg = self.model_config or ModelConfig()
        if isinstance(cfg, dict):
            cfg = ModelConfig.from_dict(cfg)
        tcfg = self.train_config or TrainConfig()
        if isinstance(tcfg, dict):
            tcfg = TrainConfig.from_dict(tcfg)
        featurizer = GraphFeaturizer(cfg.k_lap, cfg.k_rw, cfg.max_spd, cfg.max_degree).fit(graphs)
        feats = featurizer.transform(graphs)
        if y is not None:
            y = check_targets(y, len(feats))
            feats = [FeaturizedGraph(f.graph.replace(target=float(t)), f.lap_vec, f.lap_val, f.rw,
                                     f.degree, f.spd) for f, t in zip(feats, y)]
        elif any(f.graph.target is None for f in feats):
            raise ValueError("targets missing: pass y or set every graph's target")
        dataset = Dataset([f.graph for f in feats], node_vocab, edge_vocab)
        split = DatasetSplit("fit", np.arange(len(feats)), np.zeros(0, dtype=np.int64))
        result = train(dataset, split, cfg, tcfg, self.pack_spec or PackSpec(), featurized=feats)
        self.model_ = result.model
        self.history_ = result.history
        self.featurizer_ = featurizer
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        graphs = check_graphs(X, self.model_.node_vocab, self.model_.edge_vocab)
        return predict(self.model_, self.featurizer_.transform(graphs), self.pack_spec or PackSpec())
