import numpy as np
import pytest
from sklearn.base import clone

from gpspp.encodings import FeaturizedGraph
from gpspp.estimator import GPSRegressor, GraphFeaturizer, check_graphs
from gpspp.exceptions import GraphValidationError
from gpspp.graph import Dataset
from gpspp.training import TrainConfig

from conftest import TINY_EDGE_VOCAB, TINY_NODE_VOCAB, tiny_config, tiny_molecule


def graphs(rng, n=6):
    return Dataset([tiny_molecule(rng) for _ in range(n)], TINY_NODE_VOCAB, TINY_EDGE_VOCAB)


def test_featurizer_transform(rng):
    X = graphs(rng, 3)
    out = GraphFeaturizer(k_lap=3, k_rw=4).fit_transform(X)
    assert len(out) == 3 and all(isinstance(f, FeaturizedGraph) for f in out)
    assert out[0].lap_vec.shape[1] == 3 and out[0].rw.shape[1] == 4


def test_featurizer_params_round_trip():
    f = GraphFeaturizer(k_lap=5)
    assert f.get_params()["k_lap"] == 5
    assert clone(f).get_params() == f.get_params()


def test_check_graphs_rejects_bad_input(rng):
    with pytest.raises(GraphValidationError):
        check_graphs([])
    with pytest.raises(GraphValidationError):
        check_graphs(["not a graph"])
    with pytest.raises(GraphValidationError):
        check_graphs(tiny_molecule(rng))
    bad = tiny_molecule(rng, 4)
    bad.node_cats[0, 0] = 99
    with pytest.raises(GraphValidationError, match="graph 0"):
        check_graphs([bad], TINY_NODE_VOCAB, TINY_EDGE_VOCAB)


def test_unfitted_predict_raises(rng):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        GPSRegressor().predict(graphs(rng, 2))


def test_regressor_fit_predict(rng):
    X = graphs(rng)
    y = np.linspace(4.0, 6.0, len(X))
    reg = GPSRegressor(model_config=tiny_config(), train_config=TrainConfig(total_epochs=3, warmup_epochs=1, seed=1))
    assert reg.fit(X, y) is reg
    pred = reg.predict(X)
    assert pred.shape == (len(X),) and np.isfinite(pred).all()
    assert len(reg.history_) == 3
    params = reg.get_params()
    assert params["model_config"] == tiny_config()
    assert clone(reg).get_params()["train_config"].total_epochs == 3


def test_regressor_requires_targets(rng):
    X = graphs(rng, 2)
    for g in X:
        g.target = None
    with pytest.raises(ValueError, match="targets"):
        GPSRegressor(model_config=tiny_config()).fit(X)
    with pytest.raises(ValueError):
        GPSRegressor(model_config=tiny_config()).fit(X, [1.0])
