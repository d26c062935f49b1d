import csv
import json
import math

import numpy as np
import pytest

from gpspp import training
from gpspp.autodiff import Tensor
from gpspp.encodings import featurize
from gpspp.exceptions import ConfigError, NumericError, TrainingDiverged
from gpspp.graph import Dataset, make_split
from gpspp.model import MaskingGroup
from gpspp.model.network import ModelOutput
from gpspp.packer import collate
from gpspp.training import (
    Adam,
    TrainConfig,
    clip_by_global_norm,
    composite_loss,
    corrupt_categories,
    corrupt_features,
    eval_masking_group,
    learning_rate,
    sample_masking_group,
    sample_masking_groups,
    train,
)

from conftest import TINY_EDGE_VOCAB, TINY_NODE_VOCAB, tiny_config, tiny_molecule


def tiny_dataset(n=6, seed=0, **kwargs):
    rng = np.random.default_rng(seed)
    return Dataset([tiny_molecule(rng, **kwargs) for _ in range(n)], TINY_NODE_VOCAB, TINY_EDGE_VOCAB,
                   valid_indices=range(n - 2, n))


def test_masking_group_frequencies():
    draws = sample_masking_groups(np.random.default_rng(0), 200_000)
    freq = np.bincount(draws, minlength=3) / len(draws)
    np.testing.assert_allclose(freq, [0.2, 0.6, 0.2], atol=0.005)


def test_masking_ratio_degenerate(rng):
    assert all(sample_masking_group(rng, (1, 0, 0)) == MaskingGroup.MASK_SPATIAL for _ in range(50))


def test_eval_group_without_positions():
    assert eval_masking_group(False) == MaskingGroup.MASK_SPATIAL
    assert eval_masking_group(True) == MaskingGroup.NO_MASK


def test_corruption_zero_rate_is_identity(rng):
    g = tiny_molecule(rng, 8)
    h, node_hit, edge_hit = corrupt_features(g, 0.0, rng, TINY_NODE_VOCAB, TINY_EDGE_VOCAB)
    np.testing.assert_array_equal(h.node_cats, g.node_cats)
    np.testing.assert_array_equal(h.edge_cats, g.edge_cats)
    assert not node_hit.any() and not edge_hit.any()


def test_corruption_full_rate_changes_every_entry(rng):
    g = tiny_molecule(rng, 8)
    h, node_hit, edge_hit = corrupt_features(g, 1.0, rng, TINY_NODE_VOCAB, TINY_EDGE_VOCAB)
    assert node_hit.all() and edge_hit.all()
    assert np.all(h.node_cats != g.node_cats)
    np.testing.assert_array_equal(h.node_cats[:, 2], 1 - g.node_cats[:, 2])  # binary column flips
    assert np.all(h.node_cats < np.array(TINY_NODE_VOCAB))


def test_corruption_keeps_reverse_edges_equal_and_topology(rng):
    g = tiny_molecule(rng, 10)
    h, _, _ = corrupt_features(g, 0.5, rng, TINY_NODE_VOCAB, TINY_EDGE_VOCAB)
    assert h.is_paired()
    np.testing.assert_array_equal(h.edges, g.edges)
    assert h.positions is g.positions and h.target == g.target


def test_single_category_column_never_corrupted(rng):
    cats = np.zeros((100, 2), dtype=np.int64)
    new, hit = corrupt_categories(cats, (1, 3), 1.0, rng)
    assert not hit[:, 0].any() and hit[:, 1].all()
    np.testing.assert_array_equal(new[:, 0], 0)


def test_corruption_is_uniform_over_other_categories():
    cats = np.zeros((60_000, 1), dtype=np.int64)
    new, _ = corrupt_categories(cats, (4,), 1.0, np.random.default_rng(2))
    freq = np.bincount(new[:, 0], minlength=4) / len(new)
    np.testing.assert_allclose(freq, [0, 1 / 3, 1 / 3, 1 / 3], atol=0.01)


def _output(pred, node_logits, edge_logits):
    return ModelOutput(Tensor(np.asarray(pred, float)), Tensor(node_logits), Tensor(edge_logits), None, None, None)


def test_loss_uniform_logits_give_log_vocab(rng):
    graphs = [tiny_molecule(rng, 4), tiny_molecule(rng, 3)]
    b = collate([featurize(g) for g in graphs])
    out = _output(b.targets, np.zeros((b.num_nodes, sum(TINY_NODE_VOCAB))), np.zeros((b.num_edges, sum(TINY_EDGE_VOCAB))))
    loss, terms = composite_loss(out, b, b.node_cats, b.edge_cats, TINY_NODE_VOCAB, TINY_EDGE_VOCAB)
    assert terms["mae"] == 0
    assert math.isclose(terms["ce_nodes"], np.mean(np.log(TINY_NODE_VOCAB)), abs_tol=1e-12)
    assert math.isclose(terms["ce_edges"], np.mean(np.log(TINY_EDGE_VOCAB)), abs_tol=1e-12)
    expected = 1.2 * (terms["ce_nodes"] + terms["ce_edges"])
    assert math.isclose(float(loss.data), expected, abs_tol=1e-12)


def scripted_ce(logits, cats, vocab):
    """Per-column log-softmax written out with plain loops."""
    total, count = 0.0, 0
    for row, labels in zip(logits, cats):
        offset = 0
        for v, label in zip(vocab, labels):
            z = row[offset:offset + v]
            total += math.log(sum(math.exp(t) for t in z)) - z[label]
            count += 1
            offset += v
    return total / count


def test_loss_matches_scripted_oracle(rng):
    graphs = [tiny_molecule(rng, 5), tiny_molecule(rng, 4)]
    b = collate([featurize(g) for g in graphs])
    node_logits = rng.normal(size=(b.num_nodes, sum(TINY_NODE_VOCAB)))
    edge_logits = rng.normal(size=(b.num_edges, sum(TINY_EDGE_VOCAB)))
    pred = b.targets + np.array([0.3, -1.1])
    loss, _ = composite_loss(_output(pred, node_logits, edge_logits), b, b.node_cats, b.edge_cats,
                             TINY_NODE_VOCAB, TINY_EDGE_VOCAB)
    expected = (abs(0.3) + abs(-1.1)) / 2 + 1.2 * scripted_ce(node_logits, b.node_cats, TINY_NODE_VOCAB) \
        + 1.2 * scripted_ce(edge_logits, b.edge_cats, TINY_EDGE_VOCAB)
    assert abs(float(loss.data) - expected) <= 1e-10


def test_loss_with_only_mae_weight_is_mae(rng):
    b = collate([featurize(tiny_molecule(rng, 5))])
    out = _output(b.targets + 0.7, rng.normal(size=(b.num_nodes, sum(TINY_NODE_VOCAB))),
                  rng.normal(size=(b.num_edges, sum(TINY_EDGE_VOCAB))))
    loss, _ = composite_loss(out, b, b.node_cats, b.edge_cats, TINY_NODE_VOCAB, TINY_EDGE_VOCAB, (1.0, 0.0, 0.0))
    assert float(loss.data) == pytest.approx(0.7, abs=1e-15)


def test_learning_rate_schedule():
    assert learning_rate(0, 4e-4, 10, 100) == 0
    assert learning_rate(10, 4e-4, 10, 100) == pytest.approx(4e-4)
    assert learning_rate(55, 4e-4, 10, 100) == pytest.approx(2e-4)
    assert learning_rate(100, 4e-4, 10, 100) == 0
    assert learning_rate(150, 4e-4, 10, 100) == 0


def test_clip_scales_to_max_norm():
    g = {"a": np.array([30.0, 0.0]), "b": np.array([[40.0]])}
    clipped, norm = clip_by_global_norm(g, 5.0)
    assert norm == pytest.approx(50.0)
    total = math.sqrt(sum(float((v ** 2).sum()) for v in clipped.values()))
    assert abs(total - 5.0) <= 1e-9


def test_clip_rejects_nonfinite():
    with pytest.raises(NumericError):
        clip_by_global_norm({"a": np.array([np.nan])}, 5.0)


def test_adam_converges_on_quadratic():
    x = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam(grad_clip=5.0)
    for step in range(500):
        opt.step({"x": x}, {"x": 2 * (x.data - 3.0)}, 0.05)
    assert abs(x.data[0] - 3.0) < 1e-3


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(masking_ratio=(0, 0, 0))
    with pytest.raises(ConfigError):
        TrainConfig(loss_weights=(1, -1, 0))
    with pytest.raises(ConfigError):
        TrainConfig().replace(bogus=1)


def test_load_config_tables(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[model]\nd_node = 16\nn_heads = 4\n\n[train]\npeak_lr = 0.001\nmasking_ratio = [1, 1, 1]\n")
    model_cfg, train_cfg = training.load_config(path)
    assert model_cfg.d_node == 16 and train_cfg.peak_lr == 0.001
    assert train_cfg.masking_ratio == (1.0, 1.0, 1.0)


def _quick(**kw):
    base = dict(total_epochs=2, warmup_epochs=1, peak_lr=1e-3, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_reproducible(tmp_path):
    ds = tiny_dataset()
    split = make_split(len(ds), "original", valid_indices=ds.valid_indices)
    cfg = tiny_config().replace(dropout_node=0.2, graph_dropout_max=0.2)
    a = train(ds, split, cfg, _quick(), out_dir=tmp_path / "a")
    b = train(ds, split, cfg, _quick(), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert repr(a.history) == repr(b.history)
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["steps"] == a.summary["steps"] > 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "metrics.csv")))
    assert {r["split"] for r in rows} == {"train", "eval"}
    assert (tmp_path / "a" / "checkpoint.gpsp").exists()


def test_different_seeds_differ():
    ds = tiny_dataset()
    split = make_split(len(ds), "train_plus_valid")
    a = train(ds, split, tiny_config(), _quick(seed=1))
    b = train(ds, split, tiny_config(), _quick(seed=2))
    assert repr(a.history) != repr(b.history)


def test_training_without_positions():
    ds = tiny_dataset(with_positions=False)
    split = make_split(len(ds), "train_plus_valid")
    result = train(ds, split, tiny_config(), _quick())
    assert math.isfinite(result.summary["final_train_mae"])


def test_spatial_mask_never_touches_positions(rng):
    class Trap:
        def __getattr__(self, name):
            raise AssertionError("positions were read")

        def __array__(self, *args, **kwargs):
            raise AssertionError("positions were read")

    from gpspp.model import GPSModel
    cfg = tiny_config()
    b = collate([featurize(tiny_molecule(rng, 6), cfg.k_lap, cfg.k_rw, cfg.max_spd, cfg.max_degree)])
    m = GPSModel(cfg, TINY_NODE_VOCAB, TINY_EDGE_VOCAB)
    expected = m(b, MaskingGroup.MASK_SPATIAL).prediction.data
    b.positions = Trap()
    np.testing.assert_array_equal(m(b, MaskingGroup.MASK_SPATIAL).prediction.data, expected)


def test_divergence_aborts_with_last_good_checkpoint(tmp_path, monkeypatch):
    ds = tiny_dataset()
    split = make_split(len(ds), "train_plus_valid")
    real = training.composite_loss
    calls = {"n": 0}

    def poisoned(*args, **kwargs):
        loss, terms = real(*args, **kwargs)
        calls["n"] += 1
        if calls["n"] > 3:
            loss = loss * float("nan")
        return loss, terms

    monkeypatch.setattr(training, "composite_loss", poisoned)
    with pytest.raises(TrainingDiverged) as info:
        train(ds, split, tiny_config(), _quick(total_epochs=3), out_dir=tmp_path)
    assert info.value.checkpoint is not None and info.value.checkpoint.exists()
