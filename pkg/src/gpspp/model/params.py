"""Learnable tensor layout: names, shapes and initialisation."""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Tensor
from ..exceptions import CheckpointError
from .config import ModelConfig


def _dense(shapes, prefix, fan_in, fan_out, bias=True):
    shapes[f"{prefix}/w"] = (fan_in, fan_out)
    if bias:
        shapes[f"{prefix}/b"] = (fan_out,)


def _norm(shapes, prefix, width):
    shapes[f"{prefix}/gamma"] = (width,)
    shapes[f"{prefix}/beta"] = (width,)


def _mlp(shapes, prefix, d_in, d_out, hidden):
    """Two-layer MLP: Dense -> GELU -> LayerNorm -> Dense."""
    _dense(shapes, f"{prefix}/dense1", d_in, hidden)
    _norm(shapes, f"{prefix}/norm", hidden)
    _dense(shapes, f"{prefix}/dense2", hidden, d_out)


def _encoder_mlp(shapes, prefix, d_in, d_out):
    """LayerNorm -> Dense(2h) -> ReLU -> LayerNorm -> Dense(d_out)."""
    _norm(shapes, f"{prefix}/norm1", d_in)
    _dense(shapes, f"{prefix}/dense1", d_in, 2 * d_in)
    _norm(shapes, f"{prefix}/norm2", 2 * d_in)
    _dense(shapes, f"{prefix}/dense2", 2 * d_in, d_out)


def node_input_width(cfg: ModelConfig) -> int:
    width = cfg.d_node
    if cfg.use_edge_features:
        width += cfg.d_edge
        if cfg.use_sender_aggregation:
            width += cfg.d_edge
    if cfg.use_adjacent_node_aggregation:
        width += cfg.d_node
        if cfg.use_sender_aggregation:
            width += cfg.d_node
    if cfg.use_global_features:
        width += cfg.d_global
    return width


def node_feature_width(cfg: ModelConfig) -> int:
    lat = cfg.encoder_latent
    width = cfg.d_node
    if cfg.use_lap_pe:
        width += 2 * lat
    if cfg.use_rwse:
        width += lat
    if cfg.use_local_centrality:
        width += cfg.embed_dim
    if cfg.use_3d_centrality:
        width += lat
    return width


def _bias_shapes(shapes, cfg, prefix):
    if cfg.use_spd_bias:
        shapes[f"{prefix}/spd/table"] = (cfg.max_spd + 2, cfg.n_heads)
    if cfg.use_3d_bias:
        _dense(shapes, f"{prefix}/bias3d/dense1", cfg.n_kernels, cfg.n_kernels)
        _dense(shapes, f"{prefix}/bias3d/dense2", cfg.n_kernels, cfg.n_heads)


def param_shapes(cfg: ModelConfig, node_vocab, edge_vocab) -> dict:
    """Ordered mapping of every learnable tensor name to its shape."""
    s: dict = {}
    d, de, dg, lat, emb = cfg.d_node, cfg.d_edge, cfg.d_global, cfg.encoder_latent, cfg.embed_dim
    K = cfg.n_kernels

    s["encoder/atom_embed/table"] = (int(sum(node_vocab)), emb)
    _mlp(s, "encoder/atom_mlp", emb, d, 4 * d)
    if cfg.use_lap_pe:
        _encoder_mlp(s, "encoder/lap_vec", cfg.k_lap, lat)
        _encoder_mlp(s, "encoder/lap_val", cfg.k_lap, lat)
    if cfg.use_rwse:
        _encoder_mlp(s, "encoder/rw", cfg.k_rw, lat)
    if cfg.use_local_centrality:
        s["encoder/centrality/table"] = (cfg.max_degree + 1, emb)
    if cfg.uses_3d:
        s["encoder/kernels/mu"] = (K,)
        s["encoder/kernels/sigma"] = (K,)
    if cfg.use_3d_centrality:
        s["encoder/x3d/w"] = (K, lat)
    _dense(s, "encoder/node_in", node_feature_width(cfg), d)

    if cfg.use_edge_features:
        s["encoder/bond_embed/table"] = (int(sum(edge_vocab)), emb)
        _mlp(s, "encoder/bond_mlp", emb, de, 4 * de)
        edge_width = de
        if cfg.use_bond_lengths:
            _encoder_mlp(s, "encoder/e3d", K, lat)
            edge_width += lat
        _dense(s, "encoder/edge_in", edge_width, de)
    if cfg.uses_global:
        s["encoder/global_embed/table"] = (1, dg)

    if cfg.use_mhsa and not cfg.per_layer_attention_bias:
        _bias_shapes(s, cfg, "bias")

    for layer in range(cfg.n_layers):
        p = f"layer{layer}"
        if cfg.use_mpnn:
            if cfg.use_edge_features:
                edge_in = 2 * d + de + (dg if cfg.use_global_features else 0)
                _mlp(s, f"{p}/mpnn/edge_mlp", edge_in, de, 4 * de)
            _mlp(s, f"{p}/mpnn/node_mlp", node_input_width(cfg), d, 4 * d)
            if cfg.use_global_features:
                global_in = dg + d + (de if cfg.use_edge_features else 0)
                _mlp(s, f"{p}/mpnn/global_mlp", global_in, dg, 4 * dg)
            _norm(s, f"{p}/mpnn/norm", d)
        if cfg.use_mhsa:
            if cfg.per_layer_attention_bias:
                _bias_shapes(s, cfg, f"{p}/bias")
            for name in ("query", "key", "value", "out"):
                _dense(s, f"{p}/attention/{name}", d, d)
        if cfg.use_ffn:
            _dense(s, f"{p}/ffn/dense1", d, 4 * d)
            _dense(s, f"{p}/ffn/dense2", 4 * d, d)

    hidden = cfg.decoder_hidden or d
    _dense(s, "decoder/dense1", d, hidden)
    _dense(s, "decoder/dense2", hidden, 1)
    if cfg.noisy_nodes:
        _dense(s, "heads/noisy_nodes", d, int(sum(node_vocab)))
    if cfg.noisy_edges and cfg.use_edge_features:
        _dense(s, "heads/noisy_edges", de, int(sum(edge_vocab)))
    return s


def count_params(cfg: ModelConfig, node_vocab, edge_vocab) -> int:
    """Exact number of learnable scalars for ``cfg`` and the given vocabularies."""
    return int(sum(math.prod(shape) for shape in param_shapes(cfg, node_vocab, edge_vocab).values()))


def init_params(cfg: ModelConfig, node_vocab, edge_vocab, seed=0) -> dict:
    """Glorot-uniform dense weights, zero biases, unit LayerNorm gains,
    N(0, 0.02) embedding tables, kernel centres on a grid over ``[0, mu_max]``.

    The final decoder weight starts at zero.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg, node_vocab, edge_vocab).items():
        leaf = name.rsplit("/", 1)[-1]
        if name == "decoder/dense2/w":
            # Zero output weights: the initial prediction is the bias alone,
            # independent of the (large, sum-pooled) node states.
            value = np.zeros(shape)
        elif leaf == "w":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        elif leaf == "table":
            value = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "gamma":
            value = np.ones(shape)
        elif leaf == "mu":
            value = np.linspace(0.0, cfg.mu_max, shape[0])
        elif leaf == "sigma":
            value = np.full(shape, cfg.sigma_init)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def check_params(params, cfg: ModelConfig, node_vocab, edge_vocab) -> None:
    """Raise :class:`CheckpointError` unless names and shapes match ``cfg`` exactly."""
    expected = param_shapes(cfg, node_vocab, edge_vocab)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape in expected.items():
        got = tuple(np.shape(getattr(params[name], "data", params[name])))
        if got != tuple(shape):
            raise CheckpointError(f"{name}: shape {got} != expected {tuple(shape)}")
