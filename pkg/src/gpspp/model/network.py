"""Input encoder, GPS++ blocks, decoder and reconstruction heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, load_params, ops, save_params
from ..encodings import MIN_SIGMA
from ..exceptions import CheckpointError, MaskingError
from ..packer import PackedBatch
from .config import MaskingGroup, ModelConfig
from .params import check_params, count_params, init_params


def _dense(params, prefix, x):
    b = params.get(f"{prefix}/b")
    return ops.dense(x, params[f"{prefix}/w"], b)


def _norm(params, prefix, x, eps):
    return ops.layer_norm(x, params[f"{prefix}/gamma"], params[f"{prefix}/beta"], eps)


def mlp(params, prefix, x, eps):
    """Dense -> GELU -> LayerNorm -> Dense."""
    h = ops.gelu(_dense(params, f"{prefix}/dense1", x))
    return _dense(params, f"{prefix}/dense2", _norm(params, f"{prefix}/norm", h, eps))


def encoder_mlp(params, prefix, x, cfg, rng):
    """Project an auxiliary feature to the shared latent width."""
    h = ops.relu(_dense(params, f"{prefix}/dense1", _norm(params, f"{prefix}/norm1", x, cfg.layer_norm_eps)))
    out = _dense(params, f"{prefix}/dense2", _norm(params, f"{prefix}/norm2", h, cfg.layer_norm_eps))
    return ops.dropout(out, cfg.dropout_encoder, rng)


def _category_offsets(vocab):
    return np.concatenate([[0], np.cumsum(vocab)[:-1]]).astype(np.int64)


@dataclass
class EncodedInputs:
    X0: Tensor
    E0: Tensor | None
    g0: Tensor | None
    bias: object  # Tensor (H, N, N), None, or a per-layer list of those
    node_mask: np.ndarray
    edge_mask: np.ndarray
    graph_mask: np.ndarray


@dataclass
class ModelOutput:
    prediction: Tensor  # (G,)
    node_logits: Tensor | None
    edge_logits: Tensor | None
    X: Tensor
    E: Tensor | None
    g: Tensor | None


def _attention_bias(batch, params, cfg, prefix, group, psi_pairs):
    n_pairs = len(batch.pair_i)
    parts = []
    if cfg.use_spd_bias and group != MaskingGroup.MASK_TOPOLOGICAL:
        parts.append(ops.embed(params[f"{prefix}/spd/table"], batch.pair_spd))
    if cfg.use_3d_bias and psi_pairs is not None:
        h = ops.gelu(_dense(params, f"{prefix}/bias3d/dense1", psi_pairs))
        parts.append(_dense(params, f"{prefix}/bias3d/dense2", h))
    if not parts or n_pairs == 0:
        return None
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return ops.scatter_pairs(total, batch.pair_i, batch.pair_j, batch.num_nodes)


def encode_inputs(batch: PackedBatch, params, cfg: ModelConfig, node_vocab, edge_vocab,
                  group=MaskingGroup.MASK_SPATIAL, rng=None) -> EncodedInputs:
    """Build the initial node, edge and global states and the attention bias.

    Inputs hidden by ``group`` are replaced by zeros (features) or dropped
    (bias terms); under ``MASK_SPATIAL`` positions are never read.
    """
    group = MaskingGroup(group)
    eps = cfg.layer_norm_eps
    spatial = group != MaskingGroup.MASK_SPATIAL and cfg.uses_3d
    if spatial and batch.positions is None:
        raise MaskingError(f"masking group {group.name} needs positions, but the batch has none")
    n, lat = batch.num_nodes, cfg.encoder_latent

    psi_pairs = None
    if spatial:
        pos = Tensor(batch.positions) if not isinstance(batch.positions, Tensor) else batch.positions
        mu, sigma = params["encoder/kernels/mu"], params["encoder/kernels/sigma"]
        diff = ops.gather_rows(pos, batch.pair_i) - ops.gather_rows(pos, batch.pair_j)
        psi_pairs = ops.gaussian_kernels(ops.row_norm(diff), mu, sigma, MIN_SIGMA)

    offsets = _category_offsets(node_vocab)
    atom = ops.sum(ops.embed(params["encoder/atom_embed/table"], batch.node_cats + offsets), axis=1)
    parts = [ops.dropout(mlp(params, "encoder/atom_mlp", atom, eps), cfg.dropout_encoder, rng)]
    if cfg.use_lap_pe:
        parts.append(encoder_mlp(params, "encoder/lap_vec", Tensor(batch.lap_vec), cfg, rng))
        parts.append(encoder_mlp(params, "encoder/lap_val", Tensor(batch.lap_val), cfg, rng))
    if cfg.use_rwse:
        parts.append(encoder_mlp(params, "encoder/rw", Tensor(batch.rw), cfg, rng))
    if cfg.use_local_centrality:
        degree = np.minimum(batch.degree, cfg.max_degree)
        parts.append(ops.embed(params["encoder/centrality/table"], degree))
    if cfg.use_3d_centrality:
        if psi_pairs is None:
            parts.append(Tensor(np.zeros((n, lat))))
        else:
            summed = ops.scatter_add_rows(psi_pairs, batch.pair_i, n)
            parts.append(summed @ params["encoder/x3d/w"])
    X0 = _dense(params, "encoder/node_in", ops.concat(parts, axis=-1))

    E0 = None
    if cfg.use_edge_features:
        eoff = _category_offsets(edge_vocab)
        bond = ops.sum(ops.embed(params["encoder/bond_embed/table"], batch.edge_cats + eoff), axis=1)
        eparts = [ops.dropout(mlp(params, "encoder/bond_mlp", bond, eps), cfg.dropout_encoder, rng)]
        if cfg.use_bond_lengths:
            if psi_pairs is None:
                eparts.append(Tensor(np.zeros((batch.num_edges, lat))))
            else:
                ediff = ops.gather_rows(pos, batch.senders) - ops.gather_rows(pos, batch.receivers)
                psi_edges = ops.gaussian_kernels(ops.row_norm(ediff), mu, sigma, MIN_SIGMA)
                eparts.append(encoder_mlp(params, "encoder/e3d", psi_edges, cfg, rng))
        E0 = _dense(params, "encoder/edge_in", ops.concat(eparts, axis=-1))

    g0 = None
    if cfg.uses_global:
        g0 = ops.embed(params["encoder/global_embed/table"], np.zeros(batch.num_graphs, dtype=np.int64))

    bias = None
    if cfg.use_mhsa:
        if cfg.per_layer_attention_bias:
            bias = [_attention_bias(batch, params, cfg, f"layer{layer}/bias", group, psi_pairs)
                    for layer in range(cfg.n_layers)]
        else:
            bias = _attention_bias(batch, params, cfg, "bias", group, psi_pairs)

    return EncodedInputs(X0, E0, g0, bias, batch.node_mask, batch.edge_mask, batch.graph_mask)


def mpnn_layer(X, E, g, layer, params, cfg: ModelConfig, batch: PackedBatch, rng=None):
    """One message-passing update; returns ``(Y, E_next, g_next)``."""
    p = f"layer{layer}/mpnn"
    eps = cfg.layer_norm_eps
    n, n_graphs = batch.num_nodes, batch.num_graphs
    src, dst = batch.senders, batch.receivers
    use_g = cfg.use_global_features

    messages = None
    inputs = [X]
    if cfg.use_edge_features:
        c_uv = [ops.gather_rows(X, src), ops.gather_rows(X, dst), E]
        if use_g:
            c_uv.append(ops.gather_rows(g, batch.edge_graph))
        messages = ops.dropout(mlp(params, f"{p}/edge_mlp", ops.concat(c_uv), eps), cfg.dropout_message, rng)
        inputs.append(ops.scatter_add_rows(messages, dst, n))
        if cfg.use_sender_aggregation:
            inputs.append(ops.scatter_add_rows(messages, src, n))
    if cfg.use_adjacent_node_aggregation:
        inputs.append(ops.scatter_add_rows(ops.gather_rows(X, src), dst, n))
        if cfg.use_sender_aggregation:
            inputs.append(ops.scatter_add_rows(ops.gather_rows(X, dst), src, n))
    if use_g:
        inputs.append(ops.gather_rows(g, batch.node_graph))
    x_bar = mlp(params, f"{p}/node_mlp", ops.concat(inputs), eps)

    g_next = g
    if use_g:
        pooled = [g, ops.segment_sum(x_bar, batch.node_graph, n_graphs)]
        if messages is not None:
            pooled.append(ops.segment_sum(messages, batch.edge_graph, n_graphs))
        g_bar = mlp(params, f"{p}/global_mlp", ops.concat(pooled), eps)
        g_next = ops.dropout(g_bar, cfg.dropout_global, rng) + g

    Y = _norm(params, f"{p}/norm", ops.dropout(x_bar, cfg.dropout_node, rng) + X, eps)
    E_next = E if messages is None else messages + E
    return Y, E_next, g_next


def graph_dropout_rate(layer, cfg: ModelConfig) -> float:
    """Stochastic-depth rate growing linearly to ``graph_dropout_max`` at the last layer."""
    return (layer + 1) / cfg.n_layers * cfg.graph_dropout_max


def biased_attention(X, bias, layer, params, cfg: ModelConfig, batch: PackedBatch, rng=None):
    """Multi-head self-attention restricted to node pairs within the same graph."""
    p = f"layer{layer}/attention"
    n, h, dh = batch.num_nodes, cfg.n_heads, cfg.d_head

    def heads(name):
        return ops.transpose(ops.reshape(_dense(params, f"{p}/{name}", X), (n, h, dh)), (1, 0, 2))

    q, k, v = heads("query"), heads("key"), heads("value")
    logits = (q @ ops.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    if bias is not None:
        logits = logits + bias
    attn = ops.masked_softmax(logits, batch.attn_mask[None, :, :])
    attn = ops.dropout(attn, cfg.dropout_attention, rng)
    mixed = ops.reshape(ops.transpose(attn @ v, (1, 0, 2)), (n, h * dh))
    out = _dense(params, f"{p}/out", mixed)
    rate = graph_dropout_rate(layer, cfg)
    return ops.graph_dropout(out, rate, batch.node_graph, batch.num_graphs, rng) + X


def feed_forward(X, layer, params, cfg: ModelConfig, batch: PackedBatch, rng=None):
    p = f"layer{layer}/ffn"
    h = ops.dropout(ops.gelu(_dense(params, f"{p}/dense1", X)), cfg.dropout_ffn, rng)
    out = _dense(params, f"{p}/dense2", h)
    rate = graph_dropout_rate(layer, cfg)
    return ops.graph_dropout(out, rate, batch.node_graph, batch.num_graphs, rng) + X


def gps_block(X, E, g, bias, layer, params, cfg: ModelConfig, batch: PackedBatch, rng=None):
    """MPNN and biased attention in parallel, summed, then the FFN.

    A disabled branch contributes nothing; with both disabled the block input
    passes straight to the FFN.
    """
    branches = []
    E_next, g_next = E, g
    if cfg.use_mpnn:
        Y, E_next, g_next = mpnn_layer(X, E, g, layer, params, cfg, batch, rng)
        branches.append(Y)
    if cfg.use_mhsa:
        branches.append(biased_attention(X, bias, layer, params, cfg, batch, rng))
    if not branches:
        combined = X
    elif len(branches) == 1:
        combined = branches[0]
    else:
        combined = branches[0] + branches[1]
    X_next = feed_forward(combined, layer, params, cfg, batch, rng) if cfg.use_ffn else combined
    return X_next, E_next, g_next


def decode(X, batch: PackedBatch, params, cfg: ModelConfig):
    """Sum-pool valid nodes per graph, then a two-layer MLP to one scalar per graph."""
    pooled = ops.segment_sum(X, batch.node_graph, batch.num_graphs)
    h = ops.gelu(_dense(params, "decoder/dense1", pooled))
    return ops.reshape(_dense(params, "decoder/dense2", h), (batch.num_graphs,))


def forward(batch: PackedBatch, params, cfg: ModelConfig, node_vocab, edge_vocab,
            group=MaskingGroup.MASK_SPATIAL, rng=None) -> ModelOutput:
    enc = encode_inputs(batch, params, cfg, node_vocab, edge_vocab, group, rng)
    X, E, g = enc.X0, enc.E0, enc.g0
    for layer in range(cfg.n_layers):
        bias = enc.bias[layer] if isinstance(enc.bias, list) else enc.bias
        X, E, g = gps_block(X, E, g, bias, layer, params, cfg, batch, rng)
    prediction = decode(X, batch, params, cfg)
    node_logits = _dense(params, "heads/noisy_nodes", X) if cfg.noisy_nodes else None
    edge_logits = None
    if cfg.noisy_edges and E is not None:
        edge_logits = _dense(params, "heads/noisy_edges", E)
    return ModelOutput(prediction, node_logits, edge_logits, X, E, g)


class GPSModel:
    """Configuration, vocabularies and parameter store bundled together."""

    def __init__(self, config: ModelConfig, node_vocab, edge_vocab, params=None, seed=0):
        self.config = config
        self.node_vocab = tuple(int(v) for v in node_vocab)
        self.edge_vocab = tuple(int(v) for v in edge_vocab)
        if params is None:
            params = init_params(config, self.node_vocab, self.edge_vocab, seed)
        else:
            check_params(params, config, self.node_vocab, self.edge_vocab)
            params = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True, name=k)
                      for k, v in params.items()}
        self.params = params

    def __call__(self, batch, group=MaskingGroup.MASK_SPATIAL, rng=None) -> ModelOutput:
        return forward(batch, self.params, self.config, self.node_vocab, self.edge_vocab, group, rng)

    @property
    def num_params(self) -> int:
        return count_params(self.config, self.node_vocab, self.edge_vocab)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        check_params(state, self.config, self.node_vocab, self.edge_vocab)
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def metadata(self) -> dict:
        return {"config": self.config.to_dict(), "node_vocab": list(self.node_vocab),
                "edge_vocab": list(self.edge_vocab)}

    def save(self, path, extra=None):
        meta = self.metadata()
        if extra:
            meta.update(extra)
        save_params(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "GPSModel":
        params, meta = load_params(path)
        try:
            config = ModelConfig.from_dict(meta["config"])
            node_vocab, edge_vocab = meta["node_vocab"], meta["edge_vocab"]
        except KeyError as exc:
            raise CheckpointError(f"{path}: checkpoint metadata lacks {exc}") from exc
        return cls(config, node_vocab, edge_vocab, params=params)
