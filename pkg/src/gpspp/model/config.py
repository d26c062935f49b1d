"""Architecture hyperparameters and ablation flags."""

from __future__ import annotations

import dataclasses
import enum
import sys
from dataclasses import dataclass

from ..exceptions import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class MaskingGroup(enum.IntEnum):
    """Which input group is hidden for a pack.

    ``MASK_SPATIAL`` hides the 3D node, edge and bias features;
    ``MASK_TOPOLOGICAL`` hides the shortest-path bias.
    """

    MASK_SPATIAL = 0
    MASK_TOPOLOGICAL = 1
    NO_MASK = 2


ABLATION_FLAGS = (
    "use_mpnn",
    "use_edge_features",
    "use_global_features",
    "use_sender_aggregation",
    "use_adjacent_node_aggregation",
    "use_mhsa",
    "use_ffn",
    "use_spd_bias",
    "use_3d_bias",
    "use_3d_centrality",
    "use_lap_pe",
    "use_rwse",
    "use_local_centrality",
    "use_bond_lengths",
)

_RATES = (
    "dropout_message",
    "dropout_node",
    "dropout_global",
    "dropout_attention",
    "dropout_encoder",
    "dropout_ffn",
    "graph_dropout_max",
)


@dataclass(frozen=True)
class ModelConfig:
    d_node: int = 256
    d_edge: int = 128
    d_global: int = 64
    n_layers: int = 16
    n_heads: int = 32
    n_kernels: int = 128
    k_lap: int = 7
    k_rw: int = 16
    encoder_latent: int = 32
    embed_dim: int = 64
    max_spd: int = 20
    max_degree: int = 10
    decoder_hidden: int | None = None

    dropout_message: float = 0.0035
    dropout_node: float = 0.3
    dropout_global: float = 0.35
    dropout_attention: float = 0.3
    dropout_encoder: float = 0.18
    dropout_ffn: float = 0.0
    graph_dropout_max: float = 0.3

    use_mpnn: bool = True
    use_edge_features: bool = True
    use_global_features: bool = True
    use_sender_aggregation: bool = True
    use_adjacent_node_aggregation: bool = True
    use_mhsa: bool = True
    use_ffn: bool = True
    use_spd_bias: bool = True
    use_3d_bias: bool = True
    use_3d_centrality: bool = True
    use_lap_pe: bool = True
    use_rwse: bool = True
    use_local_centrality: bool = True
    use_bond_lengths: bool = True

    per_layer_attention_bias: bool = False
    noisy_nodes: bool = True
    noisy_edges: bool = True
    layer_norm_eps: float = 1e-9
    mu_max: float = 12.0
    sigma_init: float = 0.5

    def __post_init__(self):
        for name in ("d_node", "d_edge", "d_global", "n_layers", "n_heads", "n_kernels",
                     "k_lap", "k_rw", "encoder_latent", "embed_dim", "max_spd", "max_degree"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_node % self.n_heads:
            raise ConfigError(f"d_node={self.d_node} is not divisible by n_heads={self.n_heads}")
        for name in _RATES:
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name}={rate} outside [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_node // self.n_heads

    @property
    def uses_edges(self) -> bool:
        return self.use_edge_features

    @property
    def uses_3d(self) -> bool:
        return self.use_3d_centrality or self.use_bond_lengths or (self.use_mhsa and self.use_3d_bias)

    @property
    def uses_global(self) -> bool:
        return self.use_mpnn and self.use_global_features

    def replace(self, **changes) -> "ModelConfig":
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def without_dropout(self) -> "ModelConfig":
        return self.replace(**{name: 0.0 for name in _RATES})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        return cls().replace(**values)

    @classmethod
    def from_toml(cls, path) -> "ModelConfig":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data.get("model", data))
