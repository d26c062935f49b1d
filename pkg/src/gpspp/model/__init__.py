from .config import ABLATION_FLAGS, MaskingGroup, ModelConfig
from .network import GPSModel, ModelOutput, encode_inputs, forward, gps_block, graph_dropout_rate
from .params import check_params, count_params, init_params, param_shapes

__all__ = [
    "ABLATION_FLAGS", "GPSModel", "MaskingGroup", "ModelConfig", "ModelOutput", "check_params",
    "count_params", "encode_inputs", "forward", "gps_block", "graph_dropout_rate", "init_params",
    "param_shapes",
]
