from deepseg.nn.blocks import BlockError, BlockSpec, build_block, build_nasnet_cell, dense_connections
from deepseg.nn.graph import Graph, GraphError, Subgraph
from deepseg.nn.layers import RunContext, scheduled_drop_path
from deepseg.nn.model import (
    ENCODER_FAMILIES,
    ModelConfig,
    ModelGraph,
    assemble_model,
    build_decoder,
    count_layers,
    count_parameters,
)

__all__ = [
    "BlockError",
    "BlockSpec",
    "ENCODER_FAMILIES",
    "Graph",
    "GraphError",
    "ModelConfig",
    "ModelGraph",
    "RunContext",
    "Subgraph",
    "assemble_model",
    "build_block",
    "build_decoder",
    "build_nasnet_cell",
    "count_layers",
    "count_parameters",
    "dense_connections",
    "scheduled_drop_path",
]
