"""Lipschitz-normalized attention for deep graph networks, in plain numpy.

Submodules:

- ``tensor``: matrix norms, a reverse-mode autodiff tape, finite differences
- ``attention``: row softmax, generic and multi-head attention, softmax Jacobians
- ``lipnorm``: LipschitzNorm score normalizations and closed-form bounds
- ``entropy``: Shannon-efficiency calibration of neighborhood scores
- ``graph`` / ``gnn``: CSR graphs, GAT / Graph Transformer / gated layers, training
- ``datasets``: TREES and synthetic citation generators, text graph format
- ``diagnostics``: empirical Lipschitz estimates, gradient flow, bound reports
- ``cli``: the ``attnlipkit`` command
"""

from . import attention, datasets, diagnostics, entropy, gnn, graph, lipnorm, tensor
from .attention import attention as attend
from .attention import multi_head, softmax_rows, transformer_attention
from .datasets import TreesSpec, gen_synthetic_citation, gen_trees, load_graph, save_graph
from .diagnostics import bound_report, empirical_lipschitz, gradient_flow, jacobian_operator_norm
from .entropy import calibrate_graph, calibrate_node
from .gnn import GATLayer, GNNModel, GraphTransformerLayer, GRUFrameworkLayer, LayerConfig, train
from .graph import SparseGraph
from .lipnorm import lipnorm_linear, lipnorm_transformer, theoretical_bound

__version__ = "0.1.0"
