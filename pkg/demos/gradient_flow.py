"""Per-layer attention gradient norms of a deep GAT, with and without LipschitzNorm.

Growth is the largest norm over training divided by the first-epoch norm.
"""
from attnlipkit.datasets import gen_synthetic_citation
from attnlipkit.diagnostics import gradient_flow
from attnlipkit.gnn import GATLayer, GNNModel, LayerConfig

g = gen_synthetic_citation(300, 4, 0.8, 16, seed=0)

for norm in ("none", "lipschitz"):
    layers, d = [], 16
    for _ in range(6):
        layers.append(GATLayer(d, LayerConfig(heads=2, hidden_dim=16, normalization=norm)))
        d = 16
    rep = gradient_flow(GNNModel(layers, num_classes=4), g, 30, seed=0)
    print(f"{norm:9s}  growth {rep.growth():8.1f}  first-epoch norms {rep.grad_norms[:, 0].round(4)}")
