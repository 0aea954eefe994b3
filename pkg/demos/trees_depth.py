"""Train GATs on small TREES instances: can the root find the answer leaf?

Accuracy at chance is 1/k with k = 2**(depth-1) possible answers.
"""
from attnlipkit.datasets import TreesSpec, gen_trees
from attnlipkit.graph import disjoint_union
from attnlipkit.gnn import GATLayer, GNNModel, LayerConfig, train

for depth in (2, 3):
    g = disjoint_union(gen_trees(TreesSpec(depth, num_trees=60, seed=0)))
    k = 2 ** (depth - 1)
    for norm in ("none", "lipschitz"):
        layers, d = [], g.features.shape[1]
        for _ in range(depth):
            layers.append(GATLayer(d, LayerConfig(hidden_dim=16, normalization=norm)))
            d = 16
        log = train(GNNModel(layers, num_classes=k), g, 60, lr=0.01, weight_decay=0.0)
        print(f"depth {depth}  {norm:9s}  train acc {log.train_acc[-1]:.3f}  (chance {1 / k:.3f})")
