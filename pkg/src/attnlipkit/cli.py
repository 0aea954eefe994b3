"""Command-line entry point: ``attnlipkit <subcommand> [flags]``.

Every run writes its artifacts plus ``resolved_config.json`` (all defaults
filled in, seed included) into ``--out``. Settings resolve as
flags > config file > defaults. Exit codes: 0 success, 1 a built-in
acceptance check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as D
from .datasets import (
    GraphFormatError,
    MissingVectorSpec,
    TreesSpec,
    gen_synthetic_citation,
    gen_trees,
    load_graph,
    missing_vector_transform,
    save_graph,
)
from .entropy import CalibrationStatus, calibrate_segments
from .gnn import (
    FrameworkConfig,
    GATLayer,
    GNNModel,
    GRUFrameworkLayer,
    GraphTransformerLayer,
    LayerConfig,
    Normalization,
    train,
)
from .graph import SparseGraph, disjoint_union

__all__ = ["main", "run", "default_config", "resolve_config", "ConfigError"]

COMMANDS = ("verify-bounds", "calibrate", "gen-trees", "train", "gradient-flow", "trees-experiment")


class ConfigError(ValueError):
    pass


_BASE = {
    "seed": 0,
    "dataset": {"kind": "citation", "params": {}, "seed": 0},
    "model": {
        "layers": 2,
        "kind": "gat",
        "heads": 1,
        "hidden": 16,
        "normalization": "none",
        "T": None,
        "alpha": 1.0,
        "activation": "relu",
    },
    "train": {"epochs": 100, "lr": 0.005, "optimizer": "adam", "weight_decay": 5e-4, "seeds": [0]},
    "diagnostics": {"samples": 100, "perturbations": 5, "configs": 60, "compare": False},
    "output": {"dir": "out"},
}

_DATASET_PARAMS = {
    "citation": {"n": 300, "classes": 3, "homophily": 0.8, "feat_dim": 16, "missing_p": 0.0},
    "trees": {"depth": 4, "num_trees": 500, "depths": [4, 5]},
    "file": {"path": ""},
}

_OVERRIDES = {
    "gen-trees": {"dataset": {"kind": "trees"}},
    "trees-experiment": {
        "dataset": {"kind": "trees"},
        "model": {"hidden": 32, "normalization": "none"},
        "train": {"epochs": 100, "lr": 0.005, "weight_decay": 0.0, "seeds": [0, 1, 2, 3, 4]},
    },
    "gradient-flow": {"model": {"layers": 10, "heads": 8, "hidden": 64}, "train": {"epochs": 100}},
}


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    """Recursive merge; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for k, v in extra.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and k != "params":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            out[k] = _merge(out[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def default_config(command: str) -> dict:
    cfg = _merge(_BASE, _OVERRIDES.get(command, {}))
    return cfg


def _load_file(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if p.suffix in (".yaml", ".yml"):
        try:
            import yaml
        except ImportError:
            raise ConfigError("YAML configs need PyYAML; use JSON instead") from None
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"bad YAML in {path}: {exc}") from None
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return data


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = default_config(command)
    if args.config:
        cfg = _merge(cfg, _load_file(args.config))
    kind = cfg["dataset"]["kind"]
    if kind not in _DATASET_PARAMS:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    cfg["dataset"]["params"] = _merge(_DATASET_PARAMS[kind], cfg["dataset"]["params"], "dataset.params.")
    flags = {
        "seed": args.seed,
        ("output", "dir"): args.out,
        ("diagnostics", "samples"): args.samples,
        ("model", "layers"): args.layers,
        ("model", "normalization"): args.normalization,
        ("model", "T"): args.target_eta,
        ("diagnostics", "compare"): True if args.compare else None,
    }
    for key, val in flags.items():
        if val is None:
            continue
        if isinstance(key, tuple):
            cfg[key[0]][key[1]] = val
        else:
            cfg[key] = val
    if args.seed is not None:
        cfg["dataset"]["seed"] = args.seed
        if command != "trees-experiment":
            cfg["train"]["seeds"] = [args.seed]
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    m, t, d = cfg["model"], cfg["train"], cfg["diagnostics"]
    try:
        Normalization.parse(m["normalization"])
    except ValueError:
        raise ConfigError(f"unknown normalization {m['normalization']!r}") from None
    if m["kind"] not in ("gat", "transformer", "framework"):
        raise ConfigError(f"unknown model kind {m['kind']!r}")
    if int(m["layers"]) < 1 or int(m["hidden"]) < 1 or int(m["heads"]) < 1:
        raise ConfigError("model layers, hidden and heads must be >= 1")
    if int(m["hidden"]) % int(m["heads"]):
        raise ConfigError("model.hidden must be divisible by model.heads")
    if m["T"] is not None and not (0.0 < float(m["T"]) <= 1.0):
        raise ConfigError("model.T must lie in (0, 1]")
    if int(d["samples"]) < 1:
        raise ConfigError("samples must be >= 1")
    if t["optimizer"] not in ("adam", "sgd"):
        raise ConfigError(f"unknown optimizer {t['optimizer']!r}")
    if not t["seeds"]:
        raise ConfigError("train.seeds must be non-empty")


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _graph_from_config(cfg: dict, depth: int | None = None) -> SparseGraph:
    ds = cfg["dataset"]
    p = ds["params"]
    if ds["kind"] == "citation":
        g = gen_synthetic_citation(int(p["n"]), int(p["classes"]), float(p["homophily"]), int(p["feat_dim"]), seed=int(ds["seed"]))
        if float(p["missing_p"]) > 0:
            g = missing_vector_transform(g, MissingVectorSpec(float(p["missing_p"]), seed=int(ds["seed"])))
        return g
    if ds["kind"] == "trees":
        d = int(p["depth"]) if depth is None else depth
        return disjoint_union(gen_trees(TreesSpec(d, int(p["num_trees"]), int(ds["seed"]))))
    try:
        return load_graph(p["path"])
    except OSError as exc:
        raise ConfigError(f"cannot read graph {p['path']}: {exc.strerror}") from None


def build_model(cfg: dict, graph: SparseGraph, normalization: str | None = None, layers: int | None = None) -> GNNModel:
    m = cfg["model"]
    norm = m["normalization"] if normalization is None else normalization
    L = int(m["layers"]) if layers is None else layers
    hid, heads = int(m["hidden"]), int(m["heads"])
    target = _require_target(cfg) if Normalization.parse(norm) is Normalization.ENTROPY else None
    stack = []
    for i in range(L):
        d_in = graph.feat_dim if i == 0 else hid
        if m["kind"] == "framework":
            fc = FrameworkConfig(normalization=norm, target_eta=target, activation=m["activation"])
            stack.append(GRUFrameworkLayer(d_in, hid, fc))
        else:
            lc = LayerConfig(kind=m["kind"], heads=heads, hidden_dim=hid, normalization=norm, target_eta=target, activation=m["activation"])
            stack.append((GATLayer if m["kind"] == "gat" else GraphTransformerLayer)(d_in, lc))
    return GNNModel(stack, num_classes=max(graph.num_classes, 1))


def _fmt(x) -> str:
    return repr(float(x))


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def sweep_configs(cfg: dict) -> list[D.AttentionConfig]:
    """Seeded random sweep over shapes and kinds plus unnormalized witnesses."""
    rng = np.random.default_rng(int(cfg["seed"]))
    alpha = float(cfg["model"]["alpha"])
    out = []
    for i in range(int(cfg["diagnostics"]["configs"])):
        kind = ("linear", "transformer", "generic")[i % 3]
        n = int(rng.integers(2, 9))
        m = n if kind == "transformer" else int(rng.integers(1, 9))
        d = int(rng.integers(2, 6))
        out.append(D.AttentionConfig(kind, m=m, n=n, d=d, alpha=alpha))
    for scale in (2.5, 4.0):
        out.append(D.AttentionConfig("unnormalized_linear", m=2, n=2, d=3, input_scale=scale))
    return out


def cmd_verify_bounds(cfg: dict, out: Path) -> int:
    """Compare empirical and closed-form Lipschitz bounds over a random sweep."""
    diag = cfg["diagnostics"]
    rows = D.bound_report(
        sweep_configs(cfg), seeds=[int(cfg["seed"])], samples=int(diag["samples"]), perturbations=int(diag["perturbations"])
    )
    _write(out, "bounds.csv", D.bound_report_csv(rows))
    normalized = [r for r in rows if not r.kind.startswith("unnormalized")]
    ok = all(r.satisfied for r in normalized)
    witness = any(not r.satisfied for r in rows if r.kind.startswith("unnormalized"))
    _write(out, "summary.json", _dump_json({"normalized_rows_pass": ok, "unnormalized_witness": witness, "rows": len(rows)}))
    return 0 if ok else 1


def _require_target(cfg: dict) -> float:
    if cfg["model"]["T"] is None:
        raise ConfigError("an entropy target is required: pass --target-eta or set model.T")
    return float(cfg["model"]["T"])


def cmd_calibrate(cfg: dict, out: Path) -> int:
    """Calibrate dot-product neighborhood scores to the efficiency target ``model.T``."""
    target = _require_target(cfg)
    g = _graph_from_config(cfg)
    X = g.features
    scores = np.einsum("ij,ij->i", X[g.sources], X[g.targets]) / math.sqrt(max(g.feat_dim, 1))
    c, eta, statuses, evals = calibrate_segments(scores, g.sources, g.n, target)
    lines = ["node,c,eta,status,evaluations"]
    bad = 0
    for u in range(g.n):
        lines.append(f"{u},{_fmt(c[u])},{_fmt(eta[u])},{statuses[u].value},{int(evals[u])}")
        if statuses[u] is CalibrationStatus.CONVERGED and abs(eta[u] - target) > 1e-6:
            bad += 1
    _write(out, "calibration.csv", "\n".join(lines) + "\n")
    counts = {s.value: sum(st is s for st in statuses) for s in CalibrationStatus}
    _write(out, "summary.json", _dump_json({"target": target, "status_counts": counts, "off_target": bad}))
    return 0 if bad == 0 else 1


def cmd_gen_trees(cfg: dict, out: Path) -> int:
    """Write the batched TREES graph in the text graph format."""
    g = _graph_from_config(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, out / f"trees_depth{int(cfg['dataset']['params']['depth'])}.graph.txt")
    return 0


def _train_one(cfg: dict, graph: SparseGraph, seed: int, normalization=None, layers=None):
    t = cfg["train"]
    model = build_model(cfg, graph, normalization, layers)
    return model, train(
        model,
        graph,
        int(t["epochs"]),
        optimizer=t["optimizer"],
        lr=float(t["lr"]),
        weight_decay=float(t["weight_decay"]),
        seed=seed,
    )


def cmd_train(cfg: dict, out: Path) -> int:
    """Train a node classifier per seed and log metrics."""
    g = _graph_from_config(cfg)

    def one(seed):
        _, log = _train_one(cfg, g, int(seed))
        lines = ["epoch,loss,train_acc,val_acc,test_acc"]
        for e, (l, a, v, te) in enumerate(zip(log.loss, log.train_acc, log.val_acc, log.test_acc)):
            lines.append(f"{e},{_fmt(l)},{_fmt(a)},{_fmt(v)},{_fmt(te)}")
        _write(out / f"seed_{int(seed)}", "metrics.csv", "\n".join(lines) + "\n")
        return log.diverged

    diverged = D._parallel_map(one, cfg["train"]["seeds"])
    return 1 if any(diverged) else 0


def cmd_gradient_flow(cfg: dict, out: Path) -> int:
    """Log per-layer attention gradient norms during training."""
    g = _graph_from_config(cfg)
    t = cfg["train"]
    chosen = Normalization.parse(cfg["model"]["normalization"]).value
    norms = [chosen]
    if cfg["diagnostics"]["compare"]:
        other = Normalization.LIPSCHITZ.value if chosen == Normalization.NONE.value else Normalization.NONE.value
        norms = [Normalization.NONE.value, chosen if chosen != Normalization.NONE.value else other]
    summary = {}
    for seed in t["seeds"]:
        seed = int(seed)
        init = None
        for norm in norms:
            model = build_model(cfg, g, norm)
            if init is None:
                init = model.init(seed)  # shared initial weights across normalizations
            rep = D.gradient_flow(
                model, g, int(t["epochs"]), seed=seed, params=init,
                lr=float(t["lr"]), optimizer=t["optimizer"], weight_decay=float(t["weight_decay"]),
            )
            _write(out / f"seed_{seed}", f"grad_flow_{norm}.csv", rep.to_csv())
            summary[f"seed_{seed}/{norm}"] = {"growth": rep.growth(), "diverged": rep.diverged, "epochs": rep.epochs}
    _write(out, "summary.json", _dump_json(summary))
    return 0


def cmd_trees_experiment(cfg: dict, out: Path) -> int:
    """GAT vs GAT-Lip final train accuracy on TREES for each depth; depth + 1 layers."""
    p, t = cfg["dataset"]["params"], cfg["train"]
    depths = [int(d) for d in p["depths"]]
    lines = ["depth,normalization,seed,final_train_acc"]
    means = {}
    for depth in depths:
        g = _graph_from_config(cfg, depth=depth)
        for norm in (Normalization.NONE.value, Normalization.LIPSCHITZ.value):
            accs = D._parallel_map(
                lambda s: _train_one(cfg, g, int(s), norm, layers=depth + 1)[1].train_acc[-1], t["seeds"]
            )
            for s, a in zip(t["seeds"], accs):
                lines.append(f"{depth},{norm},{int(s)},{_fmt(a)}")
            means[f"{depth}/{norm}"] = float(np.mean(accs))
    _write(out, "trees_results.csv", "\n".join(lines) + "\n")
    deepest = max(depths)
    gap = means[f"{deepest}/lipschitz"] - means[f"{deepest}/none"]
    ok = gap >= 0.10
    _write(out, "summary.json", _dump_json({"mean_train_acc": means, "gap_at_deepest": gap, "ordering_holds": ok}))
    return 0 if ok else 1


_HANDLERS = {
    "verify-bounds": cmd_verify_bounds,
    "calibrate": cmd_calibrate,
    "gen-trees": cmd_gen_trees,
    "train": cmd_train,
    "gradient-flow": cmd_gradient_flow,
    "trees-experiment": cmd_trees_experiment,
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON (or YAML) config file")
    common.add_argument("--seed", type=int, help="master seed (non-negative)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--samples", type=int, help="samples per bound configuration")
    common.add_argument("--layers", type=int, help="number of attention layers")
    common.add_argument("--normalization", choices=["none", "lip", "entropy"])
    common.add_argument("--target-eta", type=float, dest="target_eta", help="entropy target T in (0, 1]")
    common.add_argument("--compare", action="store_true", help="also run the other normalization on the same init")
    ap = argparse.ArgumentParser(prog="attnlipkit", description="Lipschitz-normalized attention experiments")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=(_HANDLERS[name].__doc__ or name).strip().splitlines()[0])
    return ap


def run(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2
    try:
        cfg = resolve_config(args.command, args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["output"]["dir"])
    _write(out, "resolved_config.json", _dump_json({"command": args.command, **cfg}))
    try:
        return _HANDLERS[args.command](cfg, out)
    except (ConfigError, GraphFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
