"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line.

Criteria 13 and 14 train deep models and take several minutes on one core.
Verdicts are collected by ``conftest.py`` and printed after the session.
"""

import json
import math
import time

import numpy as np
import pytest

from attnlipkit import tensor as T
from attnlipkit.attention import (
    attention,
    multi_head,
    softmax_directional,
    softmax_frobenius_via_chi2,
    softmax_jacobian,
    softmax_rows,
)
from attnlipkit.cli import run
from attnlipkit.diagnostics import AttentionConfig, bound_report, empirical_lipschitz
from attnlipkit.entropy import CalibrationStatus, calibrate_node, scaled_efficiency
from attnlipkit.gnn import (
    PRESETS,
    FrameworkConfig,
    GATLayer,
    GNNModel,
    GraphTransformerLayer,
    GRUFrameworkLayer,
    LayerConfig,
    cross_entropy,
)
from attnlipkit.graph import Mask, SparseGraph
from attnlipkit.lipnorm import LipschitzLinearScore, input_norm, multihead_bound, theoretical_bound, two_inf_norm

from conftest import ACCEPTANCE_LINES


def verdict(num, ok, detail, elapsed=None):
    tag = "PASS" if ok else "FAIL"
    timing = f" ({elapsed:.1f} s)" if elapsed is not None else ""
    line = f"criterion {num}: {tag} - {detail}{timing}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_graph(rng, n, p=0.3, d=4):
    A = rng.random((n, n)) < p
    np.fill_diagonal(A, False)
    src, dst = np.nonzero(A)
    return SparseGraph.from_edges(n, src, dst, rng.standard_normal((n, d)))


def _random_scores(rng, m, n):
    return rng.standard_normal((m, n)) * rng.choice([0.01, 0.1, 1.0, 10.0, 100.0])


def test_c01_softmax_frobenius_range():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    bad = 0
    for _ in range(1000):
        m, n = int(rng.integers(1, 9)), int(rng.integers(2, 65))
        f = np.linalg.norm(softmax_rows(_random_scores(rng, m, n)))
        bad += not (math.sqrt(m / n) - 1e-12 <= f <= math.sqrt(m) + 1e-12)
    dt = time.perf_counter() - t0
    verdict(1, bad == 0 and dt < 5, f"{bad} violations of sqrt(m/n) <= |softmax|_F <= sqrt(m) in 1000 matrices", dt)


def test_c02_chi2_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        M = _random_scores(rng, int(rng.integers(1, 9)), int(rng.integers(2, 65)))
        worst = max(worst, abs(softmax_frobenius_via_chi2(M) - np.linalg.norm(softmax_rows(M))))
    dt = time.perf_counter() - t0
    verdict(2, worst <= 1e-10 and dt < 5, f"max |direct - chi2 form| = {worst:.2e} (tol 1e-10)", dt)


def test_c03_bounded_scores():
    rng = np.random.default_rng(3)
    bad = 0
    for alpha in (0.1, 0.5, 1.0, 2.0):
        for _ in range(1000):
            m, n = int(rng.integers(1, 9)), int(rng.integers(2, 65))
            M = np.clip(_random_scores(rng, m, n), -alpha, alpha)
            bad += np.linalg.norm(softmax_rows(M)) > math.exp(alpha) * math.sqrt(m / n) + 1e-12
    verdict(3, bad == 0, f"{bad} violations of e^alpha sqrt(m/n) over 4 x 1000 clipped samples")


def test_c04_softmax_jacobian_vs_fd():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        x = rng.standard_normal(int(rng.integers(1, 33))) * rng.choice([0.1, 1.0, 5.0])
        fd = T.finite_diff_jacobian(lambda v: softmax_rows(v.reshape(1, -1)).ravel(), x, step=1e-5)
        J = softmax_jacobian(x)
        worst = max(worst, np.linalg.norm(J - fd) / max(np.linalg.norm(J), 1e-300))
    verdict(4, worst <= 1e-6, f"max relative error {worst:.2e} over 200 rows (tol 1e-6)")


def test_c05_sqrt2_bound():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(1000):
        m, n, d = int(rng.integers(1, 9)), int(rng.integers(2, 33)), int(rng.integers(1, 9))
        A = rng.standard_normal((d, n)) * rng.choice([0.1, 1.0, 10.0])
        B = _random_scores(rng, m, n)
        H = rng.standard_normal((m, n))
        lhs = np.linalg.norm(A @ softmax_directional(B, H).T)
        bad += lhs > math.sqrt(2) * float(input_norm(A)) * float(two_inf_norm(H)) * (1 + 1e-12)
    verdict(5, bad == 0, f"{bad} violations over 1000 triples")


def _sweep(kind, rng, count):
    cfgs = []
    for _ in range(count):
        n = int(rng.integers(2, 9))
        m = n if kind == "transformer" else int(rng.integers(1, 9))
        d = int(rng.integers(1, 6))
        cfgs.append(AttentionConfig(kind, m=m, n=n, d=d, input_scale=float(rng.choice([0.1, 1.0, 10.0]))))
    return cfgs


def test_c06_linear_lipnorm_bound():
    t0 = time.perf_counter()
    rows = bound_report(_sweep("linear", np.random.default_rng(6), 200), samples=10, perturbations=10)
    bad = sum(not r.satisfied for r in rows)
    witness = bound_report(
        [AttentionConfig("unnormalized_linear", m=2, n=2, d=3, input_scale=4.0)], seeds=range(20), samples=10, perturbations=10
    )[0]
    dt = time.perf_counter() - t0
    ok = bad == 0 and not witness.satisfied and dt < 60
    detail = f"{bad}/200 normalized violations; unnormalized witness {witness.empirical:.2f} vs {witness.theoretical:.4f}"
    verdict(6, ok, detail, dt)


def test_c07_transformer_lipnorm_bound():
    t0 = time.perf_counter()
    rows = bound_report(_sweep("transformer", np.random.default_rng(7), 200), samples=10, perturbations=10)
    bad = sum(not r.satisfied for r in rows)
    worst = max(r.empirical / r.theoretical for r in rows)
    dt = time.perf_counter() - t0
    verdict(7, bad == 0, f"{bad}/200 violations, max empirical/bound = {worst:.3f}", dt)


def test_c08_multihead_bound():
    rng = np.random.default_rng(8)
    bad, worst = 0, 0.0
    for _ in range(100):
        h = int(rng.integers(2, 5))
        d_in, d, m, n = (int(v) for v in rng.integers(1, 5, size=4))
        n = max(n, 2)
        Ws = [rng.standard_normal((d, d_in)) for _ in range(h)]
        W_O = rng.standard_normal((int(rng.integers(1, 5)), d * h))
        heads = [lambda Z, Q=rng.standard_normal((d, m)): attention(Z, LipschitzLinearScore(Q)) for _ in range(h)]
        f = lambda X, Ws=Ws, W_O=W_O, heads=heads: multi_head(X, Ws, W_O, heads)  # noqa: E731
        scale = float(rng.choice([0.1, 1.0, 10.0]))
        est = empirical_lipschitz(f, lambda r: r.standard_normal((d_in, n)) * scale, 10, perturbations=10, seed=int(rng.integers(1 << 30)))
        bound = multihead_bound(theoretical_bound("linear", m, n), W_O, Ws)
        bad += est.empirical > bound * (1 + 1e-9)
        worst = max(worst, est.empirical / bound)
    verdict(8, bad == 0, f"{bad}/100 violations, max empirical/bound = {worst:.3f}")


def test_c09_entropy_calibration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    worst_err, worst_evals, converged = 0.0, 0, 0
    for _ in range(100):
        s = rng.standard_normal(int(rng.integers(2, 201))) * rng.choice([0.01, 0.3, 1.0, 10.0])
        for target in (0.3, 0.5, 0.8):
            r = calibrate_node(s, target)
            if r.status is CalibrationStatus.CONVERGED:
                converged += 1
                worst_err = max(worst_err, abs(scaled_efficiency(s, r.c) - target))
                worst_evals = max(worst_evals, r.evaluations)
    monotone = True
    ws = np.linspace(0.0, 50.0, 101)
    for _ in range(100):
        s = rng.standard_normal(int(rng.integers(2, 50)))
        monotone &= bool(np.all(np.diff([scaled_efficiency(s, w) for w in ws]) <= 1e-12))
    dt = time.perf_counter() - t0
    ok = worst_err <= 1e-6 and worst_evals <= 100 and monotone and dt < 10
    detail = f"{converged}/300 converged, max |eta - T| = {worst_err:.1e}, max evaluations {worst_evals}, monotone={monotone}"
    verdict(9, ok, detail, dt)


def test_c10_framework_stochastic():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(50):
        g = random_graph(rng, int(rng.integers(2, 20)), p=float(rng.uniform(0.05, 0.6)))
        for preset in PRESETS:
            for norm in ("none", "lipschitz", "entropy"):
                cfg = FrameworkConfig(preset=preset, normalization=norm, target_eta=0.5, self_weight=0.3)
                layer = GRUFrameworkLayer(4, 4, cfg)
                p = layer.init(rng)
                a_uu, a_uv = layer.weights(p, g.features @ p["W"], g)
                total = np.asarray(a_uu) + np.bincount(g.sources, weights=np.asarray(a_uv), minlength=g.n)
                worst = max(worst, float(np.max(np.abs(total - 1.0))))
    verdict(10, worst <= 1e-12, f"max |a_uu + sum a_uv - 1| = {worst:.1e} over 50 graphs x {len(PRESETS)} presets")


def test_c11_permutation_equivariance():
    rng = np.random.default_rng(11)
    worst = 0.0
    for kind in ("gat", "gt", "framework"):
        g = random_graph(rng, 10)
        if kind == "framework":
            layer = GRUFrameworkLayer(4, 4, FrameworkConfig(activation="relu"))
        else:
            cls = GATLayer if kind == "gat" else GraphTransformerLayer
            layer = cls(4, LayerConfig(kind=kind, heads=2, hidden_dim=4))
        p = layer.init(rng)
        base = np.asarray(layer(p, g.features, g))
        for _ in range(100):
            perm = rng.permutation(10)
            out = np.asarray(layer(p, g.features[perm], g.permuted(perm)))
            worst = max(worst, float(np.max(np.abs(out - base[perm]))))
    verdict(11, worst <= 1e-10, f"max output difference {worst:.1e} over 3 kinds x 100 permutations")


def test_c12_end_to_end_gradient():
    rng = np.random.default_rng(12)
    g = random_graph(rng, 6, p=0.5, d=3)
    g = g.replace(labels=rng.integers(3, size=6), masks=np.full(6, int(Mask.TRAIN)), num_classes=3)
    errs = {}
    for norm in ("none", "lipschitz"):
        model = GNNModel([GATLayer(3, LayerConfig(hidden_dim=4, heads=2, normalization=norm)), GATLayer(4, LayerConfig(hidden_dim=4, normalization=norm))], 3)
        params = model.init(0)
        names = sorted(params)

        def loss(flat):
            p, off = {}, 0
            for k in names:
                p[k] = flat[off : off + params[k].size].reshape(params[k].shape)
                off += params[k].size
            return cross_entropy(model.forward(p, g), g.labels, np.arange(6))

        flat = np.concatenate([params[k].ravel() for k in names])
        tape = T.Tape()
        leaf = tape.leaf(flat)
        (grad,) = T.backward(tape, loss(leaf))
        fd = T.finite_diff_jacobian(lambda v: np.atleast_1d(loss(v)), flat)[0]
        errs[norm] = np.linalg.norm(grad - fd) / np.linalg.norm(fd)
    worst = max(errs.values())
    verdict(12, worst <= 1e-5, ", ".join(f"{k}: rel err {v:.1e}" for k, v in errs.items()) + " (tol 1e-5)")


def _growths(out):
    summary = json.loads((out / "summary.json").read_text())
    none = [summary[f"seed_{s}/none"]["growth"] for s in range(5)]
    lip = [summary[f"seed_{s}/lipschitz"]["growth"] for s in range(5)]
    return none, lip


@pytest.mark.slow
def test_c13_gradient_explosion(tmp_path):
    t0 = time.perf_counter()
    none, lip = [], []
    for seed in range(5):
        out = tmp_path / f"s{seed}"
        assert run(["gradient-flow", "--compare", "--seed", str(seed), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        none.append(summary[f"seed_{seed}/none"]["growth"])
        lip.append(summary[f"seed_{seed}/lipschitz"]["growth"])
    dt = time.perf_counter() - t0
    exploded = sum(g >= 1e3 for g in none)
    tame = sum(g <= 1e2 for g in lip)
    ok = exploded >= 4 and tame == 5 and dt < 600
    fmt = lambda xs: "[" + ", ".join(f"{x:.3g}" for x in xs) + "]"  # noqa: E731
    verdict(13, ok, f"unnormalized growth {fmt(none)} ({exploded}/5 >= 1e3); lipschitz growth {fmt(lip)} ({tame}/5 <= 1e2)", dt)


@pytest.mark.slow
def test_c14_trees_ordering(tmp_path):
    t0 = time.perf_counter()
    code = run(["trees-experiment", "--out", str(tmp_path)])
    dt = time.perf_counter() - t0
    summary = json.loads((tmp_path / "summary.json").read_text())
    means = summary["mean_train_acc"]
    gap = summary["gap_at_deepest"]
    ok = code == 0 and gap >= 0.10 and dt < 1200
    detail = ", ".join(f"{k} {v:.3f}" for k, v in sorted(means.items())) + f"; depth-5 gap {gap * 100:+.1f} pp (need >= +10)"
    verdict(14, ok, detail, dt)


SMALL = {
    "verify-bounds": {"diagnostics": {"samples": 10, "perturbations": 2, "configs": 12}},
    "calibrate": {"dataset": {"params": {"n": 60}}, "model": {"T": 0.5}},
    "gen-trees": {"dataset": {"params": {"depth": 3, "num_trees": 5}}},
    "train": {"dataset": {"params": {"n": 60, "feat_dim": 4}}, "model": {"hidden": 4}, "train": {"epochs": 5, "seeds": [0, 1]}},
    "gradient-flow": {"dataset": {"params": {"n": 60, "feat_dim": 4}}, "model": {"hidden": 8, "heads": 2, "layers": 3}, "train": {"epochs": 5}},
    "trees-experiment": {
        "dataset": {"params": {"num_trees": 8, "depths": [2, 3]}},
        "model": {"hidden": 4},
        "train": {"epochs": 3, "seeds": [0, 1]},
    },
}


def test_c15_determinism(tmp_path):
    differing = []
    for cmd, body in SMALL.items():
        cfg = tmp_path / f"{cmd}.json"
        cfg.write_text(json.dumps(body))
        out = tmp_path / cmd
        argv = [cmd, "--config", str(cfg), "--seed", "11", "--out", str(out)]
        if cmd == "gradient-flow":
            argv.append("--compare")
        codes = []
        snaps = []
        for _ in range(2):
            codes.append(run(argv))
            snaps.append({str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
        if codes[0] != codes[1] or snaps[0] != snaps[1] or not snaps[0]:
            differing.append(cmd)
    verdict(15, not differing, f"{len(SMALL) - len(differing)}/{len(SMALL)} subcommands byte-identical on rerun")
