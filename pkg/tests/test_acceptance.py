"""Acceptance criteria 1-9.

Every test prints one ``criterion N: PASS|FAIL`` line; the lines are repeated
in a summary section at the end of the pytest run.  Thresholds are the
stated ones.  Criteria 7 and 8 run real searches and take a few minutes each.
"""

import time

import numpy as np
import pytest

from microdarts import autodiff as ad
from microdarts.autodiff import Graph, Tensor, grad_check
from microdarts.cli import main
from microdarts.config import RunConfig
from microdarts.discretize import (canonical, collect_activations, decorrelation_discretize, exhaustive_oracle,
                                   synthesis_score, value_discretize)
from microdarts.instances import correlated_instance, orthogonal_instance
from microdarts.ops import (FactorizedReduce, OpKind, ReLUConvBN, SearchSpace, alpha_grad_analytic, build_op,
                            mix, static_bn)
from microdarts.retrain import retrain
from microdarts.rng import SplitMix64
from microdarts.supernet import SuperNet
from microdarts.trainer import search

OP_KINDS = [OpKind.from_name(n) for n in SearchSpace.named("S1").names]


# --- 1. gradient correctness


def _micro_net(i: int, dtype):
    """A preprocessing conv, one mixed edge over four op kinds, optional node norm, linear head.

    The op subset rotates with ``i`` so that 20 nets cover every kind at both
    strides, and factorized reduce via stride-2 skip.
    """
    r = SplitMix64(i).fork("micro")
    stride = 1 + i % 2
    kinds = [OP_KINDS[0]] + [OP_KINDS[1 + (3 * i + j) % 7] for j in range(3)]
    kinds = [k.with_stride(stride) for k in kinds]
    pre = ReLUConvBN(2, 4, 1, 1, 0, r.fork("pre")) if i % 3 else FactorizedReduce(2, 4, r.fork("pre"))
    ops = [build_op(k, 4, 4, r.fork(f"op{j}")) for j, k in enumerate(kinds)]
    head = Tensor(r.normal((3, 4)) * 0.5, requires_grad=True, dtype=dtype)
    alpha = Tensor(r.normal(len(kinds)), requires_grad=True, dtype=dtype)
    x = Tensor(r.normal((2, 2, 8, 8)), requires_grad=True, dtype=dtype)
    labels = np.array([i % 3, (i + 1) % 3])
    node_norm = i % 4 == 1

    def fn(**_):
        h = pre(x)
        y = mix([None if k.kind == "zero" else op(h) for k, op in zip(kinds, ops)], alpha)
        if node_norm:
            y = static_bn(y)
        return ad.cross_entropy(ad.linear(ad.global_avg_pool(y), head), labels)

    params = [x, alpha, head] + pre.parameters() + [p for op in ops for p in op.parameters()]
    for p in params:
        p.data = p.data.astype(dtype)
    return Graph(fn), {f"p{j}": p for j, p in enumerate(params)}, kinds


def _c1(tag, dtype):
    t0 = time.time()
    worst, covered, normwise = 0.0, set(), 0.0
    with ad.precision(tag):
        for i in range(20):
            graph, inputs, kinds = _micro_net(i, dtype)
            covered.update(k.name + f"/s{k.stride}" for k in kinds)
            rep = grad_check(graph, inputs, cap=400)
            assert rep.compared > 0
            worst = max(worst, rep.max_rel_err)
            if tag == "f32":
                # f32 autodiff vs f64 autodiff, error relative to each tensor's largest entry
                grads32 = [t.grad.astype(np.float64) for t in inputs.values()]
                graph64, inputs64, _ = _micro_net(i, np.float64)
                with ad.precision("f64"):
                    graph64.backward(graph64.forward(inputs64), list(inputs64.values()))
                for a, b in zip(grads32, (t.grad for t in inputs64.values())):
                    normwise = max(normwise, np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))
    all_kinds = {k.with_stride(s).name + f"/s{s}" for k in OP_KINDS for s in (1, 2)}
    assert covered >= all_kinds
    return worst, normwise, time.time() - t0


def test_c1_gradient_correctness_f64(criterion):
    worst, _, dt = _c1("f64", np.float64)
    ok = worst < 1e-5 and dt < 120
    criterion("1 (f64)", ok, f"max rel err {worst:.2e} on 20 micro-nets covering 16 op variants, {dt:.0f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="f32 rounding leaves ~1e-8 absolute error on gradient entries that "
                                       "are 1e-5 of their tensor's scale; see README")
def test_c1_gradient_correctness_f32(criterion):
    worst, normwise, dt = _c1("f32", np.float32)
    print(f"f32 error relative to each tensor's largest entry: {normwise:.2e}")
    ok = worst < 1e-3 and dt < 120
    criterion("1 (f32)", ok, f"max rel err {worst:.2e} (need < 1e-3), {dt:.0f}s")
    assert ok


# --- 2. alpha gradient identity


def test_c2_alpha_gradient_identity(criterion):
    worst = 0.0
    with ad.precision("f64"):
        for i in range(100):
            r = SplitMix64(i).fork("edge")
            m = 2 + i % 7
            shape = (2, 3, 4, 4)
            outs = [None if (j == 0 and i % 2 == 0) else Tensor(r.normal(shape)) for j in range(m)]
            alpha = Tensor(r.normal(m), requires_grad=True)
            upstream = r.normal(shape)
            ad.backward(ad.tsum(mix(outs, alpha) * Tensor(upstream)), [alpha])
            analytic = alpha_grad_analytic(upstream, outs, alpha.data)
            worst = max(worst, np.abs(analytic - alpha.grad).max() / max(np.abs(alpha.grad).max(), 1e-300))
    ok = worst < 1e-9
    criterion(2, ok, f"max rel err {worst:.2e} over 100 edges")
    assert ok


# --- 3. static BN norm constant


def test_c3_static_bn_constant(criterion):
    worst_exact, worst_96 = 0.0, 0.0
    with ad.precision("f64"):
        for i in range(50):
            r = SplitMix64(i).fork("bn")
            scale = 1.0 + 4.0 * r.uniform(3).reshape(1, 3, 1, 1)
            x = r.normal((2, 3, 4, 4)) * scale + r.normal((1, 3, 1, 1))
            out = static_bn(Tensor(x)).data
            var = x.var(axis=(0, 2, 3))
            expected = 96.0 * np.mean(var / (var + 1e-5))
            sq = float((out ** 2).sum())
            worst_exact = max(worst_exact, abs(sq - expected) / expected)
            if np.all(var >= 1.0):
                worst_96 = max(worst_96, abs(sq - 96.0) / 96.0)
    ok = worst_exact < 1e-6 and worst_96 < 1e-3
    criterion(3, ok, f"rel err vs formula {worst_exact:.2e}, vs 96 {worst_96:.2e}")
    assert ok


# --- 4. node-norm balance


DESK = dict(space="S3", cells=4, init_channels=4, image_size=8, n_per_class=50, diag_interval=0)


def _search(**kw):
    rc = RunConfig.from_dict(dict(DESK, **kw))
    data = rc.dataset()
    split = rc.split(data)
    net = SuperNet(rc.net_config(data.images.shape[1]), rc.search_space(), rc.norm, rc.seed)
    return rc, data, split, search(rc.train_config(), net, data, split)


@pytest.fixture(scope="module")
def desk_runs():
    return {norm: _search(norm=norm, epochs=20) for norm in ("off", "pre")}


def test_c4_node_norm_balance(criterion, desk_runs):
    pre = [r.norm_ratio_max for r in desk_runs["pre"][3].records]
    off = [r.norm_ratio_max for r in desk_runs["off"][3].records]
    print("mode=off norm ratio per epoch:", " ".join(f"{v:.3f}" for v in off))
    print("mode=pre norm ratio per epoch:", " ".join(f"{v:.6f}" for v in pre))
    ok = len(pre) == 20 and all(0.999 <= v <= 1.001 for v in pre)
    criterion(4, ok, f"pre ratio in [{min(pre):.6f}, {max(pre):.6f}]; off reaches {max(off):.2f}")
    assert ok


# --- 5. Gram-Schmidt residual property


def test_c5_residual_orthogonal(criterion, desk_runs):
    worst, runs = 0.0, 0
    with ad.precision("f64"):
        stores = []
        for seed in range(100):
            for inst in (orthogonal_instance(seed), correlated_instance(seed)):
                stores.append((inst.store, inst.space, inst.nodes, inst.k, inst.arch))
    for rc, data, split, res in desk_runs.values():
        store = collect_activations(res.net, res.arch, data.images[split.discretize], 2, rc.disc_batch_size)
        stores.append((store, res.net.space, rc.nodes, rc.k, res.arch))
    for store, space, nodes, k, arch in stores:
        sel = decorrelation_discretize(store, space, nodes, k, arch).selections
        worst = max(worst, max(s.residual_max_cos for s in sel))
        runs += 1
    ok = worst <= 1e-5
    criterion(5, ok, f"max |cos| residual vs selected {worst:.2e} over {runs} runs")
    assert ok


# --- 6. oracle equivalence and correlated comparison


def test_c6a_orthogonal_matches_oracle(criterion):
    t0 = time.time()
    matches = 0
    with ad.precision("f64"):
        for seed in range(100):
            inst = orthogonal_instance(seed)
            g = decorrelation_discretize(inst.store, inst.space, inst.nodes, inst.k).genotype
            o = exhaustive_oracle(inst.store, inst.space, inst.nodes, inst.k).genotype
            matches += canonical(g) == canonical(o)
    dt = time.time() - t0
    ok = matches == 100 and dt < 300
    criterion("6a", ok, f"greedy == oracle on {matches}/100 orthogonal instances, {dt:.0f}s")
    assert ok


def _correlated_wins(shared=0.8, scope="cell"):
    wins, gaps = 0, []
    for seed in range(100):
        inst = correlated_instance(seed, shared=shared)
        g = decorrelation_discretize(inst.store, inst.space, inst.nodes, inst.k).genotype
        v = value_discretize(inst.arch, inst.space, inst.nodes, inst.k)
        gap = synthesis_score(inst.store, g, scope=scope) - synthesis_score(inst.store, v, scope=scope)
        gaps.append(gap)
        wins += gap >= -1e-12
    return wins, np.array(gaps)


@pytest.mark.xfail(strict=True, reason="greedy cosine selection beats the alpha argmax on 85/100 "
                                       "correlated instances, short of 90; see README")
def test_c6b_correlated_beats_value(criterion):
    with ad.precision("f64"):
        wins, gaps = _correlated_wins()
        q = np.quantile(gaps, [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0])
        print("synthesis cosine gap (greedy - value), quantiles 0/10/25/50/75/90/100%:",
              " ".join(f"{v:+.4f}" for v in q))
        print("losses:", " ".join(f"{v:+.4f}" for v in np.sort(gaps[gaps < -1e-12])))
        for shared in (0.5, 0.9):
            print(f"  shared={shared}: wins {_correlated_wins(shared)[0]}/100")
        print(f"  node-scope score at shared=0.8: wins {_correlated_wins(scope='node')[0]}/100")
    ok = wins >= 90
    criterion("6b", ok, f"greedy synthesis cosine >= value on {wins}/100 correlated instances (need 90), "
                        f"mean gap {gaps.mean():+.4f}")
    assert ok


# --- 7. degradation direction


def test_c7_degradation_direction(criterion):
    t0 = time.time()
    final = {"off": [], "pre": []}
    for seed in (0, 1, 2):
        for norm in ("off", "pre"):
            _, _, _, res = _search(norm=norm, seed=seed, data_seed=seed, epochs=200, lr_alpha=1.0, noise=0.8)
            rec = res.records[-1]
            final[norm].append(rec.zero_ratio + rec.skip_ratio)
            print(f"seed {seed} mode={norm}: zero+skip {final[norm][-1]:.3f}")
    off, pre = np.mean(final["off"]), np.mean(final["pre"])
    dt = time.time() - t0
    ok = off - pre >= 0.1 and dt < 1800
    criterion(7, ok, f"mean zero+skip off {off:.3f} vs pre {pre:.3f} (diff {off - pre:.3f}), {dt:.0f}s")
    assert ok


# --- 8. end-to-end ablation


ABLATION = dict(space="S1", cells=4, init_channels=4, image_size=8, n_per_class=100, noise=0.8, epochs=30,
                lr_alpha=1.0, diag_interval=0, retrain_epochs=30)


def test_c8_end_to_end_ablation(criterion):
    t0 = time.time()
    table = {}
    for norm in ("off", "pre"):
        rc = RunConfig.from_dict(dict(ABLATION, norm=norm))
        data = rc.dataset()
        split = rc.split(data)
        net = SuperNet(rc.net_config(data.images.shape[1]), rc.search_space(), norm, rc.seed)
        res = search(rc.train_config(), net, data, split)
        store = collect_activations(net, res.arch, data.images[split.discretize], 2, rc.disc_batch_size)
        genotypes = {"value": value_discretize(res.arch, net.space, rc.nodes, rc.k),
                     "decorr": decorrelation_discretize(store, net.space, rc.nodes, rc.k, res.arch).genotype}
        for disc, g in genotypes.items():
            accs = []
            for seed in range(4):
                cfg = RunConfig.from_dict(dict(ABLATION, norm=norm, seed=seed)).retrain_config()
                accs.append(retrain(g, rc.net_config(data.images.shape[1]), cfg, data, split.train,
                                    split.test)[-1].test_acc)
            table[(norm, disc)] = accs
    dt = time.time() - t0
    print("test accuracy, mean over 4 retrain seeds (rows: node norm, columns: discretization)")
    print(f"{'':>10} {'value':>8} {'decorr':>8}")
    for norm in ("off", "pre"):
        print(f"{'norm=' + norm:>10} {np.mean(table[(norm, 'value')]):8.4f} {np.mean(table[(norm, 'decorr')]):8.4f}")
    for key, accs in table.items():
        print(f"  {key}: {accs}")
    value, decorr = np.mean(table[("off", "value")]), np.mean(table[("off", "decorr")])
    ok = decorr >= value - 0.005 and dt < 1800
    criterion(8, ok, f"shared mode=off checkpoint: decorr {decorr:.4f} vs value {value:.4f}, {dt:.0f}s")
    assert ok


# --- 9. determinism


TINY = """\
space = S3
cells = 3
init_channels = 4
nodes = 2
image_size = 8
n_per_class = 20
epochs = 2
batch_size = 16
diag_interval = 1
retrain_epochs = 2
retrain_batch_size = 16
"""


def _run_all(root, monkeypatch):
    """Every command with the same relative paths, run from ``root``."""
    root.mkdir()
    monkeypatch.chdir(root)
    (root / "tiny.cfg").write_text(TINY)
    assert main(["search", "--config", "tiny.cfg", "--out", "search", "--seed", "3"]) == 0
    ckpt = "search/checkpoint.mdrt"
    for mode in ("value", "decorr", "oracle"):
        assert main(["discretize", "--checkpoint", ckpt, "--mode", mode, "--out", mode]) == 0
    assert main(["retrain", "--genotype", "decorr/genotype.json", "--config", "tiny.cfg",
                 "--out", "retrain"]) == 0
    assert main(["diagnose", "--checkpoint", ckpt, "--batches", "2", "--out", "diag"]) == 0
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c9_determinism(criterion, tmp_path, monkeypatch):
    a = _run_all(tmp_path / "a", monkeypatch)
    b = _run_all(tmp_path / "b", monkeypatch)
    differ = [str(k) for k in a if a[k] != b.get(k)]
    ok = a.keys() == b.keys() and not differ and len(a) > 10
    criterion(9, ok, f"{len(a)} output files byte-identical across repeated runs"
              if ok else f"differing files: {differ}")
    assert ok
