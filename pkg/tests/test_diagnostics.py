import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microdarts.dataio import gen_synthetic, make_split
from microdarts.diagnostics import (DiagRecord, correlation_from_gram, export_csv, mean_offdiag, node_norm_curve,
                                    norm_drift, norm_ratio_max, op_ratio, read_csv, theta_from_gram,
                                    theta_vs_alpha_arrays, write_theta_csv)
from microdarts.ops import SearchSpace
from microdarts.rng import SplitMix64
from microdarts.supernet import SuperNet, SuperNetConfig
from microdarts.trainer import TrainConfig, search


def test_correlation_identical_and_orthogonal():
    a, b = np.array([1.0, 2.0, 0.0]), np.array([0.0, 0.0, 3.0])
    rows = np.stack([a, 2 * a, b])
    cm = correlation_from_gram(rows @ rows.T, ["a", "2a", "b"])
    np.testing.assert_allclose(cm.matrix, [[1, 1, 0], [1, 1, 0], [0, 0, 1]], atol=1e-12)
    assert mean_offdiag(cm) == pytest.approx(2 / 6)


def test_correlation_degenerate_row():
    rows = np.array([[1.0, 0.0], [0.0, 0.0]])
    cm = correlation_from_gram(rows @ rows.T, ["x", "z"])
    assert cm.degenerate == ["z"]
    assert cm.matrix[1].tolist() == [0.0, 0.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 6))
def test_correlation_psd_and_bounded(seed, n):
    rows = SplitMix64(seed).normal((n, 10))
    m = correlation_from_gram(rows @ rows.T, [str(i) for i in range(n)]).matrix
    assert np.all(np.abs(m) <= 1.0)
    np.testing.assert_allclose(np.diag(m), 1.0)
    assert np.linalg.eigvalsh(m).min() >= -1e-9


def _gram(mixed, ops):
    rows = np.stack([mixed] + ops)
    return rows @ rows.T


def test_theta_orthogonal_equal_norm_tau_one():
    ops = [np.eye(4)[i] for i in range(3)]
    alpha = np.array([2.0, 1.0, 0.0])
    w = np.exp(alpha) / np.exp(alpha).sum()
    mixed = sum(wi * o for wi, o in zip(w, ops))
    rep = theta_from_gram(_gram(mixed, ops), alpha)
    assert rep.tau == pytest.approx(1.0)
    assert rep.alpha_rank == rep.theta_rank == [1, 2, 3]


def test_theta_duplicates_break_ranking():
    # two identical ops share alpha mass; an orthogonal op with a middling alpha
    d, o = np.eye(3)[0], np.eye(3)[1]
    alpha = np.array([2.0, 1.0, 1.5])
    w = np.exp(alpha) / np.exp(alpha).sum()
    mixed = (w[0] + w[1]) * d + w[2] * o
    rep = theta_from_gram(_gram(mixed, [d, d, o]), alpha)
    assert rep.tau < 1.0


def test_theta_single_and_zero_op():
    rep = theta_from_gram(_gram(np.ones(2), [np.ones(2)]), [0.3])
    assert rep.tau == 1.0
    rep = theta_from_gram(_gram(np.ones(2), [np.zeros(2), np.ones(2)]), [0.3, 0.1], ["zero", "skip"])
    assert math.isnan(rep.theta[0])
    assert rep.included == ["skip"]


def test_theta_from_arrays():
    rng = SplitMix64(0)
    outs = [None, rng.normal((2, 3, 4, 4)), rng.normal((2, 3, 4, 4))]
    rep = theta_vs_alpha_arrays(outs, np.array([0.0, 3.0, -3.0]), ["zero", "a", "b"])
    assert rep.theta[1] < rep.theta[2]
    assert rep.tau == pytest.approx(1.0)


def test_theta_csv(tmp_path):
    rep = theta_from_gram(_gram(np.ones(2), [np.zeros(2), np.ones(2)]), [0.3, 0.1], ["zero", "skip"])
    write_theta_csv(tmp_path / "t.csv", rep)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "op,alpha,theta,alpha_rank,theta_rank"
    assert lines[1] == "zero,0.3,nan,,"
    assert lines[-1].startswith("kendall_tau,1.0")


def test_op_ratio_uniform():
    s1 = SearchSpace.named("S1")
    assert op_ratio(np.zeros((14, 8)), s1.index("zero")) == pytest.approx(0.125)
    assert op_ratio(np.zeros((14, 8)), None) == 0.0


def test_norm_ratio_max():
    assert norm_ratio_max({(0, 0): 1.0, (0, 1): 3.0, (1, 0): 2.0, (1, 1): 2.0}) == 3.0
    assert norm_ratio_max({(0, 0): 0.0, (0, 1): 1.0}) == math.inf
    assert math.isnan(norm_ratio_max({}))


def _record(epoch, corr=float("nan")):
    norms = {(0, -2): 1.0, (0, -1): 2.0, (0, 0): 3.0 + epoch}
    return DiagRecord(epoch, 1.0 / (epoch + 1), 0.5, 0.25, 0.125, 0.25, 0.01, norms, dict(norms),
                      mean_op_corr=corr)


def test_csv_lines_and_round_trip(tmp_path):
    recs = [_record(i, corr=0.1 * i if i else float("nan")) for i in range(3)]
    path = export_csv(recs, tmp_path / "diag.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    header, rows = read_csv(path)
    assert header[:3] == ["epoch", "loss_w", "loss_alpha"]
    assert "norm_c0_n0" in header
    assert math.isnan(rows[0][header.index("mean_op_corr")])
    assert rows[2][header.index("loss_w")] == 1.0 / 3
    assert rows[1][header.index("norm_c0_n0")] == 4.0


def test_csv_empty_is_header_only(tmp_path):
    path = export_csv([], tmp_path / "diag.csv")
    assert len(path.read_text().splitlines()) == 1


def test_norm_curve_and_drift():
    recs = [_record(i) for i in range(4)]
    curve = node_norm_curve(recs)
    j = curve.columns.index("c0_n0")
    assert curve.ratios[:, j].tolist() == [3.0, 4.0, 5.0, 6.0]
    assert norm_drift(curve)["c0_n0"] == pytest.approx(1.0)
    bad = _record(0)
    bad.norms_raw[(0, -2)] = 0.0
    assert node_norm_curve([bad]).flagged


def test_pre_mode_node_norms_equal():
    data = gen_synthetic(4, 20, 8, seed=0)
    split = make_split(data, seed=0)
    net = SuperNet(SuperNetConfig(cells=3, init_channels=4, classes=4), SearchSpace.named("S3"), "pre", 0)
    res = search(TrainConfig(epochs=2, batch_size=16, mode="pre", diag_interval=1), net, data, split)
    curve = node_norm_curve(res.records, raw=False)
    assert np.all(np.abs(curve.ratios - 1.0) < 1e-3)
    assert all(abs(r.norm_ratio_max - 1.0) < 1e-3 for r in res.records)
    assert all(0.0 <= r.mean_op_corr <= 1.0 for r in res.records)
