"""Training-dynamics diagnostics: node norms, op correlations, angle-vs-alpha rankings."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .discretize import ActivationStore
from .errors import InputError
from .ops import softmax_weights
from .supernet import edge_list, node_edges

NAN_SENTINEL = "nan"
BASE_COLUMNS = ["epoch", "loss_w", "loss_alpha", "acc", "zero_ratio", "skip_ratio", "norm_ratio_max",
                "lr_w", "zero_ratio_reduce", "skip_ratio_reduce", "mean_op_corr"]


@dataclass
class DiagRecord:
    epoch: int
    loss_w: float
    loss_alpha: float
    acc: float
    zero_ratio: float
    skip_ratio: float
    lr_w: float
    norms_raw: dict = field(default_factory=dict)  # (cell, node) -> norm; inputs are nodes -2, -1
    norms_out: dict = field(default_factory=dict)
    zero_ratio_reduce: float = 0.0
    skip_ratio_reduce: float = 0.0
    mean_op_corr: float = float("nan")

    @property
    def norm_ratio_max(self) -> float:
        """Largest max/min ratio of node-output norms within a cell."""
        return norm_ratio_max(self.norms_out)


def norm_ratio_max(norms: dict) -> float:
    by_cell: dict[int, list] = {}
    for (cell, _), v in norms.items():
        by_cell.setdefault(cell, []).append(v)
    worst = float("nan")
    for vals in by_cell.values():
        lo, hi = min(vals), max(vals)
        r = hi / lo if lo > 0 else float("inf")
        worst = r if math.isnan(worst) else max(worst, r)
    return worst


def op_ratio(alpha: np.ndarray, op_index: int | None) -> float:
    """Mean softmax weight of one op over all edges of an alpha matrix."""
    if op_index is None:
        return 0.0
    return float(softmax_weights(alpha)[:, op_index].mean())


# ----------------------------------------------------------------------------
# node norm curve


@dataclass
class NormCurve:
    columns: list
    epochs: list
    ratios: np.ndarray  # epochs x columns; NaN where the reference norm is zero
    flagged: list


def node_norm_curve(records, raw: bool = True) -> NormCurve:
    """Node norms divided by the norm of the cell's first input node, per epoch."""
    if not records:
        return NormCurve([], [], np.zeros((0, 0)), [])
    keys = sorted(records[0].norms_raw if raw else records[0].norms_out)
    cols = [f"c{c}_n{n}" for c, n in keys]
    rows, flagged = [], []
    for rec in records:
        norms = rec.norms_raw if raw else rec.norms_out
        row = []
        for c, n in keys:
            ref = norms.get((c, -2), 0.0)
            if ref > 0:
                row.append(norms[(c, n)] / ref)
            else:
                row.append(float("nan"))
                flagged.append((rec.epoch, c, n))
        rows.append(row)
    return NormCurve(cols, [r.epoch for r in records], np.array(rows), flagged)


def norm_drift(curve: NormCurve) -> dict:
    """Spearman correlation of each ratio column with the epoch (reported, never asserted)."""
    out = {}
    if len(curve.epochs) < 3:
        return out
    for j, col in enumerate(curve.columns):
        v = curve.ratios[:, j]
        if np.all(np.isfinite(v)) and np.ptp(v) > 0:
            out[col] = float(stats.spearmanr(curve.epochs, v).statistic)
    return out


# ----------------------------------------------------------------------------
# correlation matrix


@dataclass
class CorrelationMatrix:
    labels: list
    matrix: np.ndarray
    degenerate: list


def correlation_from_gram(gram: np.ndarray, labels) -> CorrelationMatrix:
    gram = np.asarray(gram, dtype=np.float64)
    d = np.sqrt(np.clip(np.diag(gram), 0.0, None))
    bad = d < 1e-12
    safe = np.where(bad, 1.0, d)
    m = gram / np.outer(safe, safe)
    m[bad, :] = 0.0
    m[:, bad] = 0.0
    m = np.clip(0.5 * (m + m.T), -1.0, 1.0)
    idx = np.flatnonzero(~bad)
    m[idx, idx] = 1.0
    return CorrelationMatrix(list(labels), m, [labels[i] for i in np.flatnonzero(bad)])


def correlation_matrix(store: ActivationStore, cell: int, node: int) -> CorrelationMatrix:
    """Pairwise cosine of every non-zero op output on the node's incoming edges."""
    c = store.cells[cell]
    zero = store.space.index("zero")
    idx, labels = [], []
    for e in node_edges(node):
        src = edge_list(store.nodes)[e][1]
        for o, name in enumerate(store.space.names):
            if o != zero:
                idx.append(c.op(e, o))
                labels.append(f"{src}->{node}:{name}")
    return correlation_from_gram(c.gram[np.ix_(idx, idx)], labels)


def mean_offdiag(cm: CorrelationMatrix) -> float:
    m = cm.matrix
    n = m.shape[0]
    if n < 2:
        return float("nan")
    mask = ~np.eye(n, dtype=bool)
    return float(np.abs(m[mask]).mean())


# ----------------------------------------------------------------------------
# angle vs alpha


@dataclass
class ThetaReport:
    labels: list
    theta: list  # radians, per op; NaN for excluded ops
    alpha: list
    alpha_rank: list  # 1 = best, for included ops in label order
    theta_rank: list
    tau: float
    included: list


def _rank(values, descending: bool) -> list:
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(-v if descending else v, kind="stable")
    rank = np.empty(v.size, dtype=int)
    rank[order] = np.arange(1, v.size + 1)
    return rank.tolist()


def theta_from_gram(gram: np.ndarray, alpha_row, labels=None) -> ThetaReport:
    """Angles between bn(mixed) (source 0) and every bn(op) (sources 1..M)."""
    gram = np.asarray(gram, dtype=np.float64)
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    m = alpha_row.size
    labels = list(labels) if labels is not None else [str(i) for i in range(m)]
    n0 = math.sqrt(max(gram[0, 0], 0.0))
    theta, inc = [], []
    for i in range(m):
        ni = math.sqrt(max(gram[i + 1, i + 1], 0.0))
        if ni < 1e-12 or n0 < 1e-12:
            theta.append(float("nan"))
            continue
        c = float(np.clip(gram[0, i + 1] / (n0 * ni), -1.0, 1.0))
        theta.append(math.acos(c))
        inc.append(i)
    a = alpha_row[inc]
    t = np.array([theta[i] for i in inc])
    a_rank = _rank(a, descending=True)
    t_rank = _rank(t, descending=False)
    if len(inc) < 2:
        tau = 1.0
    else:
        tau = float(stats.kendalltau(a, -t).statistic)
        if math.isnan(tau):
            tau = 1.0
    return ThetaReport(labels, theta, alpha_row.tolist(), a_rank, t_rank, tau, [labels[i] for i in inc])


def theta_vs_alpha_arrays(op_outputs, alpha_row, labels=None, eps: float = 1e-5) -> ThetaReport:
    """Same report from explicit (B, C, H, W) op outputs; ``None`` is a zero op."""
    from .discretize import _bn
    w = softmax_weights(alpha_row)
    ref = next(o for o in op_outputs if o is not None)
    outs = [np.zeros_like(ref, dtype=np.float64) if o is None else np.asarray(o, dtype=np.float64)
            for o in op_outputs]
    mixed = sum(wi * o for wi, o in zip(w, outs))
    rows = np.stack([_bn(mixed, eps).ravel()] + [_bn(o, eps).ravel() for o in outs])
    return theta_from_gram(rows @ rows.T, alpha_row, labels)


def theta_vs_alpha(store: ActivationStore, arch, edge: int, cell: int = 0) -> ThetaReport:
    c = store.cells[cell]
    alpha = arch.of(c.reduction).data[edge]
    return theta_from_gram(c.theta[edge], alpha, store.space.names)


# ----------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return NAN_SENTINEL
    return repr(v)


def diag_columns(records) -> list:
    cols = list(BASE_COLUMNS)
    if records:
        for c, n in sorted(records[0].norms_raw):
            cols.append(f"norm_c{c}_n{n}")
    return cols


def record_row(rec: DiagRecord, cols: list) -> list:
    base = {"epoch": rec.epoch, "loss_w": rec.loss_w, "loss_alpha": rec.loss_alpha, "acc": rec.acc,
            "zero_ratio": rec.zero_ratio, "skip_ratio": rec.skip_ratio,
            "norm_ratio_max": rec.norm_ratio_max, "lr_w": rec.lr_w,
            "zero_ratio_reduce": rec.zero_ratio_reduce, "skip_ratio_reduce": rec.skip_ratio_reduce,
            "mean_op_corr": rec.mean_op_corr}
    row = []
    for col in cols:
        if col in base:
            row.append(_fmt(base[col]))
        else:
            c, n = col[len("norm_c"):].split("_n")
            row.append(_fmt(rec.norms_raw[(int(c), int(n))]))
    return row


def export_csv(records, path) -> Path:
    """One header line plus one row per epoch; floats use ``repr`` (locale independent)."""
    path = Path(path)
    cols = diag_columns(records)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for rec in records:
                w.writerow(record_row(rec, cols))
    except OSError as exc:
        raise OSError(f"cannot write diagnostics to {path}: {exc}") from exc
    return path


def read_csv(path) -> tuple[list, list]:
    """Header and rows with every value parsed as float (``nan`` sentinel included)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file")
    return rows[0], [[float(v) for v in r] for r in rows[1:]]


def write_matrix_csv(path, labels, matrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(labels))
        for lab, row in zip(labels, np.asarray(matrix)):
            w.writerow([lab] + [_fmt(v) for v in row])


def write_theta_csv(path, rep: ThetaReport) -> None:
    rank_a = dict(zip(rep.included, rep.alpha_rank))
    rank_t = dict(zip(rep.included, rep.theta_rank))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["op", "alpha", "theta", "alpha_rank", "theta_rank"])
        for lab, a, t in zip(rep.labels, rep.alpha, rep.theta):
            w.writerow([lab, _fmt(a), _fmt(t), rank_a.get(lab, ""), rank_t.get(lab, "")])
        w.writerow(["kendall_tau", _fmt(rep.tau), "", "", ""])
