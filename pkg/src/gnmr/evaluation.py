"""RUL metrics, test-set evaluation and the attention-vs-RUL profile."""

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, EmptyInputError, ParseError, ShapeError

EARLY_U1 = 13.0
LATE_U2 = 10.0
PROFILE_BINS = np.arange(0.0, 131.0, 10.0)


def denormalize_prediction(p_norm, r_u=130.0, clamp=True):
    """Normalized prediction to cycles; clamped to ``[0, r_u]`` unless ``clamp`` is off."""
    p = np.asarray(p_norm, dtype=np.float64)
    if clamp:
        p = np.clip(p, 0.0, 1.0)
    out = p * r_u
    return float(out) if out.ndim == 0 else out


def rmse(errors):
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptyInputError("rmse of an empty error vector")
    return float(np.sqrt(np.mean(e * e)))


def timeliness_score(errors, u1=EARLY_U1, u2=LATE_U2):
    """Sum of ``exp(|e|/u) - 1`` with ``u = u1`` for early (e < 0) and ``u2`` for late predictions."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptyInputError("timeliness score of an empty error vector")
    gamma = np.where(e < 0, 1.0 / u1, 1.0 / u2)
    return float(np.sum(np.expm1(gamma * np.abs(e))))


@dataclass
class EvalReport:
    unit_ids: np.ndarray
    true_rul: np.ndarray
    pred_rul: np.ndarray
    weights: Optional[np.ndarray] = None  # n x |V|
    estimates: Optional[np.ndarray] = None  # n x |V|, cycles
    node_names: tuple = ()
    rmse: float = field(init=False)
    score: float = field(init=False)

    def __post_init__(self):
        self.rmse = rmse(self.errors)
        self.score = timeliness_score(self.errors)

    def __len__(self):
        return len(self.unit_ids)

    @property
    def errors(self):
        return self.pred_rul - self.true_rul


def evaluate(model, test_windows, r_u=None, clamp=True):
    """Eval-mode forward over one window per test instance; metrics in cycles against the raw RUL."""
    r_u = test_windows.r_u if r_u is None else r_u
    if len(test_windows) == 0:
        raise EmptyInputError("no test windows to evaluate")
    pred, extra = model.predict(test_windows)
    weights = extra.get("weights")
    names = ()
    if weights is not None:
        names = tuple(n.name for n in model.graph.nodes)
    return EvalReport(
        unit_ids=np.asarray(test_windows.unit_ids),
        true_rul=np.asarray(test_windows.rul, dtype=np.float64),
        pred_rul=denormalize_prediction(pred, r_u, clamp),
        weights=weights,
        estimates=None if weights is None else extra["estimates"] * r_u,
        node_names=names,
    )


@dataclass
class AttentionProfile:
    bin_edges: np.ndarray
    counts: np.ndarray
    mean_w_fault: np.ndarray
    mean_w_others: np.ndarray
    mean_rhat_fault: np.ndarray
    mean_rhat_others: np.ndarray
    fault_node: str = ""


def _resolve_node(report, node):
    n_nodes = report.weights.shape[1]
    if isinstance(node, (int, np.integer)):
        if not 0 <= node < n_nodes:
            raise ConfigError(f"fault node {node} outside graph with {n_nodes} nodes")
        return int(node)
    if node in report.node_names:
        return report.node_names.index(node)
    raise ConfigError(f"fault node {node!r} not in graph nodes {list(report.node_names)}")


def attention_profile(report, fault_node="HPC", bins=PROFILE_BINS):
    """Bin instances by true RUL and average attention / per-node estimates per bin.

    "Others" averages over the non-fault nodes within each instance first.
    Instances outside ``[bins[0], bins[-1]]`` are left out; empty bins give NaN.
    """
    if report.weights is None:
        raise ConfigError("report has no attention weights (not a GNMR model)")
    j = _resolve_node(report, fault_node)
    bins = np.asarray(bins, dtype=np.float64)
    if bins.ndim != 1 or bins.size < 2 or np.any(np.diff(bins) <= 0):
        raise ConfigError("bins must be an increasing sequence of at least two edges")
    others = np.delete(np.arange(report.weights.shape[1]), j)
    w_fault = report.weights[:, j]
    r_fault = report.estimates[:, j]
    with np.errstate(invalid="ignore"):
        w_others = report.weights[:, others].mean(axis=1) if others.size else np.full(len(report), np.nan)
        r_others = report.estimates[:, others].mean(axis=1) if others.size else np.full(len(report), np.nan)
    idx = np.digitize(report.true_rul, bins[1:-1], right=False)
    inside = (report.true_rul >= bins[0]) & (report.true_rul <= bins[-1])
    n_bins = bins.size - 1
    out = {k: np.full(n_bins, np.nan) for k in ("wf", "wo", "rf", "ro")}
    counts = np.zeros(n_bins, dtype=np.int64)
    for b in range(n_bins):
        sel = inside & (idx == b)
        counts[b] = sel.sum()
        if counts[b]:
            out["wf"][b] = w_fault[sel].mean()
            out["wo"][b] = w_others[sel].mean()
            out["rf"][b] = r_fault[sel].mean()
            out["ro"][b] = r_others[sel].mean()
    name = report.node_names[j] if report.node_names else str(j)
    return AttentionProfile(bins, counts, out["wf"], out["wo"], out["rf"], out["ro"], name)


# -- CSV ---------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def write_eval_report(report, path):
    header = ["unit", "r", "r_hat", "e"]
    names = list(report.node_names) if report.weights is not None else []
    header += [f"w_{n}" for n in names] + [f"rhat_{n}" for n in names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(report)):
            row = [int(report.unit_ids[i]), _fmt(report.true_rul[i]), _fmt(report.pred_rul[i]), _fmt(report.errors[i])]
            if names:
                row += [_fmt(x) for x in report.weights[i]] + [_fmt(x) for x in report.estimates[i]]
            writer.writerow(row)


def read_eval_report(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read eval report {path}: {exc}") from None
    if not rows or rows[0][:4] != ["unit", "r", "r_hat", "e"]:
        raise ParseError(f"{path}: not an eval report (bad header)")
    header, body = rows[0], rows[1:]
    names = tuple(h[2:] for h in header if h.startswith("w_"))
    try:
        data = np.array([[float(x) for x in r] for r in body]).reshape(len(body), len(header))
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    k = len(names)
    if len(header) != 4 + 2 * k:
        raise ShapeError(f"{path}: expected {4 + 2 * k} columns, got {len(header)}")
    return EvalReport(
        unit_ids=data[:, 0].astype(np.int64),
        true_rul=data[:, 1],
        pred_rul=data[:, 2],
        weights=data[:, 4 : 4 + k] if k else None,
        estimates=data[:, 4 + k :] if k else None,
        node_names=names,
    )


def write_metrics(report, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rmse", "S", "n"])
        writer.writerow([_fmt(report.rmse), _fmt(report.score), len(report)])


def write_attention_profile(profile, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin", "bin_lo", "bin_hi", "count", "mean_w_fault", "mean_w_others", "mean_rhat_fault", "mean_rhat_others"])
        for b in range(len(profile.counts)):
            lo, hi = profile.bin_edges[b], profile.bin_edges[b + 1]
            writer.writerow(
                [f"[{lo:g},{hi:g})", _fmt(lo), _fmt(hi), int(profile.counts[b]), _fmt(profile.mean_w_fault[b]),
                 _fmt(profile.mean_w_others[b]), _fmt(profile.mean_rhat_fault[b]), _fmt(profile.mean_rhat_others[b])]
            )


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "val_rmse", "lr"])
        for epoch, loss, val, lr in history.rows():
            writer.writerow([epoch, _fmt(loss), _fmt(val), _fmt(lr)])


def write_grid_results(result, path):
    rows = result.rows()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(rows[0]))
        for r in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in r.values()])
