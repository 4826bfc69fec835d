"""C-MAPSS parsing, normalization, windowing, node partitioning and PCA.

Pipeline for one sub-dataset::

    train_runs, test_runs = parse_cmapss(train_path, test_path, rul_path)
    train_runs, val_runs = split_train_val(train_runs, 0.8, rng)
    stats = fit_normalization(train_runs)
    windows = windows_from_runs([apply_normalization(r, stats) for r in train_runs], stats, ...)

Windows keep all 24 channels; per-node slicing happens on demand with
:func:`partition_by_node` so that one prepared dataset serves every graph.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .channels import CHANNEL_INDEX, CHANNELS, N_CHANNELS
from .errors import ConfigError, LoadError, ParseError

DATASETS = ("FD001", "FD002", "FD003", "FD004")
DATA_DIR_ENV = "GNMR_DATA_DIR"
CACHE_MAGIC = b"GNMRDATA"
CACHE_VERSION = 1

WINDOW_LENGTH = 100
WINDOW_SHIFT = 5
RUL_CEILING = 130.0


@dataclass
class EngineRun:
    unit_id: int
    channels: np.ndarray  # cycles x 24
    failure_cycle: int

    @property
    def n_cycles(self):
        return self.channels.shape[0]


@dataclass
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray
    pad_value: np.ndarray  # per-channel training mean, in normalized units


@dataclass
class WindowSample:
    node_series: list
    target: float
    age: float
    unit_id: int
    is_test: bool


@dataclass
class WindowSet:
    """A batch of fixed-length windows with all 24 channels."""

    channels: np.ndarray  # N x T x 24
    targets: np.ndarray  # normalized clipped RUL in [0, 1]
    t_end: np.ndarray  # cycle index of each window's last step
    rul: np.ndarray  # raw (unclipped) RUL at t_end
    unit_ids: np.ndarray
    is_test: bool = False
    r_u: float = RUL_CEILING

    def __len__(self):
        return len(self.targets)

    @property
    def ages(self):
        return self.t_end / self.r_u

    @property
    def window_length(self):
        return self.channels.shape[1]

    def subset(self, idx):
        return replace(
            self,
            channels=self.channels[idx],
            targets=self.targets[idx],
            t_end=self.t_end[idx],
            rul=self.rul[idx],
            unit_ids=self.unit_ids[idx],
        )

    def sample(self, i, graph):
        return WindowSample(
            node_series=partition_by_node(self.channels[i], graph),
            target=float(self.targets[i]),
            age=float(self.ages[i]),
            unit_id=int(self.unit_ids[i]),
            is_test=self.is_test,
        )

    @classmethod
    def empty(cls, window_length, r_u=RUL_CEILING, is_test=False):
        return cls(
            channels=np.zeros((0, window_length, N_CHANNELS)),
            targets=np.zeros(0),
            t_end=np.zeros(0, dtype=np.int64),
            rul=np.zeros(0),
            unit_ids=np.zeros(0, dtype=np.int64),
            is_test=is_test,
            r_u=r_u,
        )


# -- parsing --------------------------------------------------------------------


def _read_rows(path, n_cols):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ParseError(f"{path}: file not found") from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != n_cols:
            raise ParseError(f"{path}:{lineno}: expected {n_cols} fields, found {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.array(rows)


def _group_runs(table, path):
    runs = []
    units = table[:, 0].astype(np.int64)
    order = np.unique(units)
    for unit in order:
        rows = table[units == unit]
        cycles = rows[:, 1].astype(np.int64)
        if not np.array_equal(cycles, np.arange(1, len(cycles) + 1)):
            raise ParseError(f"{path}: unit {unit} cycles are not contiguous from 1")
        runs.append(EngineRun(int(unit), rows[:, 2:].copy(), int(cycles[-1])))
    return runs


def parse_cmapss(train_path, test_path, rul_path):
    """Read one C-MAPSS sub-dataset; returns ``(train_runs, test_runs)``.

    Test runs get ``failure_cycle = last observed cycle + RUL``.
    """
    n_cols = 2 + N_CHANNELS
    train = _group_runs(_read_rows(train_path, n_cols), train_path)
    test = _group_runs(_read_rows(test_path, n_cols), test_path)
    rul = _read_rows(rul_path, 1)[:, 0]
    if len(rul) != len(test):
        raise ParseError(f"{rul_path}: {len(rul)} RUL values for {len(test)} test units")
    for run, r in zip(test, rul):
        run.failure_cycle = run.n_cycles + int(r)
    return train, test


def dataset_paths(dataset, data_dir):
    if dataset not in DATASETS:
        raise ConfigError(f"unknown dataset {dataset!r}; expected one of {', '.join(DATASETS)}")
    base = Path(data_dir)
    for d in (base, base / "CMAPSSData"):
        paths = tuple(d / f"{kind}_{dataset}.txt" for kind in ("train", "test", "RUL"))
        if all(p.exists() for p in paths):
            return paths
    raise ConfigError(f"C-MAPSS files for {dataset} not found under {base}")


def default_data_dir():
    return os.environ.get(DATA_DIR_ENV)


# -- splitting and normalization ------------------------------------------------


def split_train_val(runs, ratio=0.8, rng=None):
    """Unit-level random split; the validation share is ``round(n * (1 - ratio))``."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(0) if rng is None else rng
    n_val = int(math.floor(len(runs) * (1.0 - ratio) + 0.5 + 1e-9))
    perm = rng.permutation(len(runs))
    val_idx = set(perm[:n_val].tolist())
    train = [r for i, r in enumerate(runs) if i not in val_idx]
    val = [r for i, r in enumerate(runs) if i in val_idx]
    return train, val


def fit_normalization(runs):
    data = np.concatenate([r.channels for r in runs], axis=0)
    lo = data.min(axis=0)
    hi = data.max(axis=0)
    stats = NormalizationStats(lo, hi, np.zeros(N_CHANNELS))
    stats.pad_value = _normalize(data, stats).mean(axis=0)
    return stats


def _normalize(x, stats):
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (x - stats.minimum) / safe - 1.0
    return np.where(span > 0, out, 0.0)


def apply_normalization(run, stats):
    """Map each channel to [-1, 1] using training extremes; no clipping."""
    return replace(run, channels=_normalize(run.channels, stats))


# -- windowing --------------------------------------------------------------------


def window_ends(n_cycles, window_length=WINDOW_LENGTH, shift=WINDOW_SHIFT):
    """Cycles at which windows end: T, T+shift, ... and always the last cycle."""
    ends = list(range(window_length, n_cycles + 1, shift))
    if not ends or ends[-1] != n_cycles:
        ends.append(n_cycles)
    return ends


def _cut(run, ends, window_length, pad_value):
    out = np.empty((len(ends), window_length, run.channels.shape[1]))
    for w, end in enumerate(ends):
        start = end - window_length
        if start >= 0:
            out[w] = run.channels[start:end]
        else:
            out[w, :-start] = pad_value
            out[w, -start:] = run.channels[:end]
    return out


def make_windows(run, window_length=WINDOW_LENGTH, shift=WINDOW_SHIFT, r_u=RUL_CEILING, pad_value=None, is_test=False):
    """Slide over a normalized run; short runs are pre-padded with ``pad_value``."""
    pad_value = np.zeros(run.channels.shape[1]) if pad_value is None else pad_value
    ends = np.array(window_ends(run.n_cycles, window_length, shift), dtype=np.int64)
    rul = (run.failure_cycle - ends).astype(np.float64)
    return WindowSet(
        channels=_cut(run, ends, window_length, pad_value),
        targets=np.minimum(rul, r_u) / r_u,
        t_end=ends,
        rul=rul,
        unit_ids=np.full(len(ends), run.unit_id, dtype=np.int64),
        is_test=is_test,
        r_u=r_u,
    )


def make_test_windows(runs, window_length=WINDOW_LENGTH, r_u=RUL_CEILING, pad_value=None):
    """One window per test unit, ending at its last observed cycle."""
    sets = []
    for run in runs:
        pad = np.zeros(run.channels.shape[1]) if pad_value is None else pad_value
        end = np.array([run.n_cycles], dtype=np.int64)
        rul = np.array([float(run.failure_cycle - run.n_cycles)])
        sets.append(
            WindowSet(
                channels=_cut(run, end, window_length, pad),
                targets=np.minimum(rul, r_u) / r_u,
                t_end=end,
                rul=rul,
                unit_ids=np.array([run.unit_id], dtype=np.int64),
                is_test=True,
                r_u=r_u,
            )
        )
    return concat_windows(sets, window_length, r_u, is_test=True)


def concat_windows(sets, window_length, r_u=RUL_CEILING, is_test=False):
    if not sets:
        return WindowSet.empty(window_length, r_u, is_test)
    return WindowSet(
        channels=np.concatenate([s.channels for s in sets]),
        targets=np.concatenate([s.targets for s in sets]),
        t_end=np.concatenate([s.t_end for s in sets]),
        rul=np.concatenate([s.rul for s in sets]),
        unit_ids=np.concatenate([s.unit_ids for s in sets]),
        is_test=is_test,
        r_u=r_u,
    )


def windows_from_runs(runs, stats, window_length=WINDOW_LENGTH, shift=WINDOW_SHIFT, r_u=RUL_CEILING):
    sets = [
        make_windows(apply_normalization(r, stats), window_length, shift, r_u, stats.pad_value)
        for r in sorted(runs, key=lambda r: r.unit_id)
    ]
    return concat_windows(sets, window_length, r_u)


# -- node partitioning ------------------------------------------------------------


def node_column_indices(graph):
    """Channel indices per node: own sensors in config order, then global channels."""
    out = []
    for j in range(graph.n_nodes):
        names = graph.input_columns(j)
        missing = [s for s in names if s not in CHANNEL_INDEX]
        if missing:
            raise ConfigError(f"node {graph.nodes[j].name!r}: cannot resolve sensors {missing}")
        out.append(np.array([CHANNEL_INDEX[s] for s in names], dtype=np.intp))
    return out


def partition_by_node(channels, graph):
    """Slice the channel axis (last) into one array per node; shared sensors are copied."""
    return [channels[..., idx] for idx in node_column_indices(graph)]


# -- PCA ----------------------------------------------------------------------------


@dataclass
class PcaTransform:
    mean: np.ndarray
    components: np.ndarray  # k x channels, orthonormal rows
    explained_variance_ratio: np.ndarray

    @property
    def n_components(self):
        return self.components.shape[0]

    def apply(self, x):
        return (x - self.mean) @ self.components.T

    def inverse(self, y):
        return y @ self.components + self.mean


def pca_fit(data, k=5):
    """Principal directions of pooled rows.

    ``data`` is a :class:`WindowSet` (all time steps of all windows are pooled)
    or a 2-d array of rows.
    """
    rows = data.channels.reshape(-1, data.channels.shape[-1]) if isinstance(data, WindowSet) else np.asarray(data, dtype=np.float64)
    n_features = rows.shape[1]
    if not 1 <= k <= n_features:
        raise ConfigError(f"PCA needs 1 <= k <= {n_features}, got {k}")
    mean = rows.mean(axis=0)
    centered = rows - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = s**2
    total = var.sum()
    ratio = var / total if total > 0 else np.zeros_like(var)
    return PcaTransform(mean, vt[:k].copy(), ratio[:k].copy())


def pca_apply(x, transform):
    return transform.apply(x)


# -- prepared dataset + cache --------------------------------------------------


@dataclass
class PreparedDataset:
    dataset: str
    train: WindowSet
    val: WindowSet
    test: WindowSet
    stats: NormalizationStats
    params: dict
    summary: dict = field(default_factory=dict)

    @property
    def graph_hash(self):
        return self.params.get("graph_hash", "")


def cache_key(dataset, graph_hash, window_length, shift, r_u, seed, ratio=0.8):
    raw = json.dumps([dataset, graph_hash, window_length, shift, float(r_u), seed, float(ratio), CACHE_VERSION]).encode()
    return hashlib.sha256(raw).hexdigest()[:16]


def prepare_dataset(
    dataset,
    data_dir,
    graph_hash="",
    window_length=WINDOW_LENGTH,
    shift=WINDOW_SHIFT,
    r_u=RUL_CEILING,
    seed=0,
    ratio=0.8,
):
    train_path, test_path, rul_path = dataset_paths(dataset, data_dir)
    train_runs, test_runs = parse_cmapss(train_path, test_path, rul_path)
    fit_runs, val_runs = split_train_val(train_runs, ratio, np.random.default_rng(seed))
    stats = fit_normalization(fit_runs)
    train = windows_from_runs(fit_runs, stats, window_length, shift, r_u)
    val = windows_from_runs(val_runs, stats, window_length, shift, r_u)
    test = make_test_windows(
        [apply_normalization(r, stats) for r in test_runs], window_length, r_u, stats.pad_value
    )
    summary = {
        "instances_pre_split": len(train_runs),
        "instances_train": len(fit_runs),
        "instances_val": len(val_runs),
        "instances_test": len(test_runs),
        "windows_train": len(train),
        "windows_val": len(val),
        "windows_train_val": len(train) + len(val),
        "windows_test": len(test),
    }
    params = {
        "dataset": dataset,
        "graph_hash": graph_hash,
        "window_length": window_length,
        "shift": shift,
        "r_u": float(r_u),
        "seed": seed,
        "ratio": ratio,
    }
    return PreparedDataset(dataset, train, val, test, stats, params, summary)


def dumps_dataset(ds):
    arrays = {"norm_min": ds.stats.minimum, "norm_max": ds.stats.maximum, "pad_value": ds.stats.pad_value}
    for split in ("train", "val", "test"):
        w = getattr(ds, split)
        for name in ("channels", "targets", "t_end", "rul", "unit_ids"):
            arrays[f"{split}.{name}"] = getattr(w, name)
    meta = {"version": CACHE_VERSION, "params": ds.params, "summary": ds.summary, "channels": list(CHANNELS)}
    return container.dump(CACHE_MAGIC, meta, arrays)


def loads_dataset(blob):
    meta, arrays = container.load(blob, CACHE_MAGIC)
    if meta.get("version") != CACHE_VERSION:
        raise LoadError(f"dataset cache version {meta.get('version')} != {CACHE_VERSION}")
    params = meta["params"]
    splits = {}
    for split in ("train", "val", "test"):
        splits[split] = WindowSet(
            channels=arrays[f"{split}.channels"],
            targets=arrays[f"{split}.targets"],
            t_end=arrays[f"{split}.t_end"],
            rul=arrays[f"{split}.rul"],
            unit_ids=arrays[f"{split}.unit_ids"],
            is_test=split == "test",
            r_u=params["r_u"],
        )
    stats = NormalizationStats(arrays["norm_min"], arrays["norm_max"], arrays["pad_value"])
    return PreparedDataset(params["dataset"], splits["train"], splits["val"], splits["test"], stats, params, meta["summary"])


def cache_path(cache_dir, params):
    key = cache_key(params["dataset"], params["graph_hash"], params["window_length"], params["shift"], params["r_u"], params["seed"], params.get("ratio", 0.8))
    return Path(cache_dir) / f"{params['dataset']}_{key}.gnmrdata"


def save_dataset(ds, cache_dir):
    path = cache_path(cache_dir, ds.params)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = dumps_dataset(ds)
    path.write_bytes(blob)
    return path, hashlib.sha256(blob).hexdigest()


def load_dataset(path):
    return loads_dataset(Path(path).read_bytes())
