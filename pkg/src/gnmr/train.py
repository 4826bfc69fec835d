"""Mini-batch training with Adam, step learning-rate decay and grid search."""

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericalError
from .evaluation import denormalize_prediction, rmse
from .model import ModelConfig, build_model

DEFAULT_GRID = {"d": (30, 60), "tau": (0, 2, 4), "gru_layers": (2, 3, 4)}
MODEL_KINDS = ("gnmr", "gru_mr", "pca_gru_mr")


@dataclass
class TrainConfig:
    model: str = "gnmr"
    d: int = 30
    tau: int = 2
    gru_layers: int = 2
    dropout: float = 0.2
    tie_edges: bool = False
    use_node_type: bool = True
    batch_size: int = 32
    lr0: float = 1e-3
    lr_decay: float = 1.0 / np.sqrt(2.0)
    decay_every: int = 10
    max_epochs: int = 200
    patience: int = 20
    grad_clip: Optional[float] = None
    pca_components: int = 5
    seed: int = 0

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model!r}; expected one of {MODEL_KINDS}")
        for name in ("batch_size", "max_epochs", "decay_every", "pca_components"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        self.model_config()
        return self

    def model_config(self):
        return ModelConfig(
            d=self.d,
            gru_layers=self.gru_layers,
            tau=self.tau,
            dropout=self.dropout,
            tie_edges=self.tie_edges,
            use_node_type=self.use_node_type,
        ).validate()

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(unknown)}")
        return cls(**raw)

    def to_dict(self):
        return asdict(self)


def lr_at(epoch, lr0=1e-3, decay=1.0 / np.sqrt(2.0), every=10):
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return lr0 * decay ** (epoch // every)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr, grad_clip=None):
    """One bias-corrected Adam update, in place. Parameters are keyed by ``name``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericalError(f"non-finite gradient in parameter {p.name!r} ({bad} of {g.size} entries)")
        grads.append(g)
    if grad_clip is not None:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
        if norm > grad_clip:
            grads = [g * (grad_clip / norm) for g in grads]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g in zip(params, grads):
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def __len__(self):
        return len(self.epoch)

    def rows(self):
        """Deterministic columns only (wall time excluded)."""
        return list(zip(self.epoch, self.loss, self.val_rmse, self.lr))

    @property
    def best_val_rmse(self):
        return self.val_rmse[self.best_epoch] if self.best_epoch >= 0 else float("nan")


def _derived_rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


def make_model(cfg, graph=None, train_windows=None):
    """Build and seed-initialize the model named by ``cfg.model``."""
    pca = None
    if cfg.model == "pca_gru_mr":
        from .cmapss import pca_fit

        if train_windows is None or len(train_windows) == 0:
            raise ConfigError("pca_gru_mr needs training windows to fit the projection")
        pca = pca_fit(train_windows, k=cfg.pca_components)
    model = build_model(cfg.model, cfg.model_config(), graph=graph, pca=pca)
    return model.init_parameters(_derived_rng(cfg.seed, 0))


def validation_rmse(model, windows, batch_size=256):
    """RMSE in cycles against the clipped targets, dropout off."""
    if windows is None or len(windows) == 0:
        return float("nan")
    pred, _ = model.predict(windows, batch_size)
    r_u = windows.r_u
    return rmse(denormalize_prediction(pred, r_u) - windows.targets * r_u)


def train(model, train_windows, val_windows, cfg, log=None):
    """Train ``model`` in place; returns ``(model, history)`` with the best snapshot loaded.

    The snapshot with the lowest validation RMSE is kept. Without validation
    windows the lowest epoch training loss is used instead.
    """
    cfg.validate()
    if train_windows is None or len(train_windows) == 0:
        raise ConfigError("training set is empty")
    shuffle_rng = _derived_rng(cfg.seed, 1)
    dropout_rng = _derived_rng(cfg.seed, 2)
    params = model.parameters()
    state = AdamState()
    history = TrainHistory()
    has_val = val_windows is not None and len(val_windows) > 0
    best_score, best_state, since_best = np.inf, model.state(), 0
    n = len(train_windows)
    start = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg.lr0, cfg.lr_decay, cfg.decay_every)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b in range(0, n, cfg.batch_size):
            idx = np.sort(order[b : b + cfg.batch_size])
            with ad.Tape() as tape:
                pred, _ = model.forward_windows(
                    train_windows.channels[idx], train_windows.ages[idx], training=True, rng=dropout_rng
                )
                loss = ad.mse_loss(pred, train_windows.targets[idx])
            model.zero_grad()
            ad.backward(loss, tape)
            adam_step(params, state, lr, cfg.grad_clip)
            total += float(loss.data) * len(idx)
        epoch_loss = total / n
        val = validation_rmse(model, val_windows) if has_val else float("nan")
        history.epoch.append(epoch)
        history.loss.append(epoch_loss)
        history.val_rmse.append(val)
        history.lr.append(lr)
        history.wall_time.append(time.perf_counter() - start)
        if log is not None:
            log(f"epoch {epoch:4d}  loss {epoch_loss:.6g}  val_rmse {val:.4f}  lr {lr:.3g}")

        score = val if has_val else epoch_loss
        if score < best_score:
            best_score, best_state, since_best = score, model.state(), 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best > cfg.patience:
                history.stopped_early = True
                break

    model.load_state(best_state)
    return model, history


@dataclass
class GridPoint:
    config: TrainConfig
    val_rmse: float
    epochs: int
    model: object = None
    history: Optional[TrainHistory] = None


@dataclass
class GridResult:
    points: list
    best: GridPoint

    def rows(self):
        return [
            {"d": p.config.d, "tau": p.config.tau, "gru_layers": p.config.gru_layers, "seed": p.config.seed,
             "val_rmse": p.val_rmse, "epochs": p.epochs, "selected": int(p is self.best)}
            for p in self.points
        ]


def grid_configs(base, grid):
    """One config per point of the cartesian grid; each point gets a seed derived from the base seed."""
    grid = {**{k: (getattr(base, k),) for k in DEFAULT_GRID}, **grid}
    unknown = sorted(set(grid) - set(DEFAULT_GRID))
    if unknown:
        raise ConfigError(f"cannot grid over {unknown}; supported axes are {sorted(DEFAULT_GRID)}")
    out = []
    for d, tau, layers in itertools.product(grid["d"], grid["tau"], grid["gru_layers"]):
        seed = int(np.random.SeedSequence([base.seed, d, tau, layers]).generate_state(1)[0])
        out.append(replace(base, d=d, tau=tau, gru_layers=layers, seed=seed))
    if not out:
        raise ConfigError("grid is empty")
    return out


def _default_train_fn(cfg, graph, train_windows, val_windows):
    model = make_model(cfg, graph, train_windows)
    model, history = train(model, train_windows, val_windows, cfg)
    return model, history, history.best_val_rmse


def grid_search(train_windows, val_windows, base, grid, graph=None, jobs=1, train_fn: Callable = None):
    """Train every grid point and select the lowest validation RMSE.

    Ties go to smaller ``d``, then smaller ``tau``, then fewer layers.
    ``train_fn(cfg, graph, train, val) -> (model, history, val_rmse)`` may
    be injected.
    """
    configs = grid_configs(base, grid)
    train_fn = train_fn or _default_train_fn

    def run(cfg):
        model, history, val = train_fn(cfg, graph, train_windows, val_windows)
        return GridPoint(cfg, float(val), len(history) if history is not None else 0, model, history)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(run, configs))
    else:
        points = [run(c) for c in configs]
    key = lambda p: (np.inf if np.isnan(p.val_rmse) else p.val_rmse, p.config.d, p.config.tau, p.config.gru_layers)
    return GridResult(points, min(points, key=key))
