"""GNMR network and the flat GRU-MR baselines.

GNMR for a batch of ``B`` windows over a graph with ``V`` nodes:

1. node encoders: each node's ``T x p_j`` series goes through its own
   two-layer leaky-ReLU network to ``T x d``, then through the GRU stack
   shared by all nodes; the top layer's final state is ``v_j^0``;
2. ``tau`` rounds of gated message passing over the degree-normalized
   incoming/outgoing adjacency;
3. attention readout: per node, ``[v_j^0, v_j^tau, age, one_hot(j)]`` feeds a
   score head (softmax over nodes) and an estimate head; the prediction is
   the attention-weighted sum of per-node estimates.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .cmapss import PcaTransform, node_column_indices
from .errors import ConfigError, LoadError, ShapeError
from .graph import build_adjacency, graph_from_dict

CHECKPOINT_MAGIC = b"GNMRCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d: int = 30
    gru_layers: int = 2
    tau: int = 2
    dropout: float = 0.2
    leaky_slope: float = 0.01
    tie_edges: bool = False
    use_node_type: bool = True

    def validate(self):
        if self.d < 1:
            raise ConfigError(f"d must be positive, got {self.d}")
        if self.gru_layers < 1:
            raise ConfigError(f"gru_layers must be positive, got {self.gru_layers}")
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self


class Network:
    """Ordered collection of named parameter tensors."""

    kind = ""

    def __init__(self, config):
        self.config = config.validate()
        self.params = {}
        self._fan_in = {}

    def _param(self, name, shape, fan_in=None):
        t = Tensor(np.zeros(shape), requires_grad=True, name=name)
        self.params[name] = t
        self._fan_in[name] = fan_in
        return t

    def parameters(self):
        return list(self.params.values())

    def init_parameters(self, rng):
        """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
        for name, p in self.params.items():
            fan_in = self._fan_in[name]
            if fan_in is None:
                p.data = np.zeros(p.shape)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                p.data = rng.uniform(-bound, bound, size=p.shape)
            p.grad = None
        return self

    def state(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state):
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"parameter {name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
            p.grad = None

    def zero_grad(self):
        ad.zero_grad(self.parameters())

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def _dense(self, x, prefix):
        return ad.add(ad.matmul(x, self.params[f"{prefix}.w"]), self.params[f"{prefix}.b"])

    def _leaky_block(self, x, prefixes, training, rng):
        for prefix in prefixes:
            x = ad.leaky_relu(self._dense(x, prefix), self.config.leaky_slope)
            x = ad.dropout(x, self.config.dropout, rng, training)
        return x

    def _gru_stack(self, seq):
        for layer in range(self.config.gru_layers):
            p = f"gru{layer}"
            seq = ad.gru_sequence(seq, self.params[f"{p}.w"], self.params[f"{p}.u"], self.params[f"{p}.b"])
        return seq

    def _add_gru(self, n_inputs):
        d = self.config.d
        for layer in range(self.config.gru_layers):
            width = n_inputs if layer == 0 else d
            self._param(f"gru{layer}.w", (width, 3 * d), fan_in=width)
            self._param(f"gru{layer}.u", (d, 3 * d), fan_in=d)
            self._param(f"gru{layer}.b", (3 * d,))

    def predict(self, windows, batch_size=256):
        """Eval-mode predictions for a :class:`~gnmr.cmapss.WindowSet` (numpy outputs)."""
        preds, extras = [], []
        for start in range(0, len(windows), batch_size):
            sl = slice(start, start + batch_size)
            pred, extra = self.forward_windows(windows.channels[sl], windows.ages[sl], training=False)
            preds.append(pred.data)
            extras.append({k: v.data for k, v in extra.items()})
        out = {k: np.concatenate([e[k] for e in extras]) for k in (extras[0] if extras else {})}
        return (np.concatenate(preds) if preds else np.zeros(0)), out

    def header(self):
        return {"kind": self.kind, "config": asdict(self.config)}


class GnmrModel(Network):
    kind = "gnmr"

    def __init__(self, graph, config=None):
        super().__init__(config or ModelConfig())
        self.graph = graph
        self.adjacency = build_adjacency(graph)
        self.columns = node_column_indices(graph)
        d = self.config.d
        n = graph.n_nodes

        for j, cols in enumerate(self.columns):
            self._param(f"enc{j}.l1.w", (len(cols), d), fan_in=len(cols))
            self._param(f"enc{j}.l1.b", (d,))
            self._param(f"enc{j}.l2.w", (d, d), fan_in=d)
            self._param(f"enc{j}.l2.b", (d,))
        self._add_gru(d)

        self.edge_sets, self.edge_set_keys = self._edge_tying()
        k = len(self.edge_set_keys)
        if k:
            self._param("edge.l1.w", (k, d, d), fan_in=d)
            self._param("edge.l1.b", (k, 1, d))
            self._param("edge.l2.w", (k, d, d), fan_in=d)
            self._param("edge.l2.b", (k, 1, d))

        for gate in ("z", "r", "o"):
            self._param(f"cell.{gate}.w", (2 * d, d), fan_in=2 * d)
            self._param(f"cell.{gate}.u", (d, d), fan_in=d)
            self._param(f"cell.{gate}.b", (d,))

        q = self.readout_width
        for head in ("att", "est"):
            self._param(f"{head}.hidden.w", (q, d), fan_in=q)
            self._param(f"{head}.hidden.b", (d,))
            self._param(f"{head}.out.w", (d, 1), fan_in=d)
            self._param(f"{head}.out.b", (1,))

        self._build_scatter()

    @property
    def readout_width(self):
        return 2 * self.config.d + 1 + (self.graph.n_nodes if self.config.use_node_type else 0)

    @property
    def n_edge_sets(self):
        return len(self.edge_set_keys)

    def _edge_tying(self):
        keys = []
        sets = []
        for e, (i, j) in enumerate(self.graph.edges):
            if self.config.tie_edges:
                key = (self.graph.nodes[i].node_type, self.graph.nodes[j].node_type)
            else:
                key = (e,)
            if key not in keys:
                keys.append(key)
            sets.append(keys.index(key))
        return np.array(sets, dtype=np.intp), keys

    def _build_scatter(self):
        n, edges = self.graph.n_nodes, self.graph.edges
        m = len(edges)
        src = np.array([e[0] for e in edges], dtype=np.intp)
        dst = np.array([e[1] for e in edges], dtype=np.intp)
        # messages 0..m-1: f_e(v_src) delivered to dst; m..2m-1: f_e(v_dst) delivered to src
        self._msg_node = np.concatenate([src, dst])
        self._msg_set = np.concatenate([self.edge_sets, self.edge_sets])
        self._scatter_in = np.zeros((n, 2 * m))
        self._scatter_out = np.zeros((n, 2 * m))
        for e in range(m):
            self._scatter_in[dst[e], e] = self.adjacency.a_in[dst[e], src[e]]
            self._scatter_out[src[e], m + e] = self.adjacency.a_out[src[e], dst[e]]

    # -- stages ----------------------------------------------------------------

    def encode_nodes(self, node_inputs, training=False, rng=None):
        """Map per-node series (each ``B x T x p_j``) to initial states ``B x V x d``."""
        if len(node_inputs) != self.graph.n_nodes:
            raise ShapeError(f"got {len(node_inputs)} node inputs for a graph with {self.graph.n_nodes} nodes")
        d = self.config.d
        encoded = []
        for j, x in enumerate(node_inputs):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 2:
                x = x[None]
            b, steps, p = x.shape
            if p != len(self.columns[j]):
                raise ShapeError(f"node {j}: expected {len(self.columns[j])} columns, got {p}")
            h = ad.reshape(Tensor(x), (b * steps, p))
            h = self._leaky_block(h, (f"enc{j}.l1", f"enc{j}.l2"), training, rng)
            encoded.append(ad.reshape(h, (b, 1, steps, d)))
        b, steps = encoded[0].shape[0], encoded[0].shape[2]
        seq = ad.reshape(ad.concat(encoded, axis=1), (b * len(encoded), steps, d))
        seq = self._gru_stack(seq)
        return ad.reshape(seq[:, -1, :], (b, len(encoded), d))

    def _messages(self, v, training, rng):
        x = ad.transpose(ad.take(v, self._msg_node, axis=1), (1, 0, 2))
        for layer in ("l1", "l2"):
            w = ad.take(self.params[f"edge.{layer}.w"], self._msg_set, axis=0)
            b = ad.take(self.params[f"edge.{layer}.b"], self._msg_set, axis=0)
            x = ad.leaky_relu(ad.add(ad.matmul(x, w), b), self.config.leaky_slope)
            x = ad.dropout(x, self.config.dropout, rng, training)
        msgs = ad.transpose(x, (1, 0, 2))
        return ad.concat([ad.matmul(self._scatter_in, msgs), ad.matmul(self._scatter_out, msgs)], axis=-1)

    def _gate(self, a, v, name, reset=None):
        p = self.params
        h = v if reset is None else ad.mul(reset, v)
        return ad.add(ad.add(ad.matmul(a, p[f"cell.{name}.w"]), ad.matmul(h, p[f"cell.{name}.u"])), p[f"cell.{name}.b"])

    def propagate(self, v0, tau=None, training=False, rng=None, update_gate=None, trace=None):
        """Gated message passing for ``tau`` steps (default: the configured tau).

        ``update_gate`` optionally replaces the update gate with a fixed array,
        and ``trace`` (a list) collects per-step ``z``, ``r``, candidate and state.
        """
        tau = self.config.tau if tau is None else tau
        if tau < 0:
            raise ConfigError(f"tau must be >= 0, got {tau}")
        v = v0 if isinstance(v0, Tensor) else Tensor(v0)
        b, n, d = v.shape
        for _ in range(tau):
            if self.graph.edges:
                a = self._messages(v, training, rng)
            else:
                a = Tensor(np.zeros((b, n, 2 * d)))
            z = ad.sigmoid(self._gate(a, v, "z")) if update_gate is None else Tensor(np.broadcast_to(update_gate, v.shape))
            r = ad.sigmoid(self._gate(a, v, "r"))
            cand = ad.tanh(self._gate(a, v, "o", reset=r))
            prev = v
            v = ad.add(ad.mul(ad.sub(1.0, z), prev), ad.mul(z, cand))
            if trace is not None:
                trace.append({"a": a.data, "z": z.data, "r": r.data, "candidate": cand.data, "prev": prev.data, "v": v.data})
        return v

    def readout(self, v0, vt, ages, training=False, rng=None):
        """Attention readout; returns ``(prediction, weights, per_node_estimates)``."""
        b, n, _ = vt.shape
        ages = np.asarray(ages, dtype=np.float64).reshape(b, 1, 1)
        parts = [v0, vt, Tensor(np.broadcast_to(ages, (b, n, 1)))]
        if self.config.use_node_type:
            parts.append(Tensor(np.broadcast_to(np.eye(n), (b, n, n))))
        feats = ad.concat(parts, axis=-1)
        heads = {}
        for head in ("att", "est"):
            h = self._leaky_block(feats, (f"{head}.hidden",), training, rng)
            heads[head] = ad.reshape(self._dense(h, f"{head}.out"), (b, n))
        weights = ad.softmax(heads["att"])
        estimates = heads["est"]
        return ad.sum(ad.mul(weights, estimates), axis=-1), weights, estimates

    def forward(self, node_inputs, ages, training=False, rng=None):
        v0 = self.encode_nodes(node_inputs, training, rng)
        vt = self.propagate(v0, training=training, rng=rng)
        return self.readout(v0, vt, ages, training, rng)

    def forward_windows(self, channels, ages, training=False, rng=None):
        channels = np.asarray(channels)
        pred, weights, estimates = self.forward([channels[..., c] for c in self.columns], ages, training, rng)
        return pred, {"weights": weights, "estimates": estimates}

    def forward_sample(self, sample):
        """Eval-mode forward for one :class:`~gnmr.cmapss.WindowSample`."""
        if len(sample.node_series) != self.graph.n_nodes:
            raise ShapeError(f"sample has {len(sample.node_series)} nodes, graph has {self.graph.n_nodes}")
        pred, w, est = self.forward([x[None] for x in sample.node_series], [sample.age])
        return float(pred.data[0]), w.data[0], est.data[0]

    def header(self):
        h = super().header()
        h["graph"] = self.graph.to_dict()
        h["graph_hash"] = self.graph.structure_hash()
        h["edge_set_keys"] = [list(k) for k in self.edge_set_keys]
        return h


class GruMrModel(Network):
    """GRU stack over the flat channel series, two leaky-ReLU layers, linear output.

    With ``pca`` set, windows are projected onto its components first.
    """

    def __init__(self, config=None, n_inputs=24, pca=None):
        super().__init__(config or ModelConfig())
        self.pca = pca
        if pca is not None:
            n_inputs = pca.n_components
        self.n_inputs = n_inputs
        d = self.config.d
        self._add_gru(n_inputs)
        self._param("head.l1.w", (d, d), fan_in=d)
        self._param("head.l1.b", (d,))
        self._param("head.l2.w", (d, d), fan_in=d)
        self._param("head.l2.b", (d,))
        self._param("out.w", (d, 1), fan_in=d)
        self._param("out.b", (1,))

    @property
    def kind(self):
        return "gru_mr" if self.pca is None else "pca_gru_mr"

    def forward(self, x, training=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.n_inputs:
            raise ShapeError(f"expected (B, T, {self.n_inputs}) input, got {x.shape}")
        seq = self._gru_stack(Tensor(x))
        h = self._leaky_block(seq[:, -1, :], ("head.l1", "head.l2"), training, rng)
        return ad.reshape(self._dense(h, "out"), (x.shape[0],))

    def forward_windows(self, channels, ages=None, training=False, rng=None):
        channels = np.asarray(channels, dtype=np.float64)
        x = self.pca.apply(channels) if self.pca is not None else channels
        return self.forward(x, training, rng), {}

    def header(self):
        h = super().header()
        h["n_inputs"] = self.n_inputs
        return h


def build_model(kind, config, graph=None, pca=None):
    if kind == "gnmr":
        if graph is None:
            raise ConfigError("gnmr needs a graph")
        return GnmrModel(graph, config)
    if kind == "gru_mr":
        return GruMrModel(config)
    if kind == "pca_gru_mr":
        if pca is None:
            raise ConfigError("pca_gru_mr needs a fitted PCA transform")
        return GruMrModel(config, pca=pca)
    raise ConfigError(f"unknown model kind {kind!r}")


def serialize(model, extra=None):
    """Checkpoint bytes: versioned header (hyperparameters, graph) then parameters."""
    meta = model.header()
    meta["version"] = CHECKPOINT_VERSION
    meta["param_order"] = list(model.params)
    meta["extra"] = extra or {}
    arrays = {f"param.{k}": v.data for k, v in model.params.items()}
    if getattr(model, "pca", None) is not None:
        arrays["pca.mean"] = model.pca.mean
        arrays["pca.components"] = model.pca.components
        arrays["pca.explained_variance_ratio"] = model.pca.explained_variance_ratio
    return container.dump(CHECKPOINT_MAGIC, meta, arrays)


def deserialize(blob):
    """Inverse of :func:`serialize`; returns ``(model, extra)``."""
    meta, arrays = container.load(blob, CHECKPOINT_MAGIC)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    try:
        config = ModelConfig(**meta["config"])
        kind = meta["kind"]
        graph = graph_from_dict(meta["graph"]) if "graph" in meta else None
        pca = None
        if "pca.mean" in arrays:
            pca = PcaTransform(arrays["pca.mean"], arrays["pca.components"], arrays["pca.explained_variance_ratio"])
        model = build_model(kind, config, graph, pca)
        if kind == "gru_mr" and meta.get("n_inputs", 24) != 24:
            model = GruMrModel(config, n_inputs=meta["n_inputs"])
        if list(model.params) != meta["param_order"]:
            raise LoadError("parameter layout does not match this build")
        model.load_state({k: arrays[f"param.{k}"] for k in model.params})
    except (KeyError, TypeError) as exc:
        raise LoadError(f"malformed checkpoint header: {exc}") from None
    return model, meta.get("extra", {})
