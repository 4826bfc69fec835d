"""Equipment structure as a directed graph of modules owning sensor subsets.

An edge ``(j, k)`` is a directed edge from node ``j`` to node ``k``. Graph
configs are JSON files::

    {
      "name": "turbofan_8",
      "global_sensors": ["setting1", "setting2", "setting3"],
      "nodes": [{"name": "Fan", "node_type": "Fan", "sensors": ["T2", "P2"]}, ...],
      "edges": [["Fan", "LPC"], ...],
      "merge_pairs": [["Fan", "Bypass"], ...]
    }

``global_sensors`` are channels appended to every node's input series (the
operating-condition variables); they are not part of any node's own sensor
set, so the structural perturbations below never split or duplicate them.
``merge_pairs`` is optional and names the neighbour pairs used for the
reduced-node variant.
"""

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .channels import CHANNEL_INDEX
from .errors import ConfigError, ValidationError

__all__ = [
    "AdjacencyPair",
    "EquipmentGraph",
    "NodeSpec",
    "VARIANTS",
    "build_adjacency",
    "collapse_to_single_node",
    "default_graph",
    "graph_from_dict",
    "load_graph_config",
    "merge_nodes",
    "named_variant",
    "one_node_per_sensor",
    "save_graph_config",
    "shipped_config_path",
    "split_nodes",
]


@dataclass(frozen=True)
class NodeSpec:
    id: int
    name: str
    node_type: str
    sensors: tuple

    @property
    def n_sensors(self):
        return len(self.sensors)


@dataclass(frozen=True)
class EquipmentGraph:
    nodes: tuple
    edges: tuple
    global_sensors: tuple = ()
    name: str = ""
    merge_pairs: tuple = field(default=(), compare=False)

    def __post_init__(self):
        _validate(self)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def sensors(self):
        """Distinct node sensors in order of first appearance."""
        seen = {}
        for node in self.nodes:
            for s in node.sensors:
                seen.setdefault(s, None)
        return tuple(seen)

    def node_id(self, key):
        """Resolve a node name or integer id."""
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < self.n_nodes:
                raise ConfigError(f"node id {key} outside graph with {self.n_nodes} nodes")
            return int(key)
        for node in self.nodes:
            if node.name == key:
                return node.id
        if isinstance(key, str) and key.isdigit():
            return self.node_id(int(key))
        raise ConfigError(f"unknown node {key!r}")

    def input_columns(self, j):
        """Channel names fed to node ``j``: its own sensors, then the global ones."""
        return tuple(self.nodes[j].sensors) + tuple(self.global_sensors)

    def to_dict(self):
        out = {
            "name": self.name,
            "global_sensors": list(self.global_sensors),
            "nodes": [{"name": n.name, "node_type": n.node_type, "sensors": list(n.sensors)} for n in self.nodes],
            "edges": [[self.nodes[a].name, self.nodes[b].name] for a, b in self.edges],
        }
        if self.merge_pairs:
            out["merge_pairs"] = [list(p) for p in self.merge_pairs]
        return out

    def structure_hash(self):
        """SHA-256 over everything that affects model shapes and inputs."""
        payload = {
            "global_sensors": list(self.global_sensors),
            "nodes": [[n.name, n.node_type, list(n.sensors)] for n in self.nodes],
            "edges": [list(e) for e in self.edges],
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class AdjacencyPair:
    a_in: np.ndarray
    a_out: np.ndarray


def _validate(g):
    for pos, node in enumerate(g.nodes):
        if node.id != pos:
            raise ValidationError(f"node {node.name!r}: id {node.id} does not match position {pos}")
        if not node.sensors:
            raise ValidationError(f"node {node.name!r} has no sensors")
        if len(set(node.sensors)) != len(node.sensors):
            raise ValidationError(f"node {node.name!r} lists a sensor twice")
        for s in node.sensors:
            if s not in CHANNEL_INDEX:
                raise ValidationError(f"node {node.name!r}: unknown sensor {s!r}")
    for s in g.global_sensors:
        if s not in CHANNEL_INDEX:
            raise ValidationError(f"unknown global sensor {s!r}")
    names = [n.name for n in g.nodes]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise ValidationError(f"duplicate node id {dup!r}")
    seen = set()
    for a, b in g.edges:
        if not (0 <= a < len(g.nodes) and 0 <= b < len(g.nodes)):
            raise ValidationError(f"edge ({a}, {b}) has a dangling endpoint")
        if a == b:
            raise ValidationError(f"self-loop on node {g.nodes[a].name!r}")
        if (a, b) in seen:
            raise ValidationError(f"duplicate edge {g.nodes[a].name!r} -> {g.nodes[b].name!r}")
        seen.add((a, b))


def _make_graph(nodes, edges, template, name=None, merge_pairs=()):
    """Build a graph from (name, node_type, sensors) triples and index edges."""
    specs = tuple(NodeSpec(i, n, t, tuple(s)) for i, (n, t, s) in enumerate(nodes))
    return EquipmentGraph(
        nodes=specs,
        edges=tuple(edges),
        global_sensors=template.global_sensors,
        name=template.name if name is None else name,
        merge_pairs=tuple(merge_pairs),
    )


def graph_from_dict(cfg):
    try:
        raw_nodes = cfg["nodes"]
        raw_edges = cfg.get("edges", [])
    except (KeyError, TypeError, AttributeError):
        raise ValidationError("graph config needs a top-level 'nodes' list") from None
    nodes = []
    for pos, item in enumerate(raw_nodes):
        if "name" not in item or "sensors" not in item:
            raise ValidationError(f"node entry {pos} needs 'name' and 'sensors'")
        if "id" in item and item["id"] != pos:
            raise ValidationError(f"duplicate node id {item['id']!r} (entry {pos})")
        nodes.append(NodeSpec(pos, str(item["name"]), str(item.get("node_type", item["name"])), tuple(item["sensors"])))
    index = {}
    for n in nodes:
        if n.name in index:
            raise ValidationError(f"duplicate node id {n.name!r}")
        index[n.name] = n.id
    edges = []
    for e in raw_edges:
        if len(e) != 2:
            raise ValidationError(f"edge {e!r} must be a [from, to] pair")
        for end in e:
            if end not in index:
                raise ValidationError(f"edge {e!r} references nonexistent node {end!r}")
        edges.append((index[e[0]], index[e[1]]))
    return EquipmentGraph(
        nodes=tuple(nodes),
        edges=tuple(edges),
        global_sensors=tuple(cfg.get("global_sensors", ())),
        name=str(cfg.get("name", "")),
        merge_pairs=tuple(tuple(p) for p in cfg.get("merge_pairs", ())),
    )


def load_graph_config(path):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"graph config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return graph_from_dict(cfg)


def save_graph_config(g, path):
    Path(path).write_text(json.dumps(g.to_dict(), indent=2) + "\n")


def shipped_config_path(name):
    return resources.files("gnmr") / "configs" / f"{name}.json"


def default_graph():
    """The 8-module turbofan structure."""
    with resources.as_file(shipped_config_path("turbofan_8")) as p:
        return load_graph_config(p)


def build_adjacency(g):
    """Degree-normalized incoming/outgoing adjacency rows.

    ``a_in[j, i] = 1 / indegree(j)`` for every edge ``i -> j`` and
    ``a_out[j, k] = 1 / outdegree(j)`` for every edge ``j -> k``; rows of
    nodes without such edges stay zero.
    """
    n = g.n_nodes
    a_in = np.zeros((n, n))
    a_out = np.zeros((n, n))
    for i, j in g.edges:
        a_in[j, i] = 1.0
        a_out[i, j] = 1.0
    for a in (a_in, a_out):
        deg = a.sum(axis=1, keepdims=True)
        np.divide(a, deg, out=a, where=deg > 0)
    return AdjacencyPair(a_in, a_out)


def split_nodes(g, rng):
    """Split every multi-sensor node into two halves with a random sensor assignment.

    The first child gets the extra sensor for odd counts. Children of one
    parent are linked both ways, and every original edge ``j -> k`` becomes
    edges from each child of ``j`` to each child of ``k``.
    """
    nodes = []
    children = []
    for node in g.nodes:
        if node.n_sensors > 1:
            order = rng.permutation(node.n_sensors)
            half = (node.n_sensors + 1) // 2
            first = sorted(order[:half])
            second = sorted(order[half:])
            ids = [len(nodes), len(nodes) + 1]
            nodes.append((f"{node.name}_1", node.node_type, [node.sensors[i] for i in first]))
            nodes.append((f"{node.name}_2", node.node_type, [node.sensors[i] for i in second]))
        else:
            ids = [len(nodes)]
            nodes.append((node.name, node.node_type, list(node.sensors)))
        children.append(ids)
    edges = []
    for ids in children:
        if len(ids) == 2:
            edges += [(ids[0], ids[1]), (ids[1], ids[0])]
    for j, k in g.edges:
        edges += [(a, b) for a in children[j] for b in children[k]]
    return _make_graph(nodes, edges, g, name=f"{g.name}_increased" if g.name else "increased")


def merge_nodes(g, pairs):
    """Merge disjoint pairs of edge-adjacent nodes (given by name or id).

    A merged node owns the union of its parents' sensors; two new nodes are
    connected whenever any of their constituents were. Self-loops that arise
    from merging are dropped.
    """
    group = list(range(g.n_nodes))
    used = set()
    edge_set = set(g.edges)
    for pair in pairs:
        if len(pair) != 2:
            raise ConfigError(f"merge pair {pair!r} must name two nodes")
        a, b = (g.node_id(p) for p in pair)
        if a == b:
            raise ConfigError(f"cannot merge node {g.nodes[a].name!r} with itself")
        if (a, b) not in edge_set and (b, a) not in edge_set:
            raise ConfigError(f"nodes {g.nodes[a].name!r} and {g.nodes[b].name!r} are not adjacent")
        if a in used or b in used:
            raise ConfigError(f"merge pairs overlap at {pair!r}")
        used.update((a, b))
        group[b] = a
    new_index = {}
    members = {}
    for j in range(g.n_nodes):
        root = group[j]
        if root not in new_index:
            new_index[root] = len(new_index)
        members.setdefault(root, []).append(j)
    nodes = []
    for root in new_index:
        parts = [g.nodes[j] for j in members[root]]
        sensors = []
        for p in parts:
            sensors += [s for s in p.sensors if s not in sensors]
        label = "+".join(p.name for p in parts)
        nodes.append((label, "+".join(p.node_type for p in parts), sensors))
    edges = []
    for a, b in g.edges:
        e = (new_index[group[a]], new_index[group[b]])
        if e[0] != e[1] and e not in edges:
            edges.append(e)
    return _make_graph(nodes, edges, g, name=f"{g.name}_reduced" if g.name else "reduced")


def one_node_per_sensor(g):
    """One node per distinct sensor.

    Sensor-node ``s -> t`` exists when some parent of ``s`` equals, or has an
    edge to, some parent of ``t``.
    """
    sensors = g.sensors
    parents = {s: [n.id for n in g.nodes if s in n.sensors] for s in sensors}
    linked = set(g.edges) | {(n.id, n.id) for n in g.nodes}
    nodes = [(s, g.nodes[parents[s][0]].node_type, [s]) for s in sensors]
    edges = []
    for i, s in enumerate(sensors):
        for k, t in enumerate(sensors):
            if i != k and any((p, q) in linked for p in parents[s] for q in parents[t]):
                edges.append((i, k))
    return _make_graph(nodes, edges, g, name=f"{g.name}_per_sensor" if g.name else "per_sensor")


def collapse_to_single_node(g):
    """A single node holding every sensor, no edges."""
    return _make_graph([("all", "all", list(g.sensors))], [], g, name=f"{g.name}_single" if g.name else "single")


VARIANTS = ("original", "reduced", "increased", "per_sensor", "single_node")
_ALIASES = {"reduced4": "reduced", "increased13": "increased", "one_node_per_sensor": "per_sensor", "single": "single_node"}


def named_variant(variant, base=None, seed=0):
    """Resolve one of :data:`VARIANTS` against ``base`` (default: the turbofan graph)."""
    base = default_graph() if base is None else base
    variant = _ALIASES.get(variant, variant)
    if variant == "original":
        return base
    if variant == "reduced":
        if not base.merge_pairs:
            raise ConfigError("base graph has no 'merge_pairs'; cannot build the reduced variant")
        return merge_nodes(base, base.merge_pairs)
    if variant == "increased":
        return split_nodes(base, np.random.default_rng(seed))
    if variant == "per_sensor":
        return one_node_per_sensor(base)
    if variant == "single_node":
        return collapse_to_single_node(base)
    raise ConfigError(f"unknown graph variant {variant!r}; choose from {', '.join(VARIANTS)}")
