"""
Computation-graph IR of verification workloads and the fusion passes over it.

Projections can be emitted in the split form (``split_weight`` feeding a lower and an upper
``bound_matmul`` merged by ``merge_bounds``). The weight-pairing and double-bound passes
rewrite that form into a single ``affine`` node; cross-layer fusion then groups nodes
by operator category.
"""

import copy
import json
import typing as tp

import numpy as np

from boundcraft import relax
from boundcraft.core import LinearBounds, PerturbationSpec, input_bounds, tail_axes
from boundcraft.primitives import GRAPH_FORMAT, OpCategory, OpKind
from boundcraft.utils import ModelLoadError, ShapeMismatchError, UnknownOpError, log


FUSIBLE = {
    (OpCategory.DENSE_COMPUTATION, OpCategory.STRICT_ELEMENTWISE),
    (OpCategory.INPUT_REDUCTION_COMPUTE, OpCategory.STRICT_ELEMENTWISE),
    (OpCategory.STRICT_ELEMENTWISE, OpCategory.STRICT_ELEMENTWISE),
}

# kinds that never join a fusion group
UNFUSED_KINDS = {OpKind.INPUT, OpKind.SPLIT_WEIGHT}


class Node:
    """
    ``Node`` is one operator of a ``VerGraph``.

    Attributes:
        name: Unique node name; also names the node output.
        kind: ``OpKind`` of the operator.
        inputs: Names of producer nodes, in operand order.
        attrs: Json-serializable attributes; weights are referenced by parameter name.
        shape: Neuron shape of the output.
    """

    def __init__(self, name: str, kind: OpKind, inputs=(), attrs: dict = None, shape=()):
        self.name = name
        self.kind = relax._parse_kind(kind)
        self.inputs = list(inputs)
        self.attrs = dict(attrs or {})
        self.shape = tuple(int(s) for s in shape)

    @property
    def category(self) -> OpCategory:
        return categorize(self)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "inputs": list(self.inputs),
            "attrs": _jsonable(self.attrs),
            "shape": list(self.shape),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Node":
        return cls(record["name"], record["kind"], record.get("inputs", []), record.get("attrs", {}), record.get("shape", []))

    def __eq__(self, other) -> bool:
        return isinstance(other, Node) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"Node({self.name}, {self.kind.value}, inputs={self.inputs}, shape={self.shape})"


class VerGraph:
    """
    ``VerGraph`` is an acyclic graph of verification operators.

    Nodes are kept in insertion order, which is always a topological order: a node may only
    reference producers that already exist.

    Attributes:
        nodes: Mapping name -> ``Node``.
        params: Mapping parameter name -> weight array.
        fusion_groups: Partition of node names into groups executed as one kernel.
        output: Name of the output node.
    """

    def __init__(self):
        self.nodes: tp.Dict[str, Node] = {}
        self.params: tp.Dict[str, np.ndarray] = {}
        self.fusion_groups: tp.List[tp.List[str]] = []
        self.output: tp.Optional[str] = None

    # ------------------------------------------------------------ construction

    def add_param(self, name: str, value) -> str:
        value = np.array(value, dtype=np.float64)
        assert np.all(np.isfinite(value)), f"Parameter {name} contains non-finite values"
        value.setflags(write=False)
        self.params[name] = value
        return name

    def add_node(self, name: str, kind, inputs=(), attrs: dict = None) -> str:
        """
        Append a node, inferring and checking its output shape.

        Args:
            name: Unique node name.
            kind: ``OpKind`` or json name.
            inputs: Producer names.
            attrs: Operator attributes.

        Returns:
            Node name.
        """
        assert name not in self.nodes, f"Duplicate node name = {name}"
        for src in inputs:
            if src not in self.nodes:
                raise KeyError(f"Unknown producer {src} for node {name}")
        node = Node(name, kind, inputs, attrs)
        node.shape = self._infer_shape(node)
        self.nodes[name] = node
        self.fusion_groups.append([name])
        self.output = name
        return name

    def add_input(self, name: str, shape: tp.Sequence[int]) -> str:
        return self.add_node(name, OpKind.INPUT, attrs={"shape": list(shape)})

    def add_affine(self, name: str, x: str, weight: str, bias: tp.Optional[str] = None, split: bool = False) -> str:
        """
        Append a projection ``y = W x + b``.

        With ``split=True`` the projection is emitted in the unfused form::

            {name}.split -> {name}.lower, {name}.upper -> {name} (merge_bounds)

        Returns:
            Name of the node holding the projection output.
        """
        if not split:
            return self.add_node(name, OpKind.AFFINE, [x], {"weight": weight, "bias": bias})
        split_name = self.add_node(f"{name}.split", OpKind.SPLIT_WEIGHT, [], {"weight": weight})
        lower = self.add_node(
            f"{name}.lower", OpKind.BOUND_MATMUL, [x, split_name], {"weight": weight, "side": "lower", "paired": False}
        )
        upper = self.add_node(
            f"{name}.upper", OpKind.BOUND_MATMUL, [x, split_name], {"weight": weight, "side": "upper", "paired": False}
        )
        return self.add_node(name, OpKind.MERGE_BOUNDS, [lower, upper], {"bias": bias})

    # ------------------------------------------------------------ queries

    @property
    def edges(self) -> tp.List[tp.Tuple[str, str, int]]:
        """
        Returns:
            (producer, consumer, operand index) triples.
        """
        return [(src, node.name, port) for node in self.nodes.values() for port, src in enumerate(node.inputs)]

    @property
    def input_names(self) -> tp.List[str]:
        return [name for name, node in self.nodes.items() if node.kind is OpKind.INPUT]

    def consumers(self, name: str) -> tp.List[str]:
        return [node.name for node in self.nodes.values() if name in node.inputs]

    def topological_order(self) -> tp.List[str]:
        """
        Kahn order, ties broken by insertion order.
        """
        position = {name: i for i, name in enumerate(self.nodes)}
        pending = {name: len(set(node.inputs)) for name, node in self.nodes.items()}
        ready = sorted((name for name, count in pending.items() if count == 0), key=position.get)
        order = []
        while ready:
            name = ready.pop(0)
            order.append(name)
            for consumer in self.consumers(name):
                pending[consumer] -= 1
                if pending[consumer] == 0:
                    ready.append(consumer)
                    ready.sort(key=position.get)
        assert len(order) == len(self.nodes), "Graph has a cycle"
        return order

    def group_order(self) -> tp.List[tp.List[str]]:
        """
        Fusion groups in an order where every group follows all of its producers.
        """
        group_of = {name: i for i, group in enumerate(self.fusion_groups) for name in group}
        assert set(group_of) == set(self.nodes), "Fusion groups do not partition the graph"
        first = {i: min(list(self.nodes).index(n) for n in group) for i, group in enumerate(self.fusion_groups)}
        deps = {
            i: {group_of[src] for n in group for src in self.nodes[n].inputs} - {i}
            for i, group in enumerate(self.fusion_groups)
        }
        done, order = set(), []
        while len(order) < len(self.fusion_groups):
            ready = [i for i in deps if i not in done and deps[i] <= done]
            assert ready, "Fusion groups form a cycle"
            nxt = min(ready, key=first.get)
            done.add(nxt)
            order.append(self.fusion_groups[nxt])
        return order

    def reset_groups(self):
        self.fusion_groups = [[name] for name in self.nodes]

    def copy(self) -> "VerGraph":
        out = VerGraph()
        out.nodes = {name: copy.deepcopy(node) for name, node in self.nodes.items()}
        out.params = dict(self.params)
        out.fusion_groups = [list(group) for group in self.fusion_groups]
        out.output = self.output
        return out

    def summary(self) -> dict:
        """
        Returns:
            Node counts per kind and per category, number of fusion groups.
        """
        kinds, categories = {}, {}
        for node in self.nodes.values():
            kinds[node.kind.value] = kinds.get(node.kind.value, 0) + 1
            categories[node.category.value] = categories.get(node.category.value, 0) + 1
        return {"nodes": len(self.nodes), "groups": len(self.fusion_groups), "kinds": kinds, "categories": categories}

    def __eq__(self, other) -> bool:
        if not isinstance(other, VerGraph):
            return False
        same_params = self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )
        return (
            list(self.nodes) == list(other.nodes)
            and all(self.nodes[k] == other.nodes[k] for k in self.nodes)
            and same_params
            and self.fusion_groups == other.fusion_groups
            and self.output == other.output
        )

    # ------------------------------------------------------------ json

    def to_dict(self, include_params: bool = True) -> dict:
        record = {
            "format": GRAPH_FORMAT,
            "output": self.output,
            "nodes": [node.to_dict() for node in self.nodes.values()],
            "edges": [{"name": f"{src}->{dst}:{port}", "src": src, "dst": dst, "port": port} for src, dst, port in self.edges],
            "fusion_groups": [list(group) for group in self.fusion_groups],
        }
        if include_params:
            record["params"] = {
                name: {"shape": list(value.shape), "data": value.ravel().tolist()} for name, value in self.params.items()
            }
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "VerGraph":
        if record.get("format") != GRAPH_FORMAT:
            raise ValueError(f"Unsupported graph format = {record.get('format')}")
        g = cls()
        for name, param in (record.get("params") or {}).items():
            g.add_param(name, np.asarray(param["data"], dtype=np.float64).reshape(param["shape"]))
        for item in record["nodes"]:
            node = Node.from_dict(item)
            g.add_node(node.name, node.kind, node.inputs, node.attrs)
        edges = sorted((e["src"], e["dst"], e["port"]) for e in record.get("edges", []))
        if edges and edges != sorted(g.edges):
            raise ValueError("Graph edges do not match node inputs")
        if record.get("fusion_groups"):
            g.fusion_groups = [list(group) for group in record["fusion_groups"]]
        g.output = record.get("output", g.output)
        return g

    def save(self, path: str, include_params: bool = True):
        with open(path, "w") as stream:
            json.dump(self.to_dict(include_params), stream, indent=1)

    @classmethod
    def load(cls, path: str) -> "VerGraph":
        try:
            with open(path, "r") as stream:
                record = json.load(stream)
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelLoadError(f"Cannot read graph {path}: {exc}")
        return cls.from_dict(record)

    # ------------------------------------------------------------ shapes

    def _infer_shape(self, node: Node) -> tp.Tuple[int, ...]:
        shapes = [self.nodes[src].shape for src in node.inputs]
        kind, attrs = node.kind, node.attrs

        if kind is OpKind.INPUT:
            return tuple(attrs["shape"])
        if kind is OpKind.SPLIT_WEIGHT:
            return self._param(attrs["weight"]).shape
        if kind in (OpKind.AFFINE, OpKind.BOUND_MATMUL):
            W = self._param(attrs["weight"])
            if not shapes[0] or shapes[0][-1] != W.shape[1]:
                raise ShapeMismatchError(f"{node.name}: input {shapes[0]} does not conform to weight {W.shape}")
            if kind is OpKind.BOUND_MATMUL and len(shapes) > 1 and shapes[1] != W.shape:
                raise ShapeMismatchError(f"{node.name}: split weight {shapes[1]} != {W.shape}")
            self._check_bias(node, attrs.get("bias"), W.shape[0])
            return shapes[0][:-1] + (W.shape[0],)
        if kind is OpKind.MERGE_BOUNDS:
            if shapes[0] != shapes[1]:
                raise ShapeMismatchError(f"{node.name}: merged sides {shapes[0]} and {shapes[1]}")
            self._check_bias(node, attrs.get("bias"), shapes[0][-1])
            return shapes[0]
        if kind.is_activation or kind in (OpKind.SCALE, OpKind.SOFTMAX):
            return shapes[0]
        if kind is OpKind.ADD:
            if shapes[0] != shapes[1]:
                raise ShapeMismatchError(f"{node.name}: add operands {shapes[0]} and {shapes[1]}")
            return shapes[0]
        if kind is OpKind.MUL:
            return relax._broadcast_shape(shapes[0], shapes[1])
        if kind in (OpKind.REDUCE_SUM, OpKind.MEAN_POOL):
            axis = attrs.get("axis", -1 if kind is OpKind.REDUCE_SUM else -2) % len(shapes[0])
            if attrs.get("keepdims", False):
                return shapes[0][:axis] + (1,) + shapes[0][axis + 1:]
            return shapes[0][:axis] + shapes[0][axis + 1:]
        if kind is OpKind.RESHAPE:
            tail_ndim = attrs["tail_ndim"]
            lead, tail = shapes[0][: len(shapes[0]) - tail_ndim], shapes[0][len(shapes[0]) - tail_ndim:]
            new_tail = tuple(attrs["shape"])
            if int(np.prod(tail)) != int(np.prod(new_tail)):
                raise ShapeMismatchError(f"{node.name}: cannot reshape {tail} into {new_tail}")
            return lead + new_tail
        if kind is OpKind.TRANSPOSE:
            axes = tail_axes(len(shapes[0]), attrs["perm"])
            return tuple(shapes[0][a] for a in axes)
        if kind is OpKind.DOT_PRODUCT:
            relax._check_dot(shapes[0], shapes[1])
            return shapes[0][:-1] + (shapes[1][-2],)
        raise UnknownOpError(f"No shape rule for {kind}")

    def _param(self, name: str) -> np.ndarray:
        if name not in self.params:
            raise KeyError(f"Unknown parameter = {name}")
        return self.params[name]

    def _check_bias(self, node: Node, bias: tp.Optional[str], size: int):
        if bias is not None and self._param(bias).shape != (size,):
            raise ShapeMismatchError(f"{node.name}: bias {self._param(bias).shape} != ({size},)")


def categorize(node: Node) -> OpCategory:
    """
    Fusion category of a node.

    Args:
        node: Graph node.

    Returns:
        ``OpCategory``.
    """
    kind = node.kind if isinstance(node, Node) else relax._parse_kind(node)
    return kind.category


# ---------------------------------------------------------------- fusion passes


def fuse_weight_pairing(g: VerGraph) -> VerGraph:
    """
    Drop ``split_weight`` nodes whose consumers are all ``bound_matmul``: those consumers
    read W once and split it on the fly. Numeric outputs are unchanged.

    Args:
        g: Graph.

    Returns:
        Rewritten copy with singleton fusion groups.
    """
    out = g.copy()
    fused = 0
    for name, node in list(out.nodes.items()):
        if node.kind is not OpKind.SPLIT_WEIGHT:
            continue
        consumers = out.consumers(name)
        if not consumers or any(out.nodes[c].kind is not OpKind.BOUND_MATMUL for c in consumers):
            continue
        for c in consumers:
            consumer = out.nodes[c]
            consumer.inputs = [src for src in consumer.inputs if src != name]
            consumer.attrs["paired"] = True
            _canonicalize(consumer)
        del out.nodes[name]
        fused += 1
    out.reset_groups()
    log.debug("Weight pairing fusion", fused=fused, nodes=len(out.nodes))
    return out


def fuse_double_bound(g: VerGraph) -> VerGraph:
    """
    Replace a lower/upper ``bound_matmul`` pair over the same input and weight, merged by
    ``merge_bounds``, with one node computing both sides. Input bounds are read once.

    Args:
        g: Graph.

    Returns:
        Rewritten copy with singleton fusion groups.
    """
    out = g.copy()
    fused = 0
    for name, node in list(out.nodes.items()):
        if node.kind is not OpKind.MERGE_BOUNDS or len(node.inputs) != 2:
            continue
        lower, upper = (out.nodes[src] for src in node.inputs)
        pair = (
            lower.kind is OpKind.BOUND_MATMUL
            and upper.kind is OpKind.BOUND_MATMUL
            and lower.attrs.get("side") == "lower"
            and upper.attrs.get("side") == "upper"
            and lower.inputs == upper.inputs
            and lower.attrs.get("weight") == upper.attrs.get("weight")
            and lower.attrs.get("paired") == upper.attrs.get("paired")
            and out.consumers(lower.name) == [name]
            and out.consumers(upper.name) == [name]
        )
        if not pair:
            continue
        merged = Node(
            name,
            OpKind.BOUND_MATMUL,
            lower.inputs,
            {"weight": lower.attrs["weight"], "side": "both", "paired": lower.attrs.get("paired", False), "bias": node.attrs.get("bias")},
            node.shape,
        )
        _canonicalize(merged)
        out.nodes[name] = merged
        del out.nodes[lower.name]
        del out.nodes[upper.name]
        fused += 1
    out.reset_groups()
    log.debug("Double bound fusion", fused=fused, nodes=len(out.nodes))
    return out


def can_fuse(producer: Node, consumer: Node) -> bool:
    """
    Cross-layer legality of fusing ``consumer`` after ``producer``.
    """
    if producer.kind in UNFUSED_KINDS or consumer.kind in UNFUSED_KINDS:
        return False
    return (producer.category, consumer.category) in FUSIBLE


def fuse_cross_layer(g: VerGraph) -> VerGraph:
    """
    Greedy grouping in topological order. A group grows along single-consumer edges while
    each (producer, consumer) pair is legal: dense + strict-elementwise, input-reduction-compute
    + strict-elementwise and strict-elementwise chains.

    Args:
        g: Graph.

    Returns:
        Copy with new fusion groups.
    """
    out = g.copy()
    grouped, groups = set(), []
    for name in out.topological_order():
        if name in grouped:
            continue
        group, current = [name], name
        grouped.add(name)
        while True:
            consumers = out.consumers(current)
            if len(consumers) != 1 or consumers[0] in grouped:
                break
            nxt = consumers[0]
            if not can_fuse(out.nodes[current], out.nodes[nxt]):
                break
            group.append(nxt)
            grouped.add(nxt)
            current = nxt
        groups.append(group)
    out.fusion_groups = groups
    log.debug("Cross layer fusion", nodes=len(out.nodes), groups=len(groups))
    return out


def fuse_all(g: VerGraph) -> VerGraph:
    """
    Weight pairing, double bound and cross-layer fusion, in this order.
    """
    fused = fuse_cross_layer(fuse_double_bound(fuse_weight_pairing(g)))
    log.info("Fused graph", nodes_before=len(g.nodes), nodes_after=len(fused.nodes), groups=len(fused.fusion_groups))
    return fused


def _canonicalize(node: Node):
    if node.kind is OpKind.BOUND_MATMUL and node.attrs.get("side") == "both" and node.attrs.get("paired"):
        node.kind = OpKind.AFFINE
        node.attrs = {"weight": node.attrs["weight"], "bias": node.attrs.get("bias")}


# ---------------------------------------------------------------- evaluation


def evaluate(g: VerGraph, inputs: dict, spec: PerturbationSpec, keep_all: bool = False):
    """
    Propagate bounds through the graph group by group.

    Args:
        g: Graph.
        inputs: Mapping input node name -> tensor or ``LinearBounds``.
        spec: Perturbation ball.
        keep_all: Return the bounds of every node instead of the output only.

    Returns:
        Output ``LinearBounds`` or a dict of all node values.
    """
    values = {}
    for group in g.group_order():
        for name in group:
            node = g.nodes[name]
            operands = [values[src] for src in node.inputs]
            values[name] = _propagate_node(g, node, operands, inputs, spec)
    return values if keep_all else values[g.output]


def run_forward(g: VerGraph, inputs: dict) -> np.ndarray:
    """
    Exact forward pass through the graph.

    Args:
        g: Graph.
        inputs: Mapping input node name -> tensor.

    Returns:
        Output tensor.
    """
    values = {}
    for name in g.topological_order():
        node = g.nodes[name]
        if node.kind is OpKind.INPUT:
            x = np.asarray(inputs[name], dtype=float)
            if x.shape != node.shape:
                raise ShapeMismatchError(f"{name}: input {x.shape} != {node.shape}")
            values[name] = x
            continue
        operands = [values[src] for src in node.inputs]
        values[name] = relax.forward(node.kind, *operands, **_resolved_attrs(g, node))
    return values[g.output]


def _resolved_attrs(g: VerGraph, node: Node) -> dict:
    attrs = dict(node.attrs)
    for key in ("weight", "bias"):
        if key in attrs:
            attrs[key] = None if attrs[key] is None else g.params[attrs[key]]
    return attrs


def _propagate_node(g: VerGraph, node: Node, operands: list, inputs: dict, spec: PerturbationSpec):
    kind, attrs = node.kind, node.attrs

    if kind is OpKind.INPUT:
        value = inputs[node.name]
        bounds = value if isinstance(value, LinearBounds) else input_bounds(value, spec)
        if bounds.neuron_shape != node.shape:
            raise ShapeMismatchError(f"{node.name}: input {bounds.neuron_shape} != {node.shape}")
        return bounds

    resolved = _resolved_attrs(g, node)
    if kind is OpKind.AFFINE:
        return relax.propagate_affine(operands[0], resolved["weight"], resolved.get("bias"))
    if kind is OpKind.SPLIT_WEIGHT:
        return relax.split_weight(resolved["weight"])
    if kind is OpKind.BOUND_MATMUL:
        x = operands[0]
        w_pos, w_neg = relax.split_weight(resolved["weight"]) if attrs.get("paired") else operands[1]
        side = attrs["side"]
        if side == "both":
            lower = relax.propagate_affine_side(x, w_pos, w_neg, "lower")
            upper = relax.propagate_affine_side(x, w_pos, w_neg, "upper")
            return relax.merge_sides(lower, upper, resolved.get("bias"))
        return relax.propagate_affine_side(x, w_pos, w_neg, side)
    if kind is OpKind.MERGE_BOUNDS:
        return relax.merge_sides(operands[0], operands[1], resolved.get("bias"))
    if kind.is_activation:
        return relax.propagate_activation(operands[0], kind, spec, **attrs)
    if kind is OpKind.SOFTMAX:
        return relax.propagate_softmax(operands[0], attrs.get("axis", -1), spec)
    if kind is OpKind.MUL:
        return relax.propagate_mul(operands[0], operands[1], spec)
    if kind is OpKind.REDUCE_SUM:
        return relax.propagate_reduce_sum(operands[0], attrs.get("axis", -1), attrs.get("keepdims", False))
    if kind is OpKind.ADD:
        return relax.propagate_add(operands[0], operands[1])
    if kind is OpKind.SCALE:
        return relax.propagate_scale(operands[0], attrs["factor"])
    if kind is OpKind.RESHAPE:
        return relax.propagate_reshape(operands[0], attrs["tail_ndim"], attrs["shape"])
    if kind is OpKind.TRANSPOSE:
        return relax.propagate_transpose(operands[0], attrs["perm"])
    if kind is OpKind.DOT_PRODUCT:
        return relax.propagate_dot_product(operands[0], operands[1], spec)
    if kind is OpKind.MEAN_POOL:
        return relax.propagate_mean(operands[0], attrs.get("axis", -2))
    raise UnknownOpError(f"No propagation rule for {kind}")


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value
