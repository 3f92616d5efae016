"""Deterministic integer computation DAGs used as desk-scale stand-ins for AI models.

A model is a small directed acyclic graph of layer functions over vectors of
integers modulo a fixed public prime.  Arithmetic is exact, so two honest
evaluations agree bit for bit on every platform; that is the property the
layer-by-layer dispute game in :mod:`veriserve.bisection` relies on.

Node indices double as a topological order: every edge goes from a lower to a
higher index, node 0 is the unique input and node n-1 the unique output.  A
node's parents are always fed to its layer function in ascending index order.
"""
from __future__ import annotations

import json
import random
import weakref
from dataclasses import dataclass
from typing import Callable, Sequence

from .crypto import digest, encode_u32

MODULUS = 2_147_483_647  # 2**31 - 1, prime; shared by every model in the system

LAYER_KINDS = ("affine-mod", "elementwise-mix", "concat", "split-take", "reduce-sum")

# A tensor is a non-empty tuple of ints in [0, MODULUS).
Tensor = tuple


class DagError(Exception):
    """Raised for malformed models or invalid layer evaluations."""

    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


def tensor(values: Sequence[int]) -> Tensor:
    """Build a tensor, reducing every component into [0, MODULUS)."""
    if len(values) == 0:
        raise DagError("empty-tensor", "tensors must have at least one element")
    return tuple(int(v) % MODULUS for v in values)


def tensor_bytes(t: Tensor) -> bytes:
    """Canonical serialization: u32 length prefix, then each value as u32 LE."""
    parts = [encode_u32(len(t))]
    for v in t:
        parts.append(encode_u32(v))
    return b"".join(parts)


def commit(t: Tensor) -> bytes:
    """Binding commitment to a tensor: SHA-256 over its canonical bytes."""
    return digest(tensor_bytes(t))


@dataclass(frozen=True)
class LayerSpec:
    """One layer function.  ``arity`` is the number of inputs the kind expects.

    Parameter fields are kind-specific; unused ones stay at their defaults.
    """

    kind: str
    arity: int
    weights: tuple | None = None  # affine-mod: tuple of row tuples
    bias: tuple | None = None  # affine-mod
    coeffs: tuple | None = None  # elementwise-mix: one coefficient per parent
    offset: int = 0  # elementwise-mix
    start: int = 0  # split-take
    length: int = 0  # split-take


def affine_layer(weights: Sequence[Sequence[int]], bias: Sequence[int]) -> LayerSpec:
    w = tuple(tuple(int(x) % MODULUS for x in row) for row in weights)
    b = tuple(int(x) % MODULUS for x in bias)
    if len(w) == 0 or len(w) != len(b):
        raise DagError("bad-layer-params", "affine-mod needs matching weight rows and bias")
    width = len(w[0])
    if width == 0 or any(len(row) != width for row in w):
        raise DagError("bad-layer-params", "affine-mod weight rows must be equal, non-empty")
    return LayerSpec(kind="affine-mod", arity=1, weights=w, bias=b)


def mix_layer(coeffs: Sequence[int], offset: int = 0) -> LayerSpec:
    c = tuple(int(x) % MODULUS for x in coeffs)
    if len(c) == 0:
        raise DagError("bad-layer-params", "elementwise-mix needs at least one coefficient")
    return LayerSpec(kind="elementwise-mix", arity=len(c), coeffs=c, offset=int(offset) % MODULUS)


def concat_layer(arity: int) -> LayerSpec:
    if arity < 1:
        raise DagError("bad-layer-params", "concat arity must be >= 1")
    return LayerSpec(kind="concat", arity=arity)


def split_layer(start: int, length: int) -> LayerSpec:
    if start < 0 or length < 1:
        raise DagError("bad-layer-params", "split-take needs start >= 0 and length >= 1")
    return LayerSpec(kind="split-take", arity=1, start=start, length=length)


def reduce_layer() -> LayerSpec:
    return LayerSpec(kind="reduce-sum", arity=1)


def identity_affine(dim: int) -> LayerSpec:
    rows = tuple(tuple(1 if i == j else 0 for j in range(dim)) for i in range(dim))
    return affine_layer(rows, (0,) * dim)


def eval_layer(spec: LayerSpec, inputs: Sequence[Tensor]) -> Tensor:
    """Evaluate one layer on its input tensors, in parent order.

    Pure and exact; the dispute referee calls this at most once per dispute.
    """
    if len(inputs) != spec.arity:
        raise DagError("arity-mismatch", f"{spec.kind} expects {spec.arity} inputs, got {len(inputs)}")
    if spec.kind == "affine-mod":
        (x,) = inputs
        width = len(spec.weights[0])
        if len(x) != width:
            raise DagError("dimension-mismatch", f"affine-mod expects dim {width}, got {len(x)}")
        return tuple(
            (sum(w * v for w, v in zip(row, x)) + b) % MODULUS
            for row, b in zip(spec.weights, spec.bias)
        )
    if spec.kind == "elementwise-mix":
        width = len(inputs[0])
        if any(len(t) != width for t in inputs):
            raise DagError("dimension-mismatch", "elementwise-mix inputs must share a dimension")
        return tuple(
            (sum(c * t[i] for c, t in zip(spec.coeffs, inputs)) + spec.offset) % MODULUS
            for i in range(width)
        )
    if spec.kind == "concat":
        out = []
        for t in inputs:
            out.extend(t)
        return tuple(out)
    if spec.kind == "split-take":
        (x,) = inputs
        if spec.start + spec.length > len(x):
            raise DagError(
                "dimension-mismatch",
                f"split-take [{spec.start}:{spec.start + spec.length}] out of range for dim {len(x)}",
            )
        return tuple(x[spec.start : spec.start + spec.length])
    if spec.kind == "reduce-sum":
        (x,) = inputs
        return (sum(x) % MODULUS,)
    raise DagError("unknown-kind", spec.kind)


@dataclass(frozen=True)
class LayerNode:
    index: int
    spec: LayerSpec
    label: str | None = None


@dataclass(eq=False)
class DagModel:
    """A validated model: nodes in index order plus a forward edge list."""

    model_id: str
    nodes: tuple
    edges: tuple
    input_node: int = 0
    output_node: int = -1

    def __post_init__(self):
        if self.output_node == -1:
            self.output_node = len(self.nodes) - 1

    @property
    def n(self) -> int:
        return len(self.nodes)

    def spec_of(self, node: int) -> LayerSpec:
        return self.nodes[node].spec


class DagIndex:
    """Precomputed adjacency and ancestor/descendant closures for one model.

    Closures are stored as int bitmasks (bit i = node i), which keeps the
    dispute game's per-round scoring cheap even at a thousand nodes.
    """

    def __init__(self, model: DagModel):
        n = model.n
        parents = [[] for _ in range(n)]
        children = [[] for _ in range(n)]
        for u, v in model.edges:
            parents[v].append(u)
            children[u].append(v)
        self.parents = tuple(tuple(sorted(p)) for p in parents)
        self.children = tuple(tuple(sorted(c)) for c in children)
        anc = [0] * n
        for v in range(n):
            m = 0
            for p in self.parents[v]:
                m |= anc[p] | (1 << p)
            anc[v] = m
        self.ancestor_masks = anc
        desc = [0] * n
        for v in range(n - 1, -1, -1):
            m = 0
            for c in children[v]:
                m |= desc[c] | (1 << c)
            desc[v] = m
        self.descendant_masks = desc


_INDEX_CACHE: "weakref.WeakKeyDictionary[DagModel, DagIndex]" = weakref.WeakKeyDictionary()


def dag_index(model: DagModel) -> DagIndex:
    idx = _INDEX_CACHE.get(model)
    if idx is None:
        idx = DagIndex(model)
        _INDEX_CACHE[model] = idx
    return idx


def mask_to_set(mask: int) -> set:
    out = set()
    i = 0
    while mask:
        if mask & 1:
            out.add(i)
        mask >>= 1
        i += 1
    return out


def validate_dag(model: DagModel) -> None:
    """Check structural invariants; raises DagError naming the first violation."""
    n = model.n
    if n == 0:
        raise DagError("malformed-model", "model has no nodes")
    for i, node in enumerate(model.nodes):
        if node.index != i:
            raise DagError("malformed-model", f"node at position {i} has index {node.index}")
        if node.spec.kind not in LAYER_KINDS:
            raise DagError("unknown-kind", node.spec.kind)
    seen = set()
    for u, v in model.edges:
        if not (0 <= u < n and 0 <= v < n):
            raise DagError("malformed-model", f"edge ({u}, {v}) references an unknown node")
        if u >= v:
            # index order must be a topological order; a backward or self edge
            # is exactly what a cycle would have to contain
            raise DagError("cycle-detected", f"edge ({u}, {v}) does not go forward in index order")
        if (u, v) in seen:
            raise DagError("malformed-model", f"duplicate edge ({u}, {v})")
        seen.add((u, v))
    idx = DagIndex(model)
    sources = [v for v in range(n) if not idx.parents[v]]
    if len(sources) > 1:
        raise DagError("multiple-sources", f"in-degree-0 nodes: {sources}")
    if sources != [model.input_node]:
        raise DagError("malformed-model", f"input_node {model.input_node} is not the unique source")
    sinks = [v for v in range(n) if not idx.children[v]]
    if len(sinks) > 1:
        raise DagError("multiple-sinks", f"out-degree-0 nodes: {sinks}")
    if sinks != [model.output_node]:
        raise DagError("malformed-model", f"output_node {model.output_node} is not the unique sink")
    for v in range(n):
        spec = model.nodes[v].spec
        indeg = len(idx.parents[v])
        if v == model.input_node:
            # the input node is fed the request tensor directly, so it has no
            # graph parents but must still be a unary layer
            if spec.arity != 1:
                raise DagError("arity-mismatch", f"input node arity {spec.arity}, expected 1")
        elif indeg != spec.arity:
            raise DagError("arity-mismatch", f"node {v} has in-degree {indeg}, spec arity {spec.arity}")
    reach_mask = idx.descendant_masks[model.input_node] | (1 << model.input_node)
    if reach_mask.bit_count() != n:
        missing = sorted(set(range(n)) - mask_to_set(reach_mask))
        raise DagError("unreachable-node", f"not reachable from input: {missing}")
    co_mask = idx.ancestor_masks[model.output_node] | (1 << model.output_node)
    if co_mask.bit_count() != n:
        missing = sorted(set(range(n)) - mask_to_set(co_mask))
        raise DagError("unreachable-node", f"output not reachable from: {missing}")


def ancestors(model: DagModel, node: int) -> set:
    """All strict ancestors of ``node`` (excluding the node itself)."""
    if not 0 <= node < model.n:
        raise DagError("unknown-node", str(node))
    return mask_to_set(dag_index(model).ancestor_masks[node])


def descendants(model: DagModel, node: int) -> set:
    if not 0 <= node < model.n:
        raise DagError("unknown-node", str(node))
    return mask_to_set(dag_index(model).descendant_masks[node])


@dataclass(frozen=True)
class ExecutionTrace:
    """Per-node outputs of one model execution, indexed by node."""

    values: tuple
    output_index: int

    @property
    def final_output(self) -> Tensor:
        return self.values[self.output_index]


def execute(model: DagModel, input_tensor: Tensor, index: DagIndex | None = None) -> ExecutionTrace:
    """Evaluate the whole model on ``input_tensor``; pre: validate_dag passed."""
    idx = index if index is not None else dag_index(model)
    values = [None] * model.n
    for v in range(model.n):
        if v == model.input_node:
            ins = [input_tensor]
        else:
            ins = [values[p] for p in idx.parents[v]]
        values[v] = eval_layer(model.nodes[v].spec, ins)
    return ExecutionTrace(values=tuple(values), output_index=model.output_node)


def make_faulty_evaluator(
    model: DagModel, fault_node: int, perturbation: Tensor, index: DagIndex | None = None
) -> Callable[[Tensor], ExecutionTrace]:
    """Evaluator that offsets ``fault_node``'s output by ``perturbation`` mod P.

    Everything downstream is computed honestly from the corrupted value, which
    is exactly the behavior of a server running a subtly wrong layer.
    """
    if not 0 <= fault_node < model.n:
        raise DagError("unknown-node", str(fault_node))
    if all(v % MODULUS == 0 for v in perturbation):
        raise DagError("zero-perturbation", "perturbation must be nonzero")
    idx = index if index is not None else dag_index(model)

    def run(input_tensor: Tensor) -> ExecutionTrace:
        values = [None] * model.n
        for v in range(model.n):
            if v == model.input_node:
                ins = [input_tensor]
            else:
                ins = [values[p] for p in idx.parents[v]]
            out = eval_layer(model.nodes[v].spec, ins)
            if v == fault_node:
                if len(perturbation) != len(out):
                    raise DagError(
                        "dimension-mismatch",
                        f"perturbation dim {len(perturbation)} vs node output dim {len(out)}",
                    )
                out = tuple((a + d) % MODULUS for a, d in zip(out, perturbation))
            values[v] = out
        return ExecutionTrace(values=tuple(values), output_index=model.output_node)

    return run


# --- model description files -------------------------------------------------

def _spec_to_dict(spec: LayerSpec) -> dict:
    d = {"kind": spec.kind, "arity": spec.arity}
    if spec.kind == "affine-mod":
        d["weights"] = [list(row) for row in spec.weights]
        d["bias"] = list(spec.bias)
    elif spec.kind == "elementwise-mix":
        d["coeffs"] = list(spec.coeffs)
        d["offset"] = spec.offset
    elif spec.kind == "split-take":
        d["start"] = spec.start
        d["length"] = spec.length
    return d


def _spec_from_dict(d: dict) -> LayerSpec:
    kind = d.get("kind")
    if kind == "affine-mod":
        return affine_layer(d["weights"], d["bias"])
    if kind == "elementwise-mix":
        return mix_layer(d["coeffs"], d.get("offset", 0))
    if kind == "concat":
        return concat_layer(int(d["arity"]))
    if kind == "split-take":
        return split_layer(int(d["start"]), int(d["length"]))
    if kind == "reduce-sum":
        return reduce_layer()
    raise DagError("unknown-kind", str(kind))


def model_to_dict(model: DagModel) -> dict:
    return {
        "model_id": model.model_id,
        "input_node": model.input_node,
        "output_node": model.output_node,
        "nodes": [
            {"index": n.index, "label": n.label, **_spec_to_dict(n.spec)} for n in model.nodes
        ],
        "edges": [[u, v] for u, v in model.edges],
    }


def model_from_dict(data: dict) -> DagModel:
    try:
        nodes = tuple(
            LayerNode(index=int(nd["index"]), spec=_spec_from_dict(nd), label=nd.get("label"))
            for nd in data["nodes"]
        )
        edges = tuple((int(u), int(v)) for u, v in data["edges"])
        model = DagModel(
            model_id=str(data["model_id"]),
            nodes=nodes,
            edges=edges,
            input_node=int(data.get("input_node", 0)),
            output_node=int(data.get("output_node", len(nodes) - 1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DagError("malformed-model", f"bad model description: {exc}") from exc
    validate_dag(model)
    return model


def save_model(model: DagModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path: str) -> DagModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def model_digest(model: DagModel) -> bytes:
    """Digest of the canonical model description (same hash as tensor commits)."""
    canonical = json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))
    return digest(canonical.encode("utf-8"))


# --- builders ----------------------------------------------------------------

def _invertible_diag_affine(rng: random.Random, dim: int) -> LayerSpec:
    # diagonal with nonzero entries: injective mod a prime, so single faults
    # can never cancel on a chain built from these
    rows = []
    for i in range(dim):
        row = [0] * dim
        row[i] = rng.randrange(1, MODULUS)
        rows.append(row)
    bias = [rng.randrange(MODULUS) for _ in range(dim)]
    return affine_layer(rows, bias)


def chain_model(model_id: str, length: int, dim: int = 1, seed: int = 0) -> DagModel:
    """Sequential chain of ``length`` injective affine layers."""
    if length < 1:
        raise DagError("malformed-model", "chain length must be >= 1")
    rng = random.Random(seed)
    nodes = tuple(
        LayerNode(index=i, spec=_invertible_diag_affine(rng, dim)) for i in range(length)
    )
    edges = tuple((i, i + 1) for i in range(length - 1))
    model = DagModel(model_id=model_id, nodes=nodes, edges=edges)
    validate_dag(model)
    return model


def identity_chain(model_id: str, length: int, dim: int) -> DagModel:
    nodes = tuple(LayerNode(index=i, spec=identity_affine(dim)) for i in range(length))
    edges = tuple((i, i + 1) for i in range(length - 1))
    model = DagModel(model_id=model_id, nodes=nodes, edges=edges)
    validate_dag(model)
    return model


def inception_model(
    model_id: str, dim: int = 4, branch_depths: Sequence[int] = (1, 1, 2, 1), seed: int = 0
) -> DagModel:
    """Inception-style block: one source, parallel branches, one concat sink.

    The default depths give the 7-node shape used throughout the tests.
    """
    rng = random.Random(seed)
    nodes = [LayerNode(index=0, spec=_invertible_diag_affine(rng, dim), label="in")]
    edges = []
    branch_ends = []
    next_index = 1
    for b, depth in enumerate(branch_depths):
        prev = 0
        for d in range(depth):
            spec = (
                _invertible_diag_affine(rng, dim)
                if d % 2 == 0
                else mix_layer([rng.randrange(1, 7)], offset=rng.randrange(10))
            )
            nodes.append(LayerNode(index=next_index, spec=spec, label=f"br{b + 1}.{d + 1}"))
            edges.append((prev, next_index))
            prev = next_index
            next_index += 1
        branch_ends.append(prev)
    nodes.append(LayerNode(index=next_index, spec=concat_layer(len(branch_ends)), label="join"))
    for end in branch_ends:
        edges.append((end, next_index))
    model = DagModel(model_id=model_id, nodes=tuple(nodes), edges=tuple(edges))
    validate_dag(model)
    return model


def random_dag_model(
    model_id: str, n: int, dim: int = 4, seed: int = 0, max_arity: int = 3
) -> DagModel:
    """Random valid DAG with ``n`` nodes, single source and single sink.

    Interior mix layers may carry zero coefficients, so faults can cancel on
    some paths; the dispute game has to cope with that, not avoid it.
    """
    if n < 1:
        raise DagError("malformed-model", "n must be >= 1")
    rng = random.Random(seed)
    nodes = [LayerNode(index=0, spec=_invertible_diag_affine(rng, dim))]
    edges = []
    for i in range(1, n - 1):
        arity = rng.randint(1, min(max_arity, i))
        parents = sorted(rng.sample(range(i), arity))
        if arity == 1 and rng.random() < 0.6:
            spec = _invertible_diag_affine(rng, dim)
        else:
            spec = mix_layer([rng.randrange(0, 4) for _ in range(arity)], offset=rng.randrange(5))
        nodes.append(LayerNode(index=i, spec=spec))
        for p in parents:
            edges.append((p, i))
    if n > 1:
        has_child = {u for u, _ in edges}
        dangling = sorted(set(range(n - 1)) - has_child)
        spec = mix_layer([rng.randrange(1, 6) for _ in dangling], offset=rng.randrange(5))
        nodes.append(LayerNode(index=n - 1, spec=spec))
        for p in dangling:
            edges.append((p, n - 1))
    model = DagModel(model_id=model_id, nodes=tuple(nodes), edges=tuple(edges))
    validate_dag(model)
    return model


def random_tensor(rng: random.Random, dim: int) -> Tensor:
    return tuple(rng.randrange(MODULUS) for _ in range(dim))
