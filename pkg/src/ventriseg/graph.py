"""Layer graphs: construction, execution, backpropagation and static costing.

A :class:`ModelGraph` is an ordered list of named nodes. Nodes are added in
topological order (each node may only consume nodes added before it), so
the insertion order doubles as the execution schedule. Besides data edges,
a node may carry a *switch* edge: a max-unpool node reads the argmax
indices recorded by an earlier max-pool node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, MaxPool, MaxUnpool

INPUT = "input"


@dataclass
class Node:
    name: str
    layer: Layer | None
    inputs: tuple[str, ...]
    stage: str = ""
    switch: str | None = None


@dataclass
class ModelGraph:
    """Validated DAG of layers with a single input and a single output."""

    in_channels: int = 1
    nodes: dict[str, Node] = field(default_factory=dict)
    output: str | None = None
    config: object = None

    def __post_init__(self):
        if not self.nodes:
            self.nodes[INPUT] = Node(INPUT, None, ())

    # -- construction -------------------------------------------------------

    def add(self, name, layer, *inputs, stage=""):
        if name in self.nodes:
            raise ValueError(f"duplicate node name {name!r}")
        if not inputs:
            raise ValueError(f"node {name!r} has no inputs")
        for src in inputs:
            if src not in self.nodes:
                raise ValueError(f"node {name!r} consumes unknown node {src!r}")
        switch = None
        if isinstance(layer, MaxUnpool):
            switch = self._node_of_layer(layer.pool)
        self.nodes[name] = Node(name, layer, tuple(inputs), stage, switch)
        self.output = name
        return name

    def _node_of_layer(self, layer):
        for node in self.nodes.values():
            if node.layer is layer:
                return node.name
        raise ValueError("unpool refers to a pool layer that is not in the graph")

    @property
    def edges(self):
        """Data edges ``(src, dst)`` in schedule order, then switch edges."""
        data = [(s, n.name) for n in self.nodes.values() for s in n.inputs]
        switches = [(n.switch, n.name) for n in self.nodes.values() if n.switch]
        return data + switches

    def layers(self):
        return [(n.name, n.layer) for n in self.nodes.values() if n.layer is not None]

    def validate(self, input_shape):
        """Walk shapes symbolically; return the per-node output shape map."""
        shapes = self.shapes(input_shape)
        consumed = {s for _, n in self.nodes.items() for s in n.inputs}
        dangling = [k for k in self.nodes if k not in consumed and k != self.output]
        if dangling:
            raise ValueError(f"nodes never consumed: {dangling}")
        return shapes

    def shapes(self, input_shape):
        shapes = {INPUT: tuple(input_shape)}
        for node in list(self.nodes.values())[1:]:
            ins = [shapes[s] for s in node.inputs]
            if node.switch is not None:
                B, C, _, _ = ins[0]
                pool_in = shapes[self.nodes[node.switch].inputs[0]]
                pooled = shapes[node.switch]
                if ins[0][2:] != pooled[2:] or C != pooled[1]:
                    raise ValueError(f"unpool {node.name}: input {ins[0]} does not match switches {pooled}")
                shapes[node.name] = (B, C, pool_in[2], pool_in[3])
            else:
                shapes[node.name] = tuple(node.layer.output_shape(*ins))
        return shapes

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.params.items()}

    def gradients(self):
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.grads.items()}

    def buffers(self):
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.buffers.items()}

    def state(self):
        """Copy of every parameter and buffer, keyed by qualified name."""
        out = {k: v.copy() for k, v in self.parameters().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state):
        for name, layer in self.layers():
            for store in (layer.params, layer.buffers):
                for k in store:
                    key = f"{name}.{k}"
                    if key not in state:
                        raise KeyError(f"state is missing {key}")
                    if state[key].shape != store[k].shape:
                        raise ValueError(f"{key}: shape {state[key].shape} != {store[k].shape}")
                    store[k] = np.array(state[key], dtype=store[k].dtype)

    def set_param(self, key, value):
        name, k = key.rsplit(".", 1)
        self.nodes[name].layer.params[k] = value

    @property
    def dtype(self):
        """Floating dtype of the parameters (float64 unless converted)."""
        for p in self.parameters().values():
            return p.dtype
        return np.dtype(np.float64)

    def astype(self, dtype):
        for _, layer in self.layers():
            for store in (layer.params, layer.grads, layer.buffers):
                for k in store:
                    store[k] = store[k].astype(dtype)
        return self

    # -- execution ----------------------------------------------------------

    def forward(self, x, train=False, rng=None):
        """Run the graph; training mode needs ``rng`` when dropout is active."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"graph expects (B, {self.in_channels}, H, W) input, got {x.shape}")
        acts = {INPUT: np.asarray(x, dtype=self.dtype)}
        last_use = self._last_use()
        for i, node in enumerate(list(self.nodes.values())[1:], start=1):
            layer_rng = rng.child(node.name) if rng is not None else None
            acts[node.name] = node.layer.forward(*(acts[s] for s in node.inputs),
                                                 train=train, rng=layer_rng)
            for s in node.inputs:
                if last_use[s] == i and s != self.output:
                    del acts[s]
        return acts[self.output]

    def backward(self, grad_out, param_grads=True):
        """Backpropagate ``grad_out`` (d loss / d output); returns d loss / d input."""
        grads = {self.output: grad_out}
        for node in reversed(list(self.nodes.values())[1:]):
            g = grads.pop(node.name, None)
            if g is None:
                continue
            in_grads = node.layer.backward(g, param_grads=param_grads)
            for src, gi in zip(node.inputs, in_grads):
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        return grads[INPUT]

    def _last_use(self):
        order = {name: i for i, name in enumerate(self.nodes)}
        last = {name: order[name] for name in self.nodes}
        for node in self.nodes.values():
            for s in node.inputs:
                last[s] = max(last[s], order[node.name])
        return last

    def clear_cache(self):
        for _, layer in self.layers():
            layer.cache = None
            if isinstance(layer, MaxPool):
                layer.indices = None

    def summary(self, input_shape):
        shapes = self.shapes(input_shape)
        rows = []
        for node in list(self.nodes.values())[1:]:
            rows.append(f"{node.name:28s} {node.layer.describe():36s} {str(shapes[node.name]):22s}"
                        f" {node.layer.num_params():>9d}")
        return "\n".join(rows)


# --------------------------------------------------------------------------
# static cost model


def count_parameters(graph: ModelGraph) -> int:
    """Exact number of learned scalars."""
    return int(sum(p.size for p in graph.parameters().values()))


def count_flops(graph: ModelGraph, input_shape, stage=None) -> int:
    """Forward FLOPs (2 per multiply-accumulate) for ``input_shape``.

    Convolutions and batch-norm affine maps are counted; pooling, activations
    and data movement are free. ``stage`` restricts the sum to nodes whose
    stage tag starts with that prefix (``"encoder"``, ``"decoder"``).
    """
    shapes = graph.shapes(input_shape)
    total = 0
    for node in list(graph.nodes.values())[1:]:
        if stage is not None and not node.stage.startswith(stage):
            continue
        if node.switch is not None:
            continue
        total += node.layer.flops(*(shapes[s] for s in node.inputs))
    return int(total)


def peak_activation_bytes(graph: ModelGraph, input_shape, itemsize=8) -> int:
    """Peak bytes of simultaneously live activations during one forward pass.

    A tensor is live from the step that produces it through the last step
    that reads it; pool switch indices (``itemsize`` bytes each) stay live
    until their unpool consumes them. At each step the live set includes the
    step's inputs and its output; the peak over all steps is returned.
    """
    shapes = graph.shapes(input_shape)
    names = list(graph.nodes)
    order = {n: i for i, n in enumerate(names)}
    size = {n: int(np.prod(shapes[n])) * itemsize for n in names}
    last = graph._last_use()
    switch_end = {}
    for node in graph.nodes.values():
        if node.switch is not None:
            switch_end[node.switch] = max(switch_end.get(node.switch, 0), order[node.name])
    peak = 0
    for i, name in enumerate(names):
        live = sum(size[n] for n in names[:i + 1] if last[n] >= i or n == name)
        live += sum(size[p] for p, end in switch_end.items() if order[p] <= i <= end)
        peak = max(peak, live)
    return int(peak)
