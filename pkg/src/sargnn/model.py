"""Grid GraphSAGE classifier with max pooling and channel/spatial attention.

Each layer runs mean aggregation over the closed 8-neighbourhood, the
two-branch update ``ReLU((z W_nb + b_nb) * (h W_self + b_self))``, an s x s
grid max-pool, then channel attention and spatial attention. The final grid
is flattened (vertex-major, channels fastest) into an MLP head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import IntegrityError, InvalidInputError, ShapeError
from .graph import GridGraph, coarsen_grid, pool_windows

UPDATE_RULES = ("product", "sum")


def _shape(x) -> tuple[int, ...]:
    return tuple(np.shape(x.data if isinstance(x, Tensor) else x))


@dataclass
class SageLayerParams:
    W_neighbour: Any
    b_neighbour: Any
    W_self: Any
    b_self: Any

    def __post_init__(self):
        wn, ws = _shape(self.W_neighbour), _shape(self.W_self)
        if len(wn) != 2 or wn != ws:
            raise ShapeError(f"SAGE weight matrices must share a 2-D shape, got {wn} and {ws}")
        if _shape(self.b_neighbour) != (wn[1],) or _shape(self.b_self) != (wn[1],):
            raise ShapeError("SAGE biases must match the output width")

    @property
    def dims(self) -> tuple[int, int]:
        return _shape(self.W_self)


@dataclass
class AttentionParams:
    """Shared channel MLP (d -> d/r -> d) and the spatial (avg, max) combiner."""

    mlp_W1: Any
    mlp_b1: Any
    mlp_W2: Any
    mlp_b2: Any
    spatial_W: Any
    spatial_b: Any

    def __post_init__(self):
        d, hidden = _shape(self.mlp_W1)
        if _shape(self.mlp_W2) != (hidden, d) or _shape(self.mlp_b1) != (hidden,) or _shape(self.mlp_b2) != (d,):
            raise ShapeError("channel attention MLP shapes do not chain")
        if d % hidden:
            raise ShapeError(f"reduction ratio must divide the channel count ({d} / {hidden})")
        if _shape(self.spatial_W) != (2, 1) or _shape(self.spatial_b) != (1,):
            raise ShapeError("spatial combiner must map 2 channels to 1")

    @property
    def channels(self) -> int:
        return _shape(self.mlp_W1)[0]

    @property
    def reduction(self) -> int:
        d, hidden = _shape(self.mlp_W1)
        return d // hidden


@dataclass
class GnnLayer:
    sage: SageLayerParams
    attention: AttentionParams
    pool: int


@dataclass
class ModelParams:
    """Every learnable array of the network plus its architecture."""

    input_shape: tuple[int, int]
    in_channels: int
    layers: list[GnnLayer]
    head: list[tuple[Any, Any]]
    class_names: list[str]
    update_rule: str = "product"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.class_names = list(self.class_names)
        if self.update_rule not in UPDATE_RULES:
            raise InvalidInputError(f"update_rule must be one of {UPDATE_RULES}")
        if len(self.class_names) < 2 or len(set(self.class_names)) != len(self.class_names):
            raise InvalidInputError("need at least two distinct class names")
        width = self.in_channels
        for k, layer in enumerate(self.layers):
            d_in, d_out = layer.sage.dims
            if d_in != width:
                raise ShapeError(f"layer {k} expects {d_in} input channels, previous layer gives {width}")
            if layer.attention.channels != d_out:
                raise ShapeError(f"layer {k} attention width {layer.attention.channels} != {d_out}")
            if layer.pool < 1:
                raise InvalidInputError(f"layer {k} pool size must be >= 1")
            width = d_out
        h, w = self.grid_dims()[-1]
        fan_in = h * w * width
        for k, (W, b) in enumerate(self.head):
            shape = _shape(W)
            if len(shape) != 2 or shape[0] != fan_in or _shape(b) != (shape[1],):
                raise ShapeError(f"head layer {k} expects input width {fan_in}, got weights {shape}")
            fan_in = shape[1]
        if not self.head or fan_in != len(self.class_names):
            raise ShapeError(f"head must end in {len(self.class_names)} outputs")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def channels(self) -> list[int]:
        return [self.in_channels] + [layer.sage.dims[1] for layer in self.layers]

    @property
    def pools(self) -> list[int]:
        return [layer.pool for layer in self.layers]

    @property
    def reduction(self) -> int:
        return self.layers[0].attention.reduction if self.layers else 1

    def grid_dims(self) -> list[tuple[int, int]]:
        """Grid dims at the input and after each layer's pooling."""
        dims = [self.input_shape]
        for layer in self.layers:
            h, w = dims[-1]
            dims.append((-(-h // layer.pool), -(-w // layer.pool)))
        return dims

    def named_parameters(self) -> list[tuple[str, Any]]:
        """All parameters in declaration order (the serialization order)."""
        out = []
        for k, layer in enumerate(self.layers):
            for part in ("sage", "attention"):
                params = getattr(layer, part)
                for f in fields(params):
                    out.append((f"layers.{k}.{part}.{f.name}", getattr(params, f.name)))
        for k, (W, b) in enumerate(self.head):
            out.append((f"head.{k}.W", W))
            out.append((f"head.{k}.b", b))
        return out

    def weight_names(self) -> list[str]:
        """Names of weight matrices, the only parameters lasso and pruning touch."""
        return [name for name, value in self.named_parameters() if len(_shape(value)) == 2]

    def map_parameters(self, fn: Callable[[str, Any], Any]) -> "ModelParams":
        """New model whose parameters are ``fn(name, value)``."""
        layers = []
        for k, layer in enumerate(self.layers):
            parts = {}
            for part in ("sage", "attention"):
                params = getattr(layer, part)
                parts[part] = replace(
                    params,
                    **{f.name: fn(f"layers.{k}.{part}.{f.name}", getattr(params, f.name)) for f in fields(params)},
                )
            layers.append(GnnLayer(parts["sage"], parts["attention"], layer.pool))
        head = [(fn(f"head.{k}.W", W), fn(f"head.{k}.b", b)) for k, (W, b) in enumerate(self.head)]
        return ModelParams(self.input_shape, self.in_channels, layers, head, list(self.class_names), self.update_rule)

    def copy(self) -> "ModelParams":
        return self.map_parameters(lambda _, v: np.array(v.data if isinstance(v, Tensor) else v, copy=True))

    def with_values(self, values: dict[str, np.ndarray]) -> "ModelParams":
        """Replace the named parameters; names not in ``values`` keep their current value."""
        return self.map_parameters(lambda name, v: values.get(name, v))

    def bind(self, requires_grad: bool = True) -> tuple["ModelParams", dict[str, Tensor]]:
        """Wrap every array in a :class:`Tensor` leaf; returns the bound model and its leaves."""
        leaves: dict[str, Tensor] = {}

        def wrap(name, value):
            leaves[name] = Tensor(value, requires_grad=requires_grad, name=name)
            return leaves[name]

        return self.map_parameters(wrap), leaves


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_model(
    input_shape: tuple[int, int],
    class_names: Sequence[str],
    channels: Sequence[int] = (16, 32, 64),
    pools: Sequence[int] | int = 2,
    head_hidden: Sequence[int] = (128,),
    update_rule: str = "product",
    reduction: int = 4,
    in_channels: int = 1,
    seed: int | np.random.Generator = 0,
    dtype=np.float64,
) -> ModelParams:
    """Randomly initialised model.

    Weights are Glorot-uniform and biases zero, except that the product
    update rule starts its self-branch bias at one.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(pools, int):
        pools = [pools] * len(channels)
    if len(pools) != len(channels):
        raise InvalidInputError("need one pool size per layer")
    if reduction < 1:
        raise InvalidInputError("reduction ratio must be >= 1")
    zeros = lambda n: np.zeros(n, dtype=dtype)  # noqa: E731
    layers = []
    width = in_channels
    for d_out, s in zip(channels, pools):
        if d_out % reduction:
            raise InvalidInputError(f"reduction ratio {reduction} does not divide {d_out} channels")
        hidden = d_out // reduction
        # product rule: a unit self-branch bias keeps the layer from squaring its input scale
        self_bias = np.ones(d_out, dtype=dtype) if update_rule == "product" else zeros(d_out)
        sage = SageLayerParams(
            _glorot(rng, width, d_out, dtype), zeros(d_out), _glorot(rng, width, d_out, dtype), self_bias
        )
        att = AttentionParams(
            _glorot(rng, d_out, hidden, dtype),
            zeros(hidden),
            _glorot(rng, hidden, d_out, dtype),
            zeros(d_out),
            _glorot(rng, 2, 1, dtype),
            zeros(1),
        )
        layers.append(GnnLayer(sage, att, int(s)))
        width = d_out
    h, w = input_shape
    for s in pools:
        h, w = -(-h // s), -(-w // s)
    fan_in = h * w * width
    head = []
    for d in list(head_hidden) + [len(class_names)]:
        head.append((_glorot(rng, fan_in, d, dtype), zeros(d)))
        fan_in = d
    return ModelParams(tuple(input_shape), in_channels, layers, head, list(class_names), update_rule)


# ---------------------------------------------------------------------------
# layer operations
# ---------------------------------------------------------------------------


def sage_aggregate(graph: GridGraph, h) -> Tensor:
    """Mean of each vertex's features with those of its neighbours."""
    h = ad.as_tensor(h)
    if h.ndim != 2 or h.shape[0] != graph.num_vertices:
        raise ShapeError(f"features have {h.shape[0] if h.ndim else 0} rows, graph has {graph.num_vertices} vertices")
    return ad.propagate(graph.mean_operator, h)


def sage_update(z, h, p: SageLayerParams, rule: str = "product") -> Tensor:
    """``ReLU(nb * self)`` for the product rule, ``ReLU(nb + self)`` for the sum rule."""
    z, h = ad.as_tensor(z), ad.as_tensor(h)
    if z.shape != h.shape:
        raise ShapeError(f"aggregate {z.shape} and self features {h.shape} differ")
    nb = ad.affine(z, p.W_neighbour, p.b_neighbour)
    own = ad.affine(h, p.W_self, p.b_self)
    if rule == "product":
        return ad.relu(ad.hadamard(nb, own))
    if rule == "sum":
        return ad.relu(ad.add(nb, own))
    raise InvalidInputError(f"update_rule must be one of {UPDATE_RULES}")


def grid_max_pool(h, grid: GridGraph, s: int) -> tuple[Tensor, np.ndarray, GridGraph]:
    """Per-channel max over s x s windows.

    Returns the pooled features, ``argmax[coarse_vertex, channel]`` holding the
    winning vertex id in ``grid``, and the coarse grid.
    """
    if s < 1:
        raise InvalidInputError(f"pool window size must be >= 1, got {s}")
    h = ad.as_tensor(h)
    if h.ndim != 2 or h.shape[0] != grid.num_vertices:
        raise ShapeError(f"features have {h.shape[0]} rows, grid has {grid.num_vertices} vertices")
    windows = pool_windows(grid, s)
    pooled, slot = ad.reduce_max(ad.gather_rows(h, windows), axis=1)
    argmax = np.take_along_axis(windows, slot, axis=1)
    return pooled, argmax, coarsen_grid(grid, s)


def _channel_mlp(x: Tensor, p: AttentionParams) -> Tensor:
    return ad.affine(ad.relu(ad.affine(x, p.mlp_W1, p.mlp_b1)), p.mlp_W2, p.mlp_b2)


def channel_attention(h, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Gate channels by ``sigmoid(MLP(avg) + MLP(max))``; returns (output, gates)."""
    h = ad.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != p.channels:
        raise ShapeError(f"channel attention expects {p.channels} channels, got {h.shape}")
    d = h.shape[1]
    avg = ad.reshape(ad.reduce_mean(h, axis=0), (1, d))
    mx = ad.reshape(ad.reduce_max(h, axis=0)[0], (1, d))
    gate = ad.reshape(ad.sigmoid(ad.add(_channel_mlp(avg, p), _channel_mlp(mx, p))), (d,))
    return ad.mul_cols(h, gate), gate


def spatial_attention(h, grid: GridGraph, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Gate vertices by a sigmoid of their neighbourhood-averaged (avg, max) channel summary."""
    h = ad.as_tensor(h)
    if h.ndim != 2 or h.shape[0] != grid.num_vertices:
        raise ShapeError(f"features have {h.shape[0]} rows, grid has {grid.num_vertices} vertices")
    n = h.shape[0]
    summary = ad.stack_columns([ad.reduce_mean(h, axis=1), ad.reduce_max(h, axis=1)[0]])
    logit = ad.affine(sage_aggregate(grid, summary), p.spatial_W, p.spatial_b)
    gate = ad.sigmoid(ad.reshape(logit, (n,)))
    return ad.mul_rows(h, gate), gate


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------


@dataclass
class LayerRecord:
    pre_pool: Tensor
    grid: GridGraph
    pooled_grid: GridGraph
    argmax: np.ndarray
    channel_gates: np.ndarray
    spatial_gates: np.ndarray
    output: Tensor


@dataclass
class LayerTrace:
    """Activations and pooling provenance of one forward pass."""

    input_graph: GridGraph
    inputs: Tensor
    layers: list[LayerRecord]
    logits: Tensor
    tape: Tape | None = field(default=None, repr=False)

    @property
    def grids(self) -> list[GridGraph]:
        """Grid chain from the input grid to the final pooled grid."""
        return [self.input_graph] + [rec.pooled_grid for rec in self.layers]

    def outputs(self) -> list[Tensor]:
        """Per-layer outputs; the raw input stands in when the model has no layers."""
        return [rec.output for rec in self.layers] or [self.inputs]


def check_input(model: ModelParams, graph: GridGraph) -> None:
    expected = (*model.input_shape, model.in_channels)
    got = (graph.height, graph.width, graph.channels)
    if expected != got:
        raise InvalidInputError(
            f"model expects {expected[0]}x{expected[1]}x{expected[2]} input, got {got[0]}x{got[1]}x{got[2]}"
        )


def forward(model: ModelParams, graph: GridGraph, record: bool = False):
    """Logits for one graph, plus a :class:`LayerTrace` when ``record`` is set.

    Pass a bound model (see :meth:`ModelParams.bind`) inside a :class:`Tape`
    to make the pass differentiable.
    """
    check_input(model, graph)
    tape = ad.active_tape()
    x = Tensor(graph.features, requires_grad=record and tape is not None, name="input")
    h, grid = x, graph
    records = []
    for layer in model.layers:
        z = sage_aggregate(grid, h)
        pre = sage_update(z, h, layer.sage, model.update_rule)
        pooled, argmax, coarse = grid_max_pool(pre, grid, layer.pool)
        gated, ch_gate = channel_attention(pooled, layer.attention)
        out, sp_gate = spatial_attention(gated, coarse, layer.attention)
        if record:
            records.append(LayerRecord(pre, grid, coarse, argmax, ch_gate.data, sp_gate.data, out))
        h, grid = out, coarse
    act = ad.reshape(h, (1, h.size))
    for k, (W, b) in enumerate(model.head):
        act = ad.affine(act, W, b)
        if k < len(model.head) - 1:
            act = ad.relu(act)
    logits = ad.reshape(act, (model.num_classes,))
    trace = LayerTrace(graph, x, records, logits, tape) if record else None
    return logits, trace


def softmax_probs(logits) -> np.ndarray:
    """Max-shifted softmax of a logit vector."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise InvalidInputError("softmax needs a vector of at least two logits")
    if not np.all(np.isfinite(z)):
        raise IntegrityError("non-finite logit")
    e = np.exp(z - z.max())
    return e / e.sum()


def predict_probs(model: ModelParams, graph: GridGraph) -> np.ndarray:
    return softmax_probs(forward(model, graph)[0])
