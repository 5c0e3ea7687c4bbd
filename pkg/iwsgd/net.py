"""
Feed-forward networks with explicit noise draws.

A network is an ordered list of layers (dense, activation, noise). Forward
evaluation takes the noise as an argument instead of sampling it, so a given
(params, input, draw) triple always produces the same logits. Backward
computes the gradient of log p(y | logits) with that draw held fixed.

Inputs may be a single example of shape [d] or a block of rows [n, d]; in the
block case every noise tensor carries one row per input row.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError
from .ndcore import Tensor, as_tensor, log_softmax, matmul, softmax
from .rng import INIT_STREAM, DrawCoordinates, noise_generator, stream


class NoiseMode(str, Enum):
    BERNOULLI = "bernoulli_multiply"
    GAUSSIAN = "gaussian_add"


class Phase(str, Enum):
    TRAIN = "train"
    INFERENCE = "inference"


@dataclass(frozen=True)
class NoiseSpec:
    """Distribution of the noise injected by one noise layer.

    Attributes:
        mode: Multiplicative Bernoulli masks or additive Gaussian offsets
        keep_prob: Probability that a unit survives (bernoulli mode)
        sigma: Standard deviation of the offset (gaussian mode)
        inverted: Scale surviving units by 1/keep_prob during training instead
            of scaling by keep_prob at inference
    """

    mode: NoiseMode = NoiseMode.BERNOULLI
    keep_prob: float = 0.5
    sigma: float = 0.0
    inverted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", NoiseMode(self.mode))
        if self.mode is NoiseMode.BERNOULLI and not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.mode is NoiseMode.GAUSSIAN and not self.sigma >= 0.0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    has_bias: bool = True


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"

    def __post_init__(self):
        if self.kind not in ("relu", "tanh"):
            raise ValueError(f"unknown activation: {self.kind}")


@dataclass(frozen=True)
class Noise:
    spec: NoiseSpec = field(default_factory=NoiseSpec)


LayerSpec = Union[Dense, Activation, Noise]


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list with its derived feature widths."""

    layers: Tuple[LayerSpec, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers or not isinstance(layers[0], Dense):
            raise ValueError("a network must start with a dense layer")
        width = layers[0].in_dim
        widths = []
        for index, layer in enumerate(layers):
            if isinstance(layer, Dense):
                if layer.in_dim != width:
                    raise DimensionError(
                        f"dense in_dim {layer.in_dim} does not match incoming width {width}",
                        shapes=((width,), (layer.in_dim, layer.out_dim)),
                        layer_index=index
                    )
                if layer.in_dim <= 0 or layer.out_dim <= 0:
                    raise ValueError(f"layer {index}: dense dimensions must be positive")
                width = layer.out_dim
            elif not isinstance(layer, (Activation, Noise)):
                raise TypeError(f"layer {index}: unsupported layer {layer!r}")
            widths.append(width)
        object.__setattr__(self, "_widths", tuple(widths))

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self._widths[-1]

    def width(self, layer_index: int) -> int:
        """Feature width produced by a layer."""
        return self._widths[layer_index]

    @property
    def dense_layers(self) -> List[Tuple[int, Dense]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if isinstance(layer, Dense)]

    @property
    def noise_layers(self) -> List[Tuple[int, Noise]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if isinstance(layer, Noise)]

    @property
    def noise_unit_count(self) -> int:
        return sum(self.width(i) for i, _ in self.noise_layers)

    def with_noise(self, noise: NoiseSpec) -> "NetworkSpec":
        """Copy of this spec with every noise layer set to the given noise."""
        return NetworkSpec(tuple(Noise(noise) if isinstance(layer, Noise) else layer for layer in self.layers))


def mlp_spec(dims: Sequence[int], activation: str = "relu", noise: Optional[NoiseSpec] = None) -> NetworkSpec:
    """Build an MLP: dense -> activation -> noise for every hidden layer, then a dense output.

    Args:
        dims: Widths from input to output, e.g. [20, 64, 64, 5]
        activation: "relu" or "tanh"
        noise: Noise after each hidden activation; None for a noise-free network

    Returns:
        The network spec
    """
    if len(dims) < 2:
        raise ValueError("an MLP needs at least an input and an output width")
    layers: List[LayerSpec] = []
    for in_dim, out_dim in zip(dims[:-2], dims[1:-1]):
        layers.append(Dense(in_dim, out_dim))
        layers.append(Activation(activation))
        if noise is not None:
            layers.append(Noise(noise))
    layers.append(Dense(dims[-2], dims[-1]))
    return NetworkSpec(tuple(layers))


@dataclass
class DenseParams:
    weight: Tensor
    bias: Optional[Tensor] = None


@dataclass
class NetworkParams:
    """Parameters of every dense layer, in layer order.

    Gradients use the same container. Weights are stored [out_dim x in_dim].
    """

    layers: List[DenseParams]

    def tensors(self) -> List[Tensor]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            if layer.bias is not None:
                out.append(layer.bias)
        return out

    def shapes(self) -> List[Tuple[int, ...]]:
        return [t.shape for t in self.tensors()]

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors())

    def flat(self) -> Tensor:
        """All parameters as one vector (weight then bias, layer by layer)."""
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_flat(self, vector: Tensor) -> "NetworkParams":
        """A new collection shaped like this one, filled from a flat vector."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise DimensionError(
                f"flat vector of shape {vector.shape} does not fit {self.size} parameters",
                shapes=(vector.shape, (self.size,))
            )
        layers = []
        offset = 0
        for layer in self.layers:
            n = layer.weight.size
            weight = vector[offset:offset + n].reshape(layer.weight.shape).copy()
            offset += n
            bias = None
            if layer.bias is not None:
                n = layer.bias.size
                bias = vector[offset:offset + n].copy()
                offset += n
            layers.append(DenseParams(weight, bias))
        return NetworkParams(layers)

    def copy(self) -> "NetworkParams":
        return NetworkParams([
            DenseParams(layer.weight.copy(), None if layer.bias is None else layer.bias.copy())
            for layer in self.layers
        ])

    def zeros_like(self) -> "NetworkParams":
        return self.with_flat(np.zeros(self.size))

    def is_congruent(self, other: "NetworkParams") -> bool:
        return self.shapes() == other.shapes()


def check_params(spec: NetworkSpec, params: NetworkParams) -> None:
    """Raise DimensionError unless params match the dense layers of `spec`."""
    dense = spec.dense_layers
    if len(dense) != len(params.layers):
        raise DimensionError(f"spec has {len(dense)} dense layers but params have {len(params.layers)}")
    for (index, layer), p in zip(dense, params.layers):
        if p.weight.shape != (layer.out_dim, layer.in_dim):
            raise DimensionError(
                f"weight shape {p.weight.shape} expected {(layer.out_dim, layer.in_dim)}",
                shapes=(p.weight.shape, (layer.out_dim, layer.in_dim)),
                layer_index=index
            )
        if layer.has_bias != (p.bias is not None):
            raise DimensionError("bias presence does not match the network layout", layer_index=index)
        if p.bias is not None and p.bias.shape != (layer.out_dim,):
            raise DimensionError(
                f"bias shape {p.bias.shape} expected {(layer.out_dim,)}",
                shapes=(p.bias.shape, (layer.out_dim,)),
                layer_index=index
            )


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Fan-in normal initialization: W ~ N(0, 2/in_dim), zero biases.

    Args:
        spec: Network spec
        seed: Master seed of the run

    Returns:
        Freshly initialized parameters
    """
    rng = stream(seed, INIT_STREAM)
    layers = []
    for _, layer in spec.dense_layers:
        weight = rng.normal(0.0, np.sqrt(2.0 / layer.in_dim), size=(layer.out_dim, layer.in_dim))
        bias = np.zeros(layer.out_dim) if layer.has_bias else None
        layers.append(DenseParams(weight, bias))
    return NetworkParams(layers)


@dataclass
class NoiseDraw:
    """Realized noise for every noise layer of a network.

    Attributes:
        eps: Noise tensor per noise-layer index, shaped like that layer's
            activations ([width] or [rows x width])
        coordinates: Coordinates that produced each row (empty when the draw
            was built by hand or sampled in bulk)
    """

    eps: Dict[int, Tensor]
    coordinates: Tuple[DrawCoordinates, ...] = ()

    def rng_coordinates(self, layer_index: int) -> List[Tuple[int, ...]]:
        return [c.key(layer_index) for c in self.coordinates]


def _sample_noise(noise: NoiseSpec, generator: np.random.Generator, size) -> Tensor:
    if noise.mode is NoiseMode.BERNOULLI:
        return (generator.random(size) < noise.keep_prob).astype(np.float64)
    return generator.normal(0.0, noise.sigma, size=size)


def sample_draw_block(spec: NetworkSpec, coordinates: DrawCoordinates, samples: int) -> NoiseDraw:
    """Draws for samples 0..samples-1 of one example, one row per sample.

    Each noise layer reads one stream per example; row s is the s-th
    width-sized stretch of it, so a row does not depend on `samples`.

    Args:
        spec: Network spec (defines noise layers and widths)
        coordinates: Coordinates of the example (the sample index is ignored)
        samples: Number of rows

    Returns:
        A block NoiseDraw with per-row coordinates
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    eps = {}
    for index, layer in spec.noise_layers:
        generator = noise_generator(coordinates, index)
        eps[index] = _sample_noise(layer.spec, generator, (samples, spec.width(index)))
    return NoiseDraw(eps, tuple(coordinates.with_sample(s) for s in range(samples)))


def sample_draw(spec: NetworkSpec, coordinates: DrawCoordinates) -> NoiseDraw:
    """Regenerate the draw identified by its coordinates.

    Args:
        spec: Network spec (defines noise layers and widths)
        coordinates: Draw coordinates

    Returns:
        A single-example NoiseDraw
    """
    block = sample_draw_block(spec, coordinates, coordinates.sample_index + 1)
    return NoiseDraw({index: rows[-1] for index, rows in block.eps.items()}, (coordinates,))


def sample_draws(spec: NetworkSpec, rng: np.random.Generator, rows: int) -> NoiseDraw:
    """Sample a block of independent draws from a single generator.

    Used by the Monte Carlo estimators, which do not need per-draw provenance.
    """
    eps = {}
    for index, layer in spec.noise_layers:
        eps[index] = _sample_noise(layer.spec, rng, (rows, spec.width(index)))
    return NoiseDraw(eps)


def stack_draws(draws: Sequence[NoiseDraw]) -> NoiseDraw:
    """Stack single-example draws into one block draw (one row per draw)."""
    if not draws:
        raise ValueError("cannot stack an empty list of draws")
    keys = list(draws[0].eps)
    eps = {k: np.stack([d.eps[k] for d in draws]) for k in keys}
    coordinates = tuple(c for d in draws for c in d.coordinates)
    return NoiseDraw(eps, coordinates)


def concat_draws(blocks: Sequence[NoiseDraw]) -> NoiseDraw:
    """Concatenate block draws row-wise, keeping their order."""
    if not blocks:
        raise ValueError("cannot concatenate an empty list of draws")
    eps = {k: np.concatenate([b.eps[k] for b in blocks]) for k in blocks[0].eps}
    coordinates = tuple(c for b in blocks for c in b.coordinates)
    return NoiseDraw(eps, coordinates)


def inject_noise(h: Tensor, eps: Optional[Tensor], spec: NoiseSpec, phase: Phase) -> Tensor:
    """Apply z = g(h, eps).

    Args:
        h: Deterministic activations
        eps: Noise slice for this layer (ignored at inference)
        spec: Noise distribution
        phase: Train or inference

    Returns:
        Stochastic activations (train) or their expectation (inference)
    """
    phase = Phase(phase)
    if phase is Phase.INFERENCE:
        if spec.mode is NoiseMode.BERNOULLI and not spec.inverted:
            return spec.keep_prob * h
        return h
    if eps is None:
        raise ValueError("train phase requires a noise draw")
    if np.shape(eps) != np.shape(h):
        raise DimensionError(
            f"noise shape {np.shape(eps)} does not match activation shape {np.shape(h)}",
            shapes=(np.shape(eps), np.shape(h))
        )
    if spec.mode is NoiseMode.BERNOULLI:
        if spec.inverted:
            return h * eps / spec.keep_prob
        return h * eps
    return h + eps


@dataclass
class ForwardTrace:
    """Cached per-layer values of one forward evaluation.

    Attributes:
        spec: Network spec that was evaluated
        inputs: Input of every layer
        outputs: Output of every layer (the last one is the logits)
        eps: Noise applied by each noise layer (train phase)
        phase: Train or inference
    """

    spec: NetworkSpec
    inputs: List[Tensor]
    outputs: List[Tensor]
    eps: Dict[int, Tensor]
    phase: Phase

    @property
    def logits(self) -> Tensor:
        return self.outputs[-1]


def forward(
    spec: NetworkSpec,
    params: NetworkParams,
    x: Tensor,
    draw: Optional[NoiseDraw] = None,
    phase: Phase = Phase.TRAIN
) -> ForwardTrace:
    """Evaluate the network layer by layer.

    Args:
        spec: Network spec
        params: Dense-layer parameters
        x: Input of shape [d] or [n x d]
        draw: Noise for every noise layer; required in train phase unless the
            network has no noise layers
        phase: Train or inference

    Returns:
        ForwardTrace holding every intermediate value
    """
    phase = Phase(phase)
    x = as_tensor(x)
    if x.ndim not in (1, 2) or x.shape[-1] != spec.input_dim:
        raise DimensionError(
            f"input shape {x.shape} does not match input width {spec.input_dim}",
            shapes=(x.shape, (spec.input_dim,)),
            layer_index=0
        )
    check_params(spec, params)

    inputs: List[Tensor] = []
    outputs: List[Tensor] = []
    applied: Dict[int, Tensor] = {}
    dense_params = iter(params.layers)
    a = x
    for index, layer in enumerate(spec.layers):
        inputs.append(a)
        if isinstance(layer, Dense):
            p = next(dense_params)
            try:
                a = matmul(a, p.weight.T)
            except DimensionError as e:
                raise DimensionError(str(e), shapes=e.shapes, layer_index=index) from e
            if p.bias is not None:
                a = a + p.bias
        elif isinstance(layer, Activation):
            a = np.maximum(a, 0.0) if layer.kind == "relu" else np.tanh(a)
        else:
            eps = None
            if phase is Phase.TRAIN:
                if draw is None or index not in draw.eps:
                    raise ValueError(f"layer {index}: train phase requires a noise draw for every noise layer")
                eps = draw.eps[index]
                applied[index] = eps
            try:
                a = inject_noise(a, eps, layer.spec, phase)
            except DimensionError as e:
                raise DimensionError(str(e), shapes=e.shapes, layer_index=index) from e
        outputs.append(a)
    return ForwardTrace(spec, inputs, outputs, applied, phase)


def _check_label(trace: ForwardTrace, y) -> np.ndarray:
    labels = np.asarray(y)
    num_classes = trace.logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise IndexError(f"class index {y} out of range for {num_classes} classes")
    return labels


def log_likelihood(trace: ForwardTrace, y) -> Union[float, Tensor]:
    """log p(y | logits) for a single trace, or per row for a block trace.

    Args:
        trace: Forward trace
        y: Class index (or one index per row)

    Returns:
        Log-likelihood, always <= 0
    """
    labels = _check_label(trace, y)
    log_probs = log_softmax(trace.logits)
    if log_probs.ndim == 1:
        return float(log_probs[int(labels)])
    labels = np.broadcast_to(labels, (log_probs.shape[0],))
    return log_probs[np.arange(log_probs.shape[0]), labels]


def _logit_gradient(trace: ForwardTrace, y) -> Tensor:
    """d log p(y|logits) / d logits = onehot(y) - softmax(logits), as rows."""
    labels = _check_label(trace, y)
    probs = softmax(np.atleast_2d(trace.logits))
    labels = np.broadcast_to(labels, (probs.shape[0],))
    grad = -probs
    grad[np.arange(probs.shape[0]), labels] += 1.0
    return grad


def _backpropagate(spec: NetworkSpec, params: NetworkParams, trace: ForwardTrace, g: Tensor, per_row: bool):
    """Push logit gradients g [rows x classes] back through the network.

    Returns one list of (dW, db) per dense layer; with per_row the arrays keep
    a leading row axis, otherwise rows are summed.
    """
    if trace.spec != spec or len(trace.inputs) != len(spec.layers):
        raise ValueError("trace was not produced by this network spec")
    if trace.phase is not Phase.TRAIN:
        raise ValueError("backward requires a train-phase trace")
    check_params(spec, params)

    grads: List[Tuple[Tensor, Optional[Tensor]]] = []
    dense_params = list(params.layers)
    for index in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[index]
        a = np.atleast_2d(trace.inputs[index])
        if isinstance(layer, Dense):
            p = dense_params.pop()
            if per_row:
                dw = g[:, :, None] * a[:, None, :]
                db = g.copy() if p.bias is not None else None
            else:
                dw = matmul(g.T, a)
                db = g.sum(axis=0) if p.bias is not None else None
            grads.append((dw, db))
            if index > 0:
                g = matmul(g, p.weight)
        elif isinstance(layer, Activation):
            if layer.kind == "relu":
                g = g * (a > 0.0)
            else:
                out = np.atleast_2d(trace.outputs[index])
                g = g * (1.0 - out * out)
        else:
            noise = layer.spec
            if noise.mode is NoiseMode.BERNOULLI:
                eps = np.atleast_2d(trace.eps[index])
                g = g * eps / noise.keep_prob if noise.inverted else g * eps
    grads.reverse()
    return grads


def backward(spec: NetworkSpec, params: NetworkParams, trace: ForwardTrace, y) -> NetworkParams:
    """Gradient of log p(y | x, eps) w.r.t. all parameters, eps held fixed.

    Args:
        spec: Network spec
        params: Parameters used for the forward pass
        trace: Train-phase trace of a single example
        y: Class index

    Returns:
        Gradient shaped like params
    """
    if trace.logits.ndim != 1:
        raise ValueError("backward expects a single-example trace; use backward_rows for blocks")
    rows = backward_rows(spec, params, trace, y)
    return rows[0]


def backward_rows(spec: NetworkSpec, params: NetworkParams, trace: ForwardTrace, y) -> List[NetworkParams]:
    """Per-row gradients of a block trace (one NetworkParams per row)."""
    g = _logit_gradient(trace, y)
    grads = _backpropagate(spec, params, trace, g, per_row=True)
    return [
        NetworkParams([DenseParams(dw[r], None if db is None else db[r]) for dw, db in grads])
        for r in range(g.shape[0])
    ]


def backward_weighted(spec: NetworkSpec, params: NetworkParams, trace: ForwardTrace, y, weights) -> NetworkParams:
    """Sum over rows of weights[r] * gradient of row r, in one backward pass.

    Scales each row's logit gradient by its weight before backpropagation;
    by linearity of the chain rule this equals weighting the parameter
    gradients.
    """
    g = _logit_gradient(trace, y)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (g.shape[0],):
        raise DimensionError(f"{w.shape[0] if w.ndim else 0} weights for {g.shape[0]} rows", shapes=(w.shape, (g.shape[0],)))
    grads = _backpropagate(spec, params, trace, g * w[:, None], per_row=False)
    return NetworkParams([DenseParams(dw, db) for dw, db in grads])
