"""Dense classifiers: parameters, forward pass, cross-entropy and gradients."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ShapeError

ACTIVATIONS = ("relu", "tanh", "softplus")
PRECISIONS = {"f64": np.float64, "f32": np.float32}


@dataclass(frozen=True)
class ModelSpec:
    widths: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ShapeError("a model needs at least an input and an output width")
        if any(w < 1 for w in self.widths):
            raise ShapeError(f"all widths must be >= 1, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation, "seed": self.seed}


@dataclass
class ModelParams:
    """Per-layer weights (shape ``(fan_in, fan_out)``) and biases.

    The pair ``(weights[n], biases[n])`` is one layer block; weight
    perturbation norms are taken over the whole block.

    ``base`` is set on parameters produced by :func:`iseat.awp.apply` and
    holds the untouched parameters they were derived from.
    """

    spec: ModelSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    base: "ModelParams | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.weights) != len(self.spec.widths) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of layers does not match the model spec")
        for n, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.spec.widths[n], self.spec.widths[n + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ShapeError(f"layer {n}: got {w.shape}/{b.shape}, expected {expect}/({expect[1]},)")

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def layers(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return zip(self.weights, self.biases)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers():
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, spec: ModelSpec, arrays: Sequence[np.ndarray]) -> "ModelParams":
        return cls(spec, [np.asarray(a) for a in arrays[0::2]], [np.asarray(a) for a in arrays[1::2]])

    def map(self, fn: Callable, *others: "ModelParams") -> "ModelParams":
        for o in others:
            check_aligned(self, o)
        arrays = [fn(*group) for group in zip(self.arrays(), *(o.arrays() for o in others))]
        return ModelParams.from_arrays(self.spec, arrays)

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def astype(self, dtype) -> "ModelParams":
        return self.map(lambda a: a.astype(dtype))

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def block_norms(self) -> np.ndarray:
        return np.array([math.sqrt(float(np.sum(w * w)) + float(np.sum(b * b))) for w, b in self.layers()])

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec) -> "ModelParams":
        vec = np.asarray(vec)
        out, k = [], 0
        for a in self.arrays():
            out.append(vec[k:k + a.size].reshape(a.shape).astype(a.dtype))
            k += a.size
        return ModelParams.from_arrays(self.spec, out)

    def equal(self, other: "ModelParams") -> bool:
        """Bit-level equality of every array."""
        return all(a.dtype == b.dtype and a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays()))


def check_aligned(a: ModelParams, b: ModelParams) -> None:
    if a.n_layers != b.n_layers or any(x.shape != y.shape for x, y in zip(a.arrays(), b.arrays())):
        raise ShapeError("parameter structures are not aligned")


def init_params(spec: ModelSpec, dtype=np.float64) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
    return ModelParams(spec, weights, biases)


@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(self.inputs)
        self.labels = np.atleast_1d(np.asarray(self.labels, dtype=np.int64))
        if self.inputs.shape[0] < 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError("batch needs m >= 1 inputs with one label each")

    def __len__(self) -> int:
        return self.labels.shape[0]


# -- graph builders -------------------------------------------------------

def param_tensors(params: ModelParams) -> list[Tensor]:
    return [Tensor(a) for a in params.arrays()]


def logits_graph(spec: ModelSpec, tensors: Sequence[Tensor], x: Tensor) -> Tensor:
    if x.shape[-1] != spec.n_inputs:
        raise ShapeError(f"input width {x.shape[-1]} does not match model input {spec.n_inputs}")
    act = ad.ACTIVATIONS[spec.activation]
    h = x
    n = len(tensors) // 2
    for k in range(n):
        h = ad.add(ad.matmul(h, tensors[2 * k]), tensors[2 * k + 1])
        if k < n - 1:
            h = act(h)
    return h


def cross_entropy_graph(logits: Tensor, y) -> Tensor:
    """Per-sample -log softmax(logits)[y] with max-subtraction."""
    y = np.asarray(y)
    if logits.ndim == 1:
        return ad.sub(ad.logsumexp(logits), ad.pick(logits, y))
    return ad.sub(ad.logsumexp(logits, axis=1), ad.pick(logits, y))


def _as_input(params: ModelParams, x) -> Tensor:
    return Tensor(np.asarray(x, dtype=params.dtype), op="input")


# -- numeric entry points -------------------------------------------------

def forward_logits(params: ModelParams, x) -> np.ndarray:
    return logits_graph(params.spec, param_tensors(params), _as_input(params, x)).data


def predict(params: ModelParams, x) -> np.ndarray:
    """Arg-max class; ties go to the lowest index."""
    return np.argmax(forward_logits(params, x), axis=-1)


def cross_entropy(logits, y) -> np.ndarray:
    return cross_entropy_graph(Tensor(logits), y).data


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss(params: ModelParams, x, y) -> np.ndarray:
    """Per-sample cross-entropy (a scalar array for a single sample)."""
    return cross_entropy_graph(logits_graph(params.spec, param_tensors(params), _as_input(params, x)), y).data


def input_gradient(params: ModelParams, x, y) -> np.ndarray:
    """Gradient of each sample's own loss w.r.t. its input.

    For a batch this is the gradient of the summed loss, which separates
    per sample.
    """
    xt = _as_input(params, x)
    out = cross_entropy_graph(logits_graph(params.spec, param_tensors(params), xt), y).sum()
    return ad.grad(out, [xt])[0]


def param_gradient(params: ModelParams, batch: LabeledBatch) -> ModelParams:
    """Gradient of the batch-mean loss w.r.t. every parameter."""
    tensors = param_tensors(params)
    out = cross_entropy_graph(logits_graph(params.spec, tensors, _as_input(params, batch.inputs)), batch.labels).mean()
    return ModelParams.from_arrays(params.spec, ad.grad(out, tensors))


# -- checkpoints ----------------------------------------------------------

CHECKPOINT_FORMAT = "iseat-checkpoint/1"


def _float_list(a: np.ndarray) -> str:
    def fmt(v: float) -> str:
        s = format(v, ".17g")
        return s if any(c in s for c in ".en") else s + ".0"

    return "[" + ",".join(fmt(float(v)) for v in a.ravel()) + "]"


def checkpoint_text(params: ModelParams, *, precision: str, seed: int, epoch: int) -> str:
    head = {
        "format": CHECKPOINT_FORMAT,
        "spec": params.spec.to_dict(),
        "precision": precision,
        "seed": int(seed),
        "epoch": int(epoch),
    }
    layers = ",\n  ".join(
        '{"weight_shape": %s, "weight": %s, "bias": %s}' % (json.dumps(list(w.shape)), _float_list(w), _float_list(b))
        for w, b in params.layers()
    )
    body = json.dumps(head, indent=1)[:-2]
    return body + ',\n "layers": [\n  ' + layers + "\n ]\n}\n"


def save_checkpoint(path, params: ModelParams, *, precision: str, seed: int, epoch: int) -> None:
    Path(path).write_text(checkpoint_text(params, precision=precision, seed=seed, epoch=epoch))


@dataclass
class Checkpoint:
    params: ModelParams
    precision: str
    seed: int
    epoch: int


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: checkpoint not found") from None
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    try:
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
        spec = ModelSpec(tuple(doc["spec"]["widths"]), doc["spec"]["activation"], int(doc["spec"]["seed"]))
        dtype = PRECISIONS[doc["precision"]]
        weights, biases = [], []
        for layer in doc["layers"]:
            weights.append(np.array(layer["weight"], dtype=np.float64).reshape(layer["weight_shape"]).astype(dtype))
            biases.append(np.array(layer["bias"], dtype=np.float64).astype(dtype))
        params = ModelParams(spec, weights, biases)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, ShapeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return Checkpoint(params, doc["precision"], int(doc["seed"]), int(doc["epoch"]))
