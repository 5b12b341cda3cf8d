"""Network shape description and the Gaussian posterior over its weights.

The model is a feed-forward net with a single signed output unit.  The
posterior (and prior) over every weight and bias is an independent Gaussian
with unit variance; only the means are free parameters, so a posterior is
just one mean array per layer (plus bias vectors when enabled).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .core import sample_trunc_normal

_ACTIVATIONS = ("sign", "sigmoid", "relu")

CHECKPOINT_FORMAT = "signagg-posterior-v1"


class NetworkSpecError(ValueError):
    """Invalid network shape or activation."""


class CheckpointError(ValueError):
    """Malformed posterior checkpoint file."""


@dataclass(frozen=True)
class NetworkSpec:
    """Widths (input, hidden..., output) plus hidden activation and bias flag.

    widths[-1] must be 1: the network has one signed output unit.  A spec with
    no hidden widths (e.g. (3, 1)) is a plain stochastic linear classifier.
    """

    widths: tuple
    hidden_activation: str = "sign"
    use_bias: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise NetworkSpecError(f"need at least input and output widths, got {widths}")
        if any(w < 1 for w in widths):
            raise NetworkSpecError(f"widths must be positive, got {widths}")
        if widths[-1] != 1:
            raise NetworkSpecError(f"output width must be 1, got {widths[-1]}")
        if self.hidden_activation not in _ACTIVATIONS:
            raise NetworkSpecError(
                f"hidden_activation must be one of {_ACTIVATIONS}, got {self.hidden_activation!r}"
            )

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def hidden_widths(self) -> tuple:
        return self.widths[1:-1]

    def layer_shapes(self):
        """[(d_l, d_{l-1})] weight-matrix shapes, input to output order."""
        return [(self.widths[i + 1], self.widths[i]) for i in range(self.n_layers)]

    def n_params(self) -> int:
        n = sum(a * b for a, b in self.layer_shapes())
        if self.use_bias:
            n += sum(self.widths[1:])
        return n


@dataclass
class GaussianPosterior:
    """Mean parameters of the unit-variance Gaussian posterior.

    weights[l] has shape (d_{l+1}, d_l); biases[l] has shape (d_{l+1},) or
    biases is None when the spec disables biases.
    """

    spec: NetworkSpec
    weights: list
    biases: list = None
    _frozen: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        expected = self.spec.layer_shapes()
        if len(self.weights) != len(expected):
            raise NetworkSpecError(
                f"expected {len(expected)} weight matrices, got {len(self.weights)}"
            )
        for mat, shape in zip(self.weights, expected):
            if mat.shape != shape:
                raise NetworkSpecError(f"weight shape {mat.shape} != expected {shape}")
        if self.spec.use_bias:
            if self.biases is None or len(self.biases) != len(expected):
                raise NetworkSpecError("spec uses biases but bias vectors are missing")
            for vec, shape in zip(self.biases, expected):
                if vec.shape != (shape[0],):
                    raise NetworkSpecError(f"bias shape {vec.shape} != expected ({shape[0]},)")
        elif self.biases is not None:
            raise NetworkSpecError("spec has use_bias=False but biases were supplied")

    # -- basic structure -------------------------------------------------

    def param_arrays(self):
        """All mean arrays in checkpoint order: per layer, weights then bias."""
        out = []
        for i, mat in enumerate(self.weights):
            out.append(mat)
            if self.biases is not None:
                out.append(self.biases[i])
        return out

    def n_params(self) -> int:
        return self.spec.n_params()

    def copy(self) -> "GaussianPosterior":
        return GaussianPosterior(
            self.spec,
            [w.copy() for w in self.weights],
            None if self.biases is None else [b.copy() for b in self.biases],
        )

    def frozen_copy(self) -> "GaussianPosterior":
        """Deep copy with read-only arrays; used as the fixed prior."""
        frozen = self.copy()
        for arr in frozen.param_arrays():
            arr.flags.writeable = False
        frozen._frozen = True
        return frozen


def init_posterior(
    spec: NetworkSpec, rng: np.random.Generator, variance: float = 0.05, trunc: float = 2.0
) -> GaussianPosterior:
    """Draw initial means: truncated normal weights, zero biases."""
    weights = [sample_trunc_normal(rng, shape, variance, trunc) for shape in spec.layer_shapes()]
    biases = [np.zeros(shape[0]) for shape in spec.layer_shapes()] if spec.use_bias else None
    return GaussianPosterior(spec, weights, biases)


def kl_divergence(q: GaussianPosterior, p: GaussianPosterior) -> float:
    """KL(q || p) between unit-variance Gaussians: half squared mean distance.

    Sums over every weight and bias coordinate.
    """
    if q.spec != p.spec:
        raise NetworkSpecError(f"posterior specs differ: {q.spec} vs {p.spec}")
    total = 0.0
    for qa, pa in zip(q.param_arrays(), p.param_arrays()):
        diff = qa - pa
        total += float(np.dot(diff.ravel(), diff.ravel()))
    return 0.5 * total


def save_posterior(q: GaussianPosterior, path) -> None:
    """Write a checkpoint: one JSON header line, then raw little-endian f64.

    Parameter order is layer by layer, each layer's weight matrix row-major
    followed by its bias vector (when biases are enabled).
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "widths": list(q.spec.widths),
        "hidden_activation": q.spec.hidden_activation,
        "use_bias": q.spec.use_bias,
        "dtype": "<f8",
        "param_count": q.n_params(),
    }
    flat = np.concatenate([a.ravel() for a in q.param_arrays()]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(flat.tobytes())


def load_posterior(path) -> GaussianPosterior:
    """Inverse of :func:`save_posterior`; validates header and byte count."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"bad checkpoint format {header.get('format')!r}, expected {CHECKPOINT_FORMAT!r}"
        )
    spec = NetworkSpec(
        tuple(header["widths"]), header["hidden_activation"], header["use_bias"]
    )
    expected_bytes = spec.n_params() * 8
    if len(blob) != expected_bytes:
        raise CheckpointError(
            f"checkpoint payload has {len(blob)} bytes, expected {expected_bytes}"
        )
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    weights, biases = [], [] if spec.use_bias else None
    pos = 0
    for d_out, d_in in spec.layer_shapes():
        weights.append(flat[pos : pos + d_out * d_in].reshape(d_out, d_in).copy())
        pos += d_out * d_in
        if spec.use_bias:
            biases.append(flat[pos : pos + d_out].copy())
            pos += d_out
    return GaussianPosterior(spec, weights, biases)
