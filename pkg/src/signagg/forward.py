"""Forward passes through the stochastic network.

Two Monte-Carlo output estimators share the same sampled hidden activations:

* the naive one finishes each sampled path with a fresh signed-output draw,
  giving per-sample values in {-1, +1};
* the aggregated one integrates the final layer in closed form, replacing the
  sign draw with erf(mean-preactivation / sqrt(2 * preactivation variance)),
  which never increases the variance.

Hidden sign layers are sampled from their exact per-unit conditionals, so a
path never materialises hidden weight draws.  Sigmoid/relu hidden layers use
the local reparameterisation z = mean + sqrt(var) * eps with a scalar noise
per unit.  For small sign networks the aggregated output can also be computed
exactly by enumerating hidden sign configurations.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .network import GaussianPosterior

_SQRT2 = float(np.sqrt(2.0))

# hard cap on the number of enumerated hidden configurations (product over
# hidden layers of 2**width)
ENUMERATION_LIMIT = 2**20


class ZeroActivationError(ValueError):
    """Activation vector of zero norm reached a bias-free layer."""


class EnumerationTooLargeError(ValueError):
    """Exact aggregation was asked for more configurations than the cap."""


@dataclass
class EstimatorOutput:
    """A Monte-Carlo estimate with its raw per-sample values.

    variance_estimate is the unbiased sample variance divided by the sample
    count (i.e. the variance of the mean), 0.0 when only one sample exists.
    """

    value: float
    per_sample: np.ndarray
    variance_estimate: float


def _finish(per_sample: np.ndarray) -> EstimatorOutput:
    t = per_sample.shape[0]
    var = float(np.var(per_sample, ddof=1) / t) if t > 1 else 0.0
    return EstimatorOutput(float(per_sample.mean()), per_sample, var)


def _input_stats(prev: np.ndarray, use_bias: bool):
    """Per-row 1/sqrt(2 v) and 1/sqrt(v) for v = ||prev||^2 (+1 with bias)."""
    v = np.einsum("...d,...d->...", prev, prev)
    if use_bias:
        v = v + 1.0
    else:
        if np.any(v == 0.0):
            raise ZeroActivationError(
                "zero activation vector with no bias: preactivation scale undefined"
            )
    inv_std = 1.0 / np.sqrt(v)
    return inv_std / _SQRT2, inv_std


def aggregate_erf(weight_mean: np.ndarray, acts: np.ndarray, bias_mean=None):
    """Closed-form aggregated signed output for the final layer.

    erf((mu . a + beta) / sqrt(2 * (||a||^2 + 1))) with a bias, or
    erf(mu . a / (sqrt(2) * ||a||)) without.  ``acts`` may be a single vector
    (returns a float) or a (rows, d) batch (returns (rows,)).
    """
    w = np.asarray(weight_mean, dtype=np.float64).reshape(-1)
    a = np.asarray(acts, dtype=np.float64)
    single = a.ndim == 1
    a2 = a.reshape(1, -1) if single else a
    if a2.shape[1] != w.shape[0]:
        raise ValueError(f"activation width {a2.shape[1]} != weight width {w.shape[0]}")
    z = a2 @ w
    if bias_mean is not None:
        z = z + float(bias_mean)
    inv_scale, _ = _input_stats(a2, use_bias=bias_mean is not None)
    out = kernels.erf_scaled(z.reshape(-1, 1), inv_scale).reshape(-1)
    return float(out[0]) if single else out


def layer_conditional(weight_means: np.ndarray, prev_acts: np.ndarray, bias_means=None):
    """P(unit = +1 | previous activations) for every unit of a sign layer.

    (1 + erf((mu_i . a + beta_i) / sqrt(2 * (||a||^2 + 1)))) / 2 — the exact
    marginal of a signed unit whose weights are N(mu_i, I), given ``a``.
    ``prev_acts`` may be (d,) or (rows, d); result is (k,) or (rows, k).
    """
    W = np.asarray(weight_means, dtype=np.float64)
    a = np.asarray(prev_acts, dtype=np.float64)
    single = a.ndim == 1
    a2 = a.reshape(1, -1) if single else a
    z = a2 @ W.T
    if bias_means is not None:
        z = z + np.asarray(bias_means, dtype=np.float64)
    inv_scale, _ = _input_stats(a2, use_bias=bias_means is not None)
    p = kernels.cond_prob_pos(z, inv_scale)
    return p[0] if single else p


# ---------------------------------------------------------------------------
# sampled path blocks
# ---------------------------------------------------------------------------


@dataclass
class SignPaths:
    """T sampled all-sign hidden paths for a batch of inputs.

    Per hidden layer l (0-based lists): acts[l] is (T, n, d); preact_means[l],
    inv_scale[l], inv_std[l] describe that layer's input and have leading dim
    1 for the first hidden layer (shared across samples) and T afterwards.
    final_* describe the output unit's input; values holds the aggregated
    erf outputs at natural leading dim (1 or T).
    """

    x: np.ndarray
    acts: list
    preact_means: list
    inv_scale: list
    inv_std: list
    final_preact_mean: np.ndarray
    final_inv_scale: np.ndarray
    final_inv_std: np.ndarray
    values: np.ndarray
    sample_count: int

    @property
    def values_full(self) -> np.ndarray:
        n = self.x.shape[0]
        return np.broadcast_to(self.values, (self.sample_count, n))


@dataclass
class ReparamPaths:
    """T reparameterised sigmoid/relu paths for a batch of inputs.

    preacts[l] = preact_means[l] + stds[l] * noises[l]; stds[l] is the scalar
    preactivation std sqrt(||a_{l-1}||^2 + 1) shared by all units of layer l
    (leading dim 1 for the first hidden layer, T afterwards).
    """

    x: np.ndarray
    acts: list
    preacts: list
    preact_means: list
    noises: list
    stds: list
    final_preact_mean: np.ndarray
    final_inv_scale: np.ndarray
    final_inv_std: np.ndarray
    values: np.ndarray
    sample_count: int

    @property
    def values_full(self) -> np.ndarray:
        n = self.x.shape[0]
        return np.broadcast_to(self.values, (self.sample_count, n))


def _lin(prev: np.ndarray, W: np.ndarray) -> np.ndarray:
    """prev @ W.T via one BLAS call regardless of leading dims."""
    lead = prev.shape[:-1]
    return (prev.reshape(-1, prev.shape[-1]) @ W.T).reshape(lead + (W.shape[0],))


def _final_block(post, prev, use_bias):
    """Output-unit preactivation mean and scales for prev of shape (..., d)."""
    z = _lin(prev, post.weights[-1])[..., 0]
    if use_bias:
        z = z + post.biases[-1][0]
    inv_scale, inv_std = _input_stats(prev, use_bias)
    shape = z.shape
    vals = kernels.erf_scaled(z.reshape(-1, 1), inv_scale.reshape(-1)).reshape(shape)
    return z, inv_scale, inv_std, vals


def sample_sign_paths(
    post: GaussianPosterior, X: np.ndarray, T: int, rng: np.random.Generator
) -> SignPaths:
    """Draw T hidden sign paths per input from the exact conditionals."""
    spec = post.spec
    if spec.hidden_activation != "sign":
        raise ValueError(f"sign paths need a sign network, got {spec.hidden_activation!r}")
    if T < 1:
        raise ValueError(f"sample count must be >= 1, got {T}")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    use_bias = spec.use_bias
    acts, zbars, scales, stds = [], [], [], []
    prev = X  # (n, d0), then (T, n, d)
    for l in range(spec.n_layers - 1):
        W = post.weights[l]
        d = W.shape[0]
        zbar = _lin(prev, W)
        if use_bias:
            zbar = zbar + post.biases[l]
        inv_scale, inv_std = _input_stats(prev, use_bias)
        p = kernels.cond_prob_pos(
            zbar.reshape(-1, d), inv_scale.reshape(-1)
        ).reshape(zbar.shape)
        u = rng.random((T, n, d))
        a = kernels.sample_pm1(np.broadcast_to(p, (T, n, d)), u)
        lead = (1,) if prev.ndim == 2 else (T,)
        acts.append(a)
        zbars.append(zbar.reshape(lead + (n, d)))
        scales.append(inv_scale.reshape(lead + (n,)))
        stds.append(inv_std.reshape(lead + (n,)))
        prev = a
    zf, inv_scale_f, inv_std_f, vals = _final_block(post, prev, use_bias)
    lead = (1,) if prev.ndim == 2 else (T,)
    return SignPaths(
        x=X,
        acts=acts,
        preact_means=zbars,
        inv_scale=scales,
        inv_std=stds,
        final_preact_mean=zf.reshape(lead + (n,)),
        final_inv_scale=inv_scale_f.reshape(lead + (n,)),
        final_inv_std=inv_std_f.reshape(lead + (n,)),
        values=vals.reshape(lead + (n,)),
        sample_count=T,
    )


def sample_reparam_paths(
    post: GaussianPosterior,
    X: np.ndarray,
    T: int,
    rng: np.random.Generator = None,
    noises: list = None,
) -> ReparamPaths:
    """Draw T sigmoid/relu paths via local reparameterisation.

    Each hidden layer draws one scalar noise per unit:
    z = (M a + beta) + sqrt(||a||^2 + 1) * eps.  Pass ``noises`` (a list of
    (T, n, d_l) arrays) to replay fixed noise instead of drawing from rng.
    """
    spec = post.spec
    if spec.hidden_activation not in ("sigmoid", "relu"):
        raise ValueError(
            f"reparam paths need sigmoid/relu hidden layers, got {spec.hidden_activation!r}"
        )
    if T < 1:
        raise ValueError(f"sample count must be >= 1, got {T}")
    if (rng is None) == (noises is None):
        raise ValueError("supply exactly one of rng or noises")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    use_bias = spec.use_bias
    acts, preacts, zbars, eps_list, stds = [], [], [], [], []
    prev = X
    for l in range(spec.n_layers - 1):
        W = post.weights[l]
        d = W.shape[0]
        zbar = _lin(prev, W)
        if use_bias:
            zbar = zbar + post.biases[l]
        inv_scale, inv_std = _input_stats(prev, use_bias)
        std = 1.0 / inv_std
        eps = rng.standard_normal((T, n, d)) if noises is None else np.asarray(noises[l])
        z = zbar + std[..., None] * eps
        if spec.hidden_activation == "sigmoid":
            a = kernels.sigmoid_map(z)
        else:
            a = np.maximum(z, 0.0)
        lead = (1,) if prev.ndim == 2 else (T,)
        acts.append(a)
        preacts.append(z)
        zbars.append(zbar.reshape(lead + (n, d)))
        eps_list.append(eps)
        stds.append(std.reshape(lead + (n,)))
        prev = a
    zf, inv_scale_f, inv_std_f, vals = _final_block(post, prev, use_bias)
    lead = (1,) if prev.ndim == 2 else (T,)
    return ReparamPaths(
        x=X,
        acts=acts,
        preacts=preacts,
        preact_means=zbars,
        noises=eps_list,
        stds=stds,
        final_preact_mean=zf.reshape(lead + (n,)),
        final_inv_scale=inv_scale_f.reshape(lead + (n,)),
        final_inv_std=inv_std_f.reshape(lead + (n,)),
        values=vals.reshape(lead + (n,)),
        sample_count=T,
    )


def sample_paths(post: GaussianPosterior, X, T, rng):
    """Path sampler matching the network's hidden activation."""
    if post.spec.hidden_activation == "sign":
        return sample_sign_paths(post, X, T, rng)
    return sample_reparam_paths(post, X, T, rng=rng)


def aggregated_values(post: GaussianPosterior, X, T, rng) -> np.ndarray:
    """(T, n) per-sample aggregated outputs for a batch."""
    return np.array(sample_paths(post, X, T, rng).values_full)


def naive_values(post: GaussianPosterior, X, T, rng) -> np.ndarray:
    """(T, n) per-sample signed outputs, one fresh output draw per path.

    The output weight draw is collapsed to its scalar preactivation law
    z ~ N(mu . a + beta, ||a||^2 + 1), which induces the same distribution
    on sign(z).
    """
    paths = sample_paths(post, X, T, rng)
    n = paths.x.shape[0]
    zbar = np.broadcast_to(paths.final_preact_mean, (T, n))
    std = np.broadcast_to(1.0 / paths.final_inv_std, (T, n))
    z = zbar + std * rng.standard_normal((T, n))
    return np.where(z >= 0.0, 1.0, -1.0)


def naive_forward(post: GaussianPosterior, x, T, rng) -> EstimatorOutput:
    """Monte-Carlo signed output for one input; per-sample values in {-1, 1}."""
    return _finish(naive_values(post, np.asarray(x, dtype=np.float64)[None, :], T, rng)[:, 0])


def aggregated_forward(post: GaussianPosterior, x, T, rng) -> EstimatorOutput:
    """Final-layer-aggregated output for one input: erf values per sampled path."""
    return _finish(aggregated_values(post, np.asarray(x, dtype=np.float64)[None, :], T, rng)[:, 0])


# ---------------------------------------------------------------------------
# exact aggregation by enumeration (small sign networks)
# ---------------------------------------------------------------------------


def _sign_configs(d: int) -> np.ndarray:
    """(2^d, d) matrix of every +-1 configuration."""
    idx = np.arange(2**d)
    return (((idx[:, None] >> np.arange(d)) & 1) * 2.0 - 1.0).astype(np.float64)


def _config_probs(p_plus: np.ndarray, configs: np.ndarray) -> np.ndarray:
    """Probability of each +-1 configuration under independent units.

    p_plus: (rows, d) per-unit probability of +1; configs: (C, d); result
    (rows, C) built factor by factor to bound memory.
    """
    rows = p_plus.shape[0]
    out = np.ones((rows, configs.shape[0]))
    for j in range(configs.shape[1]):
        pj = p_plus[:, j][:, None]
        out *= np.where(configs[:, j][None, :] > 0, pj, 1.0 - pj)
    return out


def exact_aggregate(post: GaussianPosterior, x) -> float:
    """Exactly aggregated output F(x): expectation over all hidden sign paths.

    Dynamic programme over per-layer sign configurations; refuses when the
    product of 2**width over hidden layers exceeds ENUMERATION_LIMIT, and
    requires sign hidden activations (there is nothing to enumerate for
    sigmoid/relu paths).
    """
    spec = post.spec
    x = np.asarray(x, dtype=np.float64)
    if spec.n_layers == 1:
        bias = post.biases[-1][0] if spec.use_bias else None
        return float(aggregate_erf(post.weights[-1], x, bias))
    if spec.hidden_activation != "sign":
        raise ValueError("exact aggregation is defined for sign hidden layers only")
    total = 1
    for d in spec.hidden_widths:
        total *= 2**d
    if total > ENUMERATION_LIMIT:
        raise EnumerationTooLargeError(
            f"{total} hidden configurations exceed the cap of {ENUMERATION_LIMIT}"
        )
    bias = lambda l: post.biases[l] if spec.use_bias else None
    configs = _sign_configs(spec.widths[1])
    p = _config_probs(
        np.atleast_2d(layer_conditional(post.weights[0], x, bias(0))), configs
    )  # (1, C1)
    for l in range(1, spec.n_layers - 1):
        nxt = _sign_configs(spec.widths[l + 1])
        pp = layer_conditional(post.weights[l], configs, bias(l))  # (C_l, d_{l+1})
        p = p @ _config_probs(pp, nxt)  # (1, C_{l+1})
        configs = nxt
    final_bias = post.biases[-1][0] if spec.use_bias else None
    vals = aggregate_erf(post.weights[-1], configs, final_bias)  # (C_last,)
    return float(p[0] @ vals)


def exact_aggregate_batch(post: GaussianPosterior, X) -> np.ndarray:
    """exact_aggregate for each row of X."""
    X = np.asarray(X, dtype=np.float64)
    return np.array([exact_aggregate(post, x) for x in X])


def expected_linear_loss_exact(post: GaussianPosterior, X, y) -> float:
    """Mean linear loss of the exactly aggregated output over a batch."""
    vals = exact_aggregate_batch(post, X)
    return float(np.mean(0.5 * (1.0 - np.asarray(y, dtype=np.float64) * vals)))
