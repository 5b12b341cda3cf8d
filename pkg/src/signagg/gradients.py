"""Gradient estimators for the stochastic network's mean parameters.

Final layer (gradients of the signed-output estimate wrt the output unit's
mean weights):

* score-function: sign(w . eta) * (w - mu) over fresh weight draws w;
* aggregated: the exact gradient of erf(mean / sqrt(2 var)) per sampled path,
  sqrt(2/pi) * exp(-u^2) / sqrt(var) * eta — never higher covariance.

Whole-network estimators:

* marginalized REINFORCE (sign hidden layers): per-unit score of the exact
  sampling conditionals, weighted by the path's aggregated output value;
* pathwise (sigmoid/relu hidden layers): backpropagation through the local
  reparameterisation z = mean + sqrt(var) * eps with the noise held fixed;
* global REINFORCE baseline: T full parameter draws shared across the
  minibatch, each weighted by its mean minibatch loss (no baseline term).
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .forward import (
    ReparamPaths,
    SignPaths,
    sample_paths,
    sample_reparam_paths,
    sample_sign_paths,
)
from .network import GaussianPosterior

_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


@dataclass
class GradEstimate:
    """Per-layer gradient arrays, shape-matched to the posterior means."""

    weights: list
    biases: list
    sample_count: int

    def flat(self) -> np.ndarray:
        arrays = []
        for i, w in enumerate(self.weights):
            arrays.append(w.ravel())
            if self.biases is not None:
                arrays.append(self.biases[i].ravel())
        return np.concatenate(arrays)


@dataclass
class FinalGrad:
    """Final-layer gradient estimate with its raw per-draw terms.

    Vectors are laid out as (weights..., bias) when the net uses biases.
    """

    mean: np.ndarray
    per_draw: np.ndarray


def _final_inputs(paths) -> np.ndarray:
    """(T, n, d) activations feeding the output unit."""
    if paths.acts:
        return paths.acts[-1]
    return np.broadcast_to(paths.x, (paths.sample_count,) + paths.x.shape)


# ---------------------------------------------------------------------------
# final-layer estimators
# ---------------------------------------------------------------------------


def reinforce_final_draws(post: GaussianPosterior, x, T: int, rng) -> np.ndarray:
    """(T, dim) per-draw score-function gradients sign(w.eta) * (w - mu)."""
    spec = post.spec
    X = np.asarray(x, dtype=np.float64)[None, :]
    paths = sample_paths(post, X, T, rng)
    eta = np.ascontiguousarray(_final_inputs(paths)[:, 0, :])  # (T, d)
    mu = post.weights[-1].reshape(-1)
    w = mu[None, :] + rng.standard_normal((T, mu.shape[0]))
    z = np.einsum("td,td->t", eta, w)
    score = w - mu[None, :]
    if spec.use_bias:
        beta = post.biases[-1][0]
        b = beta + rng.standard_normal(T)
        z = z + b
        score = np.concatenate([score, (b - beta)[:, None]], axis=1)
    signs = np.where(z >= 0.0, 1.0, -1.0)
    return signs[:, None] * score


def reinforce_final_grad(post: GaussianPosterior, x, T: int, rng) -> FinalGrad:
    """Score-function estimate of the output gradient wrt final-layer means."""
    draws = reinforce_final_draws(post, x, T, rng)
    return FinalGrad(draws.mean(axis=0), draws)


def aggregated_final_draws(post: GaussianPosterior, x, T: int, rng) -> np.ndarray:
    """(T, dim) per-path exact final-layer gradients of the erf aggregate."""
    spec = post.spec
    X = np.asarray(x, dtype=np.float64)[None, :]
    paths = sample_paths(post, X, T, rng)
    eta = _final_inputs(paths)[:, 0, :]  # (T, d)
    lead = paths.final_preact_mean.shape[0]
    cf = kernels.gauss_coeff(
        paths.final_preact_mean.reshape(-1, 1),
        paths.final_inv_scale.reshape(-1),
        paths.final_inv_std.reshape(-1),
    ).reshape(lead)
    cf = np.broadcast_to(cf, (T,))
    draws = cf[:, None] * eta
    if spec.use_bias:
        draws = np.concatenate([draws, cf[:, None]], axis=1)
    return np.array(draws)


def aggregated_final_grad(post: GaussianPosterior, x, T: int, rng) -> FinalGrad:
    """Aggregated (variance-reduced) final-layer output-gradient estimate."""
    draws = aggregated_final_draws(post, x, T, rng)
    return FinalGrad(draws.mean(axis=0), draws)


# ---------------------------------------------------------------------------
# whole-network estimators
# ---------------------------------------------------------------------------


def _zero_grads(post: GaussianPosterior):
    gw = [np.zeros_like(w) for w in post.weights]
    gb = None if post.biases is None else [np.zeros_like(b) for b in post.biases]
    return gw, gb


def _sign_grads_from_paths(
    post: GaussianPosterior, paths: SignPaths, coeff: np.ndarray
) -> GradEstimate:
    """Accumulate sign-network gradients with per-(sample, example) weights.

    ``coeff[t, i]`` multiplies path (t, i)'s gradient contribution; use 1/T
    for the plain output gradient or -y_i / (2 n T) for the batch linear-loss
    gradient.  Hidden layers get coeff * value * score; the final layer gets
    the exact per-path erf gradient.
    """
    T = paths.sample_count
    n = paths.x.shape[0]
    gw, gb = _zero_grads(post)
    # final layer
    lead = paths.final_preact_mean.shape[0]
    cf = kernels.gauss_coeff(
        paths.final_preact_mean.reshape(-1, 1),
        paths.final_inv_scale.reshape(-1),
        paths.final_inv_std.reshape(-1),
    ).reshape(lead, n)
    wf = coeff * np.broadcast_to(cf, (T, n))
    if paths.acts:
        eta = paths.acts[-1]
        d = eta.shape[2]
        gw[-1][0, :] = wf.reshape(-1) @ eta.reshape(-1, d)
    else:
        gw[-1][0, :] = wf.sum(axis=0) @ paths.x
    if gb is not None:
        gb[-1][0] = wf.sum()
    # hidden layers
    h = coeff * paths.values_full  # (T, n)
    for l, acts in enumerate(paths.acts):
        d = acts.shape[2]
        z = np.broadcast_to(paths.preact_means[l], (T, n, d))
        s_scale = np.broadcast_to(paths.inv_scale[l], (T, n))
        s_std = np.broadcast_to(paths.inv_std[l], (T, n))
        scores = kernels.score_coeff(
            acts.reshape(-1, d),
            np.ascontiguousarray(z).reshape(-1, d),
            np.ascontiguousarray(s_scale).reshape(-1),
            np.ascontiguousarray(s_std).reshape(-1),
        ).reshape(T, n, d)
        hg = h[:, :, None] * scores
        if l == 0:
            gw[l][...] = hg.sum(axis=0).T @ paths.x
        else:
            prev = paths.acts[l - 1]
            gw[l][...] = hg.reshape(-1, d).T @ prev.reshape(-1, prev.shape[2])
        if gb is not None:
            gb[l][...] = hg.sum(axis=(0, 1))
    return GradEstimate(gw, gb, T)


def marginalized_reinforce_grads(
    post: GaussianPosterior, x, T: int, rng
) -> GradEstimate:
    """Gradient of the aggregated output wrt every mean, for one input.

    Hidden layers: (1/T) sum_t value_t * d log q(a_t | a_prev) / d mean
    (score of the exact sign conditionals, weighted by the same path's
    aggregated output).  Final layer: the exact per-path erf gradient.
    """
    X = np.asarray(x, dtype=np.float64)[None, :]
    paths = sample_sign_paths(post, X, T, rng)
    coeff = np.full((T, 1), 1.0 / T)
    return _sign_grads_from_paths(post, paths, coeff)


def sign_loss_grads(post: GaussianPosterior, X, y, T: int, rng):
    """(grad of batch linear loss, batch risk, per-sample values) for sign nets."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    paths = sample_sign_paths(post, X, T, rng)
    coeff = np.broadcast_to(-y / (2.0 * n * T), (T, n))
    grad = _sign_grads_from_paths(post, paths, np.ascontiguousarray(coeff))
    values = paths.values_full
    risk = float(np.mean(0.5 * (1.0 - y * values.mean(axis=0))))
    return grad, risk, values


def _pathwise_grads_from_paths(
    post: GaussianPosterior, paths: ReparamPaths, coeff: np.ndarray
) -> GradEstimate:
    """Backpropagate coeff[t, i] * d value / d means through frozen noise."""
    spec = post.spec
    T = paths.sample_count
    n = paths.x.shape[0]
    gw, gb = _zero_grads(post)
    zf = np.broadcast_to(paths.final_preact_mean, (T, n))
    inv_scale = np.broadcast_to(paths.final_inv_scale, (T, n))
    inv_std = np.broadcast_to(paths.final_inv_std, (T, n))
    u = zf * inv_scale
    g_u = coeff * _TWO_OVER_SQRT_PI * np.exp(-u * u)  # d loss / d u
    c = g_u * inv_scale
    if paths.acts:
        eta = paths.acts[-1]
        gw[-1][0, :] = c.reshape(-1) @ eta.reshape(-1, eta.shape[2])
    else:
        gw[-1][0, :] = c.sum(axis=0) @ paths.x
    if gb is not None:
        gb[-1][0] = float(c.sum())
    if not paths.acts:
        return GradEstimate(gw, gb, T)
    # d u / d eta = w / sqrt(2 v) - u * eta / v
    wvec = post.weights[-1].reshape(-1)
    grad_a = c[:, :, None] * wvec[None, None, :] - (
        g_u * u * inv_std * inv_std
    )[:, :, None] * eta
    for l in range(len(paths.acts) - 1, -1, -1):
        z = paths.preacts[l]
        if spec.hidden_activation == "sigmoid":
            act_deriv = paths.acts[l] * (1.0 - paths.acts[l])
        else:
            act_deriv = (z > 0.0).astype(np.float64)
        delta = grad_a * act_deriv  # (T, n, d_l)
        d = delta.shape[2]
        if l > 0:
            prev = paths.acts[l - 1]
            gw[l][...] = delta.reshape(-1, d).T @ prev.reshape(-1, prev.shape[2])
        else:
            gw[l][...] = delta.sum(axis=0).T @ paths.x
        if gb is not None:
            gb[l][...] = delta.sum(axis=(0, 1))
        if l > 0:
            std = np.broadcast_to(paths.stds[l], (T, n))
            noise_dot = np.einsum("tnj,tnj->tn", delta, paths.noises[l])
            grad_a = delta @ post.weights[l] + (noise_dot / std)[:, :, None] * paths.acts[l - 1]
    return GradEstimate(gw, gb, T)


def pathwise_grads(
    post: GaussianPosterior, x, y, T: int, rng=None, noises=None
) -> GradEstimate:
    """Reparameterised gradient of the linear loss for one (x, y) pair.

    Pass ``noises`` to differentiate at fixed noise (finite-difference
    checks); otherwise fresh noise is drawn from ``rng``.
    """
    X = np.asarray(x, dtype=np.float64)[None, :]
    paths = sample_reparam_paths(post, X, T, rng=rng, noises=noises)
    coeff = np.full((T, 1), -float(y) / (2.0 * T))
    return _pathwise_grads_from_paths(post, paths, coeff)


def pathwise_loss_grads(post: GaussianPosterior, X, y, T: int, rng):
    """(grad of batch linear loss, batch risk, per-sample values) for
    sigmoid/relu nets."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    paths = sample_reparam_paths(post, X, T, rng=rng)
    coeff = np.ascontiguousarray(np.broadcast_to(-y / (2.0 * n * T), (T, n)))
    grad = _pathwise_grads_from_paths(post, paths, coeff)
    values = paths.values_full
    risk = float(np.mean(0.5 * (1.0 - y * values.mean(axis=0))))
    return grad, risk, values


def global_reinforce_grads(post: GaussianPosterior, X, y, T: int, rng):
    """(grad of batch linear loss, batch risk) via whole-network REINFORCE.

    Draws T complete parameter settings shared by every example, runs the
    deterministic network they induce, and weights each draw's score
    (theta - mean) by its mean minibatch loss.
    """
    spec = post.spec
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    w_draws, b_draws = [], []
    for l, w in enumerate(post.weights):
        w_draws.append(w[None, :, :] + rng.standard_normal((T,) + w.shape))
        if post.biases is not None:
            b_draws.append(post.biases[l][None, :] + rng.standard_normal((T, w.shape[0])))
    a = np.broadcast_to(X, (T,) + X.shape)  # (T, n, d0)
    for l in range(spec.n_layers - 1):
        z = np.matmul(a, w_draws[l].transpose(0, 2, 1))
        if post.biases is not None:
            z = z + b_draws[l][:, None, :]
        if spec.hidden_activation == "sign":
            a = np.where(z >= 0.0, 1.0, -1.0)
        elif spec.hidden_activation == "sigmoid":
            a = kernels.sigmoid_map(z)
        else:
            a = np.maximum(z, 0.0)
    z = np.matmul(a, w_draws[-1].transpose(0, 2, 1))[:, :, 0]
    if post.biases is not None:
        z = z + b_draws[-1][:, None, 0]
    f = np.where(z >= 0.0, 1.0, -1.0)  # (T, n)
    losses = 0.5 * (1.0 - y[None, :] * f)
    mean_loss = losses.mean(axis=1)  # (T,)
    gw, gb = _zero_grads(post)
    coef = mean_loss / T
    for l, w in enumerate(post.weights):
        gw[l][...] = np.tensordot(coef, w_draws[l] - w[None], axes=(0, 0))
        if gb is not None:
            gb[l][...] = np.tensordot(coef, b_draws[l] - post.biases[l][None], axes=(0, 0))
    return GradEstimate(gw, gb, T), float(losses.mean())
