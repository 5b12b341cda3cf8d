"""Finite-difference verification of every gradient estimator.

Deterministic estimators (pathwise with frozen noise, the lambda derivative
of the certificate) are compared at tight relative tolerances.  Monte-Carlo
estimators are compared against finite differences of the *exact* aggregated
output / expected loss (computed by enumeration on tiny sign nets) within
three standard errors of the estimate.
"""

import math
from dataclasses import dataclass

import numpy as np

from .bounds import BoundConfig, lambda_gradient, penalty, phi_inverse
from .forward import (
    exact_aggregate,
    expected_linear_loss_exact,
    sample_reparam_paths,
)
from .gradients import (
    aggregated_final_draws,
    global_reinforce_grads,
    marginalized_reinforce_grads,
    pathwise_grads,
    reinforce_final_draws,
)
from .network import GaussianPosterior, NetworkSpec
from .rng import substream


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"gradcheck {self.name}: {'PASS' if self.passed else 'FAIL'} ({self.detail})"


def _get_flat(post: GaussianPosterior) -> np.ndarray:
    return np.concatenate([a.ravel() for a in post.param_arrays()])


def _set_flat(post: GaussianPosterior, flat: np.ndarray) -> None:
    pos = 0
    for a in post.param_arrays():
        a.ravel()[:] = flat[pos : pos + a.size]
        pos += a.size


def fd_grad(post: GaussianPosterior, fn, h: float) -> np.ndarray:
    """Central finite differences of fn(posterior) over every mean."""
    work = post.copy()
    base = _get_flat(post)
    out = np.empty(base.size)
    for i in range(base.size):
        v = base[i]
        base[i] = v + h
        _set_flat(work, base)
        fp = fn(work)
        base[i] = v - h
        _set_flat(work, base)
        fm = fn(work)
        base[i] = v
        out[i] = (fp - fm) / (2.0 * h)
    return out


def _mc_mean_se(draw_once, repeats: int):
    rows = np.stack([draw_once() for _ in range(repeats)])
    mean = rows.mean(axis=0)
    se = rows.std(axis=0, ddof=1) / math.sqrt(repeats)
    return mean, se


def _rel_check(name, est, ref, rel_tol, floor=1e-8) -> CheckResult:
    err = np.abs(est - ref)
    tol = rel_tol * np.maximum(np.abs(est), np.abs(ref)) + floor
    worst = float((err / tol).max())
    return CheckResult(
        name,
        bool(np.all(err <= tol)),
        f"max err/tol {worst:.3g} at rel_tol {rel_tol:g}",
    )


def _se_check(name, est, se, ref, floor=1e-9) -> CheckResult:
    err = np.abs(est - ref)
    tol = 3.0 * se + floor
    worst = float((err / tol).max())
    return CheckResult(
        name,
        bool(np.all(err <= tol)),
        f"max err / (3 se) {worst:.3g} over {est.size} coords",
    )


def _random_posterior_means(spec: NetworkSpec, rng, scale=0.7) -> GaussianPosterior:
    weights = [scale * rng.standard_normal(s) for s in spec.layer_shapes()]
    biases = (
        [scale * rng.standard_normal(s[0]) for s in spec.layer_shapes()]
        if spec.use_bias
        else None
    )
    return GaussianPosterior(spec, weights, biases)


def check_pathwise(
    activation: str,
    seed: int = 0,
    widths=(5, 4, 3, 1),
    T: int = 3,
    rel_tol: float = 1e-4,
    corrupt: bool = False,
) -> CheckResult:
    """Frozen-noise pathwise gradient vs exact finite differences."""
    rng = substream(seed, 100, 0 if activation == "sigmoid" else 1)
    spec = NetworkSpec(widths, activation, use_bias=True)
    post = _random_posterior_means(spec, rng)
    x = rng.standard_normal(widths[0])
    y = 1.0 if rng.random() < 0.5 else -1.0
    noises = [rng.standard_normal((T, 1, d)) for d in spec.hidden_widths]

    est = pathwise_grads(post, x, y, T, noises=noises).flat()
    if corrupt:
        est = -est

    def frozen_loss(p):
        vals = sample_reparam_paths(p, x[None], T, noises=noises).values_full[:, 0]
        return float(np.mean(0.5 * (1.0 - y * vals)))

    ref = fd_grad(post, frozen_loss, 1e-5)
    return _rel_check(f"pathwise-{activation}", est, ref, rel_tol)


def check_marginalized(
    seed: int = 0, widths=(2, 2, 1), total_samples: int = 1_000_000, repeats: int = 100
) -> CheckResult:
    """Marginalized REINFORCE output gradient vs FD of exact enumeration."""
    rng = substream(seed, 101)
    spec = NetworkSpec(widths, "sign", use_bias=True)
    post = _random_posterior_means(spec, rng)
    x = rng.standard_normal(widths[0])
    t_each = max(total_samples // repeats, 1)
    est, se = _mc_mean_se(
        lambda: marginalized_reinforce_grads(post, x, t_each, rng).flat(), repeats
    )
    ref = fd_grad(post, lambda p: exact_aggregate(p, x), 1e-5)
    return _se_check("marginalized-reinforce", est, se, ref)


def _final_slice(post: GaussianPosterior) -> slice:
    dim = post.spec.widths[-2] + (1 if post.spec.use_bias else 0)
    return slice(-dim, None)


def check_final_estimators(
    seed: int = 0, widths=(2, 2, 1), n_draws: int = 1_000_000
):
    """Both final-layer output-gradient estimators vs enumeration FD."""
    rng = substream(seed, 102)
    spec = NetworkSpec(widths, "sign", use_bias=True)
    post = _random_posterior_means(spec, rng)
    x = rng.standard_normal(widths[0])
    ref = fd_grad(post, lambda p: exact_aggregate(p, x), 1e-5)[_final_slice(post)]
    results = []
    for name, fn in (
        ("final-score", reinforce_final_draws),
        ("final-aggregated", aggregated_final_draws),
    ):
        draws = fn(post, x, n_draws, rng)
        est = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / math.sqrt(n_draws)
        results.append(_se_check(name, est, se, ref))
    return results


def check_global_reinforce(
    seed: int = 0,
    widths=(2, 2, 1),
    batch: int = 4,
    total_samples: int = 1_000_000,
    repeats: int = 50,
) -> CheckResult:
    """Global score-function loss gradient vs FD of the exact expected loss."""
    rng = substream(seed, 103)
    spec = NetworkSpec(widths, "sign", use_bias=True)
    post = _random_posterior_means(spec, rng)
    X = rng.standard_normal((batch, widths[0]))
    y = np.where(rng.random(batch) < 0.5, 1.0, -1.0)
    t_each = max(total_samples // repeats, 1)
    est, se = _mc_mean_se(
        lambda: global_reinforce_grads(post, X, y, t_each, rng)[0].flat(), repeats
    )
    ref = fd_grad(post, lambda p: expected_linear_loss_exact(p, X, y), 1e-5)
    return _se_check("global-reinforce", est, se, ref)


def unclipped_bound(risk: float, kl: float, cfg: BoundConfig) -> float:
    """The smooth certificate composition without the vacuous clip."""
    return phi_inverse(cfg.lam / cfg.m, risk + penalty(kl, cfg))


def check_lambda_gradient(
    seed: int = 0, n_configs: int = 100, rel_tol: float = 1e-5
) -> CheckResult:
    """Closed-form d bound / d lambda vs central FD on random configs."""
    rng = substream(seed, 104)
    worst = 0.0
    ok = True
    for _ in range(n_configs):
        m = int(10 ** rng.uniform(2, 5))
        delta = float(rng.uniform(0.01, 0.2))
        alpha = float(rng.uniform(1.2, 4.0))
        lam = float(10 ** rng.uniform(math.log10(2.0), math.log10(10.0 * m)))
        risk = float(rng.uniform(0.0, 0.9))
        kl = float(rng.uniform(0.0, 5000.0))
        cfg = BoundConfig(m=m, delta=delta, alpha=alpha, lam=lam)
        analytic = lambda_gradient(risk, kl, cfg)
        h = 1e-4 * lam
        fp = unclipped_bound(risk, kl, BoundConfig(m=m, delta=delta, alpha=alpha, lam=lam + h))
        fm = unclipped_bound(risk, kl, BoundConfig(m=m, delta=delta, alpha=alpha, lam=lam - h))
        fd = (fp - fm) / (2.0 * h)
        tol = rel_tol * max(abs(analytic), abs(fd)) + 1e-11
        ratio = abs(analytic - fd) / tol
        worst = max(worst, ratio)
        ok = ok and ratio <= 1.0
    return CheckResult(
        "lambda-gradient", ok, f"max err/tol {worst:.3g} over {n_configs} configs"
    )


def run_all(seed: int = 0, fast: bool = False, corrupt: bool = False):
    """Every check; ``fast`` shrinks Monte-Carlo sizes for smoke testing."""
    mc = 200_000 if fast else 1_000_000
    results = [
        check_pathwise("sigmoid", seed, corrupt=corrupt),
        check_pathwise("relu", seed),
        check_marginalized(seed, total_samples=mc),
    ]
    results.extend(check_final_estimators(seed, n_draws=mc))
    results.append(check_global_reinforce(seed, total_samples=mc))
    results.append(check_lambda_gradient(seed, n_configs=20 if fast else 100))
    return results
