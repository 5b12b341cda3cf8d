"""Training loops: bound optimisation for stochastic nets, plus a
deterministic relu/tanh baseline trained on the same linear loss.

Protocol shared by the stochastic objectives:

* minimise empirical linear risk + KL / lambda with Adam (batch 256);
* every ``eval_every`` epochs evaluate train/test risk on the full splits and
  the certificate minimised over a lambda grid; halve the learning rate when
  the certificate failed to improve on the best of the previous two
  evaluations; abandon the run early when the full-train linear risk is still
  above ``early_stop_loss`` at epoch ``early_stop_epoch``;
* ``optim_lambda`` updates lambda by plain SGD on odd-indexed minibatches
  (using the exact d bound / d lambda) and the posterior on even-indexed
  ones; lambda never enters Adam;
* ``reinforce`` swaps the gradient estimator for the global score-function
  one (T full weight draws shared across the minibatch) but keeps everything
  else identical.

The best posterior is the evaluated epoch with the smallest non-vacuous
certificate, falling back to smallest train linear risk when every
certificate is vacuous (always, for the baseline).
"""

import csv
import math
import time
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from . import kernels, rng as rng_mod
from .bounds import (
    DEFAULT_ALPHA,
    DEFAULT_DELTA,
    GRID_LOW_FLOOR,
    BoundConfig,
    lambda_gradient,
    min_bound_over_lambda,
)
from .core import sample_trunc_normal
from .data import Dataset, minibatches
from .forward import aggregated_values, naive_values
from .gradients import (
    global_reinforce_grads,
    pathwise_loss_grads,
    sign_loss_grads,
)
from .network import GaussianPosterior, NetworkSpec, init_posterior, kl_divergence

OBJECTIVES = ("fix_lambda", "optim_lambda", "reinforce", "mlp")

EVAL_CHUNK = 4096  # examples per evaluation chunk; fixed so runs reproduce

CSV_COLUMNS = (
    "epoch",
    "train_linear",
    "test_linear",
    "test_01",
    "test_mv01",
    "kl",
    "bound",
    "bound_lambda",
    "lr",
    "lambda",
)


class ConfigError(ValueError):
    """Invalid or unknown training-config contents."""


def linear_loss(values, labels):
    """Element-wise linear loss (1 - y * v) / 2; 0-1 loss on signed values."""
    return 0.5 * (1.0 - np.asarray(labels) * np.asarray(values))


class Adam:
    """Standard Adam (bias-corrected), updating parameter arrays in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = [np.zeros(p.size) for p in self.params]
        self._v = [np.zeros(p.size) for p in self.params]

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.step_count += 1
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            kernels.adam_step(
                p.reshape(-1), g.reshape(-1), m, v,
                self.step_count, self.lr, self.beta1, self.beta2, self.eps,
            )


@dataclass
class TrainConfig:
    """Everything a run needs besides the data and the master seed.

    ``widths`` lists every layer width input-to-output (output must be 1).
    ``lambda_init`` of None means lambda = m (the fix-lambda setting).
    ``eval_samples`` of None reuses ``train_samples`` at evaluation time.
    """

    objective: str = "fix_lambda"
    widths: tuple = (784, 100, 1)
    hidden_activation: str = "sign"
    use_bias: bool = True
    learning_rate: float = 0.01
    train_samples: int = 10
    batch_size: int = 256
    epochs: int = 200
    lambda_init: float = None
    lambda_lr: float = 1e-4
    delta: float = DEFAULT_DELTA
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    eval_every: int = 5
    eval_samples: int = None
    early_stop_loss: float = 0.45
    early_stop_epoch: int = 10
    init_variance: float = 0.05
    compute_majority_vote: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        self.widths = tuple(int(w) for w in self.widths)
        for name in ("learning_rate", "lambda_lr", "init_variance"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("train_samples", "batch_size", "epochs", "eval_every", "early_stop_epoch"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
            setattr(self, name, int(getattr(self, name)))
        if self.eval_samples is not None and int(self.eval_samples) < 1:
            raise ConfigError(f"eval_samples must be >= 1, got {self.eval_samples}")
        if self.eval_samples is not None:
            self.eval_samples = int(self.eval_samples)
        if self.lambda_init is not None and not float(self.lambda_init) > 0:
            raise ConfigError(f"lambda_init must be positive, got {self.lambda_init}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.alpha > 1.0:
            raise ConfigError(f"alpha must exceed 1, got {self.alpha}")
        if self.objective == "mlp" and self.hidden_activation != "relu":
            raise ConfigError("the mlp baseline uses relu hidden units")
        # NetworkSpec performs the width/activation checks
        self.network_spec()

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(self.widths, self.hidden_activation, self.use_bias)

    @property
    def eval_t(self) -> int:
        return self.train_samples if self.eval_samples is None else self.eval_samples

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out


@dataclass
class EvalRow:
    """Metrics recorded at one evaluated epoch (nan = not applicable)."""

    epoch: int
    train_linear: float
    test_linear: float
    test_01: float
    test_mv01: float
    kl: float
    bound: float
    bound_lambda: float
    lr: float
    lam: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class RunRecord:
    """Full trace of one training run plus the selected-epoch summary."""

    config: dict
    seed: int
    m: int
    backend: str
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    selected_by: str = ""
    best_row: dict = None
    terminated_early: bool = False
    final_lambda: float = float("nan")
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rows"] = [r.to_dict() for r in self.rows]
        return out


@dataclass
class TrainResult:
    record: RunRecord
    best_posterior: object
    final_posterior: object


def write_rows_csv(rows, path) -> None:
    """Fixed-schema CSV of evaluation rows; nan cells are left empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            d = row.to_dict()
            out = []
            for col in CSV_COLUMNS:
                val = d[col]
                if isinstance(val, float) and math.isnan(val):
                    out.append("")
                else:
                    out.append(repr(val) if isinstance(val, float) else str(val))
            writer.writerow(out)


def evaluate(post: GaussianPosterior, ds: Dataset, T: int, rng, majority_vote=False):
    """Full-split risk estimates: mean linear loss of the aggregated output,
    plus optionally the majority-vote 0-1 error of naive sign draws.

    Chunked at EVAL_CHUNK examples to bound memory; the chunk size is part of
    the deterministic sampling layout.
    """
    total_linear = 0.0
    total_mv = 0.0
    n = len(ds)
    for start in range(0, n, EVAL_CHUNK):
        X = ds.inputs[start : start + EVAL_CHUNK]
        y = ds.labels[start : start + EVAL_CHUNK]
        vals = aggregated_values(post, X, T, rng).mean(axis=0)
        total_linear += float(linear_loss(vals, y).sum())
        if majority_vote:
            votes = naive_values(post, X, T, rng).mean(axis=0)
            pred = np.where(votes >= 0.0, 1.0, -1.0)
            total_mv += float((pred != y).sum())
    return {
        "linear": total_linear / n,
        "mv01": (total_mv / n) if majority_vote else float("nan"),
    }


def _loss_grads(cfg: TrainConfig, post, X, y, rng):
    if cfg.objective == "reinforce":
        grad, risk = global_reinforce_grads(post, X, y, cfg.train_samples, rng)
    elif cfg.hidden_activation == "sign":
        grad, risk, _ = sign_loss_grads(post, X, y, cfg.train_samples, rng)
    else:
        grad, risk, _ = pathwise_loss_grads(post, X, y, cfg.train_samples, rng)
    return grad, risk


def train_run(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset, on_batch=None) -> TrainResult:
    """Run one stochastic-network training job (see module docstring).

    ``on_batch(epoch, batch_index, kind, lam)`` with kind in
    {"params", "lambda"} fires after every minibatch step; tests use it to
    check the alternation contract.
    """
    if cfg.objective == "mlp":
        return train_mlp_baseline(cfg, train_ds, test_ds)
    start_time = time.perf_counter()
    m = len(train_ds)
    spec = cfg.network_spec()
    post = init_posterior(spec, rng_mod.substream(cfg.seed, rng_mod.INIT), cfg.init_variance)
    prior = post.frozen_copy()
    adam = Adam(post.param_arrays(), cfg.learning_rate)
    lam = float(m) if cfg.lambda_init is None else float(cfg.lambda_init)
    record = RunRecord(
        config=cfg.to_dict(), seed=cfg.seed, m=m, backend=kernels.get_backend()
    )
    best_bound, best_loss = None, None
    best_bound_state, best_loss_state = None, None
    bound_history = []
    for epoch in range(1, cfg.epochs + 1):
        shuffle_rng = rng_mod.substream(cfg.seed, rng_mod.SHUFFLE, epoch)
        path_rng = rng_mod.substream(cfg.seed, rng_mod.PATHS, epoch)
        for b_idx, (Xb, yb) in enumerate(minibatches(train_ds, cfg.batch_size, shuffle_rng)):
            if cfg.objective == "optim_lambda" and b_idx % 2 == 1:
                vals = aggregated_values(post, Xb, cfg.train_samples, path_rng).mean(axis=0)
                risk_b = float(linear_loss(vals, yb).mean())
                kl = kl_divergence(post, prior)
                grad_lam = lambda_gradient(
                    risk_b, kl, BoundConfig(m=m, delta=cfg.delta, alpha=cfg.alpha, lam=lam)
                )
                lam = max(lam - cfg.lambda_lr * grad_lam, GRID_LOW_FLOOR)
                if on_batch is not None:
                    on_batch(epoch, b_idx, "lambda", lam)
                continue
            grad, _ = _loss_grads(cfg, post, Xb, yb, path_rng)
            grads = []
            for l, gw in enumerate(grad.weights):
                grads.append(gw + (post.weights[l] - prior.weights[l]) / lam)
                if grad.biases is not None:
                    grads.append(grad.biases[l] + (post.biases[l] - prior.biases[l]) / lam)
            adam.step(grads)
            if on_batch is not None:
                on_batch(epoch, b_idx, "params", lam)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            train_eval = evaluate(
                post, train_ds, cfg.eval_t, rng_mod.substream(cfg.seed, rng_mod.EVAL, epoch, 0)
            )
            test_eval = evaluate(
                post,
                test_ds,
                cfg.eval_t,
                rng_mod.substream(cfg.seed, rng_mod.EVAL, epoch, 1),
                majority_vote=cfg.compute_majority_vote,
            )
            kl = kl_divergence(post, prior)
            report = min_bound_over_lambda(
                train_eval["linear"], kl, m, delta=cfg.delta, alpha=cfg.alpha
            )
            row = EvalRow(
                epoch=epoch,
                train_linear=train_eval["linear"],
                test_linear=test_eval["linear"],
                test_01=test_eval["linear"],
                test_mv01=test_eval["mv01"],
                kl=kl,
                bound=report.bound_value,
                bound_lambda=report.minimizing_lambda,
                lr=adam.lr,
                lam=lam,
            )
            record.rows.append(row)
            if not report.vacuous and (best_bound is None or report.bound_value < best_bound):
                best_bound = report.bound_value
                best_bound_state = (epoch, post.copy(), row)
            if best_loss is None or train_eval["linear"] < best_loss:
                best_loss = train_eval["linear"]
                best_loss_state = (epoch, post.copy(), row)
            if len(bound_history) >= 2 and report.bound_value >= min(bound_history[-2:]):
                adam.lr /= 2.0
            bound_history.append(report.bound_value)
            if epoch == cfg.early_stop_epoch and train_eval["linear"] > cfg.early_stop_loss:
                record.terminated_early = True
                break
    if best_bound_state is not None:
        record.selected_by = "bound"
        best_epoch, best_post, best_row = best_bound_state
    else:
        record.selected_by = "train_linear"
        best_epoch, best_post, best_row = best_loss_state
    record.best_epoch = best_epoch
    record.best_row = best_row.to_dict()
    record.final_lambda = lam
    record.wall_time_s = time.perf_counter() - start_time
    return TrainResult(record, best_post, post)


# ---------------------------------------------------------------------------
# deterministic baseline
# ---------------------------------------------------------------------------


class _Mlp:
    """Plain relu net with a tanh output unit, trained on the linear loss."""

    def __init__(self, spec: NetworkSpec, rng, init_variance):
        self.spec = spec
        self.weights = [
            sample_trunc_normal(rng, shape, init_variance) for shape in spec.layer_shapes()
        ]
        self.biases = [np.zeros(shape[0]) for shape in spec.layer_shapes()]

    def param_arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, X):
        a = X
        hidden = []
        for l in range(self.spec.n_layers - 1):
            a = np.maximum(a @ self.weights[l].T + self.biases[l], 0.0)
            hidden.append(a)
        z = a @ self.weights[-1].reshape(-1) + self.biases[-1][0]
        return hidden, z

    def loss_grads(self, X, y):
        hidden, z = self.forward(X)
        out = np.tanh(z)
        n = X.shape[0]
        risk = float(linear_loss(out, y).mean())
        dz = (-y / (2.0 * n)) * (1.0 - out * out)
        grads = [None] * (2 * self.spec.n_layers)
        a_prev = hidden[-1] if hidden else X
        grads[-2] = (dz @ a_prev).reshape(1, -1)
        grads[-1] = np.array([dz.sum()])
        grad_a = dz[:, None] * self.weights[-1].reshape(-1)[None, :]
        for l in range(self.spec.n_layers - 2, -1, -1):
            delta = grad_a * (hidden[l] > 0.0)
            prev = hidden[l - 1] if l > 0 else X
            grads[2 * l] = delta.T @ prev
            grads[2 * l + 1] = delta.sum(axis=0)
            if l > 0:
                grad_a = delta @ self.weights[l]
        return grads, risk


def train_mlp_baseline(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset) -> TrainResult:
    """Train the deterministic baseline; evaluates every epoch and selects
    the epoch with the smallest train linear loss (it has no certificate)."""
    start_time = time.perf_counter()
    m = len(train_ds)
    spec = cfg.network_spec()
    net = _Mlp(spec, rng_mod.substream(cfg.seed, rng_mod.INIT), cfg.init_variance)
    adam = Adam(net.param_arrays(), cfg.learning_rate)
    record = RunRecord(
        config=cfg.to_dict(), seed=cfg.seed, m=m, backend=kernels.get_backend()
    )
    nan = float("nan")
    best_loss, best_state = None, None
    for epoch in range(1, cfg.epochs + 1):
        shuffle_rng = rng_mod.substream(cfg.seed, rng_mod.SHUFFLE, epoch)
        for Xb, yb in minibatches(train_ds, cfg.batch_size, shuffle_rng):
            grads, _ = net.loss_grads(Xb, yb)
            adam.step(grads)
        _, z_train = net.forward(train_ds.inputs)
        _, z_test = net.forward(test_ds.inputs)
        train_linear = float(linear_loss(np.tanh(z_train), train_ds.labels).mean())
        test_linear = float(linear_loss(np.tanh(z_test), test_ds.labels).mean())
        pred = np.where(z_test >= 0.0, 1.0, -1.0)
        test_01 = float((pred != test_ds.labels).mean())
        row = EvalRow(
            epoch=epoch,
            train_linear=train_linear,
            test_linear=test_linear,
            test_01=test_01,
            test_mv01=nan,
            kl=nan,
            bound=nan,
            bound_lambda=nan,
            lr=adam.lr,
            lam=nan,
        )
        record.rows.append(row)
        if best_loss is None or train_linear < best_loss:
            best_loss = train_linear
            best_state = (epoch, [w.copy() for w in net.weights], row)
    best_epoch, _, best_row = best_state
    record.best_epoch = best_epoch
    record.selected_by = "train_linear"
    record.best_row = best_row.to_dict()
    record.wall_time_s = time.perf_counter() - start_time
    return TrainResult(record, None, net)
