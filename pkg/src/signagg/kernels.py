"""Hot element-wise kernels with selectable numpy / numba backends.

Every kernel exists in two functionally identical flavours: a vectorised numpy
implementation (built on scipy.special) and a numba ``@njit`` loop.  The active
flavour is chosen by :func:`set_backend` or the ``SIGNAGG_BACKEND`` environment
variable (``auto`` — numba when importable, numpy otherwise).

Design rules that keep the two lanes interchangeable:

* kernels are pure element-wise maps (plus per-row scalars); no reductions, so
  summation order never differs between lanes;
* all randomness is drawn *outside* the kernels (uniforms / normals are inputs),
  so a given draw produces the same result on either lane up to a few ulps;
* matrix products stay in numpy (BLAS) on both lanes.

Shapes: 2-D ``z`` of shape (rows, cols) with optional per-row scalars
(``inv_scale``, ``inv_std``) of shape (rows,).
"""

import math
import os

import numpy as np
from scipy import special as _sp

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is an install-time extra
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_SQRT_PI = math.sqrt(math.pi)


class BackendError(RuntimeError):
    """Requested compute backend is unavailable or unknown."""


# ---------------------------------------------------------------------------
# numpy lane
# ---------------------------------------------------------------------------


def _np_erf_map(x):
    return _sp.erf(x)


def _np_erf_scaled(z, inv_scale):
    return _sp.erf(z * inv_scale[:, None])


def _np_cond_prob_pos(z, inv_scale):
    return 0.5 * (1.0 + _sp.erf(z * inv_scale[:, None]))


def _np_sample_pm1(p, u):
    return np.where(u < p, 1.0, -1.0)


def _np_score_coeff(a, z, inv_scale, inv_std):
    # a * sqrt(2/pi) * inv_std / erfcx(-a*u) is the stable rewrite of
    # a * sqrt(2/pi) * inv_std * exp(-u^2) / (1 + a*erf(u)).
    u = z * inv_scale[:, None]
    return a * _SQRT_2_OVER_PI * inv_std[:, None] / _sp.erfcx(-a * u)


def _np_gauss_coeff(z, inv_scale, inv_std):
    u = z * inv_scale[:, None]
    return _SQRT_2_OVER_PI * np.exp(-u * u) * inv_std[:, None]


def _np_sigmoid_map(x):
    return _sp.expit(x)


def _np_adam_step(p, g, m, v, step, lr, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# numba lane
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _nb_erf_map(x):
        out = np.empty_like(x)
        flat_in = x.ravel()
        flat_out = out.ravel()
        for i in range(flat_in.size):
            flat_out[i] = math.erf(flat_in[i])
        return out

    @njit(cache=True)
    def _nb_erf_scaled(z, inv_scale):
        out = np.empty_like(z)
        for r in range(z.shape[0]):
            s = inv_scale[r]
            for c in range(z.shape[1]):
                out[r, c] = math.erf(z[r, c] * s)
        return out

    @njit(cache=True)
    def _nb_cond_prob_pos(z, inv_scale):
        out = np.empty_like(z)
        for r in range(z.shape[0]):
            s = inv_scale[r]
            for c in range(z.shape[1]):
                out[r, c] = 0.5 * (1.0 + math.erf(z[r, c] * s))
        return out

    @njit(cache=True)
    def _nb_sample_pm1(p, u):
        out = np.empty_like(p)
        flat_p = p.ravel()
        flat_u = u.ravel()
        flat_out = out.ravel()
        for i in range(flat_p.size):
            flat_out[i] = 1.0 if flat_u[i] < flat_p[i] else -1.0
        return out

    @njit(cache=True)
    def _nb_score_coeff(a, z, inv_scale, inv_std):
        out = np.empty_like(z)
        for r in range(z.shape[0]):
            s = inv_scale[r]
            w = _SQRT_2_OVER_PI * inv_std[r]
            for c in range(z.shape[1]):
                u = z[r, c] * s
                sign = a[r, c]
                t = -sign * u
                if t < 25.0:
                    out[r, c] = sign * w * math.exp(-u * u) / math.erfc(t)
                else:
                    # 1/erfcx(t) by 3-term asymptotic; rel. err < 1e-9 for t >= 25
                    tt = t * t
                    out[r, c] = (
                        sign * w * t * _SQRT_PI / (1.0 - 0.5 / tt + 0.75 / (tt * tt))
                    )
        return out

    @njit(cache=True)
    def _nb_gauss_coeff(z, inv_scale, inv_std):
        out = np.empty_like(z)
        for r in range(z.shape[0]):
            s = inv_scale[r]
            w = _SQRT_2_OVER_PI * inv_std[r]
            for c in range(z.shape[1]):
                u = z[r, c] * s
                out[r, c] = w * math.exp(-u * u)
        return out

    @njit(cache=True)
    def _nb_sigmoid_map(x):
        out = np.empty_like(x)
        flat_in = x.ravel()
        flat_out = out.ravel()
        for i in range(flat_in.size):
            flat_out[i] = 1.0 / (1.0 + math.exp(-flat_in[i]))
        return out

    @njit(cache=True)
    def _nb_adam_step(p, g, m, v, step, lr, beta1, beta2, eps):
        bc1 = 1.0 - beta1**step
        bc2 = 1.0 - beta2**step
        for i in range(p.size):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] -= lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)


_NUMPY_IMPLS = {
    "erf_map": _np_erf_map,
    "erf_scaled": _np_erf_scaled,
    "cond_prob_pos": _np_cond_prob_pos,
    "sample_pm1": _np_sample_pm1,
    "score_coeff": _np_score_coeff,
    "gauss_coeff": _np_gauss_coeff,
    "sigmoid_map": _np_sigmoid_map,
    "adam_step": _np_adam_step,
}

if HAS_NUMBA:
    _NUMBA_IMPLS = {
        "erf_map": _nb_erf_map,
        "erf_scaled": _nb_erf_scaled,
        "cond_prob_pos": _nb_cond_prob_pos,
        "sample_pm1": _nb_sample_pm1,
        "score_coeff": _nb_score_coeff,
        "gauss_coeff": _nb_gauss_coeff,
        "sigmoid_map": _nb_sigmoid_map,
        "adam_step": _nb_adam_step,
    }
else:
    _NUMBA_IMPLS = {}


def _resolve(name: str) -> str:
    if name == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    if name == "numba":
        if not HAS_NUMBA:
            raise BackendError("numba backend requested but numba is not importable")
        return "numba"
    if name == "numpy":
        return "numpy"
    raise BackendError(f"unknown backend {name!r}; expected auto, numba or numpy")


_ACTIVE = _resolve(os.environ.get("SIGNAGG_BACKEND", "auto"))


def get_backend() -> str:
    """Name of the active kernel backend ('numpy' or 'numba')."""
    return _ACTIVE


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the resolved name."""
    global _ACTIVE
    _ACTIVE = _resolve(name)
    return _ACTIVE


def available_backends():
    return ("numpy", "numba") if HAS_NUMBA else ("numpy",)


def _impl(name):
    table = _NUMBA_IMPLS if _ACTIVE == "numba" else _NUMPY_IMPLS
    return table[name]


# ---------------------------------------------------------------------------
# dispatching wrappers (the public kernel API)
# ---------------------------------------------------------------------------


def erf_map(x: np.ndarray) -> np.ndarray:
    """Element-wise erf."""
    return _impl("erf_map")(np.ascontiguousarray(x, dtype=np.float64))


def erf_scaled(z: np.ndarray, inv_scale: np.ndarray) -> np.ndarray:
    """erf(z[r, c] * inv_scale[r]) for 2-D z with one scale per row."""
    return _impl("erf_scaled")(
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(inv_scale, dtype=np.float64),
    )


def cond_prob_pos(z: np.ndarray, inv_scale: np.ndarray) -> np.ndarray:
    """P(unit = +1) = (1 + erf(z * inv_scale)) / 2, row-scaled."""
    return _impl("cond_prob_pos")(
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(inv_scale, dtype=np.float64),
    )


def sample_pm1(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Map uniforms u in [0,1) to +-1 with P(+1) = p, element-wise."""
    return _impl("sample_pm1")(
        np.ascontiguousarray(p, dtype=np.float64),
        np.ascontiguousarray(u, dtype=np.float64),
    )


def score_coeff(
    a: np.ndarray, z: np.ndarray, inv_scale: np.ndarray, inv_std: np.ndarray
) -> np.ndarray:
    """Per-unit log-probability derivative coefficient for sampled signs.

    With u = z * inv_scale, returns a * sqrt(2/pi) * inv_std / erfcx(-a * u),
    which equals a * sqrt(2/pi) * inv_std * exp(-u^2) / (1 + a * erf(u)) but
    stays finite when the unit is saturated.
    """
    return _impl("score_coeff")(
        np.ascontiguousarray(a, dtype=np.float64),
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(inv_scale, dtype=np.float64),
        np.ascontiguousarray(inv_std, dtype=np.float64),
    )


def gauss_coeff(
    z: np.ndarray, inv_scale: np.ndarray, inv_std: np.ndarray
) -> np.ndarray:
    """sqrt(2/pi) * exp(-(z * inv_scale)^2) * inv_std, row-scaled."""
    return _impl("gauss_coeff")(
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(inv_scale, dtype=np.float64),
        np.ascontiguousarray(inv_std, dtype=np.float64),
    )


def sigmoid_map(x: np.ndarray) -> np.ndarray:
    """Element-wise logistic sigmoid."""
    return _impl("sigmoid_map")(np.ascontiguousarray(x, dtype=np.float64))


def adam_step(p, g, m, v, step, lr, beta1, beta2, eps):
    """One in-place Adam update on flat float64 arrays."""
    _impl("adam_step")(
        p, np.ascontiguousarray(g, dtype=np.float64), m, v,
        int(step), float(lr), float(beta1), float(beta2), float(eps),
    )
