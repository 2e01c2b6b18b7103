"""Dense numeric kernels: matrix/vector products, nonlinearities, softmax
cross-entropy, the Adam optimizer, and a central-difference gradient oracle.

Everything runs in float64; gradient checks below 1e-4 relative error are
not reachable in single precision. All stochastic call sites in the package
draw from generators built by :func:`child_rng`, so results depend only on
the root seed and the tag path, never on iteration order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

Array = np.ndarray

# -log(0) guard for degenerate predictions.
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


def as_f64(values) -> Array:
    return np.asarray(values, dtype=np.float64)


def matvec(m: Array, v: Array) -> Array:
    """Row-major matrix times vector: result[i] = sum_j m[i, j] * v[j]."""
    m = as_f64(m)
    v = as_f64(v)
    if m.ndim != 2 or v.ndim != 1:
        raise ShapeError(f"matvec expects (matrix, vector), got ndim {m.ndim} and {v.ndim}")
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: {m.shape} incompatible with vector of dim {v.shape[0]}")
    return m @ v


def relu(v: Array) -> Array:
    return np.maximum(0.0, as_f64(v))


def sigmoid(x: Array) -> Array:
    """Logistic function, stable for large |x|."""
    x = as_f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: Array) -> Array:
    """Probability vector from logits; max-subtracted so it never overflows."""
    logits = as_f64(logits)
    shifted = logits - np.max(logits)
    ex = np.exp(shifted)
    return ex / np.sum(ex)


def nll(probs: Array, target_index: int) -> float:
    """Negative log probability of the target, floored at PROB_FLOOR."""
    probs = as_f64(probs)
    if not 0 <= target_index < probs.shape[0]:
        raise IndexError(f"target index {target_index} out of range for dim {probs.shape[0]}")
    return float(-np.log(max(probs[target_index], PROB_FLOOR)))


def softmax_nll_grad(probs: Array, target_index: int) -> Array:
    """Gradient of nll(softmax(z), target) with respect to the logits z."""
    grad = as_f64(probs).copy()
    grad[target_index] -= 1.0
    return grad


def one_hot(index: int, dim: int) -> Array:
    if not 0 <= index < dim:
        raise IndexError(f"one_hot index {index} out of range for dim {dim}")
    v = np.zeros(dim)
    v[index] = 1.0
    return v


@dataclass
class AdamState:
    """Moment buffers and schedule constants for one flat parameter vector."""

    step: int
    first_moment: Array
    second_moment: Array
    beta1: float
    beta2: float
    epsilon: float
    learning_rate: float

    @classmethod
    def init(cls, n_params: int, learning_rate: float,
             beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(step=0,
                   first_moment=np.zeros(n_params),
                   second_moment=np.zeros(n_params),
                   beta1=beta1, beta2=beta2, epsilon=epsilon,
                   learning_rate=learning_rate)


def adam_step(state: AdamState, params: Array, grads: Array) -> None:
    """Bias-corrected Adam update, applied to params in place."""
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeError(
            f"adam_step: params {params.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape} must all match")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * grads
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * grads * grads
    m_hat = state.first_moment / (1.0 - b1 ** state.step)
    v_hat = state.second_moment / (1.0 - b2 ** state.step)
    params -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def finite_diff_grad(f, x: Array, eps: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function of a flat vector.

    The oracle behind every gradient test in the package: O(dim) forward
    evaluations, no knowledge of any analytic backward pass.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_f64(x)
    grad = np.zeros_like(x)
    probe = x.copy()
    for i in range(x.shape[0]):
        probe[i] = x[i] + eps
        f_plus = float(f(probe))
        probe[i] = x[i] - eps
        f_minus = float(f(probe))
        probe[i] = x[i]
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"finite_diff_grad: non-finite objective at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def rel_error(analytic: Array, numeric: Array) -> float:
    """Max per-coordinate |a - n| / max(1, |a|); the gradient-check metric."""
    a = as_f64(analytic).ravel()
    n = as_f64(numeric).ravel()
    if a.shape != n.shape:
        raise ShapeError(f"rel_error: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def child_rng(root_seed: int, *path) -> np.random.Generator:
    """Independent generator for the stream named by (root_seed, *path).

    Tags may be ints or strings (e.g. ("shuffle", epoch, photo_id)); the
    same path always yields the same stream regardless of call order.
    """
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(_tag_to_int(t) for t in path))
    return np.random.default_rng(ss)


def derive_seed(root_seed: int, *path) -> int:
    """A plain integer seed for the stream named by (root_seed, *path)."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(_tag_to_int(t) for t in path))
    return int(ss.generate_state(1)[0])
