"""Dense numerical core: float64 tensors, encoder building blocks, gradient checking.

Tensors are plain ``numpy.ndarray`` of dtype float64 and are treated as
immutable values by every public operation. All randomness flows through
:class:`SeededRng`, a counter-based (Philox) generator keyed by an explicit
seed plus named substreams, so any computation is reproducible from its seed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
GELU_CUBIC = 0.044715


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces or receives NaN/Inf values."""


def assert_finite(x: np.ndarray, context: str = "tensor") -> np.ndarray:
    """Raise NonFiniteError unless every entry of ``x`` is finite."""
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {context}")
    return x


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def _stream_key(name) -> int:
    if isinstance(name, str):
        return zlib.crc32(name.encode("utf-8"))
    return int(name) & 0xFFFFFFFF


class SeededRng:
    """Counter-based RNG: identical (seed, stream path) gives an identical draw stream."""

    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed)
        self.stream = tuple(_stream_key(s) for s in stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *names) -> "SeededRng":
        """Derive an independent substream; names may be strings or ints."""
        return SeededRng(self.seed, self.stream + tuple(names))

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape).astype(np.float64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float64)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# Blocks (forward)
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Normalize the last axis to zero mean / unit population variance, then affine."""
    if eps <= 0:
        # eps == 0 is allowed for exact hand checks on non-constant inputs
        if eps < 0:
            raise ValueError("eps must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != np.shape(gamma)[-1] or x.shape[-1] != np.shape(beta)[-1]:
        raise DimensionError(f"layer_norm shape mismatch: x {x.shape}, gamma {np.shape(gamma)}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return gamma * xhat + beta


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-12):
    """layer_norm that also returns the cache needed for the backward pass."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def layer_norm_bwd(dy: np.ndarray, cache):
    """Gradients of layer_norm: returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (max-subtraction)."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(dprobs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Backward of softmax_rows given output probs and upstream gradient."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def gelu_fwd(x: np.ndarray):
    """GELU activation, tanh approximation; returns (value, tanh term).

    The tanh term is the expensive part of the derivative, so callers that
    will run a backward pass should keep it and hand it to gelu_grad.
    """
    x = np.asarray(x, dtype=np.float64)
    u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU activation, tanh approximation."""
    return gelu_fwd(x)[0]


def gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """Elementwise derivative of the tanh-form GELU.

    ``t`` is the cached tanh term from gelu_fwd; recomputed when absent.
    """
    if t is None:
        u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x ** 3)
        t = np.tanh(u)
    du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du


def dropout_mask(shape, rate: float, rng: SeededRng) -> np.ndarray:
    """Inverted-dropout multiplier: entries are 0 or 1/(1-rate)."""
    keep = rng.uniform(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def dropout(x: np.ndarray, rate: float, train_mode: bool, rng: SeededRng | None = None) -> np.ndarray:
    """Inverted dropout. Identity when train_mode is off or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not train_mode or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    return x * dropout_mask(x.shape, rate, rng)


# ---------------------------------------------------------------------------
# Parameters and gradient checking
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    """A named learnable array with a same-shaped gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"parameter {self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}"
            )


@dataclass
class GradCheckReport:
    """Per-parameter relative errors from a central-difference gradient check."""

    rel_error: dict = field(default_factory=dict)
    failed: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_error.values()) if self.rel_error else 0.0

    @property
    def ok(self) -> bool:
        return not self.failed


def finite_diff_check(loss_fn, params: dict, analytic_grads: dict,
                      step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    ``loss_fn`` maps the (mutable-in-place) param dict to a scalar and must be
    deterministic; ``analytic_grads`` holds one array per param name. Relative
    error per entry is |a - n| / max(|a|, |n|, 1e-8); a parameter fails when
    its max relative error exceeds ``tol``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    report = GradCheckReport(tol=tol)
    for name, value in params.items():
        grad = np.asarray(analytic_grads[name], dtype=np.float64)
        flat = value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn(params)
            flat[i] = orig - step
            lm = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteError(f"non-finite loss while perturbing parameter {name!r}")
            numeric = (lp - lm) / (2.0 * step)
            analytic = grad.reshape(-1)[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
        report.rel_error[name] = worst
        if worst > tol:
            report.failed.append(name)
    return report
