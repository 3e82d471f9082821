"""The four hidden activation functions and their analytic derivatives.

Each kind is selectable by the exact name accepted in config files and CLI
flags: ``relu``, ``gelu``, ``gelu_new``, ``silu``. The analytic derivative is
what the autodiff backward pass uses, so gradient checks of any encoder also
exercise these closed forms.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

from .tensor import Tensor, _make

__all__ = ["ACTIVATION_KINDS", "activation_value", "activation_derivative", "activate", "activate_grad"]

ACTIVATION_KINDS = ("relu", "gelu", "gelu_new", "silu")

_SQRT_2 = np.sqrt(2.0)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_GELU_NEW_CUBIC = 0.044715


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _std_normal_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + _erf(x / _SQRT_2))


def activation_value(kind: str, x: np.ndarray) -> np.ndarray:
    """Elementwise activation value on a plain array."""
    x = np.asarray(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "gelu":
        # x * Phi(x), with the exact Gaussian CDF.
        return x * _std_normal_cdf(x)
    if kind == "gelu_new":
        inner = _SQRT_2_OVER_PI * (x + _GELU_NEW_CUBIC * x * x * x)
        return 0.5 * x * (1.0 + np.tanh(inner))
    if kind == "silu":
        # x * sigmoid(x) == x / (1 + e^-x), computed overflow-free.
        return x * _sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}; expected one of {ACTIVATION_KINDS}")


def activation_derivative(kind: str, x: np.ndarray) -> np.ndarray:
    """Elementwise analytic derivative on a plain array.

    The relu derivative at exactly 0 is taken as 0 (subgradient choice).
    """
    x = np.asarray(x)
    if kind == "relu":
        return (x > 0).astype(x.dtype if x.dtype.kind == "f" else np.float64)
    if kind == "gelu":
        # Phi(x) + x * phi(x)
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return _std_normal_cdf(x) + x * pdf
    if kind == "gelu_new":
        inner = _SQRT_2_OVER_PI * (x + _GELU_NEW_CUBIC * x * x * x)
        t = np.tanh(inner)
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_NEW_CUBIC * x * x)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
    if kind == "silu":
        # Equals (1 + e^-x + x e^-x) / (1 + e^-x)^2, rewritten via sigmoid
        # so large negative inputs do not overflow.
        s = _sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    raise ValueError(f"unknown activation kind {kind!r}; expected one of {ACTIVATION_KINDS}")


def activate(kind: str, x: Tensor) -> Tensor:
    """Apply an activation to a tensor, differentiably."""
    data = activation_value(kind, x.data)
    saved = x.data

    def bw(g):
        if not x.requires_grad:
            return (None,)
        return (g * activation_derivative(kind, saved),)

    return _make(f"activate[{kind}]", (x,), data, bw)


def activate_grad(kind: str, x: Tensor) -> Tensor:
    """Analytic derivative values as a tensor. Not itself differentiable."""
    return Tensor(activation_derivative(kind, x.data))
