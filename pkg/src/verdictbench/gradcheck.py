"""Central finite-difference verification of every analytic gradient.

The same machinery backs the unit tests and the ``bench gradcheck``
subcommand: each check perturbs parameter entries by a small step, rebuilds
the forward value, and compares the numerical slope against the gradient the
tape produced. All checks run in float64 so a 1e-4 relative tolerance is
meaningful.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .activations import ACTIVATION_KINDS, activation_derivative, activation_value
from .tensor import Tape, Tensor, using_dtype

__all__ = [
    "DEFAULT_STEP",
    "OP_TOLERANCE",
    "ACTIVATION_TOLERANCE",
    "GradCheckItem",
    "max_relative_error",
    "check_case",
    "activation_derivative_error",
    "run_all",
]

DEFAULT_STEP = 1e-5
OP_TOLERANCE = 1e-4
ACTIVATION_TOLERANCE = 1e-6


def max_relative_error(analytic, numeric) -> float:
    """Largest elementwise |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def check_case(
    make_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = DEFAULT_STEP,
    coords_per_param: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Gradient-check one scalar-valued computation.

    ``make_loss`` must rebuild the loss from the current parameter values on
    every call (and be deterministic). Returns the worst relative error over
    the checked coordinates.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = make_loss()
        tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grads in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if coords_per_param is None or coords_per_param >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        gflat = grads.reshape(-1)
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + step
            up = make_loss().item()
            flat[idx] = original - step
            down = make_loss().item()
            flat[idx] = original
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[idx] - numeric) / max(1.0, abs(gflat[idx]), abs(numeric))
            if err > worst:
                worst = err
    return worst


def activation_derivative_error(kind: str, n_points: int = 1000, seed: int = 11) -> float:
    """Analytic derivative vs central finite difference of the value."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-6.0, 6.0, n_points)
    # Keep samples away from the relu kink; the derivative jumps there.
    near_zero = np.abs(x) < 1e-3
    x[near_zero] = np.sign(x[near_zero] + 1e-12) * 0.01
    h = DEFAULT_STEP
    numeric = (activation_value(kind, x + h) - activation_value(kind, x - h)) / (2.0 * h)
    return max_relative_error(activation_derivative(kind, x), numeric)


# ---------------------------------------------------------------------------
# tensor-op case registry
# ---------------------------------------------------------------------------

def _param(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.total(T.mul(out, Tensor(weights)))


def _case_matmul(rng):
    a, b = _param(rng, (4, 5)), _param(rng, (5, 3))
    w = rng.standard_normal((4, 3))
    return [a, b], lambda: _projected(T.matmul(a, b), w)


def _case_matmul_batched(rng):
    a, b = _param(rng, (2, 3, 4)), _param(rng, (4, 5))
    w = rng.standard_normal((2, 3, 5))
    return [a, b], lambda: _projected(T.matmul(a, b), w)


def _case_add(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (4,))
    w = rng.standard_normal((3, 4))
    return [a, b], lambda: _projected(T.add(a, b), w)


def _case_sub(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (3, 4))
    w = rng.standard_normal((3, 4))
    return [a, b], lambda: _projected(T.sub(a, b), w)


def _case_mul(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (3, 1))
    w = rng.standard_normal((3, 4))
    return [a, b], lambda: _projected(T.mul(a, b), w)


def _case_scale(rng):
    a = _param(rng, (3, 4))
    w = rng.standard_normal((3, 4))
    return [a], lambda: _projected(T.scale(a, 1.7), w)


def _case_transpose(rng):
    a = _param(rng, (2, 3, 4))
    w = rng.standard_normal((4, 2, 3))
    return [a], lambda: _projected(T.transpose(a, (2, 0, 1)), w)


def _case_reshape(rng):
    a = _param(rng, (3, 4))
    w = rng.standard_normal((2, 6))
    return [a], lambda: _projected(T.reshape(a, (2, 6)), w)


def _case_concat(rng):
    a, b = _param(rng, (2, 3)), _param(rng, (4, 3))
    w = rng.standard_normal((6, 3))
    return [a, b], lambda: _projected(T.concat([a, b], axis=0), w)


def _case_sum(rng):
    a = _param(rng, (3, 4))
    return [a], lambda: T.total(a)


def _case_mean(rng):
    a = _param(rng, (3, 4))
    w = rng.standard_normal(())
    return [a], lambda: _projected(T.mean(a), w)


def _case_exp(rng):
    a = _param(rng, (3, 4))
    w = rng.standard_normal((3, 4))
    return [a], lambda: _projected(T.exp(a), w)


def _case_tanh(rng):
    a = _param(rng, (3, 4), -2.0, 2.0)
    w = rng.standard_normal((3, 4))
    return [a], lambda: _projected(T.tanh(a), w)


def _case_sigmoid(rng):
    a = _param(rng, (3, 4), -3.0, 3.0)
    w = rng.standard_normal((3, 4))
    return [a], lambda: _projected(T.sigmoid(a), w)


def _case_erf(rng):
    a = _param(rng, (3, 4), -2.0, 2.0)
    w = rng.standard_normal((3, 4))
    return [a], lambda: _projected(T.erf(a), w)


def _case_softmax_rows(rng):
    a = _param(rng, (3, 5), -2.0, 2.0)
    w = rng.standard_normal((3, 5))
    return [a], lambda: _projected(T.softmax_rows(a), w)


def _case_layer_norm(rng):
    a = _param(rng, (3, 8))
    gain = _param(rng, (8,), 0.5, 1.5)
    bias = _param(rng, (8,), -0.5, 0.5)
    w = rng.standard_normal((3, 8))
    return [a, gain, bias], lambda: _projected(T.layer_norm(a, gain, bias), w)


def _case_dft2_real(rng):
    a = _param(rng, (4, 6))
    w = rng.standard_normal((4, 6))
    return [a], lambda: _projected(T.dft2_real(a), w)


def _case_embedding_lookup(rng):
    table = _param(rng, (7, 5))
    ids = rng.integers(0, 7, size=(2, 3))
    w = rng.standard_normal((2, 3, 5))
    return [table], lambda: _projected(T.embedding_lookup(table, ids), w)


def _case_dropout(rng):
    a = _param(rng, (4, 5))
    w = rng.standard_normal((4, 5))
    mask_seed = int(rng.integers(0, 2**31))

    def loss():
        drop_rng = np.random.default_rng(mask_seed)
        return _projected(T.dropout(a, 0.35, True, drop_rng), w)

    return [a], loss


def _case_cross_entropy(rng):
    logits = _param(rng, (5, 3), -2.0, 2.0)
    labels = rng.integers(0, 3, size=5)
    return [logits], lambda: T.cross_entropy(logits, labels)


def _case_attention_block(rng):
    """A composite scaled-dot-product attention computation."""
    x = _param(rng, (4, 6), -0.5, 0.5)
    wq, wk, wv = _param(rng, (6, 6)), _param(rng, (6, 6)), _param(rng, (6, 6))
    w = rng.standard_normal((4, 6))

    def loss():
        q = T.matmul(x, wq)
        k = T.matmul(x, wk)
        v = T.matmul(x, wv)
        scores = T.scale(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / np.sqrt(6.0))
        return _projected(T.matmul(T.softmax_rows(scores), v), w)

    return [x, wq, wk, wv], loss


OP_CASES = {
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "concat": _case_concat,
    "sum": _case_sum,
    "mean": _case_mean,
    "exp": _case_exp,
    "tanh": _case_tanh,
    "sigmoid": _case_sigmoid,
    "erf": _case_erf,
    "softmax_rows": _case_softmax_rows,
    "layer_norm": _case_layer_norm,
    "dft2_real": _case_dft2_real,
    "embedding_lookup": _case_embedding_lookup,
    "dropout": _case_dropout,
    "cross_entropy": _case_cross_entropy,
    "attention_block": _case_attention_block,
}


def check_op(name: str, n_inputs: int = 20) -> float:
    """Worst relative error for one op over ``n_inputs`` random inputs."""
    builder = OP_CASES[name]
    worst = 0.0
    for seed in range(n_inputs):
        rng = np.random.default_rng(1000 + seed)
        params, make_loss = builder(rng)
        worst = max(worst, check_case(make_loss, params, seed=seed))
    return worst


# ---------------------------------------------------------------------------
# full suite
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class GradCheckItem:
    name: str
    max_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_error < self.tolerance


def _encoder_item(variant: str, activation: str, coords_per_param: int = 4) -> float:
    from .model import EncoderConfig, build_model
    from .data import TokenBatch

    config = EncoderConfig.preset(
        variant,
        num_layers=2,
        hidden=16,
        num_heads=2,
        ffn_dim=32,
        embed_dim=8 if variant == "albert" else 16,
        vocab_size=31,
        max_positions=12,
        activation=activation,
        attention_dropout=0.0,
    )
    model = build_model(config, seed=5)
    rng = np.random.default_rng(17)
    seq = 10
    ids = rng.integers(5, config.vocab_size, size=(2, seq))
    ids[:, 0] = 2  # [CLS]
    ids[0, -2:] = 0  # a little padding
    pad = ids != 0
    batch = TokenBatch(
        ids=ids,
        segment_ids=np.zeros_like(ids),
        pad_mask=pad,
        labels=np.array([0, 1]),
    )
    params = [p for _, p in model.parameters()]

    def loss():
        return T.cross_entropy(model.forward(batch, training=False), batch.labels)

    return check_case(loss, params, coords_per_param=coords_per_param, seed=23)


def run_all(n_inputs_per_op: int = 20, coords_per_param: int = 4) -> list[GradCheckItem]:
    """The complete gradient-fidelity suite: ops, activations, encoders."""
    items: list[GradCheckItem] = []
    with using_dtype(np.float64):
        for name in OP_CASES:
            items.append(GradCheckItem(f"op/{name}", check_op(name, n_inputs_per_op), OP_TOLERANCE))
        for kind in ACTIVATION_KINDS:
            items.append(
                GradCheckItem(
                    f"activation/{kind}", activation_derivative_error(kind), ACTIVATION_TOLERANCE
                )
            )
        from .model import VARIANTS

        for variant in VARIANTS:
            for kind in ACTIVATION_KINDS:
                err = _encoder_item(variant, kind, coords_per_param)
                items.append(GradCheckItem(f"encoder/{variant}/{kind}", err, OP_TOLERANCE))
    return items
