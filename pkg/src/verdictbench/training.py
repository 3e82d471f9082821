"""Adam optimization, the fine-tuning loop, metrics, and the three-way
verdict decision rule (two gold classes plus a confidence abstention).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import (
    AMBIGUITY,
    GOLD_LABELS,
    JudgmentRecord,
    TokenBatch,
    Vocab,
    encode,
    encode_pairs,
    minibatches,
    split_sentences,
)
from .model import ELECTRA_DISC_WEIGHT, EncoderModel, electra_step
from .objectives import mask_mlm, make_nsp_pairs, make_sop_pairs, plm_batch
from .tensor import Tape, Tensor

__all__ = [
    "Adam",
    "TrainConfig",
    "TrainReport",
    "train",
    "evaluate",
    "predict_verdict",
    "pretrain",
    "PRETRAIN_RECIPES",
]


class Adam:
    """Adaptive-moment optimizer with bias correction.

    Keeps exponentially decaying averages of past gradients (first moment)
    and past squared gradients (second moment); both are bias-corrected
    before the update. Defaults: beta1=0.9, beta2=0.999, eps=1e-8.
    """

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1**self.t
        correct2 = 1.0 - b2**self.t
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / correct1
            v_hat = self.v[i] / correct2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    """Fine-tuning protocol: 100 epochs by default, attention dropout 0.3
    except 0.1 for silu (derived at construction unless set explicitly)."""

    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 3e-4
    seed: int = 0
    activation: str = "gelu"
    attention_dropout: Optional[float] = None
    abstain_threshold: float = 0.6

    def __post_init__(self):
        if self.attention_dropout is None:
            self.attention_dropout = 0.1 if self.activation == "silu" else 0.3
        if not 0.5 < self.abstain_threshold < 1.0:
            raise ValueError("abstain_threshold must lie in (0.5, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class TrainReport:
    """Per-epoch loss/accuracy curves plus the final confidence histogram."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    confidence_histogram: list[int] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_epoch(self) -> int:
        """1-based epoch of minimum validation loss (earliest on ties)."""
        return int(np.argmin(self.val_loss)) + 1


def _batch_logits(model: EncoderModel, batch: TokenBatch, chunk: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(batch), chunk):
        piece = batch.take(np.arange(start, min(start + chunk, len(batch))))
        out.append(model.forward(piece, training=False).data)
    return np.concatenate(out, axis=0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def evaluate(model: EncoderModel, val_set: TokenBatch) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy over the gold labels."""
    if len(val_set) == 0:
        raise ValueError("cannot evaluate on an empty set")
    logits = _batch_logits(model, val_set)
    loss = T.cross_entropy(Tensor(logits), val_set.labels).item()
    accuracy = float(np.mean(np.argmax(logits, axis=-1) == val_set.labels))
    return loss, accuracy


def confidence_histogram(model: EncoderModel, val_set: TokenBatch, bins: int = 10) -> list[int]:
    probs = _softmax(_batch_logits(model, val_set)).max(axis=-1)
    hist, _ = np.histogram(probs, bins=bins, range=(0.5, 1.0 + 1e-12))
    return hist.tolist()


def train(
    model: EncoderModel,
    train_set: TokenBatch,
    val_set: TokenBatch,
    config: TrainConfig,
) -> TrainReport:
    """Seeded mini-batch Adam fine-tuning with a per-epoch evaluation pass.

    Runs the full epoch budget (no early stopping); the report captures the
    curves so the best-validation epoch can be located afterwards.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng((config.seed, 0xBA7C4))
    report = TrainReport()
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        seen = 0
        loss_sum = 0.0
        for batch_no, mb in enumerate(minibatches(train_set, config.batch_size, rng)):
            with Tape() as tape:
                logits = model.forward(mb, training=True, rng=rng)
                loss = T.cross_entropy(logits, mb.labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, batch {batch_no}"
                    )
                optimizer.zero_grad()
                tape.backward(loss)
            optimizer.step()
            loss_sum += value * len(mb)
            seen += len(mb)
        val_loss, val_acc = evaluate(model, val_set)
        report.train_loss.append(loss_sum / seen)
        report.val_loss.append(val_loss)
        report.val_accuracy.append(val_acc)
        report.epoch_seconds.append(time.perf_counter() - started)
    report.confidence_histogram = confidence_histogram(model, val_set)
    return report


def predict_verdict(
    model: EncoderModel,
    record: JudgmentRecord,
    vocab: Vocab,
    tau: float = 0.6,
    max_len: int = 128,
) -> tuple[str, float]:
    """Class and confidence for one record; abstains below the threshold.

    The confidence is the winning softmax probability, so it lies in
    [0.5, 1] for the two gold classes.
    """
    ids, segs = encode(vocab, record.title or record.context, record.context, max_len)
    batch = TokenBatch(
        ids=ids[None, :],
        segment_ids=segs[None, :],
        pad_mask=(ids != 0)[None, :],
        labels=np.zeros(1, dtype=np.int64),
    )
    probs = _softmax(model.forward(batch, training=False).data)[0]
    winner = int(np.argmax(probs))
    confidence = float(probs[winner])
    if confidence >= tau:
        return GOLD_LABELS[winner], confidence
    return AMBIGUITY, confidence


# ---------------------------------------------------------------------------
# optional pretraining stage
# ---------------------------------------------------------------------------

# Objective recipe per variant: masked-token recovery everywhere except
# xlnet (permutation) and electra (generator/discriminator); bert/albert add
# their pair task; roberta re-samples its masks each epoch.
PRETRAIN_RECIPES = {
    "bert": ("mlm_static", "nsp"),
    "albert": ("mlm_static", "sop"),
    "roberta": ("mlm_dynamic",),
    "xlnet": ("plm",),
    "electra": ("electra",),
    "fnet": ("mlm_static",),
}


def pretrain(
    model: EncoderModel,
    train_set: TokenBatch,
    records: Sequence[JudgmentRecord],
    vocab: Vocab,
    epochs: int,
    seed: int,
    objective: str = "auto",
    learning_rate: float = 3e-4,
    batch_size: int = 8,
    max_len: int = 128,
) -> list[float]:
    """Run the variant's pretraining recipe; returns per-epoch mean losses."""
    parts = PRETRAIN_RECIPES[model.config.variant] if objective == "auto" else (objective,)
    params = list(model.parameters())
    pair_head = None
    if "nsp" in parts or "sop" in parts:
        head_rng = np.random.default_rng((seed, 1))
        pair_head = (
            Tensor(head_rng.normal(0.0, 0.02, (model.config.hidden, 2)), requires_grad=True),
            Tensor(np.zeros(2), requires_grad=True),
        )
        params += [("pair_head.w", pair_head[0]), ("pair_head.b", pair_head[1])]
    optimizer = Adam(params, lr=learning_rate)
    rng = np.random.default_rng((seed, 2))
    documents = [doc for doc in (split_sentences(r.context) for r in records) if len(doc) >= 2]

    def optimize(make_loss) -> float:
        with Tape() as tape:
            loss = make_loss()
            optimizer.zero_grad()
            tape.backward(loss)
        optimizer.step()
        return loss.item()

    losses = []
    for epoch in range(epochs):
        epoch_loss = 0.0
        n_steps = 0
        for part in parts:
            if part in ("nsp", "sop"):
                if len(documents) < 2:
                    continue
                maker = make_nsp_pairs if part == "nsp" else make_sop_pairs
                pair_seed = int(np.random.default_rng((seed, 6, epoch)).integers(2**31))
                pair_set = encode_pairs(maker(documents, pair_seed), vocab, max_len)
                for mb in minibatches(pair_set, batch_size, rng):
                    epoch_loss += optimize(
                        lambda mb=mb: _pair_loss(model, mb, pair_head, rng)
                    )
                    n_steps += 1
                continue
            for batch_no, mb in enumerate(minibatches(train_set, batch_size, rng)):
                if part in ("mlm_static", "mlm_dynamic"):
                    sample = mask_mlm(
                        mb, dynamic=(part == "mlm_dynamic"), epoch=epoch, seed=(seed, 3, batch_no)
                    )
                    if len(sample.masked_positions) == 0:
                        continue
                    make_loss = lambda mb=mb, s=sample: T.cross_entropy(
                        model.forward(mb, training=True, objective=s, rng=rng), s.original_ids
                    )
                elif part == "plm":
                    sample = plm_batch(mb, seed=(seed, 4, epoch, batch_no))
                    make_loss = lambda mb=mb, s=sample: T.cross_entropy(
                        model.forward(mb, training=True, objective=s, rng=rng), s.original_ids
                    )
                elif part == "electra":
                    sample = mask_mlm(mb, dynamic=True, epoch=epoch, seed=(seed, 5, batch_no))

                    def make_loss(mb=mb, s=sample):
                        gen_loss, disc_loss = electra_step(model, mb, s, training=True, rng=rng)
                        return T.add(gen_loss, T.scale(disc_loss, ELECTRA_DISC_WEIGHT))

                else:
                    raise ValueError(f"unknown pretraining objective {part!r}")
                epoch_loss += optimize(make_loss)
                n_steps += 1
        losses.append(epoch_loss / max(1, n_steps))
    return losses


def _pair_loss(model, pair_batch, pair_head, rng):
    hidden = model.encode_hidden(
        pair_batch.ids, pair_batch.segment_ids, pair_batch.pad_mask, training=True, rng=rng
    )
    logits = T.add(T.matmul(model.cls_hidden(hidden), pair_head[0]), pair_head[1])
    return T.cross_entropy(logits, pair_batch.labels)
