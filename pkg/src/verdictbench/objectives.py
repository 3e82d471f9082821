"""Constructors for the five pretraining objectives that differentiate the
model families: masked-token recovery (static and dynamic), next-sentence
and sentence-order pair classification, permutation attention masks, and
replaced-token detection.

All functions are pure given their explicit seeds, so parallel epochs and
benchmark cells never share generator state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import CLS_ID, MASK_ID, PAD_ID, SEP_ID, TokenBatch

__all__ = [
    "PAIR_NEGATIVE",
    "PAIR_POSITIVE",
    "RTD_ORIGINAL",
    "RTD_REPLACED",
    "ObjectiveSample",
    "mask_mlm",
    "make_nsp_pairs",
    "make_sop_pairs",
    "plm_mask",
    "plm_batch",
    "rtd_corrupt",
]

# Pair labels: positive = the true successor (next-sentence) or original
# order (sentence-order); negative = random substitute / swapped.
PAIR_POSITIVE = 1
PAIR_NEGATIVE = 0

RTD_ORIGINAL = 0
RTD_REPLACED = 1

_SPECIAL_IDS = (CLS_ID, SEP_ID)


@dataclass
class ObjectiveSample:
    """Payload a pretraining objective attaches to a batch."""

    kind: str  # mlm | nsp | sop | plm | rtd
    ids: Optional[np.ndarray] = None               # model input ids (masked/corrupted)
    masked_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    original_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pair_labels: Optional[np.ndarray] = None
    permutations: Optional[list[np.ndarray]] = None
    attention_mask: Optional[np.ndarray] = None    # [N, L, L] bool
    rtd_labels: Optional[np.ndarray] = None        # [N, L] in {RTD_ORIGINAL, RTD_REPLACED}


def _eligible_mask(batch: TokenBatch) -> np.ndarray:
    eligible = batch.pad_mask.copy()
    for special in _SPECIAL_IDS:
        eligible &= batch.ids != special
    return eligible


def mask_mlm(
    batch: TokenBatch,
    p: float = 0.15,
    dynamic: bool = False,
    epoch: int = 0,
    seed: int = 0,
) -> ObjectiveSample:
    """Independently mask each eligible token with probability ``p``.

    Static mode draws from the seed alone, so every epoch sees the same
    mask; dynamic mode folds the epoch into the stream so masks differ.
    Special and pad positions are never masked.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"mask probability {p} outside (0, 1)")
    rng = np.random.default_rng((seed, epoch) if dynamic else (seed,))
    chosen = (rng.random(batch.ids.shape) < p) & _eligible_mask(batch)
    masked_ids = np.where(chosen, MASK_ID, batch.ids)
    positions = np.argwhere(chosen)
    return ObjectiveSample(
        kind="mlm",
        ids=masked_ids,
        masked_positions=positions,
        original_ids=batch.ids[chosen],
    )


def _adjacent_pairs(documents: Sequence[Sequence[str]]) -> list[tuple[str, str, int]]:
    pairs = []
    for doc_idx, doc in enumerate(documents):
        if len(doc) < 2:
            raise ValueError(f"document {doc_idx} has fewer than 2 sentences")
        for i in range(len(doc) - 1):
            pairs.append((doc[i], doc[i + 1], doc_idx))
    return pairs


def make_nsp_pairs(
    documents: Sequence[Sequence[str]], seed: int
) -> list[tuple[str, str, int]]:
    """Next-sentence pairs with an exactly even label split.

    After a seeded shuffle of all adjacent pairs, alternating pairs keep
    their true successor (positive) or swap in a random sentence from a
    different document (negative).
    """
    if len(documents) < 2:
        raise ValueError("need at least 2 documents to sample a cross-document negative")
    pairs = _adjacent_pairs(documents)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    out = []
    for rank, idx in enumerate(order):
        a, b, doc_idx = pairs[idx]
        if rank % 2 == 0:
            out.append((a, b, PAIR_POSITIVE))
        else:
            other = int(rng.integers(0, len(documents) - 1))
            if other >= doc_idx:
                other += 1
            replacement = documents[other][int(rng.integers(0, len(documents[other])))]
            out.append((a, replacement, PAIR_NEGATIVE))
    return out


def make_sop_pairs(
    documents: Sequence[Sequence[str]], seed: int
) -> list[tuple[str, str, int]]:
    """Sentence-order pairs: both sentences always adjacent in their source;
    alternating pairs are kept in order (positive) or swapped (negative)."""
    pairs = _adjacent_pairs(documents)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    out = []
    for rank, idx in enumerate(order):
        a, b, _ = pairs[idx]
        if rank % 2 == 0:
            out.append((a, b, PAIR_POSITIVE))
        else:
            out.append((b, a, PAIR_NEGATIVE))
    return out


def plm_mask(
    seq_len: int, pad_mask: Optional[np.ndarray], seed
) -> tuple[np.ndarray, np.ndarray]:
    """Sample one factorization order over the non-pad positions.

    Returns (permutation, visibility) where visibility[i, j] is True iff
    position j precedes position i in the sampled order, so predicting i
    conditions only on earlier-in-order tokens. Pad positions neither see
    nor are seen.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be at least 1")
    if pad_mask is None:
        pad_mask = np.ones(seq_len, dtype=bool)
    rng = np.random.default_rng(seed)
    real = np.flatnonzero(pad_mask)
    permutation = rng.permutation(real)
    rank = np.full(seq_len, -1, dtype=np.int64)
    rank[permutation] = np.arange(len(permutation))
    rows = rank[:, None]
    cols = rank[None, :]
    visible = (cols < rows) & (rows >= 0) & (cols >= 0)
    return permutation, visible


def plm_batch(batch: TokenBatch, seed: int, predict_fraction: float = 0.15) -> ObjectiveSample:
    """Per-row permutation masks plus the last-in-order prediction targets.

    The targets are the final ceil(predict_fraction * n) positions of each
    row's sampled order, mirroring the usual masking rate.
    """
    n, seq = batch.ids.shape
    masks = np.zeros((n, seq, seq), dtype=bool)
    permutations = []
    rows, cols = [], []
    for r in range(n):
        perm, visible = plm_mask(seq, batch.pad_mask[r], seed=(seed, r))
        permutations.append(perm)
        masks[r] = visible
        k = max(1, math.ceil(predict_fraction * len(perm)))
        for pos in perm[-k:]:
            rows.append(r)
            cols.append(pos)
    positions = np.stack([np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)], axis=1)
    return ObjectiveSample(
        kind="plm",
        ids=batch.ids,
        masked_positions=positions,
        original_ids=batch.ids[positions[:, 0], positions[:, 1]],
        permutations=permutations,
        attention_mask=masks,
    )


def rtd_corrupt(
    batch: TokenBatch,
    generator_predictions: np.ndarray,
    sample: Optional[ObjectiveSample] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Swap generator predictions into the masked slots and label each token.

    A position is labeled replaced only when the substituted id differs from
    the original: a generator that guesses the true token yields an original
    label. Unmasked positions are always original.
    """
    sample = sample if sample is not None else batch.objective
    if sample is None or sample.kind != "mlm":
        raise ValueError("rtd_corrupt needs the mlm sample that produced the masked positions")
    predictions = np.asarray(generator_predictions)
    positions = sample.masked_positions
    if predictions.shape != (len(positions),):
        raise ValueError(
            f"got {predictions.shape[0] if predictions.ndim else 0} predictions "
            f"for {len(positions)} masked positions"
        )
    corrupted = batch.ids.copy()
    labels = np.full(batch.ids.shape, RTD_ORIGINAL, dtype=np.int64)
    if len(positions):
        rows, cols = positions[:, 0], positions[:, 1]
        corrupted[rows, cols] = predictions
        labels[rows, cols] = np.where(predictions != sample.original_ids, RTD_REPLACED, RTD_ORIGINAL)
    return corrupted, labels
