"""Corpus ingestion, vocabulary, encoding, and the train/validation split.

The CSV schema is ``title, context, judgment`` (any column order, header
matched case-insensitively). Labels are the two gold verdict classes; the
third output class, ambiguity, only ever appears at prediction time as an
abstention and never as a gold label.
"""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "PAD_ID",
    "UNK_ID",
    "CLS_ID",
    "SEP_ID",
    "MASK_ID",
    "RESERVED_TOKENS",
    "GOLD_LABELS",
    "AMBIGUITY",
    "JudgmentRecord",
    "Vocab",
    "TokenBatch",
    "tokenize",
    "ingest_csv",
    "write_csv",
    "synth_corpus",
    "build_vocab",
    "encode",
    "split_80_20",
    "split_sentences",
    "encode_records",
    "encode_pairs",
    "minibatches",
]

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

GOLD_LABELS = ("petitioner", "respondent")
AMBIGUITY = "ambiguity"

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_SENTENCE_RE = re.compile(r"(?<=[.?!])\s+")


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation acts as a separator."""
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    """Split on ., ? or ! followed by whitespace; drops empty pieces."""
    return [s for s in _SENTENCE_RE.split(text) if tokenize(s)]


@dataclass(frozen=True)
class JudgmentRecord:
    title: str
    context: str
    judgment: str  # one of GOLD_LABELS


class Vocab:
    """Token-to-id map with five reserved ids for the special tokens."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: list[str] = list(RESERVED_TOKENS) + list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(RESERVED_TOKENS)] != list(RESERVED_TOKENS):
            raise ValueError(f"{path} does not start with the reserved tokens")
        return cls(lines[len(RESERVED_TOKENS):])


def build_vocab(records: Sequence[JudgmentRecord], max_size: int) -> Vocab:
    """Frequency-ranked word vocabulary, ties broken lexicographically."""
    if max_size <= len(RESERVED_TOKENS):
        raise ValueError(f"max_size must exceed {len(RESERVED_TOKENS)}")
    counts: Counter[str] = Counter()
    for rec in records:
        counts.update(tokenize(rec.title))
        counts.update(tokenize(rec.context))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = max_size - len(RESERVED_TOKENS)
    return Vocab([t for t, _ in ranked[:keep]])


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

_REQUIRED_COLUMNS = ("title", "context", "judgment")


def ingest_csv(path) -> list[JudgmentRecord]:
    """Read judgment records; headers are matched case-insensitively."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        positions = {}
        for i, name in enumerate(header):
            positions.setdefault(name.strip().lower(), i)
        for column in _REQUIRED_COLUMNS:
            if column not in positions:
                raise ValueError(f"{path}: missing required column '{column}'")
        records = []
        for row_no, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            values = {}
            for column in _REQUIRED_COLUMNS:
                idx = positions[column]
                values[column] = row[idx] if idx < len(row) else ""
            label = values["judgment"].strip().lower()
            if label not in GOLD_LABELS:
                raise ValueError(
                    f"{path}: row {row_no}: unknown judgment label {values['judgment']!r}"
                )
            if not values["context"].strip():
                raise ValueError(f"{path}: row {row_no}: empty context")
            records.append(
                JudgmentRecord(values["title"].strip(), values["context"].strip(), label)
            )
    return records


def write_csv(records: Sequence[JudgmentRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_REQUIRED_COLUMNS)
        for rec in records:
            writer.writerow([rec.title, rec.context, rec.judgment])


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_PARTIES = [
    "sunrise textiles", "the state transport authority", "kumar brothers",
    "the municipal board", "eastern coalfields", "the revenue department",
    "lakshmi traders", "the housing cooperative society", "premier motors",
    "the electricity board", "global shipping lines", "the gram panchayat",
    "northern railways", "the insurance corporation", "apex builders",
    "the port trust",
]

_COURTS = [
    "the high court of judicature", "the district court", "the sessions court",
    "the appellate tribunal", "the court of small causes", "the revenue tribunal",
]

_CLAIMS = [
    "recovery of dues", "breach of contract", "possession of the suit property",
    "compensation for damages", "eviction from the premises",
    "specific performance of the agreement", "arrears of rent",
    "wrongful termination of service", "refund of the security deposit",
    "partition of the ancestral property",
]

_CONTENTIONS = [
    "counsel for the petitioner contended that the findings below were erroneous.",
    "the respondent contended that the suit was barred by limitation.",
    "it was urged that the evidence on record had been misread.",
    "both sides relied on the documentary evidence placed on record.",
    "the parties advanced detailed submissions on the question of law involved.",
]

# Verdict sentences carry the class signal. The discriminative words never
# appear outside these templates for the opposite class.
_PETITIONER_VERDICTS = [
    "in the result the appeal is allowed and the order under challenge is set aside.",
    "accordingly the petition is allowed with costs.",
    "the court finds merit in the challenge and the relief sought is granted.",
    "the suit is decreed in favour of the claimant.",
]

_RESPONDENT_VERDICTS = [
    "in the result the appeal is dismissed with costs.",
    "accordingly the petition is dismissed as devoid of merit.",
    "the challenge fails and the order under challenge is upheld.",
    "the suit is rejected and the defence prevails.",
]

# Hedge sentences mention the losing side's request using morphological
# variants (dismissal, allowance, ...) that tokenize differently from the
# verdict words, so word-level separability is preserved.
_PETITIONER_HEDGES = [
    "the respondent prayed for dismissal of the appeal.",
    "counsel opposing the claim argued for upholding of the order below.",
    "the respondent sought rejection of the claim in its entirety.",
]

_RESPONDENT_HEDGES = [
    "the petitioner prayed for allowance of the appeal.",
    "counsel pressing the claim argued that the order below be vacated.",
    "the petitioner sought a decree in the terms of the plaint.",
]

_CLOSINGS = [
    "there shall be no order as to costs.",
    "parties shall bear their own costs.",
    "the records shall be remitted forthwith.",
    "pending applications stand disposed of.",
]


def synth_corpus(n: int, seed: int) -> list[JudgmentRecord]:
    """Deterministic template-generated verdict paragraphs.

    Labels alternate, so the class balance is within one record. The verdict
    sentence determines the label; everything else is noise or hedging.
    """
    if n < 2:
        raise ValueError("synth_corpus needs n >= 2")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = GOLD_LABELS[i % 2]
        party_a, party_b = rng.choice(_PARTIES, size=2, replace=False)
        court = rng.choice(_COURTS)
        claim = rng.choice(_CLAIMS)
        case_no = int(rng.integers(100, 999))
        year = int(rng.integers(1960, 2015))
        sentences = [
            f"this appeal arises from the judgment of {court} in case no {case_no} of {year}.",
            f"{party_a} instituted the proceedings against {party_b} seeking {claim}.",
            str(rng.choice(_CONTENTIONS)),
        ]
        if rng.random() < 0.35:
            hedges = _PETITIONER_HEDGES if label == "petitioner" else _RESPONDENT_HEDGES
            sentences.append(str(rng.choice(hedges)))
        verdicts = _PETITIONER_VERDICTS if label == "petitioner" else _RESPONDENT_VERDICTS
        sentences.append(str(rng.choice(verdicts)))
        sentences.append(str(rng.choice(_CLOSINGS)))
        records.append(
            JudgmentRecord(
                title=f"{party_a} vs {party_b}",
                context=" ".join(sentences),
                judgment=label,
            )
        )
    return records


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def encode(
    vocab: Vocab,
    text_a: str,
    text_b: Optional[str] = None,
    max_len: int = 512,
) -> tuple[np.ndarray, np.ndarray]:
    """Encode one text (or a pair) as ``[CLS] A [SEP] (B [SEP])`` plus padding.

    Over-long inputs are truncated by trimming the longer segment first;
    segment ids are 0 through the first [SEP] and 1 afterwards.
    """
    if not text_a:
        raise ValueError("text_a must be non-empty")
    tokens_a = [vocab.encode_token(t) for t in tokenize(text_a)]
    tokens_b = [vocab.encode_token(t) for t in tokenize(text_b)] if text_b else None

    specials = 2 if tokens_b is None else 3
    budget = max_len - specials
    la = len(tokens_a)
    lb = len(tokens_b) if tokens_b is not None else 0
    while la + lb > budget:
        if lb >= la and lb > 0:
            lb -= 1
        else:
            la -= 1
    tokens_a = tokens_a[:la]
    ids = [CLS_ID] + tokens_a + [SEP_ID]
    segments = [0] * len(ids)
    if tokens_b is not None:
        part_b = tokens_b[:lb] + [SEP_ID]
        ids += part_b
        segments += [1] * len(part_b)
    pad = max_len - len(ids)
    ids += [PAD_ID] * pad
    segments += [0] * pad
    return np.array(ids, dtype=np.int64), np.array(segments, dtype=np.int64)


@dataclass
class TokenBatch:
    """A padded batch: id matrix, segment ids, pad mask, labels."""

    ids: np.ndarray          # [N, L] int64
    segment_ids: np.ndarray  # [N, L] int64 in {0, 1}
    pad_mask: np.ndarray     # [N, L] bool, True where a real token sits
    labels: np.ndarray       # [N] int64
    objective: object = None  # optional pretraining payload

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]

    def take(self, indices) -> "TokenBatch":
        idx = np.asarray(indices)
        return TokenBatch(
            ids=self.ids[idx],
            segment_ids=self.segment_ids[idx],
            pad_mask=self.pad_mask[idx],
            labels=self.labels[idx],
        )


def encode_records(
    records: Sequence[JudgmentRecord], vocab: Vocab, max_len: int = 512
) -> TokenBatch:
    """Encode (title, context) pairs into a single padded batch."""
    ids, segs, labels = [], [], []
    for rec in records:
        row_ids, row_segs = encode(vocab, rec.title or rec.context, rec.context, max_len)
        ids.append(row_ids)
        segs.append(row_segs)
        labels.append(GOLD_LABELS.index(rec.judgment))
    ids = np.stack(ids)
    segs = np.stack(segs)
    return TokenBatch(
        ids=ids,
        segment_ids=segs,
        pad_mask=ids != PAD_ID,
        labels=np.array(labels, dtype=np.int64),
    )


def encode_pairs(
    pairs: Sequence[tuple[str, str, int]], vocab: Vocab, max_len: int = 512
) -> TokenBatch:
    """Encode (sentence_a, sentence_b, label) pairs for the pair objectives."""
    ids, segs, labels = [], [], []
    for a, b, label in pairs:
        row_ids, row_segs = encode(vocab, a, b, max_len)
        ids.append(row_ids)
        segs.append(row_segs)
        labels.append(int(label))
    ids = np.stack(ids)
    return TokenBatch(
        ids=ids,
        segment_ids=np.stack(segs),
        pad_mask=ids != PAD_ID,
        labels=np.array(labels, dtype=np.int64),
    )


def split_80_20(
    records: Sequence[JudgmentRecord], seed: int
) -> tuple[list[JudgmentRecord], list[JudgmentRecord]]:
    """Deterministic stratified 80/20 split; train gets ceil(0.8 n) records."""
    records = list(records)
    n = len(records)
    if n < 5:
        raise ValueError(f"need at least 5 records to split, got {n}")
    rng = np.random.default_rng(seed)
    groups: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        groups.setdefault(rec.judgment, []).append(i)

    target = math.ceil(0.8 * n)
    labels = sorted(groups)
    base = {lab: int(math.floor(0.8 * len(groups[lab]))) for lab in labels}
    remainders = sorted(
        labels, key=lambda lab: (0.8 * len(groups[lab])) - base[lab], reverse=True
    )
    short = target - sum(base.values())
    for lab in remainders:
        if short <= 0:
            break
        if base[lab] < len(groups[lab]):
            base[lab] += 1
            short -= 1
    # Keep both splits populated per class whenever the class has >= 2 rows.
    for lab in labels:
        size = len(groups[lab])
        if size >= 2:
            base[lab] = min(max(base[lab], 1), size - 1)

    train_idx: list[int] = []
    val_idx: list[int] = []
    for lab in labels:
        idx = np.array(groups[lab])
        rng.shuffle(idx)
        k = base[lab]
        train_idx.extend(idx[:k].tolist())
        val_idx.extend(idx[k:].tolist())
    train_idx = np.array(train_idx)
    val_idx = np.array(val_idx)
    rng.shuffle(train_idx)
    rng.shuffle(val_idx)
    return [records[i] for i in train_idx], [records[i] for i in val_idx]


def minibatches(
    batch: TokenBatch, size: int, rng: Optional[np.random.Generator] = None
) -> Iterator[TokenBatch]:
    """Yield row slices of ``size``; shuffled when an rng is supplied."""
    order = np.arange(len(batch))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), size):
        yield batch.take(order[start : start + size])
