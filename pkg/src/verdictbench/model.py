"""One configurable transformer encoder that realizes all six benchmark
variants, plus the classification head and an exact parameter counter.

Variant identity is mostly a preset over the same skeleton: ``albert`` shares
one layer parameter set across the stack and factorizes the embeddings,
``fnet`` swaps self-attention for parameter-free Fourier mixing, ``electra``
carries a quarter-size generator and a per-token discriminator head, and
``roberta``/``xlnet`` differ from ``bert`` only in their pretraining recipe.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .activations import ACTIVATION_KINDS, activate
from .data import TokenBatch, Vocab
from .tensor import Tensor

__all__ = [
    "VARIANTS",
    "MIXINGS",
    "NEG_MASK",
    "ELECTRA_DISC_WEIGHT",
    "EncoderConfig",
    "EncoderModel",
    "electra_generator_config",
    "build_model",
    "count_parameters",
    "electra_step",
    "save_model",
    "load_model",
]

VARIANTS = ("bert", "albert", "roberta", "xlnet", "electra", "fnet")
MIXINGS = ("self_attention", "fourier")

# Large finite stand-in for -inf in additive attention masks: exp() of it
# underflows to exactly 0, while fully-masked rows degrade to a uniform
# distribution instead of NaN.
NEG_MASK = -1e9

ELECTRA_DISC_WEIGHT = 50.0


@dataclass(frozen=True)
class EncoderConfig:
    variant: str
    vocab_size: int
    num_layers: int = 2
    hidden: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    embed_dim: int = 64
    max_positions: int = 512
    num_segments: int = 2
    activation: str = "gelu"
    attention_dropout: float = 0.0
    mixing: str = "self_attention"
    share_layer_params: bool = False
    num_classes: int = 2

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant: unknown value {self.variant!r}, expected one of {VARIANTS}")
        if self.mixing not in MIXINGS:
            raise ValueError(f"mixing: unknown value {self.mixing!r}")
        for name in ("num_layers", "hidden", "num_heads", "ffn_dim", "embed_dim",
                     "max_positions", "num_segments", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be a positive integer")
        if self.vocab_size <= 5:
            raise ValueError("vocab_size: must exceed the 5 reserved token ids")
        if self.embed_dim > self.hidden:
            raise ValueError("embed_dim: must not exceed hidden")
        if self.mixing == "self_attention" and self.hidden % self.num_heads != 0:
            raise ValueError("num_heads: hidden must be divisible by num_heads")
        if self.activation not in ACTIVATION_KINDS:
            raise ValueError(
                f"activation: unknown kind {self.activation!r}, expected one of {ACTIVATION_KINDS}"
            )
        if not 0.0 <= self.attention_dropout < 1.0:
            raise ValueError("attention_dropout: must lie in [0, 1)")
        if self.variant == "albert":
            if not self.share_layer_params:
                raise ValueError("share_layer_params: albert requires shared layer parameters")
            if self.embed_dim >= self.hidden:
                raise ValueError("embed_dim: albert requires embed_dim < hidden")
        if self.variant == "fnet":
            if self.mixing != "fourier":
                raise ValueError("mixing: fnet requires fourier mixing")
        elif self.mixing != "self_attention":
            raise ValueError(f"mixing: {self.variant} requires self_attention")

    @property
    def factorized(self) -> bool:
        return self.embed_dim < self.hidden

    @staticmethod
    def preset(variant: str, *, vocab_size: int = 4000, **overrides) -> "EncoderConfig":
        """Variant defaults; explicit fields override them."""
        if variant not in VARIANTS:
            raise ValueError(f"variant: unknown value {variant!r}, expected one of {VARIANTS}")
        fields = dict(variant=variant, vocab_size=vocab_size)
        fields.update(overrides)
        if variant == "albert":
            fields.setdefault("share_layer_params", True)
            hidden = fields.get("hidden", 64)
            fields.setdefault("embed_dim", max(1, hidden // 4))
        elif variant == "fnet":
            fields.setdefault("mixing", "fourier")
        cfg = EncoderConfig(**fields)
        cfg.validate()
        return cfg


def electra_generator_config(config: EncoderConfig) -> EncoderConfig:
    """Quarter-size generator paired with an electra discriminator."""
    heads = max(1, config.num_heads // 4)
    hidden = max(heads, (max(1, config.hidden // 4) // heads) * heads)
    return EncoderConfig(
        variant="bert",
        vocab_size=config.vocab_size,
        num_layers=max(1, config.num_layers // 4),
        hidden=hidden,
        num_heads=heads,
        ffn_dim=max(1, config.ffn_dim // 4),
        embed_dim=hidden,
        max_positions=config.max_positions,
        num_segments=config.num_segments,
        activation=config.activation,
        attention_dropout=config.attention_dropout,
        num_classes=config.num_classes,
    )


def count_parameters(config: EncoderConfig) -> int:
    """Exact trainable-parameter count of ``build_model(config)``.

    Closed form; the test suite asserts equality with the enumerated
    parameter vector. Fourier mixing contributes zero.
    """
    config.validate()
    e, h, f = config.embed_dim, config.hidden, config.ffn_dim
    total = config.vocab_size * e + config.num_segments * e + config.max_positions * e
    total += 2 * e  # embedding layer norm
    if config.factorized:
        total += e * h + h
    mixing = 4 * (h * h + h) if config.mixing == "self_attention" else 0
    per_layer = mixing + (h * f + f) + (f * h + h) + 4 * h  # two layer norms
    total += per_layer * (1 if config.share_layer_params else config.num_layers)
    total += h * config.num_classes + config.num_classes  # classifier
    if config.variant == "electra":
        total += h * 2 + 2  # replaced-token detection head
        total += count_parameters(electra_generator_config(config))
    return total


class EncoderModel:
    """Parameters plus the forward pass for one encoder configuration."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self._params: list[tuple[str, Tensor]] = []
        self._by_name: dict[str, Tensor] = {}

        e, h = config.embed_dim, config.hidden
        self.tok_emb = self._weight("embeddings.token", (config.vocab_size, e), rng)
        self.seg_emb = self._weight("embeddings.segment", (config.num_segments, e), rng)
        self.pos_emb = self._weight("embeddings.position", (config.max_positions, e), rng)
        self.emb_ln = self._layer_norm("embeddings.norm", e)
        if config.factorized:
            self.proj_w = self._weight("embeddings.project.w", (e, h), rng)
            self.proj_b = self._bias("embeddings.project.b", h)
        else:
            self.proj_w = self.proj_b = None

        self.layers: list[dict[str, Tensor]] = []
        n_unique = 1 if config.share_layer_params else config.num_layers
        for i in range(n_unique):
            prefix = "layer_shared" if config.share_layer_params else f"layer{i}"
            layer: dict[str, Tensor] = {}
            if config.mixing == "self_attention":
                for piece in ("q", "k", "v", "o"):
                    layer[f"w{piece}"] = self._weight(f"{prefix}.attn.w{piece}", (h, h), rng)
                    layer[f"b{piece}"] = self._bias(f"{prefix}.attn.b{piece}", h)
            layer["ln1"] = self._layer_norm(f"{prefix}.norm1", h)
            layer["ffn_w1"] = self._weight(f"{prefix}.ffn.w1", (h, config.ffn_dim), rng)
            layer["ffn_b1"] = self._bias(f"{prefix}.ffn.b1", config.ffn_dim)
            layer["ffn_w2"] = self._weight(f"{prefix}.ffn.w2", (config.ffn_dim, h), rng)
            layer["ffn_b2"] = self._bias(f"{prefix}.ffn.b2", h)
            layer["ln2"] = self._layer_norm(f"{prefix}.norm2", h)
            self.layers.append(layer)
        if config.share_layer_params:
            self.layers = self.layers * config.num_layers

        self.cls_w = self._weight("classifier.w", (h, config.num_classes), rng)
        self.cls_b = self._bias("classifier.b", config.num_classes)

        if config.variant == "electra":
            self.rtd_w = self._weight("rtd_head.w", (h, 2), rng)
            self.rtd_b = self._bias("rtd_head.b", 2)
            gen_seed = int(rng.integers(0, 2**31))
            self.generator: Optional[EncoderModel] = build_model(
                electra_generator_config(config), gen_seed
            )
        else:
            self.rtd_w = self.rtd_b = None
            self.generator = None

    # -- parameter bookkeeping -------------------------------------------

    def _register(self, name: str, t: Tensor) -> Tensor:
        self._params.append((name, t))
        self._by_name[name] = t
        return t

    def _weight(self, name: str, shape: tuple, rng: np.random.Generator) -> Tensor:
        data = rng.normal(0.0, 0.02, size=shape)
        return self._register(name, Tensor(data, requires_grad=True))

    def _bias(self, name: str, size: int) -> Tensor:
        return self._register(name, Tensor(np.zeros(size), requires_grad=True))

    def _layer_norm(self, name: str, size: int) -> tuple[Tensor, Tensor]:
        gain = self._register(name + ".gain", Tensor(np.ones(size), requires_grad=True))
        bias = self._register(name + ".bias", Tensor(np.zeros(size), requires_grad=True))
        return gain, bias

    def parameters(self) -> list[tuple[str, Tensor]]:
        """All trainable parameters, shared layers listed once."""
        out = list(self._params)
        if self.generator is not None:
            out.extend((f"generator.{n}", t) for n, t in self.generator.parameters())
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    # -- forward ----------------------------------------------------------

    def encode_hidden(
        self,
        ids: np.ndarray,
        segment_ids: np.ndarray,
        pad_mask: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        attention_mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Embed, mix and normalize; returns hidden states [batch, seq, hidden]."""
        cfg = self.config
        batch, seq = ids.shape
        if seq > cfg.max_positions:
            raise ValueError(f"sequence length {seq} exceeds max_positions {cfg.max_positions}")
        dtype = T.get_default_dtype()

        x = T.add(
            T.add(T.embedding_lookup(self.tok_emb, ids), T.embedding_lookup(self.seg_emb, segment_ids)),
            T.embedding_lookup(self.pos_emb, np.arange(seq)),
        )
        x = T.layer_norm(x, *self.emb_ln)
        if self.proj_w is not None:
            x = T.add(T.matmul(x, self.proj_w), self.proj_b)

        if cfg.mixing == "self_attention":
            if attention_mask is None:
                additive = np.where(pad_mask, 0.0, NEG_MASK)[:, None, None, :]
            else:
                additive = np.where(attention_mask, 0.0, NEG_MASK)[:, None, :, :]
            mask = Tensor(additive.astype(dtype))
            keep = None
        else:
            # Zero the pad positions so their embeddings cannot leak through
            # the global Fourier mix.
            mask = None
            keep = Tensor(pad_mask[:, :, None].astype(dtype))

        for layer in self.layers:
            if cfg.mixing == "self_attention":
                mixed = self._attention(x, layer, mask, training, rng)
            else:
                mixed = T.dft2_real(T.mul(x, keep))
            x = T.layer_norm(T.add(x, mixed), *layer["ln1"])
            ffn = T.add(
                T.matmul(
                    activate(cfg.activation, T.add(T.matmul(x, layer["ffn_w1"]), layer["ffn_b1"])),
                    layer["ffn_w2"],
                ),
                layer["ffn_b2"],
            )
            x = T.layer_norm(T.add(x, ffn), *layer["ln2"])
        return x

    def _attention(self, x, layer, mask, training, rng):
        cfg = self.config
        batch, seq, h = x.shape
        heads = cfg.num_heads
        dh = h // heads

        def split_heads(t):
            return T.transpose(T.reshape(t, (batch, seq, heads, dh)), (0, 2, 1, 3))

        q = split_heads(T.add(T.matmul(x, layer["wq"]), layer["bq"]))
        k = split_heads(T.add(T.matmul(x, layer["wk"]), layer["bk"]))
        v = split_heads(T.add(T.matmul(x, layer["wv"]), layer["bv"]))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        probs = T.softmax_rows(T.add(scores, mask))
        probs = T.dropout(probs, cfg.attention_dropout, training, rng)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (batch, seq, h))
        return T.add(T.matmul(ctx, layer["wo"]), layer["bo"])

    def _gather_positions(self, hidden: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
        batch, seq, h = hidden.shape
        flat = T.reshape(hidden, (batch * seq, h))
        return T.embedding_lookup(flat, rows * seq + cols)

    def cls_hidden(self, hidden: Tensor) -> Tensor:
        batch, seq, _ = hidden.shape
        return self._gather_positions(hidden, np.arange(batch), np.zeros(batch, dtype=np.int64))

    def mlm_logits(self, hidden: Tensor, positions: np.ndarray) -> Tensor:
        """Vocabulary logits at the given (row, col) positions, with the
        output projection tied to the token embedding table."""
        sel = self._gather_positions(hidden, positions[:, 0], positions[:, 1])
        if self.proj_w is not None:
            sel = T.matmul(sel, T.transpose(self.proj_w, (1, 0)))
        return T.matmul(sel, T.transpose(self.tok_emb, (1, 0)))

    def rtd_logits(self, hidden: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
        if self.rtd_w is None:
            raise ValueError("replaced-token head only exists on electra models")
        sel = self._gather_positions(hidden, rows, cols)
        return T.add(T.matmul(sel, self.rtd_w), self.rtd_b)

    def forward(
        self,
        batch: TokenBatch,
        training: bool = False,
        objective=None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Logits for a batch.

        With no objective (or a pair objective) this is the classifier over
        the [CLS] position. An mlm/plm objective yields per-position
        vocabulary logits at its target positions; an rtd objective yields
        per-token original-vs-replaced logits at non-pad positions.
        """
        cfg = self.config
        kind = getattr(objective, "kind", None)
        ids = batch.ids
        attention_mask = None
        if kind in ("mlm", "rtd"):
            ids = objective.ids
        elif kind == "plm":
            if cfg.mixing != "self_attention":
                raise ValueError("permutation masks require self-attention mixing")
            attention_mask = objective.attention_mask
        hidden = self.encode_hidden(
            ids, batch.segment_ids, batch.pad_mask, training, rng, attention_mask
        )
        if kind in ("mlm", "plm"):
            positions = objective.masked_positions
            logits = self.mlm_logits(hidden, positions)
        elif kind == "rtd":
            rows, cols = np.nonzero(batch.pad_mask)
            logits = self.rtd_logits(hidden, rows, cols)
        else:
            logits = T.add(T.matmul(self.cls_hidden(hidden), self.cls_w), self.cls_b)
        return logits.check_finite("forward logits")


def build_model(config: EncoderConfig, seed: int) -> EncoderModel:
    """Deterministically initialize a model: weights ~ N(0, 0.02), biases 0."""
    return EncoderModel(config, np.random.default_rng(seed))


def electra_step(model: EncoderModel, batch: TokenBatch, objective, training: bool = False,
                 rng: Optional[np.random.Generator] = None):
    """One generator/discriminator evaluation.

    The generator recovers the masked tokens (cross-entropy over the
    vocabulary); its argmax predictions corrupt the sequence, and the
    discriminator scores every non-pad token as original or replaced.
    Returns (generator_loss, discriminator_loss); callers combine them as
    generator_loss + ELECTRA_DISC_WEIGHT * discriminator_loss.
    """
    from .objectives import rtd_corrupt

    if model.generator is None:
        raise ValueError("electra_step requires a model with a paired generator")
    if getattr(objective, "kind", None) != "mlm":
        raise ValueError(f"electra_step requires an mlm objective, got {getattr(objective, 'kind', None)!r}")

    positions = objective.masked_positions
    if len(positions):
        gen_hidden = model.generator.encode_hidden(
            objective.ids, batch.segment_ids, batch.pad_mask, training, rng
        )
        gen_logits = model.generator.mlm_logits(gen_hidden, positions)
        gen_loss = T.cross_entropy(gen_logits, objective.original_ids)
        predictions = np.argmax(gen_logits.data, axis=-1)
    else:
        gen_loss = Tensor(0.0)
        predictions = np.zeros(0, dtype=np.int64)

    corrupted, labels = rtd_corrupt(batch, predictions, objective)
    disc_hidden = model.encode_hidden(
        corrupted, batch.segment_ids, batch.pad_mask, training, rng
    )
    rows, cols = np.nonzero(batch.pad_mask)
    disc_logits = model.rtd_logits(disc_hidden, rows, cols)
    disc_loss = T.cross_entropy(disc_logits, labels[rows, cols])
    return gen_loss, disc_loss


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_model(model: EncoderModel, vocab: Vocab, max_len: int, path) -> None:
    """Write parameters, config and vocabulary into one .npz artifact."""
    arrays = {f"param:{name}": t.data for name, t in model.parameters()}
    meta = {
        "config": dataclasses.asdict(model.config),
        "max_len": int(max_len),
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    arrays["vocab"] = np.array(vocab.id_to_token)
    np.savez_compressed(path, **arrays)


def load_model(path) -> tuple[EncoderModel, Vocab, int]:
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["meta"]))
        tokens = [str(t) for t in blob["vocab"]]
        config = EncoderConfig(**meta["config"])
        model = build_model(config, seed=0)
        for name, t in model.parameters():
            stored = blob[f"param:{name}"]
            if stored.shape != t.data.shape:
                raise ValueError(f"shape mismatch for parameter {name}")
            t.data = stored.astype(T.get_default_dtype())
    from .data import RESERVED_TOKENS

    vocab = Vocab(tokens[len(RESERVED_TOKENS):])
    return model, vocab, int(meta["max_len"])
