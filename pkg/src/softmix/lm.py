"""Toy masked language model that accepts arbitrary input vectors.

The model is a small pre-LayerNorm transformer encoder. Its forward pass takes
a batch of embedding vectors (not token ids) and, optionally, an additive
perturbation for every layer's hidden state, so prompt slots can be tuned
either directly (layer 0) or deeply (every layer) while the LM stays frozen.

Hidden-state indexing follows the usual convention: ``hidden[0]`` is the input
vector sequence (plus the layer-0 perturbation), ``hidden[l]`` is the output of
encoder layer ``l`` (plus the layer-``l`` perturbation). Position embeddings are
added on entry to layer 1 and are not part of ``hidden[0]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import FormatError, InputError, NumericalError

logger = logging.getLogger(__name__)

PAD = "[PAD]"
MASK = "[MASK]"


class Vocabulary:
    """Word-level vocabulary. ``[PAD]`` and ``[MASK]`` are always ids 0 and 1."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [PAD, MASK]:
            tokens = [PAD, MASK] + [t for t in tokens if t not in (PAD, MASK)]
        self.tokens = tokens
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise InputError("vocabulary contains duplicate tokens")
        for tok in tokens:
            if not tok or any(c.isspace() for c in tok):
                raise InputError(f"invalid vocabulary token {tok!r}")

    pad_id = 0
    mask_id = 1

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.token_to_id[w] for w in words]
        except KeyError as exc:
            raise InputError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def tokenize(self, text: str) -> list[str]:
        return text.split()


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    d: int = 32
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 64
    max_len: int = 16
    tie_head: bool = True
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads:
            raise InputError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.layers < 1:
            raise InputError("need at least one encoder layer")
        if self.vocab_size < 2 or self.max_len < 1:
            raise InputError("vocab_size must be >= 2 and max_len >= 1")

    def to_meta(self) -> dict[str, str]:
        return {f"config.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "LMConfig":
        kwargs = {}
        for f in fields(cls):
            raw = meta[f"config.{f.name}"]
            if f.type in ("bool", bool):
                kwargs[f.name] = raw == "True"
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


@dataclass
class EmbeddingSequence:
    """A single input sequence of vectors.

    ``origin`` tags each position: an ``int`` is a prompt-slot index, ``"x"`` an
    x token, ``"y"`` the masked answer slot and ``"tok"`` any other literal token.
    """

    vectors: torch.Tensor
    blank_y_index: int | None
    origin: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def slot_positions(self) -> list[tuple[int, int]]:
        """(position, slot index) for every prompt-slot position."""
        return [(pos, tag) for pos, tag in enumerate(self.origin) if isinstance(tag, int)]


@dataclass
class ForwardResult:
    log_probs: torch.Tensor  # (S, V)
    hidden: list[torch.Tensor]  # L+1 tensors of shape (S, d)


def _randn(gen: torch.Generator, *shape: int, std: float) -> torch.Tensor:
    return torch.randn(*shape, generator=gen) * std


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn_dim: int, gen: torch.Generator):
        super().__init__()
        self.heads = heads
        s_in = 1.0 / math.sqrt(d)
        self.ln1_w = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.w_qkv = nn.Parameter(_randn(gen, d, 3 * d, std=s_in))
        self.b_qkv = nn.Parameter(torch.zeros(3 * d))
        self.w_o = nn.Parameter(_randn(gen, d, d, std=s_in))
        self.b_o = nn.Parameter(torch.zeros(d))
        self.ln2_w = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))
        self.w_1 = nn.Parameter(_randn(gen, d, ffn_dim, std=s_in))
        self.b_1 = nn.Parameter(torch.zeros(ffn_dim))
        self.w_2 = nn.Parameter(_randn(gen, ffn_dim, d, std=1.0 / math.sqrt(ffn_dim)))
        self.b_2 = nn.Parameter(torch.zeros(d))

    def forward(self, h: torch.Tensor, key_bias: torch.Tensor) -> torch.Tensor:
        B, S, d = h.shape
        dh = d // self.heads
        a = F.layer_norm(h, (d,), self.ln1_w, self.ln1_b)
        q, k, v = (a @ self.w_qkv + self.b_qkv).split(d, dim=-1)
        q = q.view(B, S, self.heads, dh).transpose(1, 2)
        k = k.view(B, S, self.heads, dh).transpose(1, 2)
        v = v.view(B, S, self.heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh) + key_bias[:, None, None, :]
        ctx = (scores.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, S, d)
        h = h + ctx @ self.w_o + self.b_o
        m = F.layer_norm(h, (d,), self.ln2_w, self.ln2_b)
        return h + F.gelu(m @ self.w_1 + self.b_1) @ self.w_2 + self.b_2


class MaskedLM(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        d = config.d
        self.embedding = nn.Parameter(_randn(gen, config.vocab_size, d, std=config.init_std))
        self.position = nn.Parameter(_randn(gen, config.max_len, d, std=config.init_std))
        self.layers = nn.ModuleList(
            EncoderLayer(d, config.heads, config.ffn_dim, gen) for _ in range(config.layers)
        )
        self.lnf_w = nn.Parameter(torch.ones(d))
        self.lnf_b = nn.Parameter(torch.zeros(d))
        # An untied head starts at zero, i.e. a uniform output distribution.
        self.head = None if config.tie_head else nn.Parameter(torch.zeros(config.vocab_size, d))
        self.out_bias = nn.Parameter(torch.zeros(config.vocab_size))

    @property
    def dtype(self) -> torch.dtype:
        return self.embedding.dtype

    @property
    def output_weight(self) -> torch.Tensor:
        return self.embedding if self.head is None else self.head

    def encode(
        self,
        inputs: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        deltas: torch.Tensor | None = None,
    ) -> list[torch.Tensor]:
        """Run the encoder on ``inputs`` of shape (B, S, d).

        ``key_mask`` (B, S) marks real (non-padding) positions. ``deltas`` has
        shape (L+1, B, S, d) and is added to each layer's output. Returns the
        L+1 hidden states.
        """
        B, S, _ = inputs.shape
        if S > self.config.max_len:
            raise InputError(f"sequence length {S} exceeds max_len {self.config.max_len}")
        if key_mask is None:
            key_bias = inputs.new_zeros(B, S)
        else:
            key_bias = inputs.new_zeros(B, S).masked_fill(~key_mask, float("-inf"))
        h = inputs if deltas is None else inputs + deltas[0]
        hidden = [h]
        h = h + self.position[:S]
        for ell, layer in enumerate(self.layers, start=1):
            h = layer(h, key_bias)
            if deltas is not None:
                h = h + deltas[ell]
            hidden.append(h)
        return hidden

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        h = F.layer_norm(h, (self.config.d,), self.lnf_w, self.lnf_b)
        return h @ self.output_weight.T + self.out_bias

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericalError(f"non-finite LM parameter {name}")

    def checksum(self) -> str:
        import hashlib

        digest = hashlib.sha256()
        for name, p in self.state_dict().items():
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
        return digest.hexdigest()

    def frozen(self, dtype: torch.dtype = torch.float64) -> "MaskedLM":
        """A copy in ``dtype`` with gradients disabled on every parameter."""
        clone = MaskedLM(self.config)
        clone.load_state_dict(self.state_dict())
        clone = clone.to(dtype)
        for p in clone.parameters():
            p.requires_grad_(False)
        clone.eval()
        return clone


# ---------------------------------------------------------------------------
# Single-sequence operations


def embed_tokens(lm: MaskedLM, ids: Sequence[int]) -> EmbeddingSequence:
    ids = list(ids)
    V = lm.config.vocab_size
    for i in ids:
        if not 0 <= i < V:
            raise InputError(f"token id {i} out of range for vocabulary of size {V}")
    vectors = lm.embedding.detach()[torch.tensor(ids, dtype=torch.long)]
    origin: list = ["tok"] * len(ids)
    blank = None
    if Vocabulary.mask_id in ids:
        blank = ids.index(Vocabulary.mask_id)
        origin[blank] = "y"
    return EmbeddingSequence(vectors=vectors, blank_y_index=blank, origin=origin)


def _scatter_perturb(lm: MaskedLM, seq: EmbeddingSequence, deltas: torch.Tensor | None):
    if deltas is None:
        return None
    slots = seq.slot_positions
    n = max((i for _, i in slots), default=-1) + 1
    L, d = lm.config.layers, lm.config.d
    if deltas.ndim != 3 or deltas.shape[0] != L + 1 or deltas.shape[2] != d or deltas.shape[1] < n:
        raise InputError(f"perturbation shape {tuple(deltas.shape)} does not match (L+1={L + 1}, n={n}, d={d})")
    full = deltas.new_zeros(L + 1, 1, len(seq), d)
    for pos, i in slots:
        full[:, 0, pos] = deltas[:, i]
    return full


def forward(lm: MaskedLM, seq: EmbeddingSequence, perturb: torch.Tensor | None = None) -> ForwardResult:
    """Per-position log-distributions and hidden states for one sequence.

    ``perturb`` is an (L+1, n, d) tensor applied at prompt-slot positions only.
    """
    lm.check_finite()
    S = len(seq)
    if not 1 <= S <= lm.config.max_len:
        raise InputError(f"sequence length {S} outside [1, {lm.config.max_len}]")
    inputs = seq.vectors.to(lm.dtype)[None]
    deltas = _scatter_perturb(lm, seq, perturb)
    hidden = lm.encode(inputs, deltas=deltas)
    log_probs = lm.logits(hidden[-1]).log_softmax(dim=-1)[0]
    return ForwardResult(log_probs=log_probs, hidden=[h[0] for h in hidden])


def predict_blank(lm: MaskedLM, seq: EmbeddingSequence, perturb: torch.Tensor | None = None) -> torch.Tensor:
    if seq.blank_y_index is None:
        raise InputError("sequence has no y blank")
    with torch.no_grad():
        return forward(lm, seq, perturb).log_probs[seq.blank_y_index].exp()


def grad(
    lm: MaskedLM,
    seq: EmbeddingSequence,
    perturb: torch.Tensor | None,
    gold_id: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gradients of ``-log p(gold)`` at the y blank.

    Returns ``(d_slots, d_deltas)``: one row per prompt-slot position, ordered
    by slot index, and the full (L+1, n, d) perturbation gradient. x-token
    positions and LM parameters receive no gradient.
    """
    if not 0 <= gold_id < lm.config.vocab_size:
        raise InputError(f"gold id {gold_id} out of range")
    if seq.blank_y_index is None:
        raise InputError("sequence has no y blank")
    slots = seq.slot_positions
    n = max((i for _, i in slots), default=-1) + 1
    L, d = lm.config.layers, lm.config.d
    slot_vecs = torch.zeros(n, d, dtype=lm.dtype)
    for pos, i in slots:
        slot_vecs[i] = seq.vectors[pos]
    slot_vecs.requires_grad_(True)
    if perturb is None:
        perturb = torch.zeros(L + 1, n, d, dtype=lm.dtype)
    perturb = perturb.detach().to(lm.dtype).requires_grad_(True)

    rows = [seq.vectors[pos].detach().to(lm.dtype) for pos in range(len(seq))]
    for pos, i in slots:
        rows[pos] = slot_vecs[i]
    rebuilt = EmbeddingSequence(torch.stack(rows), seq.blank_y_index, list(seq.origin))
    with torch.enable_grad():
        nll = -forward(lm, rebuilt, perturb).log_probs[seq.blank_y_index, gold_id]
        d_slots, d_deltas = torch.autograd.grad(nll, [slot_vecs, perturb])
    return d_slots, d_deltas


def fit_embedding_gaussian(lm: MaskedLM) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and (maximum-likelihood) std over all embedding rows."""
    table = lm.embedding.detach().cpu().numpy().astype(np.float64)
    # Shifting by the first row keeps the std of identical rows at exactly zero.
    shifted = table - table[0]
    offset = shifted.mean(axis=0)
    return table[0] + offset, np.sqrt(((shifted - offset) ** 2).mean(axis=0))


# ---------------------------------------------------------------------------
# Pretraining


@dataclass
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 0


def _masked_batch(examples: list[tuple[list[int], int]], pad_id: int, mask_id: int):
    S = max(len(ids) for ids, _ in examples)
    ids = torch.full((len(examples), S), pad_id, dtype=torch.long)
    positions = torch.empty(len(examples), dtype=torch.long)
    gold = torch.empty(len(examples), dtype=torch.long)
    for b, (tok, pos) in enumerate(examples):
        ids[b, : len(tok)] = torch.tensor(tok)
        gold[b] = tok[pos]
        ids[b, pos] = mask_id
        positions[b] = pos
    return ids, ids != pad_id, positions, gold


def masked_examples(corpus, vocab: Vocabulary, seed: int = 0) -> list[tuple[list[int], int]]:
    """(token ids, masked position) per sentence.

    Fact sentences mask their fact token; distractors (no fact token) mask one
    position drawn from ``seed``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for sent in corpus:
        ids = vocab.encode(sent.tokens)
        pos = sent.fact_token_index
        if pos is None:
            pos = int(rng.integers(len(ids)))
        out.append((ids, pos))
    return out


def masked_cross_entropy(lm: MaskedLM, examples, batch_size: int = 256) -> float:
    """Mean cross-entropy of the masked token over ``examples``."""
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            ids, key_mask, pos, gold = _masked_batch(
                examples[start : start + batch_size], Vocabulary.pad_id, Vocabulary.mask_id
            )
            logits = _masked_logits(lm, ids, key_mask, pos)
            total += F.cross_entropy(logits, gold, reduction="sum").item()
    return total / len(examples)


def masked_accuracy(lm: MaskedLM, examples, batch_size: int = 256, k: int = 1) -> float:
    """Fraction of ``examples`` whose masked token ranks in the top ``k``."""
    hits = 0
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            ids, key_mask, pos, gold = _masked_batch(
                examples[start : start + batch_size], Vocabulary.pad_id, Vocabulary.mask_id
            )
            logits = _masked_logits(lm, ids, key_mask, pos)
            top = logits.topk(k, dim=-1).indices
            hits += (top == gold[:, None]).any(dim=-1).sum().item()
    return hits / len(examples)


def _masked_logits(lm: MaskedLM, ids, key_mask, pos) -> torch.Tensor:
    inputs = lm.embedding[ids]
    h = lm.encode(inputs, key_mask)[-1]
    return lm.logits(h[torch.arange(len(ids)), pos])


def pretrain(
    config: LMConfig,
    corpus,
    vocab: Vocabulary,
    pretrain_config: PretrainConfig | None = None,
) -> MaskedLM:
    """Train a fresh MaskedLM to fill the masked fact token of every corpus sentence.

    Runs single-threaded in float32 with a private generator, so a fixed seed
    reproduces the same parameters bit for bit.
    """
    pc = pretrain_config or PretrainConfig()
    if not corpus:
        raise InputError("corpus is empty")
    if len(vocab) != config.vocab_size:
        raise InputError(f"vocabulary size {len(vocab)} != config.vocab_size {config.vocab_size}")
    examples = masked_examples(corpus, vocab, seed=pc.seed)
    longest = max(len(ids) for ids, _ in examples)
    if longest > config.max_len:
        raise InputError(f"corpus sentence of length {longest} exceeds max_len {config.max_len}")

    lm = MaskedLM(config)
    opt = torch.optim.Adam(lm.parameters(), lr=pc.lr)
    gen = torch.Generator().manual_seed(pc.seed)
    for epoch in range(pc.epochs):
        order = torch.randperm(len(examples), generator=gen).tolist()
        running = 0.0
        for start in range(0, len(order), pc.batch_size):
            batch = [examples[i] for i in order[start : start + pc.batch_size]]
            ids, key_mask, pos, gold = _masked_batch(batch, vocab.pad_id, vocab.mask_id)
            loss = F.cross_entropy(_masked_logits(lm, ids, key_mask, pos), gold)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite pretraining loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(batch)
        logger.info("pretrain epoch %d loss %.4f", epoch + 1, running / len(examples))
    for p in lm.parameters():
        p.requires_grad_(False)
    return lm


# ---------------------------------------------------------------------------
# Persistence


def save_lm(lm: MaskedLM, vocab: Vocabulary, path: str | Path, extra_meta: dict[str, str] | None = None) -> Path:
    meta = lm.config.to_meta()
    meta["vocab"] = " ".join(vocab.tokens)
    meta.update(extra_meta or {})
    tensors = {name: p.detach().cpu().numpy() for name, p in lm.state_dict().items()}
    return save_checkpoint(path, tensors, meta)


def load_lm(path: str | Path) -> tuple[MaskedLM, Vocabulary, dict[str, str]]:
    tensors, meta = load_checkpoint(path)
    try:
        config = LMConfig.from_meta(meta)
        vocab = Vocabulary(meta["vocab"].split(" "))
    except KeyError as exc:
        raise FormatError(f"LM checkpoint missing metadata {exc.args[0]!r}") from None
    lm = MaskedLM(config)
    expected = lm.state_dict()
    if set(expected) != set(tensors):
        raise FormatError("LM checkpoint tensor names do not match the configured architecture")
    for name, ref in expected.items():
        if tuple(ref.shape) != tensors[name].shape:
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, expected {tuple(ref.shape)}")
    lm.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    for p in lm.parameters():
        p.requires_grad_(False)
    return lm, vocab, meta
