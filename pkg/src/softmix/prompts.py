"""Hard and soft cloze prompts.

A hard prompt is a token pattern with one ``[X]`` and one ``[Y]`` marker. A
soft prompt keeps the pattern's layout but replaces every ordinary token with
a free vector (a *slot*) and carries an optional per-layer perturbation tensor
for deep tuning.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import FormatError, InputError
from .lm import EmbeddingSequence, MaskedLM, Vocabulary
from .world import X_MARK, Y_MARK, CorpusSentence, World

logger = logging.getLogger(__name__)

SOURCES = ("single", "mined", "paraphrase", "per-example", "random")


@dataclass(frozen=True)
class HardPrompt:
    pattern: tuple[str, ...]
    token_ids: tuple[int, ...]  # ids of the ordinary tokens, in order
    source: str = "single"

    @property
    def x_pos(self) -> int:
        return self.pattern.index(X_MARK)

    @property
    def y_pos(self) -> int:
        return self.pattern.index(Y_MARK)

    @property
    def words(self) -> list[str]:
        return [t for t in self.pattern if t not in (X_MARK, Y_MARK)]

    def render(self) -> str:
        return " ".join(self.pattern)

    def __str__(self) -> str:
        return self.render()


def parse_hard_prompt(text: str, vocab: Vocabulary, source: str = "single") -> HardPrompt:
    pattern = tuple(text.split())
    for mark in (X_MARK, Y_MARK):
        count = pattern.count(mark)
        if count != 1:
            raise FormatError(f"prompt {text!r} has {count} {mark} markers, expected exactly 1")
    ids = vocab.encode([t for t in pattern if t not in (X_MARK, Y_MARK)])
    return HardPrompt(pattern, tuple(ids), source)


class SoftPrompt:
    """Tunable vectors laid out like a hard prompt.

    ``slots`` is an (n, d) tensor, one row per ordinary token; ``deep`` is the
    (L+1, n, d) perturbation tensor. The layout (slot count and the positions
    of the two blanks) is fixed at construction; parameter values may only be
    updated in place.
    """

    def __init__(
        self,
        slots: torch.Tensor,
        x_pos: int,
        y_pos: int,
        layers: int,
        provenance: HardPrompt | None = None,
        deep: torch.Tensor | None = None,
    ):
        n, d = slots.shape
        if x_pos == y_pos or not (0 <= x_pos <= n + 1 and 0 <= y_pos <= n + 1):
            raise InputError(f"invalid blank positions x={x_pos}, y={y_pos} for {n} slots")
        self._x_pos = x_pos
        self._y_pos = y_pos
        self.slots = slots
        self.deep = slots.new_zeros(layers + 1, n, d) if deep is None else deep
        if tuple(self.deep.shape) != (layers + 1, n, d):
            raise InputError(f"deep tensor shape {tuple(self.deep.shape)} != {(layers + 1, n, d)}")
        self.provenance = provenance

    @property
    def x_pos(self) -> int:
        return self._x_pos

    @property
    def y_pos(self) -> int:
        return self._y_pos

    @property
    def n_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def source(self) -> str:
        return "random" if self.provenance is None else self.provenance.source

    def layout(self) -> list:
        """Pattern positions: slot index (int), ``"x"`` or ``"y"``."""
        out: list = []
        slot = 0
        for pos in range(self.n_slots + 2):
            if pos == self.x_pos:
                out.append("x")
            elif pos == self.y_pos:
                out.append("y")
            else:
                out.append(slot)
                slot += 1
        return out

    def describe(self) -> str:
        if self.provenance is not None:
            return self.provenance.render()
        return " ".join({"x": X_MARK, "y": Y_MARK}.get(t, "<v>") if isinstance(t, str) else "<v>" for t in self.layout())


@dataclass
class PromptSet:
    relation: str
    prompts: list[SoftPrompt] = field(default_factory=list)

    def __post_init__(self):
        if not self.prompts:
            raise InputError(f"prompt set for {self.relation!r} is empty")

    def __len__(self) -> int:
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)


def init_soft_from_hard(hard: HardPrompt, lm: MaskedLM) -> SoftPrompt:
    rows = lm.embedding.detach()[torch.tensor(hard.token_ids, dtype=torch.long)]
    slots = rows.to(torch.float64).reshape(len(hard.token_ids), lm.config.d).clone()
    return SoftPrompt(slots, hard.x_pos, hard.y_pos, lm.config.layers, provenance=hard)


def init_soft_random(
    shape_from: HardPrompt,
    gaussian: tuple[np.ndarray, np.ndarray],
    seed: int,
    lm: MaskedLM,
) -> SoftPrompt:
    """Random slots drawn per dimension from ``N(mean, std)``; same layout as ``shape_from``."""
    mean, std = (np.asarray(a, dtype=np.float64) for a in gaussian)
    if (std < 0).any():
        raise InputError("Gaussian std must be non-negative")
    rng = np.random.default_rng(seed)
    n = len(shape_from.token_ids)
    values = mean + std * rng.standard_normal((n, mean.shape[0]))
    return SoftPrompt(torch.from_numpy(values), shape_from.x_pos, shape_from.y_pos, lm.config.layers)


# ---------------------------------------------------------------------------
# Instantiation


def _sequence_layout(prompt: SoftPrompt, x_len: int) -> list:
    out: list = []
    for tag in prompt.layout():
        if tag == "x":
            out.extend(("x", j) for j in range(x_len))
        else:
            out.append(tag)
    return out


def instantiate(prompt: SoftPrompt, x_token_ids: Sequence[int], lm: MaskedLM) -> EmbeddingSequence:
    """Splice the x-token embeddings and the MASK embedding into the slot vectors."""
    if not x_token_ids:
        raise InputError("x must have at least one token")
    layout = _sequence_layout(prompt, len(x_token_ids))
    if len(layout) > lm.config.max_len:
        raise InputError(f"instantiated length {len(layout)} exceeds max_len {lm.config.max_len}")
    emb = lm.embedding.detach().to(prompt.slots.dtype)
    rows, origin = [], []
    blank = None
    for pos, tag in enumerate(layout):
        if tag == "y":
            rows.append(emb[Vocabulary.mask_id])
            origin.append("y")
            blank = pos
        elif isinstance(tag, tuple):
            rows.append(emb[x_token_ids[tag[1]]])
            origin.append("x")
        else:
            rows.append(prompt.slots[tag])
            origin.append(tag)
    return EmbeddingSequence(torch.stack(rows), blank, origin)


@dataclass
class PromptBatch:
    """Index tensors that lay out a batch of x values inside one prompt.

    ``table_index`` indexes the concatenation ``[embedding table; slots]``;
    ``delta_index`` is ``slot + 1`` at slot positions and 0 elsewhere.
    """

    table_index: torch.Tensor  # (B, S)
    delta_index: torch.Tensor  # (B, S)
    key_mask: torch.Tensor  # (B, S)
    y_pos: torch.Tensor  # (B,)
    x_pos: torch.Tensor  # (B, X) positions of x tokens, padded with 0
    x_ids: torch.Tensor  # (B, X)
    x_valid: torch.Tensor  # (B, X)


def build_batch(prompt: SoftPrompt, xs: Sequence[Sequence[int]], vocab_size: int, max_len: int) -> PromptBatch:
    B = len(xs)
    layouts = [_sequence_layout(prompt, len(x)) for x in xs]
    S = max(len(l) for l in layouts)
    if S > max_len:
        raise InputError(f"instantiated length {S} exceeds max_len {max_len}")
    X = max(len(x) for x in xs)
    table = np.full((B, S), Vocabulary.pad_id, dtype=np.int64)
    delta = np.zeros((B, S), dtype=np.int64)
    y_pos = np.zeros(B, dtype=np.int64)
    x_pos = np.zeros((B, X), dtype=np.int64)
    x_ids = np.zeros((B, X), dtype=np.int64)
    x_valid = np.zeros((B, X), dtype=bool)
    for b, (x, layout) in enumerate(zip(xs, layouts)):
        for pos, tag in enumerate(layout):
            if tag == "y":
                table[b, pos] = Vocabulary.mask_id
                y_pos[b] = pos
            elif isinstance(tag, tuple):
                j = tag[1]
                table[b, pos] = x[j]
                x_pos[b, j], x_ids[b, j], x_valid[b, j] = pos, x[j], True
            else:
                table[b, pos] = vocab_size + tag
                delta[b, pos] = tag + 1
    key_mask = np.zeros((B, S), dtype=bool)
    for b, layout in enumerate(layouts):
        key_mask[b, : len(layout)] = True
    t = torch.from_numpy
    return PromptBatch(t(table), t(delta), t(key_mask), t(y_pos), t(x_pos), t(x_ids), t(x_valid))


def embed_batch(prompt: SoftPrompt, batch: PromptBatch, lm: MaskedLM, mask_x: bool = False):
    """Differentiable (inputs, deltas) for ``lm.encode``; gradients reach slots and deep."""
    table = torch.cat([lm.embedding.to(prompt.slots.dtype), prompt.slots], dim=0)
    index = batch.table_index
    if mask_x:
        index = index.clone()
        rows = torch.arange(index.shape[0])[:, None].expand_as(batch.x_pos)
        index[rows[batch.x_valid], batch.x_pos[batch.x_valid]] = Vocabulary.mask_id
    inputs = table[index]
    padded = torch.cat([prompt.deep.new_zeros(prompt.deep.shape[0], 1, prompt.deep.shape[2]), prompt.deep], dim=1)
    deltas = padded[:, batch.delta_index]  # (L+1, B, S, d)
    return inputs, deltas


# ---------------------------------------------------------------------------
# Prompt files and per-example prompts


def load_prompt_file(path: str | Path, vocab: Vocabulary, source: str) -> list[HardPrompt]:
    """One prompt per line; ``#`` lines and blank lines skipped; duplicates collapsed."""
    prompts: list[HardPrompt] = []
    seen: set[tuple[str, ...]] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        try:
            prompt = parse_hard_prompt(text, vocab, source)
        except (FormatError, InputError) as exc:
            raise type(exc)(f"{path}:{lineno}: {exc}") from None
        if prompt.pattern in seen:
            logger.warning("%s:%d: duplicate prompt %r dropped", path, lineno, text)
            continue
        seen.add(prompt.pattern)
        prompts.append(prompt)
    return prompts


def load_prompt_manifest(path: str | Path) -> list[tuple[str, str, Path]]:
    """Rows of ``relation<TAB>source<TAB>path``; relative paths resolve against the manifest."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected relation<TAB>source<TAB>path")
        relation, source, file = parts
        if source not in SOURCES:
            raise FormatError(f"{path}:{lineno}: unknown prompt source {source!r}")
        rows.append((relation, source, (path.parent / file) if not Path(file).is_absolute() else Path(file)))
    return rows


def write_prompt_file(prompts: Iterable[str], path: str | Path, header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    lines.extend(prompts)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def aggregate_example_prompts(
    examples: Iterable[tuple[HardPrompt, str, str]],
    min_count: int = 10,
) -> list[HardPrompt]:
    """Distinct prompts seen strictly more than ``min_count`` times, most frequent first."""
    counts: Counter = Counter()
    first: dict[tuple[str, ...], HardPrompt] = {}
    for prompt, _x, _y in examples:
        counts[prompt.pattern] += 1
        first.setdefault(prompt.pattern, prompt)
    # Counter.most_common keeps first-seen order among equal counts.
    return [first[p] for p, c in counts.most_common() if c > min_count]


def example_prompts(corpus: Iterable[CorpusSentence], world: World, relation: str) -> list[tuple[HardPrompt, str, str]]:
    """Per-sentence prompts for ``relation``: each fact sentence with its x and y cut out."""
    entity_tokens = {tuple(e.split()): e for e in world.entities}
    out = []
    for sent in corpus:
        j = sent.fact_token_index
        if j is None:
            continue
        y = sent.tokens[j]
        for start in range(len(sent.tokens)):
            for length in (3, 2, 1):
                span = tuple(sent.tokens[start : start + length])
                x = entity_tokens.get(span)
                if x is None or world.facts.lookup(relation, x) != y:
                    continue
                pattern = list(sent.tokens)
                pattern[j] = Y_MARK
                pattern[start : start + length] = [X_MARK]
                words = [t for t in pattern if t not in (X_MARK, Y_MARK)]
                hard = HardPrompt(tuple(pattern), tuple(world.vocab.encode(words)), "per-example")
                out.append((hard, x, y))
                break
            else:
                continue
            break
    return out
