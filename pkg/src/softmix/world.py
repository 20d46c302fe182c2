"""Synthetic closed world: entities, relations, gold facts and a corpus.

Every fact is expressed in the corpus through the relation's surface
templates, so an LM pretrained on the corpus holds known, checkable knowledge.
The module also derives noisy hard-prompt collections from the templates to
stand in for hand-written, paraphrased and text-mined prompt sets.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InputError
from .lm import Vocabulary

X_MARK = "[X]"
Y_MARK = "[Y]"

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "br", "kl", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]

DISTRACTOR_TEMPLATES = (
    "[X] likes the weather .",
    "[X] met a friend yesterday .",
    "yesterday [X] walked to the market .",
    "[X] is a quiet person .",
    "everyone knows [X] .",
    "[X] wrote a long letter .",
)

# Words that appear only in distractors; prompt corruption also draws on them.
FILLER_WORDS = (
    "likes", "weather", "met", "friend", "yesterday", "walked", "to", "market",
    "quiet", "person", "everyone", "knows", "wrote", "long", "letter",
)


@dataclass(frozen=True)
class RelationSpec:
    """Request for one relation: its templates, answer domain and fact count."""

    name: str
    templates: tuple[str, ...]
    y_domain: tuple[str, ...]
    n_facts: int


@dataclass(frozen=True)
class RelationSchema:
    name: str
    surface_templates: tuple[str, ...]
    y_domain: tuple[str, ...]

    def __post_init__(self):
        if len(self.surface_templates) < 2:
            raise InputError(f"relation {self.name!r} needs at least two surface templates")
        for template in self.surface_templates:
            toks = template.split()
            if toks.count(X_MARK) != 1 or toks.count(Y_MARK) != 1:
                raise InputError(f"template {template!r} needs exactly one [X] and one [Y]")
        if not self.y_domain:
            raise InputError(f"relation {self.name!r} has an empty y domain")


@dataclass
class FactTable:
    """Ordered set of (relation, x, y) triples; functional per (relation, x)."""

    facts: list[tuple[str, str, str]] = field(default_factory=list)

    def __post_init__(self):
        self._index: dict[tuple[str, str], str] = {}
        for rel, x, y in self.facts:
            if (rel, x) in self._index:
                raise InputError(f"relation {rel!r} is not functional for x={x!r}")
            self._index[(rel, x)] = y

    def __len__(self) -> int:
        return len(self.facts)

    def __iter__(self):
        return iter(self.facts)

    def lookup(self, relation: str, x: str) -> str | None:
        return self._index.get((relation, x))

    def for_relation(self, relation: str) -> list[tuple[str, str, str]]:
        return [f for f in self.facts if f[0] == relation]


@dataclass
class CorpusSentence:
    tokens: list[str]
    fact_token_index: int | None = None


@dataclass
class World:
    vocab: Vocabulary
    relations: list[RelationSchema]
    facts: FactTable
    entities: list[str]

    def __iter__(self):
        # Allows ``vocab, relations, facts = world`` style unpacking of the core triple.
        return iter((self.vocab, self.relations, self.facts))

    def relation(self, name: str) -> RelationSchema:
        for rel in self.relations:
            if rel.name == name:
                return rel
        raise InputError(f"unknown relation {name!r}")

    @property
    def answer_tokens(self) -> set[str]:
        return {y for rel in self.relations for y in rel.y_domain}


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str], syllables=(2, 3)) -> list[str]:
    words: list[str] = []
    while len(words) < n:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(k))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def default_relations(n_facts: int = 400, seed: int = 7) -> list[RelationSpec]:
    """Four relations with answer domains of size 6, 12, 20 and 50."""
    rng = np.random.default_rng(seed)
    cities = _pseudo_words(rng, 50, set(), syllables=(2, 2))
    cities = [c + "ton" for c in cities]
    return [
        RelationSpec(
            "plays-instrument",
            ("[X] plays the [Y] .", "[X] is a famous [Y] player .", "the [Y] is played by [X] .",
             "[X] performs on the [Y] ."),
            ("piano", "guitar", "violin", "drums", "flute", "cello"),
            n_facts,
        ),
        RelationSpec(
            "works-as",
            ("[X] works as a [Y] .", "[X] is employed as a [Y] .", "by profession [X] is a [Y] ."),
            ("doctor", "lawyer", "teacher", "farmer", "painter", "singer", "baker", "pilot",
             "nurse", "chemist", "sailor", "poet"),
            n_facts,
        ),
        RelationSpec(
            "speaks",
            ("[X] speaks [Y] .", "the native language of [X] is [Y] .", "[X] writes and talks in [Y] ."),
            tuple(f"{w}ese" for w in _pseudo_words(rng, 20, set(cities), syllables=(1, 2))),
            n_facts,
        ),
        RelationSpec(
            "born-in",
            ("[X] was born in [Y] .", "[X] is a native of [Y] .", "[Y] is the birthplace of [X] .",
             "[X] came into the world in [Y] ."),
            tuple(cities),
            n_facts,
        ),
    ]


def generate_world(n_entities: int, relations_spec: Sequence[RelationSpec], seed: int) -> World:
    """Build entities, a vocabulary and a functional fact table, deterministically in ``seed``.

    Entity names are 1 to 3 pseudo-word tokens. Each relation gets
    ``n_facts`` distinct subjects, each paired with a uniformly drawn answer.
    """
    if not relations_spec:
        raise InputError("relations_spec is empty")
    if n_entities < 1:
        raise InputError("n_entities must be >= 1")
    rng = np.random.default_rng(seed)
    relations = [RelationSchema(s.name, tuple(s.templates), tuple(s.y_domain)) for s in relations_spec]
    if len({r.name for r in relations}) != len(relations):
        raise InputError("duplicate relation names")

    reserved: set[str] = set(FILLER_WORDS)
    for rel in relations:
        for template in rel.surface_templates:
            reserved.update(t for t in template.split() if t not in (X_MARK, Y_MARK))
        reserved.update(rel.y_domain)
    for t in DISTRACTOR_TEMPLATES:
        reserved.update(w for w in t.split() if w != X_MARK)

    n_names = max(8, int(np.ceil(0.8 * n_entities)))
    name_tokens = _pseudo_words(rng, n_names, set(reserved))
    lengths = rng.choice([1, 2, 3], size=n_entities, p=[0.45, 0.4, 0.15])
    entities: list[str] = []
    seen: set[str] = set()
    for length in lengths:
        for _ in range(1000):
            name = " ".join(name_tokens[i] for i in rng.choice(n_names, size=int(length), replace=False))
            if name not in seen:
                break
        else:
            raise InputError("could not draw enough distinct entity names")
        seen.add(name)
        entities.append(name)

    facts = []
    for spec in relations_spec:
        if spec.n_facts > n_entities:
            raise InputError(f"relation {spec.name!r} requests {spec.n_facts} facts but only {n_entities} entities")
        subjects = rng.choice(n_entities, size=spec.n_facts, replace=False)
        answers = rng.integers(len(spec.y_domain), size=spec.n_facts)
        facts.extend((spec.name, entities[s], spec.y_domain[a]) for s, a in zip(subjects, answers))

    words = sorted(reserved | set(name_tokens))
    return World(Vocabulary(words), relations, FactTable(facts), entities)


def fill_template(template: str, x: str, y: str) -> CorpusSentence:
    tokens: list[str] = []
    fact_index = None
    for tok in template.split():
        if tok == X_MARK:
            tokens.extend(x.split())
        elif tok == Y_MARK:
            fact_index = len(tokens)
            tokens.append(y)
        else:
            tokens.append(tok)
    return CorpusSentence(tokens, fact_index)


def generate_corpus(
    world: World,
    repetitions_per_fact: int,
    distractor_rate: float,
    seed: int,
    exclude: Iterable[tuple[str, str, str]] = (),
) -> list[CorpusSentence]:
    """Express every fact ``repetitions_per_fact`` times via random templates.

    ``distractor_rate`` adds that many distractor sentences per fact sentence.
    Facts in ``exclude`` are left out entirely (leakage-controlled mode).
    Sentence order is shuffled.
    """
    if repetitions_per_fact < 1:
        raise InputError("repetitions_per_fact must be >= 1")
    rng = np.random.default_rng(seed)
    excluded = set(exclude)
    templates = {rel.name: rel.surface_templates for rel in world.relations}
    sentences = []
    for fact in world.facts:
        if fact in excluded:
            continue
        rel, x, y = fact
        for _ in range(repetitions_per_fact):
            template = templates[rel][rng.integers(len(templates[rel]))]
            sentences.append(fill_template(template, x, y))
    n_distractors = int(round(distractor_rate * len(sentences)))
    for _ in range(n_distractors):
        template = DISTRACTOR_TEMPLATES[rng.integers(len(DISTRACTOR_TEMPLATES))]
        x = world.entities[rng.integers(len(world.entities))]
        tokens = []
        for tok in template.split():
            tokens.extend(x.split() if tok == X_MARK else [tok])
        sentences.append(CorpusSentence(tokens, None))
    order = rng.permutation(len(sentences))
    return [sentences[i] for i in order]


# ---------------------------------------------------------------------------
# Hard-prompt sources


def _corrupt(template: str, rng: np.random.Generator, pool: Sequence[str], n_replace: int, p_insert: float) -> str:
    toks = template.split()
    ordinary = [i for i, t in enumerate(toks) if t not in (X_MARK, Y_MARK)]
    n_replace = min(n_replace, len(ordinary))
    for i in rng.choice(ordinary, size=n_replace, replace=False):
        toks[i] = pool[rng.integers(len(pool))]
    if rng.random() < p_insert:
        toks.insert(int(rng.integers(len(toks) + 1)), pool[rng.integers(len(pool))])
    return " ".join(toks)


def make_prompts(world: World, relation: str, source: str, n: int, seed: int) -> list[str]:
    """Noisy hard prompts for ``relation``.

    ``single`` is the first template with one word swapped; ``paraphrase``
    swaps one word of the first template at a time; ``mined`` takes every
    template in turn and swaps about half of its words. Swapped-in words come
    from other relations' templates and from distractor sentences.
    """
    rel = world.relation(relation)
    own = {t for tpl in rel.surface_templates for t in tpl.split()}
    pool = sorted(
        {t for other in world.relations if other.name != relation for tpl in other.surface_templates for t in tpl.split()}
        - own - {X_MARK, Y_MARK}
    ) + list(FILLER_WORDS)
    rng = np.random.default_rng([seed, sum(map(ord, relation)), sum(map(ord, source))])
    if source == "single":
        return [_corrupt(rel.surface_templates[0], rng, pool, 1, 0.0)]
    out: list[str] = []
    for attempt in range(50 * n):
        if len(out) == n:
            break
        if source == "paraphrase":
            prompt = _corrupt(rel.surface_templates[0], rng, pool, 1, 0.5)
        elif source == "mined":
            template = rel.surface_templates[attempt % len(rel.surface_templates)]
            n_words = len(template.split()) - 2
            prompt = _corrupt(template, rng, pool, max(1, (n_words + 1) // 2), 0.3)
        else:
            raise InputError(f"unknown prompt source {source!r}")
        if prompt not in out and prompt not in rel.surface_templates:
            out.append(prompt)
    return out


# ---------------------------------------------------------------------------
# Export / import


def write_world(world: World, corpus: Sequence[CorpusSentence], out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "facts": out / "facts.tsv",
        "corpus": out / "corpus.txt",
        "vocab": out / "vocab.txt",
        "relations": out / "relations.tsv",
        "entities": out / "entities.txt",
    }
    write_facts(world.facts, paths["facts"])
    paths["corpus"].write_text("".join(" ".join(s.tokens) + "\n" for s in corpus), encoding="utf-8")
    paths["vocab"].write_text("".join(t + "\n" for t in world.vocab.tokens), encoding="utf-8")
    paths["relations"].write_text(
        "".join(f"{r.name}\t{' '.join(r.y_domain)}\t{' | '.join(r.surface_templates)}\n" for r in world.relations),
        encoding="utf-8",
    )
    paths["entities"].write_text("".join(e + "\n" for e in world.entities), encoding="utf-8")
    return paths


def write_facts(facts: Iterable[tuple[str, str, str]], path: str | Path) -> None:
    Path(path).write_text("".join(f"{r}\t{x}\t{y}\n" for r, x, y in facts), encoding="utf-8")


def read_facts(path: str | Path) -> FactTable:
    facts = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected relation<TAB>x<TAB>y")
        facts.append(tuple(parts))
    return FactTable(facts)


def read_world(world_dir: str | Path) -> World:
    world_dir = Path(world_dir)
    vocab = Vocabulary(world_dir.joinpath("vocab.txt").read_text(encoding="utf-8").split("\n")[:-1])
    relations = []
    for line in world_dir.joinpath("relations.tsv").read_text(encoding="utf-8").splitlines():
        name, ys, templates = line.split("\t")
        relations.append(RelationSchema(name, tuple(t.strip() for t in templates.split(" | ")), tuple(ys.split())))
    entities = world_dir.joinpath("entities.txt").read_text(encoding="utf-8").splitlines()
    return World(vocab, relations, read_facts(world_dir / "facts.tsv"), entities)


def read_corpus(path: str | Path, world: World) -> list[CorpusSentence]:
    """Load a corpus file; the fact token is the (unique) answer-domain token of a line."""
    answers = world.answer_tokens
    corpus = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        tokens = line.split()
        hits = [i for i, t in enumerate(tokens) if t in answers]
        if len(hits) > 1:
            raise FormatError(f"{path}:{lineno}: more than one answer token")
        corpus.append(CorpusSentence(tokens, hits[0] if hits else None))
    return corpus


def facts_by_relation(facts: Iterable[tuple[str, str, str]]) -> dict[str, list[tuple[str, str, str]]]:
    grouped: dict[str, list] = defaultdict(list)
    for fact in facts:
        grouped[fact[0]].append(fact)
    return dict(grouped)
