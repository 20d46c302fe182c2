"""Library-level orchestration shared by the CLI and the experiment tests."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datasets import Split, Triple, filter_single_token_y, split_per_relation, write_split
from .errors import InputError
from .evaluation import RankRecord, rank_gold
from .lm import MaskedLM, Vocabulary, fit_embedding_gaussian, masked_accuracy, masked_cross_entropy, masked_examples
from .mixture import MixtureModel, encode_pairs, log_predict
from .prompts import (
    HardPrompt,
    PromptSet,
    aggregate_example_prompts,
    example_prompts,
    init_soft_from_hard,
    init_soft_random,
    load_prompt_file,
    load_prompt_manifest,
    write_prompt_file,
)
from .world import (
    CorpusSentence,
    World,
    default_relations,
    generate_corpus,
    generate_world,
    make_prompts,
    write_world,
)

PROMPT_SOURCES = ("single", "mined", "paraphrase", "per-example")


def build_world(
    n_entities: int = 600,
    n_facts: int = 400,
    repetitions: int = 4,
    distractor_rate: float = 0.2,
    split_regime: str = "random_80_10_10",
    strict: bool = False,
    seed: int = 0,
) -> tuple[World, list[CorpusSentence], Split]:
    """World, corpus and per-relation split. ``strict`` keeps test facts out of the corpus."""
    world = generate_world(n_entities, default_relations(n_facts), seed)
    triples = filter_single_token_y([Triple(*f) for f in world.facts], world.vocab)
    split = split_per_relation(triples, split_regime, seed)
    exclude = {(t.relation, t.x, t.y) for t in split.test} if strict else ()
    corpus = generate_corpus(world, repetitions, distractor_rate, seed + 1, exclude=exclude)
    return world, corpus, split


def world_prompts(world: World, corpus: Sequence[CorpusSentence], relation: str, source: str,
                  n: int, seed: int, min_count: int = 10) -> list[str]:
    if source == "per-example":
        kept = aggregate_example_prompts(example_prompts(corpus, world, relation), min_count)
        return [p.render() for p in kept]
    return make_prompts(world, relation, source, n, seed)


def write_world_bundle(world, corpus, split, out_dir, n_mined=6, n_paraphrase=6, min_count=10, seed=0,
                       stamp: str | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    paths = write_world(world, corpus, out)
    prompt_dir = out / "prompts"
    prompt_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rel in world.relations:
        for source in PROMPT_SOURCES:
            n = n_mined if source == "mined" else n_paraphrase
            prompts = world_prompts(world, corpus, rel.name, source, n, seed, min_count)
            if not prompts:
                continue
            name = f"{rel.name}.{source}.txt"
            write_prompt_file(prompts, prompt_dir / name, header=stamp)
            rows.append(f"{rel.name}\t{source}\t{name}")
    (prompt_dir / "manifest.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    paths["prompts"] = prompt_dir / "manifest.tsv"
    paths["split"] = write_split(split, out / "split")
    return paths


def load_hard_prompts(manifest: str | Path, relation: str, source: str, vocab: Vocabulary) -> list[HardPrompt]:
    for rel, src, path in load_prompt_manifest(manifest):
        if rel == relation and src == source:
            return load_prompt_file(path, vocab, source)
    raise InputError(f"no {source!r} prompts listed for relation {relation!r} in {manifest}")


def build_mixture(
    relation: str,
    init: str,
    donors: Sequence[HardPrompt],
    lm: MaskedLM,
    seed: int = 0,
    weighting: str = "static",
) -> MixtureModel:
    """Untuned mixture over ``donors``; ``init='random'`` keeps only their layout."""
    if init == "random":
        gauss = fit_embedding_gaussian(lm)
        prompts = [init_soft_random(h, gauss, seed * 1009 + i, lm) for i, h in enumerate(donors)]
    else:
        prompts = [init_soft_from_hard(h, lm) for h in donors]
    return MixtureModel(PromptSet(relation, prompts), weighting)


@dataclass
class Prediction:
    example_id: int
    triple: Triple
    rank: int

    @property
    def correct(self) -> bool:
        return self.rank == 1


def predict_ranks(
    models: dict[str, MixtureModel],
    triples: Sequence[Triple],
    lm: MaskedLM,
    vocab: Vocabulary,
    batch_size: int = 256,
) -> list[Prediction]:
    """Gold rank of every triple under its relation's mixture, in input order."""
    out: list[Prediction | None] = [None] * len(triples)
    by_rel: dict[str, list[int]] = {}
    for i, t in enumerate(triples):
        by_rel.setdefault(t.relation, []).append(i)
    for rel, idx in by_rel.items():
        if rel not in models:
            raise InputError(f"no trained mixture for relation {rel!r}")
        pairs = encode_pairs([triples[i] for i in idx], vocab)
        with torch.no_grad():
            for start in range(0, len(idx), batch_size):
                chunk = pairs[start : start + batch_size]
                probs = log_predict(models[rel], lm, [x for x, _ in chunk]).exp().numpy()
                for j, (_, y) in enumerate(chunk):
                    i = idx[start + j]
                    out[i] = Prediction(i, triples[i], rank_gold(probs[j], y))
    return out  # type: ignore[return-value]


def rank_records(predictions: Sequence[Prediction]) -> list[RankRecord]:
    return [RankRecord(p.example_id, p.rank, p.triple.relation) for p in predictions]


def heldout_split(corpus: Sequence[CorpusSentence], fraction: float, seed: int):
    """Deterministic (train, held-out) partition of a corpus."""
    order = np.random.default_rng(seed).permutation(len(corpus))
    n_held = int(round(fraction * len(corpus)))
    held = sorted(order[:n_held].tolist())
    keep = sorted(order[n_held:].tolist())
    return [corpus[i] for i in keep], [corpus[i] for i in held]


def fact_accuracy(lm: MaskedLM, sentences: Sequence[CorpusSentence], vocab: Vocabulary) -> tuple[float, float]:
    """(masked-fact top-1 accuracy, masked-fact cross-entropy) on fact-bearing sentences."""
    facts = [s for s in sentences if s.fact_token_index is not None]
    if not facts:
        raise InputError("no fact-bearing sentences")
    examples = masked_examples(facts, vocab)
    return masked_accuracy(lm, examples), masked_cross_entropy(lm, examples)
