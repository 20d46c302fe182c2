"""Relational triples and train/dev/test splits."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InputError
from .lm import Vocabulary

REGIMES = ("random_80_10_10", "distinct_y")
PARTS = ("train", "dev", "test")


@dataclass(frozen=True)
class Triple:
    relation: str
    x: str
    y: str

    def __post_init__(self):
        if not (self.relation and self.x and self.y):
            raise InputError(f"triple has an empty field: {self!r}")


@dataclass
class Split:
    train: list[Triple] = field(default_factory=list)
    dev: list[Triple] = field(default_factory=list)
    test: list[Triple] = field(default_factory=list)
    regime: str = "random_80_10_10"
    seed: int = 0

    def part(self, name: str) -> list[Triple]:
        if name not in PARTS:
            raise InputError(f"unknown split part {name!r}; expected one of {PARTS}")
        return getattr(self, name)

    def for_relation(self, relation: str) -> "Split":
        pick = lambda ts: [t for t in ts if t.relation == relation]  # noqa: E731
        return Split(pick(self.train), pick(self.dev), pick(self.test), self.regime, self.seed)

    @property
    def relations(self) -> list[str]:
        seen: dict[str, None] = {}
        for t in self.train + self.dev + self.test:
            seen.setdefault(t.relation)
        return list(seen)


def load_triples(path: str | Path, vocab: Vocabulary | None = None) -> list[Triple]:
    """Parse ``relation<TAB>x<TAB>y`` lines in file order.

    With ``vocab`` every x token must be known. Duplicate triples are an error.
    """
    triples: list[Triple] = []
    seen: set[Triple] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise FormatError(f"{path}:{lineno}: expected relation<TAB>x<TAB>y, got {len(parts)} field(s)")
        triple = Triple(*parts)
        if triple in seen:
            raise FormatError(f"{path}:{lineno}: duplicate triple {parts}")
        if vocab is not None:
            try:
                vocab.encode(triple.x.split())
            except InputError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
        seen.add(triple)
        triples.append(triple)
    return triples


def write_triples(triples: Iterable[Triple], path: str | Path) -> None:
    Path(path).write_text("".join(f"{t.relation}\t{t.x}\t{t.y}\n" for t in triples), encoding="utf-8")


def filter_single_token_y(triples: Iterable[Triple], vocab: Vocabulary) -> list[Triple]:
    return [t for t in triples if len(t.y.split()) == 1 and t.y in vocab]


def split_random(triples: Sequence[Triple], seed: int) -> Split:
    n = len(triples)
    if n < 10:
        raise InputError(f"need at least 10 triples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [triples[i] for i in order]
    n_train, n_dev = (8 * n) // 10, n // 10
    return Split(
        shuffled[:n_train],
        shuffled[n_train : n_train + n_dev],
        shuffled[n_train + n_dev :],
        "random_80_10_10",
        seed,
    )


def split_distinct_y(triples: Sequence[Triple], seed: int) -> Split:
    """Partition answer values into train/dev/test so no y is shared across parts.

    Groups of triples sharing a y are placed greedily, largest first (ties in
    seeded random order), into the part whose mass is furthest below its
    80/10/10 target. Once the remaining groups only just suffice to fill the
    still-empty parts, they go to those parts.
    """
    groups: dict[str, list[Triple]] = defaultdict(list)
    for t in triples:
        groups[t.y].append(t)
    if len(groups) < 3:
        raise InputError(f"need at least 3 distinct y values, got {len(groups)}")
    rng = np.random.default_rng(seed)
    ys = list(groups)
    ys = [ys[i] for i in rng.permutation(len(ys))]
    ys.sort(key=lambda y: -len(groups[y]))

    n = len(triples)
    targets = np.array([0.8, 0.1, 0.1]) * n
    mass = np.zeros(3)
    bins: list[list[Triple]] = [[], [], []]
    for i, y in enumerate(ys):
        empty = [b for b in range(3) if not bins[b]]
        remaining = len(ys) - i
        candidates = empty if remaining <= len(empty) else range(3)
        b = max(candidates, key=lambda k: (targets[k] - mass[k], -k))
        bins[b].extend(groups[y])
        mass[b] += len(groups[y])
    order = {t: i for i, t in enumerate(triples)}
    train, dev, test = (sorted(part, key=order.__getitem__) for part in bins)
    return Split(train, dev, test, "distinct_y", seed)


def split_per_relation(triples: Sequence[Triple], regime: str, seed: int) -> Split:
    """Split each relation independently and concatenate the parts."""
    if regime not in REGIMES:
        raise InputError(f"unknown split regime {regime!r}")
    by_rel: dict[str, list[Triple]] = defaultdict(list)
    for t in triples:
        by_rel[t.relation].append(t)
    out = Split(regime=regime, seed=seed)
    splitter = split_random if regime == "random_80_10_10" else split_distinct_y
    for k, (relation, group) in enumerate(by_rel.items()):
        part = splitter(group, seed + 1000 * k)
        out.train += part.train
        out.dev += part.dev
        out.test += part.test
    return out


def write_split(split: Split, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in PARTS:
        write_triples(split.part(name), out / f"{name}.tsv")
    header = [f"regime\t{split.regime}", f"seed\t{split.seed}"]
    header += [f"{name}\t{len(split.part(name))}" for name in PARTS]
    manifest = out / "split.txt"
    manifest.write_text("\n".join(header) + "\n", encoding="utf-8")
    return manifest


def read_split(split_dir: str | Path) -> Split:
    split_dir = Path(split_dir)
    manifest = split_dir / "split.txt"
    if not manifest.exists():
        raise FormatError(f"split manifest not found: {manifest}")
    header = dict(line.split("\t", 1) for line in manifest.read_text(encoding="utf-8").splitlines() if line)
    split = Split(regime=header.get("regime", "random_80_10_10"), seed=int(header.get("seed", 0)))
    for name in PARTS:
        part = load_triples(split_dir / f"{name}.tsv")
        if name in header and int(header[name]) != len(part):
            raise FormatError(f"{name}.tsv has {len(part)} triples, manifest says {header[name]}")
        setattr(split, name, part)
    return split
