"""Ranking metrics, significance tests, mixture diagnostics and prompt visualization."""

from __future__ import annotations

import html
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import InputError
from .lm import MaskedLM, Vocabulary
from .prompts import SoftPrompt

ALPHA = 0.02


@dataclass(frozen=True)
class RankRecord:
    example_id: int
    rank: int
    relation: str = "all"

    def __post_init__(self):
        if self.rank < 1:
            raise InputError(f"rank must be >= 1, got {self.rank}")

    @property
    def reciprocal_rank(self) -> float:
        return 1.0 / self.rank


@dataclass
class Scores:
    p_at_1: float
    p_at_10: float
    mrr: float
    n: int


@dataclass
class MetricReport:
    per_relation: dict[str, Scores] = field(default_factory=dict)
    macro: Scores | None = None  # unweighted mean over relations
    micro: Scores | None = None  # mean over all examples


def rank_gold(distribution, gold_id: int) -> int:
    """1-based rank of ``gold_id``; ties go to the lower token id."""
    p = np.asarray(distribution.detach().cpu() if isinstance(distribution, torch.Tensor) else distribution)
    pg = p[gold_id]
    return 1 + int(np.count_nonzero(p > pg)) + int(np.count_nonzero(p[:gold_id] == pg))


def _scores(ranks: Sequence[int]) -> Scores:
    r = np.asarray(ranks, dtype=np.float64)
    return Scores(float(np.mean(r <= 1)), float(np.mean(r <= 10)), float(np.mean(1.0 / r)), len(r))


def compute_metrics(ranks: Sequence[RankRecord], grouping: Mapping[int, str] | None = None) -> MetricReport:
    """P@1, P@10 and MRR per relation, plus macro and micro averages.

    ``grouping`` maps example ids to relation names; without it each record's
    own ``relation`` field is used.
    """
    if not ranks:
        raise InputError("no rank records")
    groups: dict[str, list[int]] = defaultdict(list)
    for rec in ranks:
        rel = grouping[rec.example_id] if grouping is not None else rec.relation
        groups[rel].append(rec.rank)
    report = MetricReport({rel: _scores(rs) for rel, rs in groups.items()})
    per = list(report.per_relation.values())
    report.macro = Scores(
        float(np.mean([s.p_at_1 for s in per])),
        float(np.mean([s.p_at_10 for s in per])),
        float(np.mean([s.mrr for s in per])),
        sum(s.n for s in per),
    )
    report.micro = _scores([rec.rank for rec in ranks])
    return report


# ---------------------------------------------------------------------------
# Significance


def sign_test(correct_a: Sequence[bool], correct_b: Sequence[bool]) -> float:
    """Two-sided exact sign test on the discordant pairs."""
    if len(correct_a) != len(correct_b):
        raise InputError(f"paired lists differ in length: {len(correct_a)} vs {len(correct_b)}")
    a_only = sum(1 for a, b in zip(correct_a, correct_b) if a and not b)
    b_only = sum(1 for a, b in zip(correct_a, correct_b) if b and not a)
    return sign_test_counts(a_only, b_only)


def sign_test_counts(a_only: int, b_only: int) -> float:
    n = a_only + b_only
    if n == 0:
        return 1.0
    k = min(a_only, b_only)
    tail = sum(math.comb(n, i) for i in range(k + 1))
    return min(1.0, 2 * tail / 2**n)


def paired_permutation_test(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    resamples: int | None = None,
    exact: bool | None = None,
    seed: int = 0,
) -> float:
    """Two-sided sign-flip permutation test on the mean paired difference.

    ``exact`` enumerates all 2**n flips (n <= 20); the default is exact when
    ``resamples`` is not given. Sampled mode counts the identity flip as one
    of the draws.
    """
    d = np.asarray(scores_a, dtype=np.float64) - np.asarray(scores_b, dtype=np.float64)
    if len(scores_a) != len(scores_b):
        raise InputError("paired lists differ in length")
    n = len(d)
    if exact is None:
        exact = resamples is None
    observed = abs(d.mean()) if n else 0.0
    tol = 1e-12 * max(1.0, observed)
    if exact:
        if n > 20:
            raise InputError(f"exact permutation test limited to n <= 20, got {n}")
        hits = 0
        total = 2**n
        chunk = 1 << 16
        bits = np.arange(n)
        for start in range(0, total, chunk):
            codes = np.arange(start, min(total, start + chunk))
            signs = 1.0 - 2.0 * ((codes[:, None] >> bits) & 1)
            hits += int(np.count_nonzero(np.abs(signs @ d) / max(n, 1) >= observed - tol))
        return hits / total
    if not resamples or resamples < 1:
        raise InputError("sampled mode needs resamples >= 1")
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(resamples - 1, n))
    stats = np.abs(signs @ d) / n
    return (1 + int(np.count_nonzero(stats >= observed - tol))) / resamples


# ---------------------------------------------------------------------------
# Mixture diagnostics


def effective_prompt_count(weights: Sequence[float]) -> tuple[float, float]:
    """Entropy ``H`` of the mixture weights in bits and ``2**H``."""
    p = np.asarray(weights, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise InputError("weights must be a probability distribution")
    nz = p[p > 0]
    H = float(-(nz * np.log2(nz)).sum())
    H = max(H, 0.0)
    return H, float(2.0**H)


# ---------------------------------------------------------------------------
# Visualization


@dataclass
class SlotRow:
    slot: int
    word: str
    p_word: float
    original: str | None
    p_original: float | None
    size_ratio: float | None


def word_distribution(v: torch.Tensor, lm: MaskedLM) -> torch.Tensor:
    """``p(w | v)``: softmax over vocabulary of inner products with the embedding rows."""
    table = lm.embedding.detach().to(torch.float64)
    return (table @ v.detach().to(torch.float64)).softmax(dim=0)


def visualize_prompt(prompt: SoftPrompt, lm: MaskedLM, vocab: Vocabulary) -> list[SlotRow]:
    rows = []
    hard = prompt.provenance
    table = lm.embedding.detach().to(torch.float64)
    for i in range(prompt.n_slots):
        v = prompt.slots[i].detach().to(torch.float64)
        p = word_distribution(v, lm)
        w = int(torch.argmax(p))
        if hard is not None:
            w0 = hard.token_ids[i]
            ratio = float(v.norm() / table[w0].norm())
            rows.append(SlotRow(i, vocab.tokens[w], float(p[w]), vocab.tokens[w0], float(p[w0]), ratio))
        else:
            rows.append(SlotRow(i, vocab.tokens[w], float(p[w]), None, None, None))
    return rows


def mixture_visualization(model, lm: MaskedLM, vocab: Vocabulary) -> list[tuple[float, SoftPrompt, list[SlotRow]]]:
    """(weight, prompt, rows) for every prompt, heaviest first."""
    weights = model.prior().tolist()
    order = sorted(range(len(weights)), key=lambda i: (-weights[i], i))
    return [(weights[i], model.prompts[i], visualize_prompt(model.prompts[i], lm, vocab)) for i in order]


def render_visualization_text(entries) -> str:
    lines = []
    for weight, prompt, rows in entries:
        lines.append(f"{weight:.4f}\t{prompt.describe()}")
        for r in rows:
            orig = "" if r.original is None else f"\t{r.original}\t{r.p_original:.4g}\t{r.size_ratio:.2f}"
            lines.append(f"\tslot {r.slot}\t{r.word}\t{r.p_word:.4g}{orig}")
    return "\n".join(lines) + "\n"


def render_visualization_html(entries, title: str = "soft prompts") -> str:
    p_max = max((r.p_word for _, _, rows in entries for r in rows), default=1.0) or 1.0
    parts = [f"<html><head><meta charset='utf-8'><title>{html.escape(title)}</title></head><body>"]
    parts.append(f"<h1>{html.escape(title)}</h1><table>")
    for weight, prompt, rows in entries:
        soft = []
        orig = []
        slot = 0
        for tag in prompt.layout():
            if isinstance(tag, str):
                mark = "[X]" if tag == "x" else "[Y]"
                soft.append(mark)
                orig.append(mark)
                continue
            r = rows[slot]
            slot += 1
            size = r.size_ratio if r.size_ratio is not None else 1.0
            soft.append(
                f"<span style='color:rgba(0,0,255,{0.2 + 0.8 * r.p_word / p_max:.3f});"
                f"font-size:{size:.2f}em'>{html.escape(r.word)}</span>"
            )
            if r.original is not None:
                orig.append(
                    f"<span style='color:rgba(255,0,0,{0.2 + 0.8 * r.p_original / p_max:.3f})'>"
                    f"{html.escape(r.original)}</span>"
                )
        parts.append(
            f"<tr><td>{weight:.4f}</td><td>{' '.join(soft)}</td><td>{' '.join(orig)}</td></tr>"
        )
    parts.append("</table></body></html>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Report files


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def metric_table(report: MetricReport, diagnostics: Mapping[str, tuple[float, float, int]] | None = None) -> str:
    header = ["relation", "n", "P@1", "P@10", "MRR"]
    if diagnostics is not None:
        header += ["H_bits", "eff_prompts", "n_prompts"]
    lines = ["\t".join(header)]
    rows = list(report.per_relation.items()) + [("macro", report.macro), ("micro", report.micro)]
    for rel, s in rows:
        cells = [rel, str(s.n), _fmt(s.p_at_1), _fmt(s.p_at_10), _fmt(s.mrr)]
        if diagnostics is not None:
            if rel in diagnostics:
                H, eff, k = diagnostics[rel]
                cells += [_fmt(H), _fmt(eff), str(k)]
            else:
                cells += ["", "", ""]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def report_to_dict(report: MetricReport) -> dict:
    def s(x: Scores) -> dict:
        return {"p_at_1": x.p_at_1, "p_at_10": x.p_at_10, "mrr": x.mrr, "n": x.n}

    return {
        "per_relation": {k: s(v) for k, v in report.per_relation.items()},
        "macro": s(report.macro),
        "micro": s(report.micro),
    }


def write_json(data, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
