"""Shared fixtures.

``desk`` is the full-size synthetic world plus a pretrained toy LM. Building it
takes under a minute and happens once per session; the acceptance suite and a
few unit tests that need real knowledge in the LM share it.

Acceptance tests carry ``@pytest.mark.acceptance("<criterion>")``. Their
outcomes are collected here and printed as one PASS/FAIL line per criterion at
the end of the run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import pytest
import torch

from softmix.lm import LMConfig, MaskedLM, PretrainConfig, Vocabulary, pretrain
from softmix.pipeline import build_world, fact_accuracy, heldout_split

torch.set_num_threads(1)

DESK_SEED = 0


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): one acceptance criterion")


_acceptance: dict[str, list[str]] = {}
_notes: dict[str, list[str]] = {}


def acceptance_note(name: str, text: str) -> None:
    """Record a measured value to print under criterion ``name`` in the summary."""
    _notes.setdefault(name, []).append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance.setdefault(name, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _acceptance.items():
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")
        for note in _notes.get(name, []):
            terminalreporter.write_line(f"      {note}")


@dataclass
class Desk:
    world: object
    corpus: list
    split: object
    lm32: MaskedLM  # as pretrained, float32
    lm: MaskedLM  # frozen float64 copy used for tuning
    heldout_accuracy: float
    heldout_ce_init: float
    heldout_ce_final: float
    pretrain_seconds: float

    @property
    def vocab(self) -> Vocabulary:
        return self.world.vocab


@pytest.fixture(scope="session")
def desk() -> Desk:
    start = time.perf_counter()
    world, corpus, split = build_world(seed=DESK_SEED)
    train_part, held = heldout_split(corpus, 0.05, DESK_SEED)
    config = LMConfig(vocab_size=len(world.vocab), seed=DESK_SEED)
    _, ce0 = fact_accuracy(MaskedLM(config), held, world.vocab)
    lm32 = pretrain(config, train_part, world.vocab, PretrainConfig(seed=DESK_SEED))
    seconds = time.perf_counter() - start
    acc, ce = fact_accuracy(lm32, held, world.vocab)
    return Desk(world, corpus, split, lm32, lm32.frozen(torch.float64), acc, ce0, ce, seconds)


def tiny_lm(vocab_size: int = 12, d: int = 8, layers: int = 2, heads: int = 2, max_len: int = 12,
            seed: int = 0, tie_head: bool = True, init_std: float = 0.5) -> MaskedLM:
    """A random float64 LM for algebraic tests. ``init_std`` is large so outputs are far from uniform."""
    cfg = LMConfig(vocab_size=vocab_size, d=d, layers=layers, heads=heads, ffn_dim=16, max_len=max_len,
                   tie_head=tie_head, init_std=init_std, seed=seed)
    return MaskedLM(cfg).frozen(torch.float64)


@pytest.fixture
def small_vocab() -> Vocabulary:
    return Vocabulary(["a", "b", "c", "was", "born", "in", ".", "paris", "rome", "mary"])


SMALL_CONFIG = """\
n_entities = 120
n_facts = 60
pretrain_epochs = 3
max_epochs = 2
patience = 1
world = world
lm = lm/lm.manifest
tune_mode = both, weights_only, untuned
mixture = train/both/mixture.manifest
"""


def run_small_pipeline(root) -> dict[str, int]:
    """Run world, pretrain, train, eval, viz and compare under ``root``; return exit codes."""
    from softmix.cli import main

    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.cfg"
    cfg.write_text(SMALL_CONFIG)
    c = ["--config", str(cfg)]
    return {
        "world": main(["world", *c, "--out", str(root / "world")]),
        "pretrain": main(["pretrain", *c, "--out", str(root / "lm")]),
        "train": main(["train", *c, "--out", str(root / "train")]),
        "eval": main(["eval", *c, "--out", str(root / "eval")]),
        "eval_untuned": main(["eval", *c, "--set", "mixture=train/untuned/mixture.manifest",
                              "--out", str(root / "eval_untuned")]),
        "viz": main(["viz", *c, "--out", str(root / "viz")]),
        "compare": main(["compare", *c, "--set", "run_a=eval", "--set", "run_b=eval_untuned",
                         "--out", str(root / "compare")]),
    }


def tree_bytes(root) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
