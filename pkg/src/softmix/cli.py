"""Command-line entry point: ``softmix {world,pretrain,train,eval,compare,viz}``.

Every subcommand reads one key/value config file (``--config``), applies
``--set key=value`` overrides and dedicated flags on top (flags win), and
writes its outputs under ``--out``. Each output directory gets a ``run.txt``
holding the resolved config, its checksum and the seed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import evaluation as ev
from .config import RunConfig, train_config_meta
from .datasets import PARTS, read_split
from .errors import InputError, SoftmixError, UsageError
from .lm import MaskedLM, load_lm, pretrain, save_lm
from .mixture import encode_pairs, load_mixtures, save_mixtures, train
from .pipeline import (
    build_mixture,
    build_world,
    fact_accuracy,
    heldout_split,
    load_hard_prompts,
    predict_ranks,
    rank_records,
    write_world_bundle,
)
from .world import read_corpus, read_world

logger = logging.getLogger("softmix")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _record_run(cfg: RunConfig, out: Path, command: str) -> None:
    _write(out / "run.txt", f"# command={command} {cfg.stamp()}\n" + cfg.render())


def _world_dir(cfg: RunConfig) -> Path:
    cfg.require_exists("world")
    return cfg.path("world")


def _split_dir(cfg: RunConfig) -> Path:
    split = cfg.path("split", required=False)
    return split if split is not None else _world_dir(cfg) / "split"


def _prompt_manifest(cfg: RunConfig) -> Path:
    prompts = cfg.path("prompts", required=False)
    return prompts if prompts is not None else _world_dir(cfg) / "prompts" / "manifest.tsv"


def _load_lm(cfg: RunConfig):
    cfg.require_exists("lm")
    lm, vocab, meta = load_lm(cfg.path("lm"))
    return lm.frozen(torch.float64), vocab


# ---------------------------------------------------------------------------
# Subcommands


def cmd_world(cfg: RunConfig, out: Path) -> None:
    world, corpus, split = build_world(
        n_entities=cfg["n_entities"],
        n_facts=cfg["n_facts"],
        repetitions=cfg["repetitions"],
        distractor_rate=cfg["distractor_rate"],
        split_regime=cfg["split_regime"],
        strict=cfg["strict"],
        seed=cfg["seed"],
    )
    paths = write_world_bundle(
        world, corpus, split, out,
        n_mined=cfg["n_mined"], n_paraphrase=cfg["n_paraphrase"], min_count=cfg["min_count"],
        seed=cfg["seed"], stamp=cfg.stamp(),
    )
    _record_run(cfg, out, "world")
    logger.info("wrote %d facts, %d sentences to %s", len(world.facts), len(corpus), paths["facts"].parent)


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    world_dir = _world_dir(cfg)
    world = read_world(world_dir)
    corpus = read_corpus(world_dir / "corpus.txt", world)
    train_part, held = heldout_split(corpus, cfg["heldout_fraction"], cfg["seed"])
    config = cfg.lm_config(len(world.vocab))
    acc0, ce0 = fact_accuracy(MaskedLM(config), held, world.vocab)
    lm = pretrain(config, train_part, world.vocab, cfg.pretrain_config())
    acc, ce = fact_accuracy(lm, held, world.vocab)
    save_lm(lm, world.vocab, out / "lm.manifest", {"config_sha256": cfg.checksum(), "seed": str(cfg["seed"])})
    report = [
        f"# {cfg.stamp()}",
        f"heldout_sentences\t{len(held)}",
        f"heldout_ce_init\t{ce0:.4f}",
        f"heldout_ce_final\t{ce:.4f}",
        f"heldout_fact_p1_init\t{acc0:.4f}",
        f"heldout_fact_p1_final\t{acc:.4f}",
    ]
    _write(out / "pretrain_report.tsv", "\n".join(report) + "\n")
    _record_run(cfg, out, "pretrain")
    logger.info("held-out masked-fact P@1 %.4f (init %.4f), CE %.4f (init %.4f)", acc, acc0, ce, ce0)


def cmd_train(cfg: RunConfig, out: Path) -> None:
    lm, vocab = _load_lm(cfg)
    split = read_split(_split_dir(cfg))
    manifest = _prompt_manifest(cfg)
    if not manifest.exists():
        raise UsageError(f"prompt manifest not found: {manifest}")
    relations = cfg["relations"] or split.relations
    init = cfg["init"]
    donor_source = "mined" if init == "random" else init
    checksum_before = lm.checksum()
    for mode in cfg["tune_mode"]:
        models = {}
        rows = [f"# {cfg.stamp()} tune_mode={mode} init={init}", "relation\tepoch\ttrain_loss\tdev_loss\tdev_p1\tbest"]
        for k, rel in enumerate(relations):
            donors = load_hard_prompts(manifest, rel, donor_source, vocab)
            model = build_mixture(rel, init, donors, lm, seed=cfg["seed"] + k, weighting=cfg["weighting"])
            if mode != "untuned":
                report = train(model, split.for_relation(rel), lm, cfg.train_config(mode), vocab)
                for epoch, tr, dv, p1 in report.as_rows():
                    best = "*" if epoch == report.best_epoch else ""
                    rows.append(f"{rel}\t{epoch}\t{tr:.4f}\t{dv:.4f}\t{p1:.4f}\t{best}")
                logger.info("%s [%s]: best epoch %d, dev P@1 %.4f (%.1fs)", rel, mode, report.best_epoch,
                            report.dev_p1[report.best_epoch - 1], report.wall_time)
            models[rel] = model
        meta = {"config_sha256": cfg.checksum(), "seed": str(cfg["seed"]), "init": init, "tune_mode": mode}
        if mode != "untuned":
            meta.update(train_config_meta(cfg.train_config(mode)))
        save_mixtures(models, out / mode / "mixture.manifest", meta)
        _write(out / mode / "train_report.tsv", "\n".join(rows) + "\n")
    if lm.checksum() != checksum_before:
        raise SoftmixError("LM parameters changed during prompt tuning")
    _record_run(cfg, out, "train")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    part = cfg["part"]
    if part not in PARTS:
        raise UsageError(f"invalid split part {part!r}; expected one of {PARTS}")
    lm, vocab = _load_lm(cfg)
    cfg.require_exists("mixture")
    models, _ = load_mixtures(cfg.path("mixture"), vocab, lm.config.layers)
    split = read_split(_split_dir(cfg))
    triples = [t for t in split.part(part) if t.relation in models]
    if not triples:
        raise InputError(f"no {part} triples for the trained relations")
    predictions = predict_ranks(models, triples, lm, vocab)
    report = ev.compute_metrics(rank_records(predictions))
    diagnostics = {}
    for rel, model in models.items():
        H, eff = ev.effective_prompt_count(model.prior().tolist())
        diagnostics[rel] = (H, eff, len(model.prompts))

    stamp = f"# {cfg.stamp()} part={part}"
    pred_lines = [stamp, "example_id\trelation\tx\ty\trank\tcorrect\treciprocal_rank"]
    for p in predictions:
        t = p.triple
        pred_lines.append(f"{p.example_id}\t{t.relation}\t{t.x}\t{t.y}\t{p.rank}\t{int(p.correct)}\t{1 / p.rank!r}")
    _write(out / "predictions.tsv", "\n".join(pred_lines) + "\n")
    _write(out / "metrics.tsv", stamp + "\n" + ev.metric_table(report, diagnostics))
    sidecar = ev.report_to_dict(report)
    sidecar["diagnostics"] = {
        rel: {"entropy_bits": H, "effective_prompts": eff, "n_prompts": k} for rel, (H, eff, k) in diagnostics.items()
    }
    sidecar["config_sha256"] = cfg.checksum()
    sidecar["seed"] = cfg["seed"]
    sidecar["part"] = part
    ev.write_json(sidecar, out / "metrics.json")
    _record_run(cfg, out, "eval")
    logger.info("%s macro P@1 %.4f P@10 %.4f MRR %.4f", part, report.macro.p_at_1, report.macro.p_at_10,
                report.macro.mrr)


def read_predictions(run_dir: Path) -> list[tuple[str, str, str, int, float]]:
    path = run_dir / "predictions.tsv"
    if not path.exists():
        raise UsageError(f"no predictions.tsv in {run_dir}")
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or line.startswith("example_id"):
            continue
        _id, rel, x, y, rank, correct, rr = line.split("\t")
        rows.append((rel, x, y, int(correct), float(rr)))
    return rows


def compare_runs(rows_a, rows_b, resamples: int, seed: int) -> dict[str, float]:
    if [r[:3] for r in rows_a] != [r[:3] for r in rows_b]:
        raise InputError("runs were evaluated on different examples or in a different order")
    correct_a = [bool(r[3]) for r in rows_a]
    correct_b = [bool(r[3]) for r in rows_b]
    n = len(rows_a)
    exact = n <= 20
    return {
        "n": n,
        "a_only": sum(a and not b for a, b in zip(correct_a, correct_b)),
        "b_only": sum(b and not a for a, b in zip(correct_a, correct_b)),
        "p1_a": sum(correct_a) / n,
        "p1_b": sum(correct_b) / n,
        "sign_test_p": ev.sign_test(correct_a, correct_b),
        "permutation_p1_p": ev.paired_permutation_test(
            [float(c) for c in correct_a], [float(c) for c in correct_b],
            resamples=None if exact else resamples, exact=exact, seed=seed),
        "permutation_mrr_p": ev.paired_permutation_test(
            [r[4] for r in rows_a], [r[4] for r in rows_b],
            resamples=None if exact else resamples, exact=exact, seed=seed),
    }


def verdict(p: float, alpha: float = ev.ALPHA) -> str:
    return f"significant at {alpha:g}" if p < alpha else "not significant"


def cmd_compare(cfg: RunConfig, out: Path) -> None:
    cfg.require_exists("run_a", "run_b")
    rows_a = read_predictions(cfg.path("run_a"))
    rows_b = read_predictions(cfg.path("run_b"))
    result = compare_runs(rows_a, rows_b, cfg["resamples"], cfg["seed"])
    lines = [f"# {cfg.stamp()}"]
    for key in ("n", "a_only", "b_only"):
        lines.append(f"{key}\t{result[key]}")
    for key in ("p1_a", "p1_b", "sign_test_p", "permutation_p1_p", "permutation_mrr_p"):
        lines.append(f"{key}\t{result[key]:.4f}")
    lines.append(f"sign_test_verdict\t{verdict(result['sign_test_p'])}")
    lines.append(f"permutation_p1_verdict\t{verdict(result['permutation_p1_p'])}")
    lines.append(f"permutation_mrr_verdict\t{verdict(result['permutation_mrr_p'])}")
    lines.append(f"verdict\t{verdict(result['sign_test_p'])}")
    _write(out / "significance.tsv", "\n".join(lines) + "\n")
    align = ["relation\tx\ty\tcorrect_a\tcorrect_b"]
    align += [f"{a[0]}\t{a[1]}\t{a[2]}\t{a[3]}\t{b[3]}" for a, b in zip(rows_a, rows_b)]
    _write(out / "alignment.tsv", "\n".join(align) + "\n")
    ev.write_json({**result, "config_sha256": cfg.checksum(), "seed": cfg["seed"]}, out / "significance.json")
    _record_run(cfg, out, "compare")
    logger.info("sign test p=%.4g (%s)", result["sign_test_p"], verdict(result["sign_test_p"]))


def cmd_viz(cfg: RunConfig, out: Path) -> None:
    lm, vocab = _load_lm(cfg)
    cfg.require_exists("mixture")
    models, _ = load_mixtures(cfg.path("mixture"), vocab, lm.config.layers)
    text, pages = [f"# {cfg.stamp()}"], []
    for rel, model in models.items():
        entries = ev.mixture_visualization(model, lm, vocab)
        text.append(f"## {rel}")
        text.append(ev.render_visualization_text(entries).rstrip("\n"))
        pages.append(ev.render_visualization_html(entries, title=rel))
    _write(out / "viz.txt", "\n".join(text) + "\n")
    _write(out / "viz.html", "".join(pages))
    _record_run(cfg, out, "viz")


COMMANDS = {
    "world": cmd_world,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "viz": cmd_viz,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", required=True, help="output directory (created if missing)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="softmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("world", parents=[common], help="generate world, corpus, prompts and split")
    sub.add_parser("pretrain", parents=[common], help="pretrain the toy masked LM")
    p = sub.add_parser("train", parents=[common], help="train prompt mixtures")
    p.add_argument("--tune-mode", help="comma-separated list of tune modes (or 'untuned')")
    p.add_argument("--init", help="prompt source: single, mined, paraphrase, per-example or random")
    p = sub.add_parser("eval", parents=[common], help="evaluate a trained mixture")
    p.add_argument("--part", help="split part: train, dev or test")
    sub.add_parser("compare", parents=[common], help="significance tests between two eval runs")
    sub.add_parser("viz", parents=[common], help="visualize trained soft prompts")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return UsageError.exit_code if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        overrides = {}
        for item in args.overrides:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        for flag, key in (("tune_mode", "tune_mode"), ("init", "init"), ("part", "part")):
            value = getattr(args, flag, None)
            if value is not None:
                overrides[key] = value
        cfg = RunConfig.load(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except SoftmixError as exc:
        print(f"softmix {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
