"""Mixtures of soft prompts: prediction, objective and training.

The ensemble predicts ``p(y | x) = sum_t w_t(x) * p_LM(y | t, x)``. With static
weighting ``w_t(x) = p(t)`` is a softmax over per-prompt logits. With
data-dependent weighting the prior is reweighted by how plausible ``x`` looks
in each prompt's x blank, ``w_t(x) ∝ p(t) * phat(x | t) ** (1 / T)``, with
``log T`` a tunable scalar. Everything is computed in log space.

Training minimizes the summed negative log-likelihood of the gold answers
either by Adam on all selected parameters or by EM (posterior over prompts,
closed-form weight update, Adam steps on the prompt vectors).
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import InputError, NumericalError
from .lm import MaskedLM, Vocabulary
from .prompts import PromptSet, SoftPrompt, build_batch, embed_batch

logger = logging.getLogger(__name__)

TUNE_MODES = ("weights_only", "vectors_only", "both", "deep_all_layers")
OPTIMIZERS = ("adam", "em")
WEIGHTING_MODES = ("static", "data_dependent")

# Lower bound for mixture logits; keeps EM's log(0) finite.
_MIN_LOGIT = -700.0


@dataclass
class TrainConfig:
    batch_size: int = 64
    patience: int = 4
    max_epochs: int = 16
    optimizer: str = "adam"
    tune_mode: str = "both"
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.tune_mode not in TUNE_MODES:
            raise InputError(f"tune_mode must be one of {TUNE_MODES}, got {self.tune_mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise InputError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0 <= self.patience <= self.max_epochs:
            raise InputError("patience must lie in [0, max_epochs]")
        if self.batch_size < 1:
            raise InputError("batch_size must be positive")


class MixtureModel:
    def __init__(self, prompt_set: PromptSet, weighting_mode: str = "static", log_temperature: float = 0.0):
        if weighting_mode not in WEIGHTING_MODES:
            raise InputError(f"weighting_mode must be one of {WEIGHTING_MODES}")
        self.prompt_set = prompt_set
        self.weighting_mode = weighting_mode
        self.mixture_logits = torch.zeros(len(prompt_set), dtype=torch.float64)
        self.log_temperature = torch.tensor(float(log_temperature), dtype=torch.float64)

    @property
    def prompts(self) -> list[SoftPrompt]:
        return self.prompt_set.prompts

    def prior(self) -> torch.Tensor:
        return self.mixture_logits.softmax(dim=0)

    def tensors(self) -> dict[str, torch.Tensor]:
        """Every tunable tensor by name; the objects are live, not copies."""
        out = {"mixture_logits": self.mixture_logits, "log_temperature": self.log_temperature}
        for i, p in enumerate(self.prompts):
            out[f"prompt{i}.slots"] = p.slots
            out[f"prompt{i}.deep"] = p.deep
        return out

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.tensors().items()}

    def restore(self, snap: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for k, v in self.tensors().items():
                v.copy_(snap[k])

    def copy(self) -> "MixtureModel":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# Scoring


def _validate_xs(xs: Sequence[Sequence[int]], vocab_size: int) -> None:
    for x in xs:
        if not x:
            raise InputError("x must have at least one token")
        if any(not 0 <= i < vocab_size for i in x):
            raise InputError(f"x token id out of range: {list(x)}")


def component_log_probs(model: MixtureModel, lm: MaskedLM, xs: Sequence[Sequence[int]]) -> torch.Tensor:
    """``log p_LM(. | t, x)`` at the y blank: shape (K, B, V)."""
    V = lm.config.vocab_size
    out = []
    for prompt in model.prompts:
        batch = build_batch(prompt, xs, V, lm.config.max_len)
        inputs, deltas = embed_batch(prompt, batch, lm)
        h = lm.encode(inputs, batch.key_mask, deltas)[-1]
        h_y = h[torch.arange(len(xs)), batch.y_pos]
        out.append(lm.logits(h_y).log_softmax(dim=-1))
    return torch.stack(out)


def log_x_likelihood(model: MixtureModel, lm: MaskedLM, xs: Sequence[Sequence[int]]) -> torch.Tensor:
    """``log phat(x | t)`` for every prompt and x: shape (K, B).

    Every x position and the y blank are masked; the estimate is the product
    over x positions of the probability the LM gives the true x token there.
    Masking the y blank leaves y unobserved, which stands in for summing over y.
    """
    V = lm.config.vocab_size
    out = []
    for prompt in model.prompts:
        batch = build_batch(prompt, xs, V, lm.config.max_len)
        inputs, deltas = embed_batch(prompt, batch, lm, mask_x=True)
        h = lm.encode(inputs, batch.key_mask, deltas)[-1]
        rows = torch.arange(len(xs))[:, None].expand_as(batch.x_pos)
        logp = lm.logits(h[rows, batch.x_pos]).log_softmax(dim=-1)  # (B, X, V)
        token_logp = logp.gather(-1, batch.x_ids[..., None])[..., 0]
        out.append(torch.where(batch.x_valid, token_logp, torch.zeros_like(token_logp)).sum(dim=1))
    return torch.stack(out)


def log_weights(model: MixtureModel, lm: MaskedLM, xs: Sequence[Sequence[int]]) -> torch.Tensor:
    """Per-example log mixture weights, shape (K, B)."""
    log_prior = model.mixture_logits.log_softmax(dim=0)[:, None]
    if model.weighting_mode == "static":
        return log_prior.expand(-1, len(xs))
    inv_t = torch.exp(-model.log_temperature)
    return (log_prior + inv_t * log_x_likelihood(model, lm, xs)).log_softmax(dim=0)


def data_dependent_weights(model: MixtureModel, x_token_ids: Sequence[int], lm: MaskedLM) -> torch.Tensor:
    if model.weighting_mode != "data_dependent":
        raise InputError("model does not use data-dependent weighting")
    with torch.no_grad():
        return log_weights(model, lm, [list(x_token_ids)])[:, 0].exp()


def estimate_x_likelihood(prompt: SoftPrompt, x_token_ids: Sequence[int], lm: MaskedLM) -> float:
    probe = MixtureModel(PromptSet("probe", [prompt]))
    with torch.no_grad():
        return float(log_x_likelihood(probe, lm, [list(x_token_ids)])[0, 0].exp())


def log_predict(model: MixtureModel, lm: MaskedLM, xs: Sequence[Sequence[int]]) -> torch.Tensor:
    """Log of the ensemble predictive distribution, shape (B, V)."""
    _validate_xs(xs, lm.config.vocab_size)
    comp = component_log_probs(model, lm, xs)
    return torch.logsumexp(log_weights(model, lm, xs)[..., None] + comp, dim=0)


def predict(model: MixtureModel, x_token_ids: Sequence[int], lm: MaskedLM) -> torch.Tensor:
    with torch.no_grad():
        return log_predict(model, lm, [list(x_token_ids)])[0].exp()


def loss(model: MixtureModel, batch: Sequence[tuple[Sequence[int], int]], lm: MaskedLM) -> torch.Tensor:
    """Summed negative log-likelihood (natural log) of the gold answers."""
    if not batch:
        raise InputError("empty batch")
    V = lm.config.vocab_size
    ys = [y for _, y in batch]
    if any(not 0 <= y < V for y in ys):
        raise InputError("gold answer id outside the vocabulary")
    logp = log_predict(model, lm, [x for x, _ in batch])
    return -logp[torch.arange(len(batch)), torch.tensor(ys)].sum()


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    dev_loss: list[float] = field(default_factory=list)
    dev_p1: list[float] = field(default_factory=list)
    best_epoch: int = 0
    wall_time: float = 0.0
    stopped_early: bool = False
    snapshot: dict[str, torch.Tensor] | None = None

    def as_rows(self) -> list[tuple[int, float, float, float]]:
        return [(i + 1, a, b, c) for i, (a, b, c) in enumerate(zip(self.train_loss, self.dev_loss, self.dev_p1))]


class EarlyStopping:
    """Tracks the best dev loss; ``update`` returns True once ``patience`` epochs pass without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, dev_loss: float) -> bool:
        self.epoch += 1
        if dev_loss < self.best:
            self.best, self.best_epoch = dev_loss, self.epoch
        return self.epoch - self.best_epoch >= self.patience


def encode_pairs(triples, vocab: Vocabulary) -> list[tuple[list[int], int]]:
    """Token ids for (x, y) of each triple; y must be a single vocabulary token."""
    pairs = []
    for t in triples:
        y = vocab.encode([t.y]) if len(t.y.split()) == 1 else None
        if not y:
            raise InputError(f"answer {t.y!r} is not a single vocabulary token")
        pairs.append((vocab.encode(t.x.split()), y[0]))
    return pairs


def _trainable(model: MixtureModel, mode: str) -> tuple[list[torch.Tensor], torch.Tensor | None]:
    params: list[torch.Tensor] = []
    if mode in ("weights_only", "both", "deep_all_layers"):
        params.append(model.mixture_logits)
    if mode in ("vectors_only", "both", "deep_all_layers"):
        params.extend(p.slots for p in model.prompts)
    layer_mask = None
    if mode == "deep_all_layers":
        params.extend(p.deep for p in model.prompts)
        # Layer 0 is covered by the slot vectors themselves.
        layer_mask = torch.ones(model.prompts[0].deep.shape[0], 1, 1, dtype=torch.float64)
        layer_mask[0] = 0.0
    if model.weighting_mode == "data_dependent":
        params.append(model.log_temperature)
    return params, layer_mask


def _adam(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)


def evaluate_pairs(model: MixtureModel, pairs, lm: MaskedLM, batch_size: int = 256) -> tuple[float, float]:
    """(mean loss, P@1) over ``pairs``."""
    total, hits = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            logp = log_predict(model, lm, [x for x, _ in chunk])
            ys = torch.tensor([y for _, y in chunk])
            total -= logp[torch.arange(len(chunk)), ys].sum().item()
            hits += (logp.argmax(dim=-1) == ys).sum().item()
    return total / len(pairs), hits / len(pairs)


def train(
    model: MixtureModel,
    split,
    lm: MaskedLM,
    config: TrainConfig,
    vocab: Vocabulary | None = None,
) -> TrainReport:
    """Tune ``model`` in place on ``split.train`` with early stopping on ``split.dev``.

    ``split`` may hold Triples (then ``vocab`` is required) or already-encoded
    ``(x_ids, y_id)`` pairs. The parameters of the best dev epoch are restored
    before returning. The LM is never modified.
    """
    train_pairs, dev_pairs = split.train, split.dev
    if vocab is not None:
        train_pairs, dev_pairs = encode_pairs(train_pairs, vocab), encode_pairs(dev_pairs, vocab)
    if not train_pairs or not dev_pairs:
        raise InputError("train and dev parts must be nonempty")
    if config.optimizer == "em" and model.weighting_mode != "static":
        raise InputError("EM training supports static weighting only")

    params, layer_mask = _trainable(model, config.tune_mode)
    for p in params:
        p.requires_grad_(True)
    vector_params = [p for p in params if p is not model.mixture_logits]
    tune_weights = any(p is model.mixture_logits for p in params)
    if config.optimizer == "adam":
        opt = _adam(params, config)
    else:
        opt = _adam(vector_params, config) if vector_params else None

    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.patience)
    report = TrainReport()
    best = model.snapshot()
    start_time = time.perf_counter()
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(len(train_pairs))
            epoch_loss = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = [train_pairs[i] for i in order[start : start + config.batch_size]]
                if config.optimizer == "adam":
                    value = loss(model, batch, lm)
                    _check_finite(value, epoch, start)
                    opt.zero_grad()
                    value.backward()
                    if layer_mask is not None:
                        for p in model.prompts:
                            p.deep.grad.mul_(layer_mask)
                    opt.step()
                    epoch_loss += value.item()
                elif opt is not None:
                    epoch_loss += _em_vector_step(model, batch, lm, opt, layer_mask, epoch, start)
            if config.optimizer == "em":
                if tune_weights:
                    em_step(model, train_pairs, lm)
                if opt is None:
                    with torch.no_grad():
                        epoch_loss = loss(model, train_pairs, lm).item()
            dev_loss, dev_p1 = evaluate_pairs(model, dev_pairs, lm)
            if not math.isfinite(dev_loss):
                raise NumericalError(f"non-finite dev loss at epoch {epoch}")
            report.train_loss.append(epoch_loss / len(train_pairs))
            report.dev_loss.append(dev_loss)
            report.dev_p1.append(dev_p1)
            stop = stopper.update(dev_loss)
            if stopper.best_epoch == epoch:
                best = model.snapshot()
            logger.info(
                "epoch %d train %.4f dev %.4f dev P@1 %.4f", epoch, report.train_loss[-1], dev_loss, dev_p1
            )
            if stop and epoch < config.max_epochs:
                report.stopped_early = True
                break
    finally:
        for p in params:
            p.requires_grad_(False)
            p.grad = None
    model.restore(best)
    report.best_epoch = stopper.best_epoch
    report.wall_time = time.perf_counter() - start_time
    report.snapshot = best
    return report


def _check_finite(value: torch.Tensor, epoch: int, start: int) -> None:
    if not torch.isfinite(value):
        raise NumericalError(f"non-finite training loss at epoch {epoch}, batch offset {start}")


# ---------------------------------------------------------------------------
# EM


def posterior(log_prior: torch.Tensor, log_lik: torch.Tensor) -> torch.Tensor:
    """q(t | x, y) ∝ p(t) p_LM(y | t, x), columns normalized; inputs (K,) and (K, N)."""
    joint = log_prior[:, None] + log_lik
    norm = torch.logsumexp(joint, dim=0, keepdim=True)
    return torch.exp(joint - norm)


def gold_log_probs(model: MixtureModel, pairs, lm: MaskedLM) -> torch.Tensor:
    """``log p_LM(y | t, x)`` for each prompt and pair, shape (K, N)."""
    comp = component_log_probs(model, lm, [x for x, _ in pairs])
    ys = torch.tensor([y for _, y in pairs])
    return comp[:, torch.arange(len(pairs)), ys]


def em_step(
    model: MixtureModel,
    full_train_set,
    lm: MaskedLM,
    vector_optimizer: torch.optim.Optimizer | None = None,
) -> MixtureModel:
    """One EM iteration, in place; returns ``model``.

    E-step: posterior over prompts for every pair. M-step: the mixture
    weights become the average posterior; if ``vector_optimizer`` is given it
    takes one step on the expected complete-data loss of the prompt vectors.
    """
    if model.weighting_mode != "static":
        raise InputError("EM requires static weighting")
    with torch.no_grad():
        q = posterior(model.mixture_logits.log_softmax(dim=0), gold_log_probs(model, full_train_set, lm))
        new_prior = q.mean(dim=1)
    if vector_optimizer is not None:
        vector_optimizer.zero_grad()
        expected = -(q * gold_log_probs(model, full_train_set, lm)).sum()
        expected.backward()
        vector_optimizer.step()
    with torch.no_grad():
        model.mixture_logits.copy_(torch.log(new_prior).clamp_min(_MIN_LOGIT))
    return model


def _em_vector_step(model, batch, lm, opt, layer_mask, epoch, start) -> float:
    """E-step on ``batch`` then one optimizer step on the expected complete-data loss."""
    log_lik = gold_log_probs(model, batch, lm)
    log_prior = model.mixture_logits.detach().log_softmax(dim=0)
    q = posterior(log_prior, log_lik.detach())
    objective = -torch.logsumexp(log_prior[:, None] + log_lik.detach(), dim=0).sum()
    _check_finite(objective, epoch, start)
    opt.zero_grad()
    (-(q * log_lik).sum()).backward()
    if layer_mask is not None:
        for p in model.prompts:
            p.deep.grad.mul_(layer_mask)
    opt.step()
    return objective.item()


# ---------------------------------------------------------------------------
# Persistence


def save_mixtures(
    models: dict[str, MixtureModel],
    path,
    meta: dict[str, str] | None = None,
):
    """Write one checkpoint holding a trained mixture per relation."""
    from .checkpoint import save_checkpoint

    tensors: dict[str, np.ndarray] = {}
    info: dict[str, str] = {"relations": " ".join(models)}
    for rel, model in models.items():
        info[f"{rel}.weighting"] = model.weighting_mode
        info[f"{rel}.n_prompts"] = str(len(model.prompts))
        tensors[f"{rel}.mixture_logits"] = model.mixture_logits.detach().numpy()
        tensors[f"{rel}.log_temperature"] = model.log_temperature.detach().numpy()
        for i, prompt in enumerate(model.prompts):
            info[f"{rel}.prompt{i}.layout"] = f"{prompt.x_pos},{prompt.y_pos},{prompt.n_slots}"
            info[f"{rel}.prompt{i}.source"] = prompt.source
            if prompt.provenance is not None:
                info[f"{rel}.prompt{i}.pattern"] = prompt.provenance.render()
            tensors[f"{rel}.prompt{i}.slots"] = prompt.slots.detach().numpy()
            tensors[f"{rel}.prompt{i}.deep"] = prompt.deep.detach().numpy()
    info.update(meta or {})
    return save_checkpoint(path, tensors, info)


def load_mixtures(path, vocab: Vocabulary, layers: int) -> tuple[dict[str, MixtureModel], dict[str, str]]:
    """Inverse of :func:`save_mixtures`; parameters come back in float64."""
    from .checkpoint import load_checkpoint
    from .errors import FormatError
    from .prompts import parse_hard_prompt

    tensors, meta = load_checkpoint(path)
    models: dict[str, MixtureModel] = {}
    try:
        for rel in meta["relations"].split():
            prompts = []
            for i in range(int(meta[f"{rel}.n_prompts"])):
                x_pos, y_pos, _n = (int(v) for v in meta[f"{rel}.prompt{i}.layout"].split(","))
                hard = None
                if f"{rel}.prompt{i}.pattern" in meta:
                    hard = parse_hard_prompt(meta[f"{rel}.prompt{i}.pattern"], vocab, meta[f"{rel}.prompt{i}.source"])
                slots = torch.from_numpy(tensors[f"{rel}.prompt{i}.slots"].astype(np.float64))
                deep = torch.from_numpy(tensors[f"{rel}.prompt{i}.deep"].astype(np.float64))
                prompts.append(SoftPrompt(slots, x_pos, y_pos, layers, provenance=hard, deep=deep))
            model = MixtureModel(PromptSet(rel, prompts), meta[f"{rel}.weighting"])
            model.mixture_logits.copy_(torch.from_numpy(tensors[f"{rel}.mixture_logits"].astype(np.float64)))
            model.log_temperature.copy_(torch.from_numpy(tensors[f"{rel}.log_temperature"].astype(np.float64)))
            models[rel] = model
    except KeyError as exc:
        raise FormatError(f"mixture checkpoint missing entry {exc.args[0]!r}") from None
    return models, meta
