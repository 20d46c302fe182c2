import math

import numpy as np
import pytest
import torch

import softmix.mixture as mx
from conftest import tiny_lm
from softmix.datasets import Split
from softmix.errors import InputError, NumericalError
from softmix.lm import Vocabulary, forward, predict_blank
from softmix.mixture import (
    EarlyStopping,
    MixtureModel,
    TrainConfig,
    data_dependent_weights,
    em_step,
    estimate_x_likelihood,
    load_mixtures,
    log_predict,
    loss,
    posterior,
    predict,
    save_mixtures,
    train,
)
from softmix.prompts import PromptSet, SoftPrompt, init_soft_from_hard, instantiate, parse_hard_prompt

PATTERNS = ["[X] was born in [Y] .", "mary [X] [Y]", "[X] in [Y] was", "born [X] . [Y]"]


def make_model(vocab, lm, k=3, weighting="static", seed=0):
    prompts = [init_soft_from_hard(parse_hard_prompt(p, vocab), lm) for p in PATTERNS[:k]]
    model = MixtureModel(PromptSet("r", prompts), weighting)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.prompts:
            p.slots.add_(0.3 * torch.randn(p.slots.shape, generator=g, dtype=torch.float64))
    return model


def random_pairs(n, seed=0, vocab_size=12):
    rng = np.random.default_rng(seed)
    return [
        ([int(t) for t in rng.integers(2, vocab_size, size=int(rng.integers(1, 3)))], int(rng.integers(2, vocab_size)))
        for _ in range(n)
    ]


def fake_components(monkeypatch, table):
    """Replace the LM with fixed per-prompt log-distributions, shape (K, V), shared by every example."""
    table = torch.as_tensor(table, dtype=torch.float64)
    monkeypatch.setattr(mx, "component_log_probs", lambda model, lm, xs: table[:, None, :].expand(-1, len(xs), -1))


def placeholders(k, d=8, layers=2):
    """Prompts whose vectors are never read (used with faked LM components)."""
    return [SoftPrompt(torch.zeros(1, d, dtype=torch.float64), 0, 2, layers) for _ in range(k)]


def masked_x_oracle(prompt, x, lm):
    """phat(x | t) computed through the single-sequence path, with x positions masked by hand."""
    seq = instantiate(prompt, x, lm)
    vectors = seq.vectors.clone()
    x_positions = [i for i, o in enumerate(seq.origin) if o == "x"]
    for i in x_positions:
        vectors[i] = lm.embedding[Vocabulary.mask_id]
    seq.vectors = vectors
    with torch.no_grad():
        logp = forward(lm, seq, prompt.deep).log_probs
    return math.exp(sum(logp[i, tok].item() for i, tok in zip(x_positions, x)))


# ---------------------------------------------------------------------------
# predict


def test_convex_combination(monkeypatch):
    comps = np.log([[0.8, 0.2], [0.4, 0.6]])
    fake_components(monkeypatch, comps)
    model = MixtureModel(PromptSet("r", placeholders(2)))
    p = predict(model, [1], lm=tiny_lm(vocab_size=2))
    assert p[0].item() == pytest.approx(0.6, abs=1e-12)
    assert p.sum().item() == pytest.approx(1.0, abs=1e-12)


def test_single_prompt_is_the_component(small_vocab):
    lm = tiny_lm(seed=1)
    model = make_model(small_vocab, lm, k=1)
    x = [7, 8]
    expected = predict_blank(lm, instantiate(model.prompts[0], x, lm))
    assert torch.allclose(predict(model, x, lm), expected, atol=1e-14, rtol=0)


def test_three_prompts_match_weighted_sum_oracle(small_vocab):
    lm = tiny_lm(seed=2)
    model = make_model(small_vocab, lm, k=3)
    with torch.no_grad():
        model.mixture_logits.copy_(torch.tensor([0.3, -1.2, 0.9], dtype=torch.float64))
    w = np.exp([0.3, -1.2, 0.9])
    w /= w.sum()
    for x in ([5], [9, 3], [4, 4]):
        oracle = sum(w[k] * predict_blank(lm, instantiate(p, x, lm)).numpy() for k, p in enumerate(model.prompts))
        np.testing.assert_allclose(predict(model, x, lm).numpy(), oracle, atol=1e-10, rtol=0)
        assert abs(predict(model, x, lm).sum().item() - 1) < 1e-6


def test_predict_rejects_out_of_range_x(small_vocab):
    lm = tiny_lm()
    with pytest.raises(InputError):
        predict(make_model(small_vocab, lm), [99], lm)


# ---------------------------------------------------------------------------
# Data-dependent weights and the x-likelihood estimate


def test_infinite_temperature_recovers_static_weights(small_vocab):
    lm = tiny_lm(seed=3)
    model = make_model(small_vocab, lm, weighting="data_dependent")
    with torch.no_grad():
        model.mixture_logits.copy_(torch.tensor([0.5, -0.5, 0.1], dtype=torch.float64))
        model.log_temperature.fill_(20.0)
    for x in ([5], [6, 7]):
        w = data_dependent_weights(model, x, lm)
        assert float((w - model.prior()).abs().max()) < 1e-6


def test_bayes_arithmetic(monkeypatch):
    monkeypatch.setattr(mx, "log_x_likelihood", lambda model, lm, xs: torch.log(torch.tensor([[0.2], [0.1]])))
    model = MixtureModel(PromptSet("r", placeholders(2)), "data_dependent")
    w = data_dependent_weights(model, [3], lm=None)
    np.testing.assert_allclose(w.numpy(), [2 / 3, 1 / 3], atol=1e-12)


def test_data_dependent_weights_match_direct_formula(small_vocab):
    lm = tiny_lm(seed=4)
    model = make_model(small_vocab, lm, weighting="data_dependent")
    with torch.no_grad():
        model.mixture_logits.copy_(torch.tensor([0.2, 1.0, -0.7], dtype=torch.float64))
        model.log_temperature.fill_(0.4)
    x = [6, 9]
    prior = np.exp([0.2, 1.0, -0.7])
    prior /= prior.sum()
    T = math.exp(0.4)
    lik = np.array([masked_x_oracle(p, x, lm) for p in model.prompts])
    w = prior * lik ** (1 / T)
    w /= w.sum()
    np.testing.assert_allclose(data_dependent_weights(model, x, lm).numpy(), w, atol=1e-10, rtol=0)


def test_data_dependent_weights_require_mode(small_vocab):
    lm = tiny_lm()
    with pytest.raises(InputError):
        data_dependent_weights(make_model(small_vocab, lm), [5], lm)


def test_x_likelihood_single_token_is_q_and_pair_is_product(small_vocab):
    lm = tiny_lm(seed=5)
    prompt = make_model(small_vocab, lm, k=1).prompts[0]
    assert estimate_x_likelihood(prompt, [7], lm) == pytest.approx(masked_x_oracle(prompt, [7], lm), rel=1e-12)
    # Two x tokens: the estimate is the product of the two per-position factors.
    seq = instantiate(prompt, [7, 9], lm)
    pos = [i for i, o in enumerate(seq.origin) if o == "x"]
    seq.vectors = seq.vectors.clone()
    seq.vectors[pos] = lm.embedding[Vocabulary.mask_id]
    logp = forward(lm, seq).log_probs
    q1, q2 = logp[pos[0], 7].exp().item(), logp[pos[1], 9].exp().item()
    assert estimate_x_likelihood(prompt, [7, 9], lm) == pytest.approx(q1 * q2, rel=1e-12)


def test_x_likelihood_product_rule(monkeypatch):
    # The LM head is replaced so the masked x positions give the true tokens 0.5 and 0.2.
    lm = tiny_lm()
    prompt = init_soft_from_hard(parse_hard_prompt("[X] a [Y]", Vocabulary([*"abcdefghij"])), lm)

    def head(h):
        p = torch.full(h.shape[:-1] + (12,), 0.5 / 11, dtype=torch.float64)
        p[..., 0, 4], p[..., 1, :] = 0.5, 0.8 / 11
        p[..., 1, 5] = 0.2
        return torch.log(p)

    monkeypatch.setattr(lm, "logits", head)
    assert estimate_x_likelihood(prompt, [4, 5], lm) == pytest.approx(0.1, rel=1e-12)


def test_x_likelihood_range_sweep(small_vocab):
    for seed in range(10):
        lm = tiny_lm(seed=seed, init_std=1.0)
        prompts = make_model(small_vocab, lm, k=4, seed=seed).prompts
        for x, _ in random_pairs(10, seed):
            for p in prompts[:2] if seed % 2 else prompts[2:]:
                v = estimate_x_likelihood(p, x, lm)
                assert 0.0 < v <= 1.0


# ---------------------------------------------------------------------------
# loss


def test_loss_of_half_is_ln2_and_of_one_is_zero(monkeypatch):
    fake_components(monkeypatch, np.log([[0.5, 0.5]]))
    model = MixtureModel(PromptSet("r", placeholders(1)))
    lm = tiny_lm(vocab_size=2)
    assert loss(model, [([1], 0)], lm).item() == pytest.approx(math.log(2), abs=1e-12)
    fake_components(monkeypatch, np.array([[0.0, -math.inf]]))
    assert loss(model, [([1], 0)], lm).item() == 0.0


def test_loss_matches_per_example_oracle(small_vocab):
    lm = tiny_lm(seed=6)
    model = make_model(small_vocab, lm, k=3)
    with torch.no_grad():
        model.mixture_logits.copy_(torch.tensor([1.0, 0.0, -1.0], dtype=torch.float64))
    batch = random_pairs(8, seed=1)
    oracle = sum(-math.log(predict(model, x, lm)[y].item()) for x, y in batch)
    assert loss(model, batch, lm).item() == pytest.approx(oracle, abs=1e-10)
    assert loss(model, batch, lm).item() >= 0


def test_loss_rejects_bad_gold_and_empty_batch(small_vocab):
    lm = tiny_lm()
    model = make_model(small_vocab, lm)
    with pytest.raises(InputError):
        loss(model, [([3], 12)], lm)
    with pytest.raises(InputError):
        loss(model, [], lm)


# ---------------------------------------------------------------------------
# train


def test_two_expert_weights_converge_to_grid_search_optimum(monkeypatch):
    # Prompt A costs 0.1 nats per example and B costs 2.0.
    V = 3
    comps = np.full((2, V), -30.0)
    comps[0, 2], comps[1, 2] = -0.1, -2.0
    fake_components(monkeypatch, comps)
    model = MixtureModel(PromptSet("r", placeholders(2)))
    pairs = [([1], 2)] * 20
    lm = tiny_lm(vocab_size=V)
    config = TrainConfig(tune_mode="weights_only", lr=0.1, max_epochs=200, patience=200, batch_size=20)
    train(model, Split(pairs, pairs), lm, config)
    grid = np.linspace(0, 1, 100_001)
    objective = -np.log(grid * math.exp(-0.1) + (1 - grid) * math.exp(-2.0))
    best_w = grid[np.argmin(objective)]
    p_a = model.prior()[0].item()
    assert p_a > 0.9
    assert abs(p_a - best_w) < 0.05


def test_early_stopping_rule():
    stopper = EarlyStopping(4)
    flags = [stopper.update(v) for v in (1.0, 0.9, 0.95, 0.96, 0.97, 0.98)]
    assert flags == [False, False, False, False, False, True]
    assert stopper.best_epoch == 2


def test_train_stops_on_patience_and_restores_best_epoch(monkeypatch, small_vocab):
    lm = tiny_lm()
    model = make_model(small_vocab, lm, k=2)
    dev_losses = iter([1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.5, 0.4])
    snapshots = []
    real_eval = mx.evaluate_pairs

    def scripted(model_, pairs, lm_, batch_size=256):
        snapshots.append(model_.snapshot())
        return next(dev_losses), real_eval(model_, pairs, lm_)[1]

    monkeypatch.setattr(mx, "evaluate_pairs", scripted)
    pairs = random_pairs(20)
    report = train(model, Split(pairs, pairs[:5]), lm, TrainConfig(tune_mode="both", lr=0.05))
    assert len(report.dev_loss) == 6 and report.stopped_early and report.best_epoch == 2
    for key, value in model.snapshot().items():
        assert torch.equal(value, snapshots[1][key])


def test_train_is_deterministic(small_vocab):
    lm = tiny_lm(seed=7)
    pairs = random_pairs(30, seed=2)
    split = Split(pairs[:24], pairs[24:])
    reports, states = [], []
    for _ in range(2):
        model = make_model(small_vocab, lm)
        r = train(model, split, lm, TrainConfig(tune_mode="deep_all_layers", lr=0.01, max_epochs=3, patience=3, batch_size=8))
        reports.append((r.train_loss, r.dev_loss, r.dev_p1, r.best_epoch, r.stopped_early))
        states.append(model.snapshot())
    assert reports[0] == reports[1]
    assert all(torch.equal(states[0][k], states[1][k]) for k in states[0])


@pytest.mark.parametrize("mode", ["weights_only", "vectors_only", "both", "deep_all_layers"])
def test_mode_isolation_and_frozen_lm(mode, small_vocab):
    lm = tiny_lm(seed=8)
    model = make_model(small_vocab, lm, weighting="data_dependent")
    before = model.snapshot()
    lm_sum = lm.checksum()
    pairs = random_pairs(24, seed=3)
    config = TrainConfig(tune_mode=mode, lr=0.05, max_epochs=3, patience=3, batch_size=8)
    report = train(model, Split(pairs[:16], pairs[16:]), lm, config)
    after = model.snapshot()
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    slots = {k for k in before if k.endswith(".slots")}
    deep = {k for k in before if k.endswith(".deep")}
    expected = {
        "weights_only": {"mixture_logits"},
        "vectors_only": slots,
        "both": slots | {"mixture_logits"},
        "deep_all_layers": slots | deep | {"mixture_logits"},
    }[mode] | {"log_temperature"}
    if report.best_epoch > 0:
        assert changed == expected
    assert lm.checksum() == lm_sum
    if mode == "deep_all_layers":
        for p in model.prompts:
            assert torch.equal(p.deep[0], torch.zeros_like(p.deep[0]))
            assert float(p.deep[1:].abs().sum()) > 0
    for p, q in zip(model.prompts, make_model(small_vocab, lm).prompts):
        assert (p.n_slots, p.x_pos, p.y_pos) == (q.n_slots, q.x_pos, q.y_pos)


def test_weights_only_beats_uniform_mixture(small_vocab):
    lm = tiny_lm(seed=9)
    model = make_model(small_vocab, lm)
    pairs = random_pairs(40, seed=4)
    with torch.no_grad():
        uniform = loss(model, pairs, lm).item()
    config = TrainConfig(tune_mode="weights_only", lr=0.1, max_epochs=150, patience=150, batch_size=40)
    train(model, Split(pairs, pairs), lm, config)
    with torch.no_grad():
        assert loss(model, pairs, lm).item() <= uniform + 1e-9


def test_nonfinite_loss_aborts(monkeypatch, small_vocab):
    lm = tiny_lm()
    model = make_model(small_vocab, lm)
    monkeypatch.setattr(mx, "loss", lambda *a: torch.tensor(float("nan"), requires_grad=True))
    pairs = random_pairs(10)
    with pytest.raises(NumericalError):
        train(model, Split(pairs, pairs), lm, TrainConfig())


def test_train_config_validation():
    with pytest.raises(InputError):
        TrainConfig(tune_mode="everything")
    with pytest.raises(InputError):
        TrainConfig(patience=17)
    with pytest.raises(InputError):
        TrainConfig(optimizer="sgd")
    c = TrainConfig()
    assert (c.batch_size, c.patience, c.max_epochs, c.lr, c.beta1, c.beta2, c.eps) == (64, 4, 16, 1e-3, 0.9, 0.999, 1e-8)


# ---------------------------------------------------------------------------
# EM


def test_posterior_is_one_hot_when_only_one_prompt_explains_the_gold():
    q = posterior(torch.log(torch.tensor([0.5, 0.5], dtype=torch.float64)),
                  torch.tensor([[math.log(0.3)], [-math.inf]], dtype=torch.float64))
    assert q[:, 0].tolist() == [1.0, 0.0]


def test_em_step_with_zero_likelihood_prompt(monkeypatch):
    comps = np.array([[-30.0, math.log(0.6), math.log(0.4)], [0.0, -math.inf, -math.inf]])
    comps[0] -= np.logaddexp.reduce(comps[0])
    fake_components(monkeypatch, comps)
    model = MixtureModel(PromptSet("r", placeholders(2)))
    em_step(model, [([1], 1)], lm=tiny_lm(vocab_size=3))
    assert model.prior()[0].item() == pytest.approx(1.0, abs=1e-12)
    assert torch.isfinite(model.mixture_logits).all()


def test_weights_only_em_is_monotone(small_vocab):
    lm = tiny_lm(seed=10)
    model = make_model(small_vocab, lm)
    pairs = random_pairs(30, seed=5)
    trace = []
    with torch.no_grad():
        for _ in range(20):
            trace.append(loss(model, pairs, lm).item())
            em_step(model, pairs, lm)
        trace.append(loss(model, pairs, lm).item())
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
    assert trace[-1] < trace[0]


def test_em_fixed_point_at_gradient_descent_minimum(small_vocab):
    # This instance has an interior optimum (all three weights well above zero);
    # on a boundary optimum the logits diverge and there is no finite fixed point.
    lm = tiny_lm(seed=7)
    model = make_model(small_vocab, lm)
    pairs = random_pairs(30, seed=7)
    model.mixture_logits.requires_grad_(True)
    opt = torch.optim.LBFGS([model.mixture_logits], lr=1, max_iter=500, tolerance_grad=1e-12,
                            tolerance_change=1e-15, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        value = loss(model, pairs, lm)
        value.backward()
        return value

    opt.step(closure)
    closure()
    assert float(model.mixture_logits.grad.abs().max()) < 1e-8
    model.mixture_logits.requires_grad_(False)
    before = model.prior().clone()
    assert float(before.min()) > 1e-3  # interior optimum
    em_step(model, pairs, lm)
    assert float((model.prior() - before).abs().max()) < 1e-6


def test_em_requires_static_weighting(small_vocab):
    lm = tiny_lm()
    with pytest.raises(InputError):
        em_step(make_model(small_vocab, lm, weighting="data_dependent"), random_pairs(3), lm)


def test_em_training_runs_all_modes(small_vocab):
    lm = tiny_lm(seed=12)
    pairs = random_pairs(24, seed=7)
    for mode in ("weights_only", "vectors_only", "both", "deep_all_layers"):
        model = make_model(small_vocab, lm)
        report = train(model, Split(pairs[:16], pairs[16:]), lm,
                       TrainConfig(optimizer="em", tune_mode=mode, lr=0.02, max_epochs=3, patience=3, batch_size=8))
        assert all(math.isfinite(v) for v in report.train_loss + report.dev_loss)


# ---------------------------------------------------------------------------
# Persistence


def test_mixture_checkpoint_round_trip(tmp_path, small_vocab):
    lm = tiny_lm(seed=13)
    model = make_model(small_vocab, lm, weighting="data_dependent")
    with torch.no_grad():
        model.mixture_logits.copy_(torch.tensor([0.25, -0.5, 1.0], dtype=torch.float64))
        model.log_temperature.fill_(0.75)
        model.prompts[1].deep.fill_(0.125)
    save_mixtures({"r": model}, tmp_path / "m.manifest", {"note": "n"})
    models, meta = load_mixtures(tmp_path / "m.manifest", small_vocab, lm.config.layers)
    again = models["r"]
    assert meta["note"] == "n" and again.weighting_mode == "data_dependent"
    for k, v in model.snapshot().items():
        assert torch.equal(again.snapshot()[k], v.to(torch.float32).to(torch.float64))
    assert [p.describe() for p in again.prompts] == PATTERNS[:3]
