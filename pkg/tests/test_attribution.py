import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmtattn.attribution import (PerturbationConfig, _reference_probs, attribute, noise_scale,
                                 perturb_embeddings, population_variance, prefix_saliency,
                                 source_contribution, source_contributions, source_saliency,
                                 target_contribution, target_contributions)
from nmtattn.corpus import ParallelExample
from nmtattn.model import Transformer

from _oracles import direct_prefix_gradient_norms, two_pass_variance
from conftest import random_small_model


def _example(src=(4, 7, 5, 9, 3, 1), tgt=(1, 6, 8, 10, 2, 3, 1)):
    n, m = len(tgt) - 2, len(src)
    return ParallelExample(list(src), list(tgt), set(), set(), ["content"] * m, ["content"] * n,
                           [False] * (m - 2) + [True, True], [False] * m, [False] * n, [False] * n)


EX = _example()


# -- noise ------------------------------------------------------------------------

def test_noise_scale_is_relative_to_the_norm():
    e = np.array([[2.0, 0.0], [0.0, 0.0], [3.0, 4.0]])
    np.testing.assert_allclose(noise_scale(e, 0.01), [0.02, 0.0, 0.05])


def test_zero_lambda_returns_the_embedding():
    e = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(perturb_embeddings(e, 0.0, 1), e)
    small = perturb_embeddings(e, 1e-12, 1)
    np.testing.assert_allclose(small, e, atol=1e-10)


def test_noise_std_matches_sigma_monte_carlo():
    e = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    draws = perturb_embeddings(e, 0.01, 42, n=100_000)
    std = (draws - e).std(axis=0)
    sigma = noise_scale(e, 0.01)[:, None]
    np.testing.assert_allclose(std, np.broadcast_to(sigma, std.shape), rtol=0.02)
    np.testing.assert_allclose((draws - e).mean(axis=0), 0.0, atol=4 * sigma.max() / np.sqrt(1e5))


@pytest.mark.parametrize("c", [0.5, 3.0])
def test_noise_std_scales_with_lambda(c):
    e = np.random.default_rng(3).normal(size=(4, 6))
    base = (perturb_embeddings(e, 0.01, 7, n=10_000) - e).std(axis=0)
    scaled = (perturb_embeddings(e, 0.01 * c, 7, n=10_000) - e).std(axis=0)
    # same seed: the noise is the same draw times c
    np.testing.assert_allclose(scaled, c * base, rtol=1e-12)


def test_noise_is_deterministic_under_seed():
    e = np.ones((2, 3))
    assert perturb_embeddings(e, 0.1, 5).tobytes() == perturb_embeddings(e, 0.1, 5).tobytes()
    assert perturb_embeddings(e, 0.1, 5).tobytes() != perturb_embeddings(e, 0.1, 6).tobytes()


def test_zero_norm_embedding_warns_and_stays(caplog):
    e = np.array([[0.0, 0.0], [1.0, 1.0]])
    with caplog.at_level(logging.WARNING, logger="nmtattn.attribution"):
        out = perturb_embeddings(e, 0.1, 0)
    np.testing.assert_array_equal(out[0], 0.0)
    assert "zero-norm" in caplog.text


def test_config_validation():
    with pytest.raises(ValueError):
        PerturbationConfig(lam=-0.1)
    with pytest.raises(ValueError):
        PerturbationConfig(n_samples=0)
    with pytest.raises(ValueError):
        source_contributions(Transformer(random_small_model(0).config, seed=0), EX,
                             PerturbationConfig(n_samples=1))


# -- variance estimator --------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 40), k=st.integers(1, 6))
def test_population_variance_matches_two_pass(seed, n, k):
    x = np.random.default_rng(seed).random((n, k))
    np.testing.assert_allclose(population_variance(x), two_pass_variance(x), atol=1e-12, rtol=0)
    perm = np.random.default_rng(seed + 1).permutation(n)
    np.testing.assert_allclose(population_variance(x[perm]), population_variance(x), atol=1e-15)
    assert (population_variance(x) >= 0).all()


def test_identical_samples_have_zero_variance():
    assert (population_variance(np.tile([0.3, 0.9], (5, 1))) == 0).all()


def test_linear_surrogate_matches_analytic_variance():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 3))
    lam = 0.05
    noisy = perturb_embeddings(emb, lam, 11, n=10_000)
    outputs = (noisy * w).sum(axis=(1, 2))
    analytic = float(((noise_scale(emb, lam) ** 2)[:, None] * w ** 2).sum())
    assert population_variance(outputs) == pytest.approx(analytic, rel=0.05)


# -- contributions on small models -------------------------------------------------

def test_contributions_match_two_pass_on_the_same_samples():
    model = random_small_model(0)
    cfg = PerturbationConfig(lam=0.05, n_samples=12, seed=3)
    rng = np.random.default_rng(cfg.seed)
    noisy = perturb_embeddings(model.embed_source(EX.src_ids), cfg.lam, rng, cfg.n_samples)
    probs = _reference_probs(model, EX, src_emb=noisy, batch=cfg.n_samples)
    c_s = source_contributions(model, EX, cfg)
    np.testing.assert_allclose(c_s[1:], two_pass_variance(probs), atol=1e-12, rtol=0)
    assert c_s[0] == 0.0 and c_s.shape == (len(EX.tgt_ids),)
    assert source_contribution(model, EX, 2, cfg) == c_s[2]

    rng = np.random.default_rng(cfg.seed)
    noisy = perturb_embeddings(model.embed_target(EX.tgt_ids[:-1]), cfg.lam, rng, cfg.n_samples)
    probs = _reference_probs(model, EX, tgt_emb=noisy, batch=cfg.n_samples)
    c_t = target_contributions(model, EX, cfg)
    np.testing.assert_allclose(c_t[1:], two_pass_variance(probs), atol=1e-12, rtol=0)
    assert target_contribution(model, EX, 3, cfg) == c_t[3]
    assert (c_s >= 0).all() and (c_t >= 0).all()


def test_source_contribution_vanishes_when_values_are_zero():
    model = random_small_model(1)
    params = dict(model.params)
    for layer in range(model.config.num_decoder_layers):
        params[f"dec.{layer}.cross.v.w"] = np.zeros_like(params[f"dec.{layer}.cross.v.w"])
        params[f"dec.{layer}.cross.v.b"] = np.zeros_like(params[f"dec.{layer}.cross.v.b"])
    blind = Transformer(model.config, params)
    c_s = source_contributions(blind, EX, PerturbationConfig(lam=0.1, n_samples=10))
    assert np.abs(c_s).max() < 1e-12
    assert target_contributions(blind, EX, PerturbationConfig(lam=0.1, n_samples=10))[1:].max() > 0


def test_zero_noise_gives_zero_contributions():
    model = random_small_model(2)
    cfg = PerturbationConfig(lam=0.0, n_samples=4)
    assert (source_contributions(model, EX, cfg) == 0).all()
    assert (target_contributions(model, EX, cfg) == 0).all()


def test_target_perturbation_beyond_the_prefix_has_no_effect():
    model = random_small_model(3)
    T = len(EX.tgt_ids) - 1
    base = model.embed_target(EX.tgt_ids[:-1])
    noisy = perturb_embeddings(base, 0.2, 0, n=8)
    for t in range(1, T + 1):
        # prediction t reads decoder inputs 0..t-1; perturb only inputs t..T-1
        only_future = np.broadcast_to(base, noisy.shape).copy()
        only_future[:, t:] = noisy[:, t:]
        probs = _reference_probs(model, EX, tgt_emb=only_future, batch=8)
        assert np.abs(population_variance(probs)[t - 1]).max() < 1e-15


def test_first_prediction_depends_on_the_sentinel_only():
    model = random_small_model(4)
    base = model.embed_target(EX.tgt_ids[:-1])
    noisy = perturb_embeddings(base, 0.2, 0, n=6)
    sentinel_only = np.broadcast_to(base, noisy.shape).copy()
    sentinel_only[:, 0] = noisy[:, 0]
    a = _reference_probs(model, EX, tgt_emb=noisy, batch=6)[:, 0]
    b = _reference_probs(model, EX, tgt_emb=sentinel_only, batch=6)[:, 0]
    np.testing.assert_allclose(a, b, atol=1e-15)
    report = attribute(model, EX, PerturbationConfig(n_samples=4), with_saliency=False)
    assert any("sentinel" in f for f in report.flags)


# -- saliency ------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_plain_gradient_mode_equals_direct_gradient_norms(seed):
    model = random_small_model(seed)
    psi = prefix_saliency(model, EX, PerturbationConfig(lam=0.0, n_samples=1))
    direct = direct_prefix_gradient_norms(model, EX)
    T = direct.shape[0]
    # psi[i, t] is the saliency of input i for the prediction at framed position t = k + 1
    np.testing.assert_allclose(psi[:T, 1:], np.triu(direct), atol=1e-12, rtol=0)


def test_psi_is_causal_finite_and_nonnegative():
    model = random_small_model(5)
    psi = prefix_saliency(model, EX, PerturbationConfig(lam=0.05, n_samples=5))
    n = len(EX.tgt_ids)
    assert psi.shape == (n, n)
    assert (np.tril(psi) == 0).all()
    assert np.isfinite(psi).all() and (psi >= 0).all()
    assert (psi[np.triu_indices(n, 1)] > 0).all()


def test_zero_lambda_saliency_is_deterministic():
    model = random_small_model(6)
    cfg = PerturbationConfig(lam=0.0, n_samples=2, seed=9)
    assert prefix_saliency(model, EX, cfg).tobytes() == prefix_saliency(model, EX, cfg).tobytes()
    s = source_saliency(model, EX, cfg)
    assert s.tobytes() == source_saliency(model, EX, cfg).tobytes()
    assert s.shape == (len(EX.src_ids), len(EX.tgt_ids))
    assert (s[:, 0] == 0).all() and (s[:, 1:] > 0).all()


def test_report_json_and_share():
    model = random_small_model(7)
    rep = attribute(model, EX, PerturbationConfig(lam=0.05, n_samples=3),
                    with_source_saliency=True)
    d = rep.to_json()
    assert d["config"] == {"lam": 0.05, "n_samples": 3, "seed": 0}
    assert len(d["c_s"]) == len(d["c_t"]) == len(EX.tgt_ids)
    share = rep.target_share()
    assert share[0] == 0.5 and ((share >= 0) & (share <= 1)).all()
    assert np.array(d["source_saliency"]).shape == (len(EX.src_ids), len(EX.tgt_ids))


# -- trained models -------------------------------------------------------------------

def _word_to_framed(t):
    return t + 1


def test_prefix_only_tokens_rely_on_the_target_prefix(desk_runs):
    run = desk_runs[0]
    cfg = PerturbationConfig()
    prefix_ct, lexicon_ct = [], []
    for ex in run.dev[:150]:
        c_t = target_contributions(run.model, ex, cfg)
        for t in range(ex.num_target_words):
            if ex.tgt_prefix_only[t]:
                prefix_ct.append(c_t[_word_to_framed(t)])
            elif ex.tgt_tags[t] != "punctuation" and not ex.tgt_subword_tail[t]:
                lexicon_ct.append(c_t[_word_to_framed(t)])
    assert len(prefix_ct) > 20
    assert np.mean(prefix_ct) > np.mean(lexicon_ct)


def test_trigger_tokens_get_top_saliency(desk_runs):
    run = desk_runs[0]
    hits = total = 0
    for ex in run.dev[:200]:
        positions = [t for t in range(ex.num_target_words) if ex.tgt_prefix_only[t]]
        if not positions:
            continue
        psi = prefix_saliency(run.model, ex, PerturbationConfig())
        for t in positions:
            col = _word_to_framed(t)
            # the two target words before the inserted token triggered it
            top2 = set(np.argsort(-psi[:col, col], kind="stable")[:2].tolist())
            hits += top2 == {col - 2, col - 1}
            total += 1
    assert total > 20
    assert hits / total >= 0.8


def test_source_saliency_follows_gold_on_the_monotone_task(copy_run):
    hits = total = 0
    for ex in copy_run.dev[:100]:
        sal = source_saliency(copy_run.model, ex, PerturbationConfig())
        for t in range(ex.num_target_words):
            if ex.tgt_tags[t] == "punctuation":
                continue
            gold = {j for (tt, j) in ex.sure if tt == t}
            hits += int(sal[:, _word_to_framed(t)].argmax()) in gold
            total += 1
    assert hits / total >= 0.7
