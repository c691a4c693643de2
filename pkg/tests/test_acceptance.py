"""Acceptance criteria 1-9, each printing one PASS/FAIL line with its measurements."""

import filecmp
import json
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from nmtattn import alignment as al
from nmtattn.attribution import (PerturbationConfig, _reference_probs, noise_scale,
                                 perturb_embeddings, prefix_saliency, source_contributions,
                                 target_contributions)
from nmtattn.cli import run
from nmtattn.corpus import CorpusSpec
from nmtattn.probes import best_alignment_head, min_norm_is_finalizing

from _oracles import (brute_force_aer, direct_prefix_gradient_norms, full_param_grad_check,
                      two_pass_variance)
from conftest import SEEDS, random_small_model

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    def say(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return say


@pytest.fixture(scope="module")
def dev_analyses(desk_runs):
    """Teacher-forced dev analyses with head importance, per seed."""
    return {s: al.analyze(r.model, r.dev, importance=True) for s, r in desk_runs.items()}


def test_criterion_1_gradient_correctness(verdict):
    src, tgt = [4, 7, 5, 9, 3, 1], [1, 6, 8, 10, 2, 3, 1]
    t0 = time.perf_counter()
    err = full_param_grad_check(random_small_model(0), src, tgt, step=3, eps=1e-4)
    secs = time.perf_counter() - t0
    verdict(1, err < 1e-4 and secs < 60, f"max relative error {err:.2e}, {secs:.1f}s")


def test_criterion_2_aer_oracle(verdict):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        nx, ny = rng.integers(1, 7, size=2)
        cells = [(t, j) for t in range(ny) for j in range(nx)]

        def draw(p):
            return {c for c in cells if rng.random() < p}
        sure = draw(0.2)
        possible = sure | draw(0.2)
        hyp = draw(0.3)
        mismatches += al.aer(hyp, sure, possible).aer != brute_force_aer(hyp, sure, possible)
    hand = (al.aer({(0, 0)}, {(0, 0)}, {(0, 0)}).aer == 0.0
            and al.aer({(0, 1)}, {(0, 0)}, {(0, 0)}).aer == 1.0
            and al.aer({(0, 0), (1, 1)}, {(0, 0)}, {(0, 0), (1, 1)}).aer == 0.0)
    verdict(2, mismatches == 0 and hand, f"{mismatches} mismatches in 1000, hand cases {hand}")


def test_criterion_3_estimator_fidelity(verdict):
    from test_attribution import EX
    model = random_small_model(0)
    cfg = PerturbationConfig(lam=0.05, n_samples=16, seed=1)
    worst_var = 0.0
    for side in ("source", "target"):
        rng = np.random.default_rng(cfg.seed)
        if side == "source":
            noisy = perturb_embeddings(model.embed_source(EX.src_ids), cfg.lam, rng, cfg.n_samples)
            probs = _reference_probs(model, EX, src_emb=noisy, batch=cfg.n_samples)
            got = source_contributions(model, EX, cfg)[1:]
        else:
            noisy = perturb_embeddings(model.embed_target(EX.tgt_ids[:-1]), cfg.lam, rng,
                                       cfg.n_samples)
            probs = _reference_probs(model, EX, tgt_emb=noisy, batch=cfg.n_samples)
            got = target_contributions(model, EX, cfg)[1:]
        worst_var = max(worst_var, float(np.abs(got - two_pass_variance(probs)).max()))
    psi = prefix_saliency(model, EX, PerturbationConfig(lam=0.0, n_samples=1))
    direct = direct_prefix_gradient_norms(model, EX)
    worst_psi = float(np.abs(psi[:direct.shape[0], 1:] - np.triu(direct)).max())
    e = np.array([[2.0, 0.0, 0.0], [0.3, -0.4, 1.2]])
    std = (perturb_embeddings(e, 0.01, 0, n=100_000) - e).std(axis=0)
    rel = float(np.abs(std / noise_scale(e, 0.01)[:, None] - 1).max())
    ok = worst_var <= 1e-12 and worst_psi <= 1e-12 and rel <= 0.02
    verdict(3, ok, f"variance diff {worst_var:.1e}, psi diff {worst_psi:.1e}, "
                   f"noise std rel err {rel:.4f}")


def _best(analyses, mode, setting, mask):
    table = al.layer_aer_table(analyses, mode, setting, mask)
    return table[al.best_layer(table, setting)].aer


def test_criterion_4_masking(verdict, dev_analyses):
    finalizing_links = 0
    rows = {}
    for setting in al.SETTINGS:
        plain, masked = [], []
        for s, analyses in dev_analyses.items():
            for a in analyses:
                for layer in range(a.record.num_layers):
                    pairs = al.induce(a, layer, "avg", setting, mask=True).pairs()
                    finalizing_links += sum(a.example.src_finalizing[j] for _, j in pairs)
            plain.append(_best(analyses, "avg", setting, False))
            masked.append(_best(analyses, "avg", setting, True))
        rows[setting] = (float(np.mean(masked)), float(np.mean(plain)))
    ok = finalizing_links == 0 and all(m <= p for m, p in rows.values())
    detail = ", ".join(f"{k}: masked {m:.4f} vs unmasked {p:.4f}" for k, (m, p) in rows.items())
    verdict(4, ok, f"finalizing links under mask {finalizing_links}; mean over seeds {detail}")


def test_criterion_5_head_importance(verdict, dev_analyses):
    worst = 0.0
    wins, detail = 0, []
    for s, analyses in dev_analyses.items():
        for a in analyses:
            worst = max(worst, float(np.abs(a.importance.weights.sum(-1) - 1).max()))
        hi = _best(analyses, "hi", "input", False)
        avg = _best(analyses, "avg", "input", False)
        wins += hi <= avg
        detail.append(f"seed {s} hi {hi:.4f} avg {avg:.4f}")
    verdict(5, worst <= 1e-9 and wins >= 1,
            f"max |sum C_h - 1| {worst:.1e}; input setting: {'; '.join(detail)}")


def test_criterion_6_desk_run(verdict, desk_runs, dev_analyses):
    run0 = desk_runs[0]
    spec = run0.corpus.spec
    assert spec == CorpusSpec(seed=0)
    assert (spec.num_sentences, spec.reorder_window, spec.split_prob, spec.prefix_only_rate) == \
        (5000, 2, 0.1, 0.1)
    vocab = max(len(run0.corpus.src_vocab), len(run0.corpus.tgt_vocab))
    cfg = run0.model.config
    arch = (cfg.num_encoder_layers, cfg.num_decoder_layers, cfg.num_heads) == (2, 2, 4)
    acc = run0.summary["best"]["dev_acc"]
    aer = _best(dev_analyses[0], "avg", "output", False)
    ok = vocab <= 200 and arch and acc >= 0.95 and run0.train_seconds <= 900 and aer <= 0.25
    verdict(6, ok, f"vocab {vocab}, dev acc {acc:.4f}, train {run0.train_seconds:.0f}s, "
                   f"best-layer AER {aer:.4f}")


def test_criterion_7_correlation(verdict, desk_runs, dev_analyses):
    rhos = []
    cfg = PerturbationConfig()
    for s, run_ in desk_runs.items():
        analyses = dev_analyses[s]
        layer = al.best_layer(al.layer_aer_table(analyses), "output")
        mass, share = [], []
        for a in analyses:
            ex = a.example
            soft = al.soft_alignment(a.record, layer, None, "output")
            fin = al.finalizing_mass(soft, ex.finalizing_columns)
            c_s = source_contributions(run_.model, ex, cfg)
            c_t = target_contributions(run_.model, ex, cfg)
            total = c_s + c_t
            for t in range(ex.num_target_words):
                k = t + 1  # framed position of target word t
                if total[k] > 0:
                    mass.append(fin[t])
                    share.append(c_t[k] / total[k])
        rhos.append(float(spearmanr(mass, share).statistic))
    mean = float(np.mean(rhos))
    verdict(7, mean > 0.2, f"Spearman per seed {[round(r, 3) for r in rhos]}, mean {mean:.3f}")


def test_criterion_8_probe(verdict, dev_analyses):
    rates = []
    for s, analyses in dev_analyses.items():
        layer, head, _ = best_alignment_head(analyses)
        rates.append((layer, head, float(min_norm_is_finalizing(analyses, layer, head).mean())))
    majority = sum(r > 0.5 for _, _, r in rates)
    verdict(8, majority >= 2,
            "best head and min-norm finalizing rate per seed "
            + "; ".join(f"({l},{h}) {r:.3f}" for l, h, r in rates))


def _pipeline(root):
    """Every subcommand once, into ``root``."""
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"train": {"max_epochs": 1, "batch_size": 16, "dev_size": 20,
                                         "warmup_steps": 4},
                               "model": {"num_encoder_layers": 1, "num_decoder_layers": 2,
                                         "num_heads": 2, "d_model": 16, "d_ff": 16}}))
    corpus, model = root / "corpus", root / "model" / "best.ckpt"
    common = ["--model", str(model), "--corpus", str(corpus), "--limit", "4"]
    steps = [
        ["gen-corpus", "--num-sentences", "60", "--seed", "5", "--out", str(corpus)],
        ["train", "--corpus", str(corpus), "--config", str(cfg), "--out", str(root / "model")],
        ["align", *common, "--mode", "hi", "--mask", "--out", str(root / "align")],
        ["eval-aer", "--hyp", str(root / "align" / "alignments.align"),
         "--gold", str(root / "align" / "gold.align"), "--out", str(root / "eval")],
        ["attrib", *common, "--samples", "4", "--svg", "--source-saliency",
         "--out", str(root / "attrib")],
        ["probe", *common, "--svg", "--out", str(root / "probe")],
        ["report", *common, "--out", str(root / "report")],
    ]
    return [run(s) for s in steps]


def _differences(a, b):
    cmp = filecmp.dircmp(a, b)
    diff = cmp.left_only + cmp.right_only
    diff += [f for f in cmp.common_files if not filecmp.cmp(a / f, b / f, shallow=False)]
    for sub in cmp.common_dirs:
        diff += [f"{sub}/{d}" for d in _differences(a / sub, b / sub)]
    return diff


def test_criterion_9_determinism(verdict, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes = _pipeline(tmp_path / "a") + _pipeline(tmp_path / "b")
    # paths inside run_config.json name the output root, so compare after rebasing them
    for f in (tmp_path / "b").rglob("run_config.json"):
        f.write_text(f.read_text().replace(str(tmp_path / "b"), str(tmp_path / "a")))
    diff = _differences(tmp_path / "a", tmp_path / "b")
    svgs = len(list((tmp_path / "a").rglob("*.svg")))
    verdict(9, all(c == 0 for c in codes) and not diff and svgs > 0,
            f"exit codes {codes}, {svgs} SVGs per run, differing files {diff}")
