import hashlib
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from nmtattn.corpus import CorpusSpec, generate_corpus
from nmtattn.model import ModelConfig, Transformer, load_model
from nmtattn.trainer import TrainConfig, train

SEEDS = (0, 1, 2)
ARCH = "v2"  # bump when the parameter layout or training code changes


def _key(*parts) -> str:
    blob = json.dumps([asdict(p) for p in parts], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class TrainedRun:
    """A corpus plus a model trained on it, built once and cached on disk."""

    def __init__(self, corpus, model, meta, summary, seconds):
        self.corpus = corpus
        self.model = model
        self.meta = meta
        self.summary = summary
        self.train_seconds = seconds

    @property
    def dev(self):
        return self.corpus.split(self.meta["train_config"]["dev_size"])[1]


def trained_run(cache_root: Path, spec: CorpusSpec, tcfg: TrainConfig,
                mcfg_kwargs: dict | None = None) -> TrainedRun:
    corpus = generate_corpus(spec)
    mcfg = ModelConfig(src_vocab=len(corpus.src_vocab), tgt_vocab=len(corpus.tgt_vocab),
                       **(mcfg_kwargs or {}))
    d = cache_root / f"{ARCH}-{_key(spec, tcfg, mcfg)}"
    done = d / "done.json"
    if not done.exists():
        t0 = time.perf_counter()
        summary = train(tcfg, corpus, mcfg, d)
        seconds = time.perf_counter() - t0
        done.write_text(json.dumps({"summary": summary, "seconds": seconds}))
    info = json.loads(done.read_text())
    model, meta = load_model(d / "best.ckpt")
    return TrainedRun(corpus, model, meta, info["summary"], info["seconds"])


@pytest.fixture(scope="session")
def model_cache(request) -> Path:
    return Path(request.config.cache.mkdir("nmtattn-models"))


@pytest.fixture(scope="session")
def desk_runs(model_cache):
    """Default desk configuration trained on the default synthetic corpus, one per seed."""
    return {s: trained_run(model_cache, CorpusSpec(seed=s), TrainConfig(seed=s)) for s in SEEDS}


@pytest.fixture(scope="session")
def copy_run(model_cache):
    """Monotone copy-like task: window 1, no splits, no prefix-only tokens."""
    spec = CorpusSpec(seed=0, reorder_window=1, split_prob=0.0, prefix_only_rate=0.0)
    return trained_run(model_cache, spec, TrainConfig(seed=0, max_epochs=10))


TINY = ModelConfig(src_vocab=11, tgt_vocab=13, num_encoder_layers=1, num_decoder_layers=2,
                   num_heads=2, d_model=8, d_ff=12, max_len=16, dropout=0.0)


def random_small_model(seed: int, cfg: ModelConfig = TINY, scale: float = 0.1) -> Transformer:
    """The model's own random init with biases and layer-norm parameters jittered too."""
    r = np.random.default_rng(seed + 100)
    base = Transformer(cfg, seed=seed)
    return Transformer(cfg, {k: v if k.endswith((".w", "_embed")) else v + r.normal(0.0, scale, v.shape)
                             for k, v in base.params.items()})


@pytest.fixture
def tiny_model():
    return Transformer(TINY, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
