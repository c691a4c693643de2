"""
Source and target-prefix contributions by embedding perturbation, and
noise-averaged gradient saliency over the target prefix.

All quantities here use framed-target indexing: position ``t`` refers to
``example.tgt_ids[t]``; predictions exist for ``t = 1 .. len(tgt_ids) - 1``
and position 0 (the begin sentinel) is never predicted, so its entries stay 0.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import ParallelExample
from .model import Transformer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PerturbationConfig:
    lam: float = 0.01
    n_samples: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def noise_scale(embeddings: np.ndarray, lam: float) -> np.ndarray:
    """Per-token standard deviation ``||e|| * lam``."""
    return np.linalg.norm(embeddings, axis=-1) * lam


def perturb_embeddings(embeddings: np.ndarray, lam: float, rng, n: int | None = None):
    """Add zero-mean Gaussian noise with std ``||e_j|| * lam`` to each row ``e_j``.

    ``rng`` is a seed or ``numpy.random.Generator``. With ``n`` the result
    has a leading sample axis. Zero-norm rows come back unchanged.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    rng = np.random.default_rng(rng)
    emb = np.asarray(embeddings, dtype=np.float64)
    sigma = noise_scale(emb, lam)
    zero = np.nonzero(sigma == 0)[0]
    if lam > 0 and zero.size:
        log.warning("zero-norm embeddings at positions %s left unperturbed", zero.tolist())
    shape = emb.shape if n is None else (n,) + emb.shape
    noise = rng.standard_normal(shape) * sigma[..., None]
    return emb + noise


def population_variance(samples: np.ndarray) -> np.ndarray:
    """``(1/N) sum_n (x_n - mean)^2`` over axis 0, two-pass."""
    samples = np.asarray(samples, dtype=np.float64)
    dev = samples - samples.mean(axis=0)
    return (dev * dev).mean(axis=0)


def _reference_probs(model: Transformer, example: ParallelExample, src_emb=None, tgt_emb=None,
                     batch: int = 1) -> np.ndarray:
    src = np.tile(np.asarray(example.src_ids), (batch, 1))
    tgt = np.asarray(example.tgt_ids)
    logp, _ = model.forward(src, np.tile(tgt[:-1], (batch, 1)), src_emb=src_emb, tgt_emb=tgt_emb)
    return np.exp(np.take_along_axis(logp.data, np.tile(tgt[1:], (batch, 1))[..., None], -1)[..., 0])


def _pad_front(steps: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros(steps.shape[:-1] + (1,)), steps], axis=-1)


def source_contributions(model: Transformer, example: ParallelExample,
                         config: PerturbationConfig = PerturbationConfig()) -> np.ndarray:
    """``C_S`` for every prediction position (entry 0 is unused).

    One noisy copy of the source embeddings per sample serves all steps.
    """
    if config.n_samples < 2:
        raise ValueError("variance needs n_samples >= 2")
    rng = np.random.default_rng(config.seed)
    noisy = perturb_embeddings(model.embed_source(example.src_ids), config.lam, rng, config.n_samples)
    probs = _reference_probs(model, example, src_emb=noisy, batch=config.n_samples)
    return _pad_front(population_variance(probs))


def target_contributions(model: Transformer, example: ParallelExample,
                         config: PerturbationConfig = PerturbationConfig()) -> np.ndarray:
    """``C_T`` for every prediction position (entry 0 is unused).

    Every decoder-input embedding is perturbed in the same pass; the causal
    mask guarantees position ``t`` only sees the perturbed prefix ``< t``.
    """
    if config.n_samples < 2:
        raise ValueError("variance needs n_samples >= 2")
    rng = np.random.default_rng(config.seed)
    tgt_in = np.asarray(example.tgt_ids[:-1])
    noisy = perturb_embeddings(model.embed_target(tgt_in), config.lam, rng, config.n_samples)
    probs = _reference_probs(model, example, tgt_emb=noisy, batch=config.n_samples)
    return _pad_front(population_variance(probs))


def source_contribution(model, example, t: int, config=PerturbationConfig()) -> float:
    """``C_S(y_t)`` for prediction position ``t >= 1``."""
    return float(source_contributions(model, example, config)[t])


def target_contribution(model, example, t: int, config=PerturbationConfig()) -> float:
    """``C_T(y_t)``; at ``t = 1`` only the begin sentinel is in the prefix."""
    return float(target_contributions(model, example, config)[t])


def _saliency(model: Transformer, example: ParallelExample, config: PerturbationConfig,
              side: str) -> np.ndarray:
    """Mean gradient norm of ``P(y_t)`` w.r.t. each input embedding of ``side``.

    The sentence is replicated once per step and per noise sample so one
    backward pass gives every (sample, step) gradient.
    """
    rng = np.random.default_rng(config.seed)
    src = np.asarray(example.src_ids)
    tgt = np.asarray(example.tgt_ids)
    T = tgt.size - 1
    N = config.n_samples
    if side == "target":
        base = model.embed_target(tgt[:-1])
    else:
        base = model.embed_source(src)
    noisy = perturb_embeddings(base, config.lam, rng, N) if config.lam > 0 \
        else np.broadcast_to(base, (N,) + base.shape)
    # batch item (n, k): noise sample n, objective at step k
    emb = ad.Tensor._wrap(np.repeat(noisy, T, axis=0), requires_grad=True)
    kwargs = {"tgt_emb": emb} if side == "target" else {"src_emb": emb}
    with ad.Tape() as tape:
        logp, _ = model.forward(np.tile(src, (N * T, 1)), np.tile(tgt[:-1], (N * T, 1)), **kwargs)
        probs = ad.exp(ad.pick(logp, np.tile(tgt[1:], (N * T, 1))))
        objective = ad.sum(ad.mul(probs, np.tile(np.eye(T), (N, 1))))
    g = ad.backward(tape, objective)[emb]
    norms = np.linalg.norm(g, axis=-1).reshape(N, T, -1)  # (n, step k, position)
    return _pad_front(norms.mean(axis=0).T)               # (position, t = k + 1)


def prefix_saliency(model: Transformer, example: ParallelExample,
                    config: PerturbationConfig = PerturbationConfig()) -> np.ndarray:
    """``psi[i, t]``: saliency of prefix token ``y_i`` for predicting ``y_t``.

    Square in framed-target positions; entries with ``i >= t`` are exactly 0.
    ``n_samples=1, lam=0`` is plain gradient saliency.
    """
    psi = _saliency(model, example, config, "target")
    n = len(example.tgt_ids)
    out = np.zeros((n, n))
    out[: n - 1] = psi
    return np.triu(out, k=1)


def source_saliency(model: Transformer, example: ParallelExample,
                    config: PerturbationConfig = PerturbationConfig()) -> np.ndarray:
    """``|x| x |y|`` gradient saliency of source embeddings, noise on the source."""
    return _saliency(model, example, config, "source")


@dataclass
class AttributionReport:
    tokens: list[str]
    source_tokens: list[str]
    c_s: np.ndarray
    c_t: np.ndarray
    psi: np.ndarray
    config: PerturbationConfig
    source_saliency: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)

    def target_share(self) -> np.ndarray:
        """``C_T / (C_S + C_T)`` per position; 0.5 where both vanish (display only)."""
        total = self.c_s + self.c_t
        return np.divide(self.c_t, total, out=np.full_like(total, 0.5), where=total > 0)

    def to_json(self) -> dict:
        d = {"tokens": self.tokens, "source_tokens": self.source_tokens,
             "c_s": self.c_s.tolist(), "c_t": self.c_t.tolist(), "psi": self.psi.tolist(),
             "config": asdict(self.config), "flags": self.flags}
        if self.source_saliency is not None:
            d["source_saliency"] = self.source_saliency.tolist()
        return d


def attribute(model: Transformer, example: ParallelExample,
              config: PerturbationConfig = PerturbationConfig(), with_saliency: bool = True,
              with_source_saliency: bool = False, src_vocab=None, tgt_vocab=None
              ) -> AttributionReport:
    """Contributions, prefix saliency and (optionally) source saliency for one example."""
    tokens = tgt_vocab.decode(example.tgt_ids) if tgt_vocab else [str(i) for i in example.tgt_ids]
    stoks = src_vocab.decode(example.src_ids) if src_vocab else [str(i) for i in example.src_ids]
    n = len(example.tgt_ids)
    psi = prefix_saliency(model, example, config) if with_saliency else np.zeros((n, n))
    return AttributionReport(
        tokens=tokens,
        source_tokens=stoks,
        c_s=source_contributions(model, example, config),
        c_t=target_contributions(model, example, config),
        psi=psi,
        config=config,
        source_saliency=source_saliency(model, example, config) if with_source_saliency else None,
        flags=["step 1 prefix is the begin sentinel only"],
    )
