"""Teacher-forced maximum-likelihood training with Adam."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import Corpus, ParallelExample
from .model import ModelConfig, Transformer, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_good: str | None):
        self.step = step
        self.last_good = last_good
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_good}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 200
    batch_size: int = 32
    max_epochs: int = 15
    clip_norm: float = 1.0
    dropout: float = 0.1
    dev_size: int = 500
    seed: int = 0
    target_dev_acc: float | None = None

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "eps", "warmup_steps", "batch_size", "max_epochs",
                     "clip_norm", "dev_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ValueError("Adam betas must be < 1")


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return grads, norm


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(t, m_new, v_new)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then inverse square-root decay; peaks at ``cfg.lr``."""
    step = max(step, 1)
    return cfg.lr * min(step / cfg.warmup_steps, math.sqrt(cfg.warmup_steps / step))


def make_batch(examples: list[ParallelExample], pad_id: int):
    """Pad a list of examples into id arrays and masks."""
    S = max(len(e.src_ids) for e in examples)
    T = max(len(e.tgt_ids) for e in examples) - 1
    B = len(examples)
    src = np.full((B, S), pad_id, dtype=np.int64)
    tin = np.full((B, T), pad_id, dtype=np.int64)
    tout = np.full((B, T), pad_id, dtype=np.int64)
    src_mask = np.zeros((B, S), dtype=bool)
    tgt_mask = np.zeros((B, T))
    for b, e in enumerate(examples):
        src[b, :len(e.src_ids)] = e.src_ids
        src_mask[b, :len(e.src_ids)] = True
        n = len(e.tgt_ids) - 1
        tin[b, :n] = e.tgt_ids[:-1]
        tout[b, :n] = e.tgt_ids[1:]
        tgt_mask[b, :n] = 1.0
    return src, src_mask, tin, tout, tgt_mask


def batch_loss(model: Transformer, examples, P=None, rng=None):
    src, src_mask, tin, tout, tmask = make_batch(examples, model.config.pad_id)
    logp, _ = model.forward(src, tin, src_mask=src_mask, P=P, rng=rng)
    return ad.cross_entropy(logp, tout, tmask), logp, tout, tmask


def loss_and_grads(model: Transformer, examples, rng=None):
    P = model.tensors(requires_grad=True)
    with ad.Tape() as tape:
        loss, *_ = batch_loss(model, examples, P=P, rng=rng)
    g = ad.backward(tape, loss)
    return float(loss.data), {k: g[t] for k, t in P.items()}


def evaluate_dev(model: Transformer, examples, batch_size: int = 64) -> dict[str, float]:
    """Token-level cross-entropy and greedy accuracy under teacher forcing."""
    nll = 0.0
    correct = 0.0
    total = 0.0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        loss, logp, tout, tmask = batch_loss(model, chunk)
        n = tmask.sum()
        nll += float(loss.data) * n
        correct += float(((logp.data.argmax(-1) == tout) * tmask).sum())
        total += n
    return {"dev_ce": float(nll / total), "dev_acc": float(correct / total)}


def save_training_checkpoint(path, model: Transformer, state: AdamState, meta: dict) -> None:
    tensors = dict(model.params)
    for k in model.params:
        tensors[f"adam.m/{k}"] = state.m[k]
        tensors[f"adam.v/{k}"] = state.v[k]
    save_checkpoint(path, model.config, tensors, {**meta, "adam_step": state.step})


def load_training_checkpoint(path) -> tuple[Transformer, AdamState, dict]:
    config, tensors, meta = load_checkpoint(path)
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    m = {k: tensors.get(f"adam.m/{k}", np.zeros_like(v)) for k, v in params.items()}
    v = {k: tensors.get(f"adam.v/{k}", np.zeros_like(p)) for k, p in params.items()}
    return Transformer(config, params), AdamState(int(meta.get("adam_step", 0)), m, v), meta


def train(cfg: TrainConfig, corpus: Corpus, model_cfg: ModelConfig, out_dir) -> dict:
    """Train and keep the best-dev checkpoint.

    Writes ``out_dir/best.ckpt``, ``out_dir/last.ckpt`` and the JSON-lines
    metric log ``out_dir/metrics.jsonl`` (one record per epoch). Returns the
    final summary. Identical ``(cfg, corpus, model_cfg)`` give identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not corpus.examples:
        raise ValueError("corpus is empty")
    train_set, dev_set = corpus.split(cfg.dev_size)
    model_cfg = ModelConfig(**{**asdict(model_cfg), "dropout": cfg.dropout,
                               "eos_id": corpus.tgt_vocab.eos_id, "pad_id": corpus.tgt_vocab.pad_id})
    model = Transformer(model_cfg, seed=cfg.seed)
    state = AdamState.zeros(model.params)
    rng = np.random.default_rng(cfg.seed)
    meta = {"train_config": asdict(cfg), "src_vocab": corpus.src_vocab.to_json(),
            "tgt_vocab": corpus.tgt_vocab.to_json()}
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    best = {"dev_acc": -1.0}
    last_good = None
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_set[k] for k in order[i:i + cfg.batch_size]]
            try:
                loss, grads = loss_and_grads(model, batch, rng=rng)
            except ad.NonFiniteError:
                loss = float("nan")
            if not math.isfinite(loss):
                raise TrainingDiverged(step + 1, last_good)
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            step += 1
            model.params, state = adam_step(model.params, grads, state, learning_rate(step, cfg),
                                            cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(loss)
        record = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)),
                  "lr": learning_rate(step, cfg), **evaluate_dev(model, dev_set)}
        with open(metrics_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        log.info("epoch %d step %d loss %.4f dev_ce %.4f dev_acc %.4f", epoch, step,
                 record["train_loss"], record["dev_ce"], record["dev_acc"])
        save_training_checkpoint(out / "last.ckpt", model, state, {**meta, "epoch": epoch})
        last_good = str(out / "last.ckpt")
        if record["dev_acc"] > best["dev_acc"]:
            best = record
            save_training_checkpoint(out / "best.ckpt", model, state, {**meta, "epoch": epoch})
        if cfg.target_dev_acc is not None and record["dev_acc"] >= cfg.target_dev_acc:
            break
    return {"best": best, "epochs": epoch, "steps": step}
