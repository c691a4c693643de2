"""Representation probes over recorded encoder-decoder attention.

Value-vector norms per head, merged attention-output norms, cosine
structure of encoder outputs, and how often target tokens of each category
put most of their attention on finalizing source tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .alignment import Analysis, corpus_aer, hard_alignment, soft_alignment
from .corpus import ParallelExample
from .model import AttentionRecord

PAIR_CATEGORIES = ("standard-standard", "finalizing-standard", "finalizing-finalizing")


def value_norms(record: AttentionRecord) -> list[np.ndarray]:
    """Per layer, ``(H, S)`` Euclidean norms of the projected value vectors."""
    return [np.linalg.norm(v, axis=-1) for v in record.values]


def attn_output_norms(record: AttentionRecord) -> np.ndarray:
    """``(L, T)`` norms of the merged cross-attention output at every step."""
    return np.stack([np.linalg.norm(o, axis=-1) for o in record.attn_out])


def cosine_matrix(x: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Pairwise cosine similarity of the rows of ``x``.

    Rows with zero norm get cosine 0 against everything (themselves
    included) and are returned as the second element.
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1)
    zero = np.nonzero(norms == 0)[0].tolist()
    unit = np.divide(x, norms[:, None], out=np.zeros_like(x), where=norms[:, None] > 0)
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    cos = (cos + cos.T) / 2
    nz = norms > 0
    cos[np.diag_indices_from(cos)] = np.where(nz, 1.0, 0.0)
    return cos, zero


def pair_category(fin_i: bool, fin_j: bool) -> str:
    return PAIR_CATEGORIES[int(fin_i) + int(fin_j)]


@dataclass
class EncoderCosine:
    matrix: np.ndarray
    by_category: dict[str, list[float]]
    zero_norm: list[int]


def encoder_cosine(record: AttentionRecord, finalizing: Sequence[bool]) -> EncoderCosine:
    """Cosine matrix of encoder outputs plus off-diagonal values grouped by pair category."""
    cos, zero = cosine_matrix(record.enc_out)
    groups: dict[str, list[float]] = {k: [] for k in PAIR_CATEGORIES}
    S = cos.shape[0]
    for i in range(S):
        for j in range(i + 1, S):
            groups[pair_category(finalizing[i], finalizing[j])].append(float(cos[i, j]))
    return EncoderCosine(cos, groups, zero)


def cosine_stats(items: Sequence[EncoderCosine]) -> dict[str, dict]:
    """Mean and std of cosine per pair category across a dataset."""
    out = {}
    for k in PAIR_CATEGORIES:
        vals = np.array([v for it in items for v in it.by_category[k]])
        out[k] = {"mean": float(vals.mean()) if vals.size else 0.0,
                  "std": float(vals.std()) if vals.size else 0.0,
                  "count": int(vals.size)}
    return out


def row_roles(example: ParallelExample) -> list[str]:
    """Role of each target token: ``prefix-only``, ``subword-tail`` or its category tag."""
    roles = []
    for tag, tail, pre in zip(example.tgt_tags, example.tgt_subword_tail, example.tgt_prefix_only):
        roles.append("prefix-only" if pre else "subword-tail" if tail else tag)
    return roles


def finalizing_attention_rate(rows: Sequence[tuple[np.ndarray, Sequence[int], Sequence[str]]],
                              threshold: float = 0.5) -> dict[str, dict]:
    """Share of target tokens, per category, whose finalizing mass exceeds ``threshold``.

    ``rows`` holds ``(soft matrix (n, S), finalizing columns, n tags)`` per sentence.
    Categories that never occur are left out.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    hits: dict[str, int] = {}
    counts: dict[str, int] = {}
    for matrix, cols, tags in rows:
        matrix = np.asarray(matrix)
        if matrix.shape[0] != len(tags):
            raise ValueError("one tag per alignment row is required")
        mass = matrix[:, list(cols)].sum(axis=1)
        for m, tag in zip(mass, tags):
            counts[tag] = counts.get(tag, 0) + 1
            hits[tag] = hits.get(tag, 0) + int(m > threshold)
    return {k: {"rate": hits[k] / counts[k], "count": counts[k]} for k in sorted(counts)}


def head_aer_table(analyses: Sequence[Analysis], setting: str = "output") -> np.ndarray:
    """``(L, H)`` corpus AER of every single head's hard alignment."""
    L = analyses[0].record.num_layers
    H = analyses[0].record.num_heads
    golds = [(a.example.sure, a.example.possible) for a in analyses]
    table = np.zeros((L, H))
    for layer in range(L):
        for h in range(H):
            w = np.zeros(H)
            w[h] = 1.0
            hyps = [hard_alignment(soft_alignment(a.record, layer, w, setting)).pairs()
                    for a in analyses]
            table[layer, h] = corpus_aer(hyps, golds).aer
    return table


def best_alignment_head(analyses: Sequence[Analysis], setting: str = "output"
                        ) -> tuple[int, int, np.ndarray]:
    """``(layer, head, table)`` of the single head with the lowest dev AER.

    Ties go to the earliest (layer, head) in row-major order.
    """
    table = head_aer_table(analyses, setting)
    layer, head = np.unravel_index(int(np.argmin(table)), table.shape)
    return int(layer), int(head), table


def min_norm_is_finalizing(analyses: Sequence[Analysis], layer: int, head: int) -> np.ndarray:
    """Per sentence, whether the lowest-norm value vector of the head sits on a finalizing token."""
    out = []
    for a in analyses:
        norms = a.record.value_norms(layer)[head]
        out.append(bool(a.example.src_finalizing[int(np.argmin(norms))]))
    return np.array(out, dtype=bool)


@dataclass
class ProbeReport:
    best_head: tuple[int, int]
    head_aer: np.ndarray
    min_norm_finalizing_rate: float
    mean_value_norms: dict[str, dict[str, list[float]]]
    attn_output_norms: list[list[list[float]]]
    cosine: dict[str, dict]
    finalizing_rate_by_category: dict[str, dict]
    finalizing_rate_by_role: dict[str, dict]
    layer: int
    threshold: float
    zero_norm_flags: list[tuple[int, list[int]]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "best_head": {"layer": self.best_head[0], "head": self.best_head[1],
                          "selection": "single head with the lowest dev AER"},
            "head_aer": self.head_aer.tolist(),
            "min_norm_finalizing_rate": self.min_norm_finalizing_rate,
            "mean_value_norms": self.mean_value_norms,
            "attn_output_norms": self.attn_output_norms,
            "cosine": self.cosine,
            "finalizing_rate_by_category": self.finalizing_rate_by_category,
            "finalizing_rate_by_role": self.finalizing_rate_by_role,
            "layer": self.layer,
            "threshold": self.threshold,
            "zero_norm_flags": [[i, z] for i, z in self.zero_norm_flags],
        }


def _mean_norms_by_role(analyses: Sequence[Analysis], layer: int) -> dict[str, list[float]]:
    """Per head, mean value norm of standard vs each finalizing source token."""
    H = analyses[0].record.num_heads
    buckets: dict[str, list[np.ndarray]] = {"standard": [], "final-punct": [], "eos": []}
    for a in analyses:
        norms = a.record.value_norms(layer)
        fin = a.example.src_finalizing
        S = norms.shape[1]
        for j in range(S):
            key = "eos" if j == S - 1 else "final-punct" if fin[j] else "standard"
            buckets[key].append(norms[:, j])
    return {k: (np.mean(v, axis=0) if v else np.zeros(H)).tolist() for k, v in buckets.items()}


def probe(analyses: Sequence[Analysis], layer: int, threshold: float = 0.5,
          setting: str = "output") -> ProbeReport:
    """Run every probe on teacher-forced analyses; ``layer`` is the alignment layer."""
    if not analyses:
        raise ValueError("no examples")
    bl, bh, table = best_alignment_head(analyses, setting)
    cos = [encoder_cosine(a.record, a.example.src_finalizing) for a in analyses]
    by_cat, by_role = [], []
    for a in analyses:
        m = soft_alignment(a.record, layer, None, setting).matrix
        cols = a.example.finalizing_columns
        by_cat.append((m, cols, a.example.tgt_tags))
        by_role.append((m, cols, row_roles(a.example)))
    return ProbeReport(
        best_head=(bl, bh),
        head_aer=table,
        min_norm_finalizing_rate=float(min_norm_is_finalizing(analyses, bl, bh).mean()),
        mean_value_norms={str(lay): _mean_norms_by_role(analyses, lay)
                          for lay in range(analyses[0].record.num_layers)},
        attn_output_norms=[attn_output_norms(a.record).tolist() for a in analyses],
        cosine=cosine_stats(cos),
        finalizing_rate_by_category=finalizing_attention_rate(by_cat, threshold),
        finalizing_rate_by_role=finalizing_attention_rate(by_role, threshold),
        layer=layer,
        threshold=threshold,
        zero_norm_flags=[(i, c.zero_norm) for i, c in enumerate(cos) if c.zero_norm],
    )
