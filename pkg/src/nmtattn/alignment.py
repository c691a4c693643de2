"""
Word alignments induced from encoder-decoder attention.

Rows of every alignment matrix are target words ``0..n-1`` and columns are
source positions. Two readings of the attention rows are supported:

``"output"``
    row ``t`` is decoding step ``t``, whose prediction is target word ``t``.
``"input"``
    row ``t`` is decoding step ``t + 1``, whose decoder input is target word ``t``.

Decoding step ``k`` of an :class:`~nmtattn.model.AttentionRecord` predicts
``tgt_ids[k + 1]`` from inputs ``tgt_ids[:k + 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Pairs, ParallelExample
from .model import AttentionRecord, Transformer

SETTINGS = ("output", "input")
MODES = ("avg", "hi", "hi-corpus")


@dataclass
class SoftAlignment:
    matrix: np.ndarray
    layer: int
    head_weights: np.ndarray
    setting: str
    masked: bool = False
    weighting: str = "uniform"
    degenerate_rows: list[int] = field(default_factory=list)
    masked_columns: tuple[int, ...] = ()

    def renormalized(self) -> np.ndarray:
        """Row-normalised copy, for display only (argmax is unchanged)."""
        s = self.matrix.sum(axis=1, keepdims=True)
        return np.divide(self.matrix, s, out=np.zeros_like(self.matrix), where=s > 0)

    def provenance(self) -> dict:
        return {"layer": self.layer, "setting": self.setting, "masked": self.masked,
                "weighting": self.weighting, "degenerate_rows": list(self.degenerate_rows)}


@dataclass
class AlignmentMatrix:
    hard: np.ndarray
    soft: SoftAlignment

    def pairs(self) -> Pairs:
        t, j = np.nonzero(self.hard)
        return {(int(a), int(b)) for a, b in zip(t, j)}

    def columns(self) -> np.ndarray:
        return self.hard.argmax(axis=1)


def attention_rows(record: AttentionRecord, layer: int, setting: str) -> np.ndarray:
    """``(H, n, S)`` attention rows aligned with target words for ``setting``."""
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}, got {setting!r}")
    if not 0 <= layer < record.num_layers:
        raise IndexError(f"layer {layer} out of range for {record.num_layers} decoder layers")
    a = record.attn[layer]
    n = a.shape[1] - 1
    return a[:, :n] if setting == "output" else a[:, 1:n + 1]


def _check_weights(w: np.ndarray, H: int, n: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape not in ((H,), (n, H)):
        raise ValueError(f"head weights must have shape ({H},) or ({n}, {H}), got {w.shape}")
    if (w < 0).any() or not np.allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("head weights must be nonnegative and sum to 1")
    return w


def soft_alignment(record: AttentionRecord, layer: int, head_weights=None,
                   setting: str = "output", weighting: str | None = None,
                   degenerate_rows: Sequence[int] = ()) -> SoftAlignment:
    """Head-weighted attention for one layer; uniform weights give the head mean.

    ``head_weights`` may be per layer ``(H,)`` or per row ``(n, H)``.
    """
    rows = attention_rows(record, layer, setting)
    H, n, _ = rows.shape
    if head_weights is None:
        w = np.full(H, 1.0 / H)
        matrix = rows.mean(axis=0)
        weighting = weighting or "uniform"
    else:
        w = _check_weights(head_weights, H, n)
        if w.ndim == 1:
            matrix = np.tensordot(w, rows, axes=(0, 0))
        else:
            matrix = np.einsum("nh,hns->ns", w, rows)
        weighting = weighting or "custom"
    return SoftAlignment(matrix, layer, w, setting, weighting=weighting,
                         degenerate_rows=list(degenerate_rows))


def hard_alignment(soft: SoftAlignment) -> AlignmentMatrix:
    """One link per row at the row maximum; ties go to the lowest column.

    Masked columns are never chosen, even for a row whose mass was all masked.
    """
    hard = np.zeros(soft.matrix.shape, dtype=np.int8)
    if soft.matrix.shape[0]:
        scores = soft.matrix.copy()
        scores[:, list(soft.masked_columns)] = -np.inf
        hard[np.arange(scores.shape[0]), scores.argmax(axis=1)] = 1
    return AlignmentMatrix(hard, soft)


def mask_finalizing(soft: SoftAlignment, finalizing_columns: Iterable[int]) -> SoftAlignment:
    """Zero the given columns without renormalising the rows."""
    cols = sorted(set(int(c) for c in finalizing_columns))
    m = soft.matrix.shape[1]
    if not cols:
        raise ValueError("finalizing_columns must be nonempty")
    if len(cols) >= m or cols[0] < 0 or cols[-1] >= m:
        raise ValueError("finalizing_columns must be a proper subset of the source columns")
    matrix = soft.matrix.copy()
    matrix[:, cols] = 0.0
    return SoftAlignment(matrix, soft.layer, soft.head_weights, soft.setting, masked=True,
                         weighting=soft.weighting, degenerate_rows=list(soft.degenerate_rows),
                         masked_columns=tuple(cols))


def finalizing_mass(soft: SoftAlignment | np.ndarray, finalizing_columns) -> np.ndarray:
    matrix = soft.matrix if isinstance(soft, SoftAlignment) else soft
    return matrix[:, list(finalizing_columns)].sum(axis=1)


# ---------------------------------------------------------------------------
# head importance


@dataclass
class HeadImportance:
    """Per layer, decoding step and head: raw ``c`` and normalised ``C``."""

    raw: np.ndarray          # (L, T, H)
    weights: np.ndarray      # (L, T, H), rows sum to 1
    degenerate: np.ndarray   # (L, T) bool, True where all c_h were 0

    def rows(self, layer: int, setting: str) -> tuple[np.ndarray, list[int]]:
        """Per-target-word weights ``(n, H)`` and the degenerate row indices."""
        T = self.weights.shape[1]
        n = T - 1
        sl = slice(0, n) if setting == "output" else slice(1, n + 1)
        w = self.weights[layer, sl]
        return w, [int(i) for i in np.nonzero(self.degenerate[layer, sl])[0]]


def normalize_contributions(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``C_h = c_h / sum_h c_h`` over the last axis; all-zero rows become uniform."""
    c = np.asarray(c, dtype=np.float64)
    total = c.sum(axis=-1, keepdims=True)
    degenerate = total[..., 0] <= 0
    H = c.shape[-1]
    w = np.where(total > 0, c / np.where(total > 0, total, 1.0), 1.0 / H)
    return w, degenerate


def head_contributions(model: Transformer, example: ParallelExample,
                       target: str = "reference") -> HeadImportance:
    """Gradient-norm head importance for every decoder layer and step.

    ``c_h`` at step ``t`` is the sum over source positions of the L2 norm of
    the gradient of ``P(y_t)`` with respect to the value vector of head ``h``.
    The sentence is replicated once per step so that one backward pass
    yields every step's gradient (replicas are independent).
    ``target="prediction"`` differentiates the argmax token instead.
    """
    src = np.asarray(example.src_ids)
    tgt = np.asarray(example.tgt_ids)
    T = tgt.size - 1
    tin = np.tile(tgt[:-1], (T, 1))
    if target == "reference":
        tout = np.tile(tgt[1:], (T, 1))
    elif target == "prediction":
        logp0, _ = model.forward(src[None], tgt[None, :-1])
        tout = np.tile(logp0.data[0].argmax(-1), (T, 1))
    else:
        raise ValueError("target must be 'reference' or 'prediction'")
    with ad.Tape() as tape:
        logp, trace = model.forward(np.tile(src, (T, 1)), tin, watch_values=True)
        probs = ad.exp(ad.pick(logp, tout))
        objective = ad.sum(ad.mul(probs, np.eye(T)))
    grads = ad.backward(tape, objective)
    raw = np.stack([np.linalg.norm(grads[v], axis=-1).sum(axis=-1) for v in trace.cross_values])
    weights, degenerate = normalize_contributions(raw)
    return HeadImportance(raw, weights, degenerate)


def head_contribution(model: Transformer, example: ParallelExample, t: int,
                      layer: int = -1) -> np.ndarray:
    """Normalised head weights ``C_h`` for decoding step ``t`` of ``layer``."""
    return head_contributions(model, example).weights[layer, t]


# ---------------------------------------------------------------------------
# AER


@dataclass
class AERResult:
    aer: float
    n_hyp: int
    n_sure: int
    n_hyp_sure: int
    n_hyp_possible: int
    degenerate: bool = False
    per_sentence: list[dict] = field(default_factory=list)

    @property
    def precision(self) -> float:
        return self.n_hyp_possible / self.n_hyp if self.n_hyp else 0.0

    @property
    def recall(self) -> float:
        return self.n_hyp_sure / self.n_sure if self.n_sure else 0.0

    def to_json(self) -> dict:
        return {"aer": self.aer, "n_hyp": self.n_hyp, "n_sure": self.n_sure,
                "n_hyp_sure": self.n_hyp_sure, "n_hyp_possible": self.n_hyp_possible,
                "precision": self.precision, "recall": self.recall,
                "degenerate": self.degenerate, "per_sentence": self.per_sentence}


def _counts(hyp, sure, possible) -> tuple[int, int, int, int]:
    A, S, P = set(map(tuple, hyp)), set(map(tuple, sure)), set(map(tuple, possible))
    if not S <= P:
        raise ValueError("sure alignments must be a subset of possible alignments")
    return len(A), len(S), len(A & S), len(A & P)


def _ratio(a, s, as_, ap) -> tuple[float, bool]:
    if a + s == 0:
        return 0.0, True
    return 1.0 - (as_ + ap) / (a + s), False


def aer(hyp: Iterable[tuple[int, int]], sure: Iterable[tuple[int, int]],
        possible: Iterable[tuple[int, int]]) -> AERResult:
    """``1 - (|A&S| + |A&P|) / (|A| + |S|)``; 0 (flagged) when nothing to align."""
    a, s, as_, ap = _counts(hyp, sure, possible)
    value, degenerate = _ratio(a, s, as_, ap)
    return AERResult(value, a, s, as_, ap, degenerate)


def corpus_aer(hyps: Sequence, golds: Sequence[tuple[Pairs, Pairs]]) -> AERResult:
    """Pool counts over sentences, then take the AER ratio once."""
    if len(hyps) != len(golds):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(golds)} gold sentences")
    tot = np.zeros(4, dtype=np.int64)
    per = []
    for k, (h, (s, p)) in enumerate(zip(hyps, golds)):
        c = _counts(h, s, p)
        tot += c
        per.append({"index": k, "aer": _ratio(*c)[0], "n_hyp": c[0], "n_sure": c[1],
                    "n_hyp_sure": c[2], "n_hyp_possible": c[3]})
    value, degenerate = _ratio(*(int(x) for x in tot))
    return AERResult(value, *(int(x) for x in tot), degenerate=degenerate, per_sentence=per)


def word_index(tail_flags: Sequence[bool]) -> list[int]:
    """Word number of each piece; a piece not flagged as a tail starts a new word."""
    out, w = [], -1
    for tail in tail_flags:
        if not tail or w < 0:
            w += 1
        out.append(w)
    return out


def collapse_to_words(pairs: Iterable[tuple[int, int]], tgt_word: Sequence[int],
                      src_word: Sequence[int]) -> Pairs:
    """Map piece-level pairs to word-level pairs (any piece link links the words)."""
    return {(tgt_word[t], src_word[j]) for t, j in pairs}


# ---------------------------------------------------------------------------
# pipeline: records -> alignments -> layer selection


@dataclass
class Analysis:
    """Teacher-forced record (and optional head importance) for one example."""

    example: ParallelExample
    record: AttentionRecord
    importance: HeadImportance | None = None


def analyze(model: Transformer, examples: Sequence[ParallelExample],
            importance: bool = False) -> list[Analysis]:
    out = []
    for ex in examples:
        _, rec = model.forward_teacher_forced(ex.src_ids, ex.tgt_ids)
        hi = head_contributions(model, ex) if importance else None
        out.append(Analysis(ex, rec, hi))
    return out


def corpus_head_weights(analyses: Sequence[Analysis]) -> np.ndarray:
    """Per-layer ``(L, H)`` head weights averaged over every step of every example."""
    stacked = np.concatenate([a.importance.weights for a in analyses], axis=1)
    w = stacked.mean(axis=1)
    return w / w.sum(axis=-1, keepdims=True)


def induce(analysis: Analysis, layer: int, mode: str = "avg", setting: str = "output",
           mask: bool = False, corpus_weights: np.ndarray | None = None) -> AlignmentMatrix:
    """Hard alignment for one example under a (mode, mask, setting) method."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "avg":
        soft = soft_alignment(analysis.record, layer, None, setting)
    elif mode == "hi":
        if analysis.importance is None:
            raise ValueError("head-importance mode needs gradient importances")
        w, degenerate = analysis.importance.rows(layer, setting)
        soft = soft_alignment(analysis.record, layer, w, setting, "head-importance", degenerate)
    else:
        if corpus_weights is None:
            raise ValueError("hi-corpus mode needs corpus-averaged weights")
        soft = soft_alignment(analysis.record, layer, corpus_weights[layer], setting,
                              "head-importance-corpus")
    if mask:
        soft = mask_finalizing(soft, analysis.example.finalizing_columns)
    return hard_alignment(soft)


def layer_aer_table(analyses: Sequence[Analysis], mode: str = "avg", setting: str = "output",
                    mask: bool = False) -> list[AERResult]:
    """Corpus AER of every decoder layer."""
    if not analyses:
        raise ValueError("no examples")
    cw = corpus_head_weights(analyses) if mode == "hi-corpus" else None
    golds = [(a.example.sure, a.example.possible) for a in analyses]
    table = []
    for layer in range(analyses[0].record.num_layers):
        hyps = [induce(a, layer, mode, setting, mask, cw).pairs() for a in analyses]
        table.append(corpus_aer(hyps, golds))
    return table


def best_layer(table: Sequence[AERResult], setting: str) -> int:
    """Argmin AER; ties go deeper for ``output`` and shallower for ``input``."""
    values = [r.aer for r in table]
    lo = min(values)
    ties = [i for i, v in enumerate(values) if v == lo]
    return ties[-1] if setting == "output" else ties[0]


def select_best_layer(model_or_analyses, examples: Sequence[ParallelExample] | None = None,
                      mode: str = "avg", setting: str = "output", mask: bool = False
                      ) -> tuple[int, list[AERResult]]:
    """Return ``(layer, per-layer AER table)`` on gold-annotated dev examples."""
    if isinstance(model_or_analyses, Transformer):
        analyses = analyze(model_or_analyses, examples, importance=mode != "avg")
    else:
        analyses = model_or_analyses
    table = layer_aer_table(analyses, mode, setting, mask)
    return best_layer(table, setting), table


# ---------------------------------------------------------------------------
# error categories

CATEGORY_NAMES = {
    1: "functional/content word -> finalizing",
    2: "non-direct translation -> finalizing",
    3: "subword tail -> finalizing",
    4: "function word -> next content word",
    5: "other standard token",
}


@dataclass
class ErrorCategoryReport:
    counts: dict[int, int]
    errors: list[tuple[int, int, int]]  # (t, j, category)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def fractions(self) -> dict[int, float]:
        n = self.total
        return {k: (v / n if n else 0.0) for k, v in self.counts.items()}

    def merge(self, other: "ErrorCategoryReport") -> "ErrorCategoryReport":
        return ErrorCategoryReport({k: self.counts[k] + other.counts[k] for k in self.counts},
                                   self.errors + other.errors)

    def to_json(self) -> dict:
        return {"total": self.total,
                "counts": {str(k): v for k, v in self.counts.items()},
                "fractions": {str(k): v for k, v in self.fractions.items()},
                "names": {str(k): v for k, v in CATEGORY_NAMES.items()}}


def _next_content_sources(example: ParallelExample, t: int) -> set[int]:
    for u in range(t + 1, example.num_target_words):
        if example.tgt_tags[u] == "content" and not example.tgt_prefix_only[u]:
            return {j for (tt, j) in example.possible if tt == u}
    return set()


def categorize_errors(hyp: Iterable[tuple[int, int]], example: ParallelExample
                      ) -> ErrorCategoryReport:
    """Assign each hypothesis link outside the possible set one category.

    Checked in the order 3, 2, 1, 4, 5: subword tail to a finalizing column,
    prefix-only token to a finalizing column, any other word to a finalizing
    column, function word to the source of the next target content word,
    anything else.
    """
    counts = {k: 0 for k in CATEGORY_NAMES}
    errors = []
    for t, j in sorted(set(map(tuple, hyp)) - example.possible):
        final = example.src_finalizing[j]
        if final and example.tgt_subword_tail[t]:
            cat = 3
        elif final and example.tgt_prefix_only[t]:
            cat = 2
        elif final:
            cat = 1
        elif example.tgt_tags[t] == "function" and j in _next_content_sources(example, t):
            cat = 4
        else:
            cat = 5
        counts[cat] += 1
        errors.append((t, j, cat))
    return ErrorCategoryReport(counts, errors)
