"""
Synthetic parallel corpora with known gold alignments, plus Pharaoh and
plain-text readers so real alignment test sets go through the same pipeline.

Index conventions used across the package:

* ``src_ids`` is the whole source sequence, ending in ``. </s>``; source
  column ``j`` is position ``j`` of ``src_ids``.
* ``tgt_ids`` is framed, ``[</s>, w_0, ..., w_{n-1}, </s>]``; gold and
  hypothesis pair ``(t, j)`` uses the word index ``t`` (``tgt_ids[t + 1]``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, EOS, UNK = "<pad>", "</s>", "<unk>"
FINAL_PUNCT = "."
PUNCTUATION = frozenset({".", "!", "?", ",", ";", ":"})
CATEGORIES = ("function", "content", "punctuation", "sentinel")

Pairs = set[tuple[int, int]]


class CorpusError(ValueError):
    pass


class PharaohError(ValueError):
    pass


@dataclass
class Vocab:
    """Token/id map with per-token flags. Ids are dense from 0."""

    tokens: list[str]
    categories: list[str]
    subword_tail: list[bool]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (len(self.tokens) == len(self.categories) == len(self.subword_tail)):
            raise ValueError("vocab fields must have equal length")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")
        for tok in (PAD, EOS, UNK, FINAL_PUNCT):
            if tok not in self._index:
                raise ValueError(f"vocab lacks special token {tok!r}")

    @classmethod
    def build(cls, entries: Iterable[tuple[str, str, bool]]) -> "Vocab":
        specials = [(PAD, "sentinel", False), (EOS, "sentinel", False),
                    (UNK, "content", False), (FINAL_PUNCT, "punctuation", False)]
        rows = specials + [e for e in entries if e[0] not in {s[0] for s in specials}]
        return cls([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self._index

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def final_punct_id(self) -> int:
        return self._index[FINAL_PUNCT]

    @property
    def finalizing_ids(self) -> frozenset[int]:
        return frozenset({self.eos_id, self.final_punct_id})

    def id(self, tok: str) -> int:
        return self._index.get(tok, self.unk_id)

    def encode(self, toks: Iterable[str]) -> list[int]:
        return [self.id(t) for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "categories": self.categories,
                "subword_tail": self.subword_tail}

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(list(d["tokens"]), list(d["categories"]), [bool(x) for x in d["subword_tail"]])


@dataclass
class ParallelExample:
    """One sentence pair with gold alignment and per-position metadata.

    ``tgt_*`` metadata lists have one entry per target word (``len(tgt_ids) - 2``);
    ``src_*`` lists one entry per source position, sentinel included.
    """

    src_ids: list[int]
    tgt_ids: list[int]
    sure: Pairs
    possible: Pairs
    src_tags: list[str]
    tgt_tags: list[str]
    src_finalizing: list[bool]
    src_subword_tail: list[bool]
    tgt_subword_tail: list[bool]
    tgt_prefix_only: list[bool]
    # target word index -> source word index per lexicon link (None if unlinked)
    tgt_source_word: list[int | None] = field(default_factory=list)

    def __post_init__(self):
        self.sure = {tuple(p) for p in self.sure}
        self.possible = {tuple(p) for p in self.possible} | self.sure
        n, m = self.num_target_words, len(self.src_ids)
        for name, expect in (("src_tags", m), ("src_finalizing", m), ("src_subword_tail", m),
                             ("tgt_tags", n), ("tgt_subword_tail", n), ("tgt_prefix_only", n)):
            if len(getattr(self, name)) != expect:
                raise CorpusError(f"{name} has length {len(getattr(self, name))}, expected {expect}")
        for t, j in self.possible:
            if not (0 <= t < n and 0 <= j < m):
                raise CorpusError(f"gold pair ({t}, {j}) out of range for {n}x{m}")

    @property
    def num_target_words(self) -> int:
        return len(self.tgt_ids) - 2

    @property
    def decoder_input(self) -> list[int]:
        return self.tgt_ids[:-1]

    @property
    def decoder_output(self) -> list[int]:
        return self.tgt_ids[1:]

    @property
    def finalizing_columns(self) -> list[int]:
        return [j for j, f in enumerate(self.src_finalizing) if f]

    def to_json(self) -> dict:
        d = asdict(self)
        d["sure"] = sorted(self.sure)
        d["possible"] = sorted(self.possible)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ParallelExample":
        d = dict(d)
        d["sure"] = {tuple(p) for p in d["sure"]}
        d["possible"] = {tuple(p) for p in d["possible"]}
        return cls(**d)


@dataclass
class CorpusSpec:
    """Parameters of the synthetic lexical-translation task.

    Each content/function source word has one fixed target translation. A
    content word marked as a modifier moves right past up to
    ``reorder_window - 1`` following non-modifier content words. A word type is
    split into a head piece and shared tail pieces with probability
    ``split_prob`` (decided once per type). Prefix-only target tokens are
    inserted after a (function word, unsplit content word) target bigram
    whose latent classes hit the trigger table; the table density is chosen
    so roughly ``prefix_only_rate`` of target tokens are inserted.
    """

    num_sentences: int = 5000
    num_content: int = 60
    num_function: int = 12
    num_tails: int = 6
    num_prefix_tokens: int = 4
    num_classes: int = 4
    min_len: int = 3
    max_len: int = 10
    function_rate: float = 0.3
    modifier_fraction: float = 0.3
    reorder_window: int = 2
    split_prob: float = 0.1
    prefix_only_rate: float = 0.1
    max_vocab: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("function_rate", "modifier_fraction", "split_prob", "prefix_only_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CorpusError(f"{name}={v} must be in [0, 1]")
        if self.reorder_window < 1:
            raise CorpusError("reorder_window must be >= 1")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise CorpusError("need 1 <= min_len <= max_len")
        if self.num_sentences < 1 or self.num_content < 1:
            raise CorpusError("num_sentences and num_content must be >= 1")
        if self.num_tails < 1 or self.num_classes < 1:
            raise CorpusError("num_tails and num_classes must be >= 1")

    @classmethod
    def from_json(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CorpusError(f"unknown corpus spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Corpus:
    examples: list[ParallelExample]
    src_vocab: Vocab
    tgt_vocab: Vocab
    spec: CorpusSpec | None = None

    def split(self, dev_size: int) -> tuple[list[ParallelExample], list[ParallelExample]]:
        """Train/dev split with the dev set taken from the end of the corpus."""
        if not 0 < dev_size < len(self.examples):
            raise CorpusError(f"dev size {dev_size} must be in (0, {len(self.examples)})")
        return self.examples[:-dev_size], self.examples[-dev_size:]


# ---------------------------------------------------------------------------
# generator


@dataclass
class _Lexicon:
    is_function: np.ndarray
    is_modifier: np.ndarray
    word_class: np.ndarray
    translation: np.ndarray
    src_split: dict[int, list[str]]
    tgt_split: dict[int, list[str]]
    triggers: dict[tuple[int, int], int]


def _word_names(spec: CorpusSpec):
    src = [f"f{i}" for i in range(spec.num_function)] + [f"c{i}" for i in range(spec.num_content)]
    tgt = [f"F{i}" for i in range(spec.num_function)] + [f"C{i}" for i in range(spec.num_content)]
    return src, tgt


def _build_lexicon(spec: CorpusSpec, rng: np.random.Generator) -> _Lexicon:
    nf, nc = spec.num_function, spec.num_content
    nw = nf + nc
    is_function = np.arange(nw) < nf
    is_modifier = ~is_function & (rng.random(nw) < spec.modifier_fraction)
    word_class = rng.integers(0, spec.num_classes, size=nw)
    # bijective: functions map to functions, content to content
    translation = np.concatenate([rng.permutation(nf), nf + rng.permutation(nc)])

    def split_table(names, tail_prefix):
        table = {}
        for w in range(nw):
            if is_function[w] or rng.random() >= spec.split_prob:
                continue
            n_tail = 1 + int(rng.random() < 0.5)
            tails = rng.choice(spec.num_tails, size=n_tail, replace=True)
            table[w] = [f"{names[w]}@@"] + [f"{tail_prefix}{k}" for k in tails]
        return table

    src_names, tgt_names = _word_names(spec)
    src_split = split_table(src_names, "@@t")
    tgt_split = split_table(tgt_names, "@@T")

    triggers: dict[tuple[int, int], int] = {}
    if spec.prefix_only_rate > 0 and nf > 0 and spec.num_prefix_tokens > 0:
        # solve insertions / (tokens + insertions) = rate for the trigger-table density
        f, s = spec.function_rate, spec.split_prob
        mean_len = 0.5 * (spec.min_len + spec.max_len)
        tokens = mean_len * (1.0 + 1.5 * (1.0 - f) * s) + 1.0
        bigrams = max(mean_len - 1.0, 0.0) * f * (1.0 - f) * (1.0 - s)
        wanted = tokens * spec.prefix_only_rate / max(1e-9, 1.0 - spec.prefix_only_rate)
        density = min(1.0, wanted / max(bigrams, 1e-9))
        cells = [(a, b) for a in range(spec.num_classes) for b in range(spec.num_classes)]
        n_on = max(1, int(round(density * len(cells))))
        for k in rng.permutation(len(cells))[:n_on]:
            triggers[cells[k]] = int(rng.integers(spec.num_prefix_tokens))
    return _Lexicon(is_function, is_modifier, word_class, translation, src_split, tgt_split, triggers)


def _vocab_for(spec: CorpusSpec, lex: _Lexicon, side: str) -> Vocab:
    src_names, tgt_names = _word_names(spec)
    names = src_names if side == "src" else tgt_names
    split = lex.src_split if side == "src" else lex.tgt_split
    entries = []
    for w, name in enumerate(names):
        cat = "function" if lex.is_function[w] else "content"
        entries.append((split[w][0] if w in split else name, cat, False))
    tail = "@@t" if side == "src" else "@@T"
    entries += [(f"{tail}{k}", "content", True) for k in range(spec.num_tails)]
    if side == "tgt":
        entries += [(f"P{k}", "function", False) for k in range(spec.num_prefix_tokens)]
    return Vocab.build(entries)


def _reorder(words: list[int], lex: _Lexicon, window: int) -> list[int]:
    """Source word positions in target order."""
    order = list(range(len(words)))
    if window <= 1:
        return order
    out = []
    i = 0
    while i < len(order):
        w = words[order[i]]
        if lex.is_modifier[w]:
            j = i + 1
            while (j < len(order) and j - i < window and not lex.is_function[words[order[j]]]
                   and not lex.is_modifier[words[order[j]]]):
                j += 1
            out.extend(order[i + 1:j])
            out.append(order[i])
            i = j
        else:
            out.append(order[i])
            i += 1
    return out


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministically generate ``spec.num_sentences`` examples."""
    rng = np.random.default_rng(spec.seed)
    lex = _build_lexicon(spec, rng)
    src_vocab = _vocab_for(spec, lex, "src")
    tgt_vocab = _vocab_for(spec, lex, "tgt")
    if len(src_vocab) > spec.max_vocab or len(tgt_vocab) > spec.max_vocab:
        raise CorpusError(f"vocabulary of {max(len(src_vocab), len(tgt_vocab))} tokens "
                          f"exceeds max_vocab={spec.max_vocab}")
    src_names, tgt_names = _word_names(spec)
    nf = spec.num_function

    examples = []
    for _ in range(spec.num_sentences):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        func = rng.random(n) < spec.function_rate if nf else np.zeros(n, bool)
        words = [int(rng.integers(nf)) if f else nf + int(rng.integers(spec.num_content))
                 for f in func]

        # source pieces
        src_toks, src_tags, src_tail, src_pieces = [], [], [], []
        for w in words:
            pieces = lex.src_split.get(w, [src_names[w]])
            src_pieces.append(list(range(len(src_toks), len(src_toks) + len(pieces))))
            src_toks += pieces
            cat = "function" if lex.is_function[w] else "content"
            src_tags += [cat] * len(pieces)
            src_tail += [False] + [True] * (len(pieces) - 1)
        punct_j = len(src_toks)
        src_toks += [FINAL_PUNCT, EOS]
        src_tags += ["punctuation", "sentinel"]
        src_tail += [False, False]
        src_final = [False] * punct_j + [True, True]

        # target words in target order, with prefix-only insertions
        # (word type, source word index); prefix-only token k is stored as type -1 - k
        tgt_words: list[tuple[int, int | None]] = []
        for si in _reorder(words, lex, spec.reorder_window):
            tw = int(lex.translation[words[si]])
            prev_w = tgt_words[-1][0] if tgt_words else -1
            tgt_words.append((tw, si))
            if (prev_w >= 0 and lex.is_function[prev_w] and not lex.is_function[tw]
                    and tw not in lex.tgt_split):
                key = (int(lex.word_class[prev_w]), int(lex.word_class[tw]))
                if key in lex.triggers:
                    tgt_words.append((-1 - lex.triggers[key], None))

        tgt_toks, tgt_tags, tgt_tail, tgt_prefix, tgt_src_word = [], [], [], [], []
        sure: Pairs = set()
        possible: Pairs = set()
        for tw, si in tgt_words:
            if tw < 0:
                tgt_toks.append(f"P{-1 - tw}")
                tgt_tags.append("function")
                tgt_tail.append(False)
                tgt_prefix.append(True)
                tgt_src_word.append(None)
                continue
            pieces = lex.tgt_split.get(tw, [tgt_names[tw]])
            t0 = len(tgt_toks)
            cat = "function" if lex.is_function[tw] else "content"
            for p, piece in enumerate(pieces):
                tgt_toks.append(piece)
                tgt_tags.append(cat)
                tgt_tail.append(p > 0)
                tgt_prefix.append(False)
                tgt_src_word.append(si)
                for j in src_pieces[si]:
                    possible.add((t0 + p, j))
            for j in src_pieces[si]:
                sure.add((t0, j))
        t_punct = len(tgt_toks)
        tgt_toks.append(FINAL_PUNCT)
        tgt_tags.append("punctuation")
        tgt_tail.append(False)
        tgt_prefix.append(False)
        tgt_src_word.append(len(words))
        sure.add((t_punct, punct_j))

        examples.append(ParallelExample(
            src_ids=src_vocab.encode(src_toks),
            tgt_ids=[tgt_vocab.eos_id] + tgt_vocab.encode(tgt_toks) + [tgt_vocab.eos_id],
            sure=sure,
            possible=possible | sure,
            src_tags=src_tags,
            tgt_tags=tgt_tags,
            src_finalizing=src_final,
            src_subword_tail=src_tail,
            tgt_subword_tail=tgt_tail,
            tgt_prefix_only=tgt_prefix,
            tgt_source_word=tgt_src_word,
        ))
    return Corpus(examples, src_vocab, tgt_vocab, spec)


# ---------------------------------------------------------------------------
# Pharaoh alignment files


def parse_pharaoh_line(line: str, base: int = 0) -> tuple[Pairs, Pairs]:
    """Parse ``"i-j"`` (sure) and ``"i?j"`` (possible) tokens into ``(S, P)``.

    Pairs are ``(target, source)``-agnostic here: they keep the file's order.
    """
    if base not in (0, 1):
        raise PharaohError("indexing base must be 0 or 1")
    sure: Pairs = set()
    possible: Pairs = set()
    for tok in line.split():
        sep = "-" if "-" in tok else "?" if "?" in tok else None
        if sep is None:
            raise PharaohError(f"malformed pair {tok!r}")
        a, _, b = tok.partition(sep)
        if not (a.isdigit() and b.isdigit()):
            raise PharaohError(f"malformed pair {tok!r}")
        pair = (int(a) - base, int(b) - base)
        if pair[0] < 0 or pair[1] < 0:
            raise PharaohError(f"pair {tok!r} below indexing base {base}")
        possible.add(pair)
        if sep == "-":
            sure.add(pair)
    return sure, possible


def read_pharaoh(path, base: int = 0, lengths: list[tuple[int, int]] | None = None
                 ) -> list[tuple[Pairs, Pairs]]:
    """Read one ``(S, P)`` per line; ``lengths`` optionally bounds indices."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            s, p = parse_pharaoh_line(line, base)
            if lengths is not None:
                if lineno >= len(lengths):
                    raise PharaohError(f"{path}: more alignment lines than sentences")
                na, nb = lengths[lineno]
                for a, b in p:
                    if a >= na or b >= nb:
                        raise PharaohError(f"{path}:{lineno + 1}: pair {a}-{b} exceeds "
                                           f"sentence lengths {na}x{nb}")
            out.append((s, p))
    return out


def format_pharaoh_line(sure: Pairs, possible: Pairs | None = None) -> str:
    possible = set(sure) if possible is None else set(possible)
    items = [(a, b, "-") for a, b in sure] + [(a, b, "?") for a, b in possible - set(sure)]
    return " ".join(f"{a}{sep}{b}" for a, b, sep in sorted(items))


def write_pharaoh(alignments: Iterable[tuple[Pairs, Pairs] | Pairs], path) -> None:
    """Write 0-based Pharaoh lines; a bare pair set is written as all-sure."""
    with open(path, "w", encoding="utf-8") as f:
        for item in alignments:
            if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], (set, frozenset)):
                s, p = item
            else:
                s, p = set(item), None
            f.write(format_pharaoh_line(s, p) + "\n")


# ---------------------------------------------------------------------------
# plain parallel text


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [ln.rstrip("\n") for ln in f]


def _tags_for(toks: list[str], vocab: Vocab) -> list[str]:
    tags = []
    for tok in toks:
        if tok in PUNCTUATION:
            tags.append("punctuation")
        elif tok in vocab:
            tags.append(vocab.categories[vocab.id(tok)])
        else:
            tags.append("content")
    return tags


def load_external_parallel(src_path, tgt_path, gold_path, src_vocab: Vocab, tgt_vocab: Vocab,
                           base: int = 0) -> list[ParallelExample]:
    """Load whitespace-tokenised, line-aligned text with optional Pharaoh gold.

    Gold lines are ``target-source`` pairs. A missing ``gold_path`` (``None``
    or a path that does not exist) yields empty gold sets.
    """
    src_lines, tgt_lines = _read_lines(src_path), _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(f"line counts differ: {len(src_lines)} source vs {len(tgt_lines)} target")
    gold = None
    if gold_path is not None and Path(gold_path).exists():
        gold = read_pharaoh(gold_path, base)
        if len(gold) != len(src_lines):
            raise CorpusError(f"gold has {len(gold)} lines, text has {len(src_lines)}")
    examples = []
    for k, (sl, tl) in enumerate(zip(src_lines, tgt_lines)):
        stoks, ttoks = sl.split(), tl.split()
        m, n = len(stoks), len(ttoks)
        src_final = [False] * m + [True]
        if m and stoks[-1] in PUNCTUATION:
            src_final[m - 1] = True
        sure, possible = (set(), set()) if gold is None else gold[k]
        for t, j in possible:
            if t >= n or j >= m:
                raise CorpusError(f"gold line {k + 1}: pair {t}-{j} exceeds lengths {n}x{m}")
        src_tail = [src_vocab.subword_tail[src_vocab.id(t)] if t in src_vocab else False
                    for t in stoks] + [False]
        tgt_tail = [tgt_vocab.subword_tail[tgt_vocab.id(t)] if t in tgt_vocab else False
                    for t in ttoks]
        examples.append(ParallelExample(
            src_ids=src_vocab.encode(stoks) + [src_vocab.eos_id],
            tgt_ids=[tgt_vocab.eos_id] + tgt_vocab.encode(ttoks) + [tgt_vocab.eos_id],
            sure=sure,
            possible=possible,
            src_tags=_tags_for(stoks, src_vocab) + ["sentinel"],
            tgt_tags=_tags_for(ttoks, tgt_vocab),
            src_finalizing=src_final,
            src_subword_tail=src_tail,
            tgt_subword_tail=tgt_tail,
            tgt_prefix_only=[False] * n,
            tgt_source_word=[None] * n,
        ))
    return examples


# ---------------------------------------------------------------------------
# corpus directories


def save_corpus(corpus: Corpus, out_dir) -> None:
    """Write text, gold Pharaoh, vocabularies and full example metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sv, tv = corpus.src_vocab, corpus.tgt_vocab
    with open(out / "corpus.src", "w", encoding="utf-8") as fs, \
         open(out / "corpus.tgt", "w", encoding="utf-8") as ft, \
         open(out / "examples.jsonl", "w", encoding="utf-8") as fe:
        for ex in corpus.examples:
            fs.write(" ".join(sv.decode(ex.src_ids[:-1])) + "\n")
            ft.write(" ".join(tv.decode(ex.tgt_ids[1:-1])) + "\n")
            fe.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")
    write_pharaoh([(ex.sure, ex.possible) for ex in corpus.examples], out / "gold.align")
    (out / "vocab.json").write_text(
        json.dumps({"src": sv.to_json(), "tgt": tv.to_json()}, sort_keys=True, indent=1) + "\n")
    if corpus.spec is not None:
        (out / "spec.json").write_text(json.dumps(asdict(corpus.spec), sort_keys=True, indent=1) + "\n")


def load_vocabs(path) -> tuple[Vocab, Vocab]:
    d = json.loads(Path(path).read_text())
    return Vocab.from_json(d["src"]), Vocab.from_json(d["tgt"])


def load_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    if not (d / "examples.jsonl").exists():
        raise CorpusError(f"{d}: no examples.jsonl (not a corpus directory)")
    sv, tv = load_vocabs(d / "vocab.json")
    with open(d / "examples.jsonl", encoding="utf-8") as f:
        examples = [ParallelExample.from_json(json.loads(line)) for line in f if line.strip()]
    spec = None
    if (d / "spec.json").exists():
        spec = CorpusSpec.from_json(json.loads((d / "spec.json").read_text()))
    return Corpus(examples, sv, tv, spec)
