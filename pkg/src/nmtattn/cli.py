"""``nmtattn`` command line: corpus generation, training, alignment, scoring,
attribution, probes and reports.

Every subcommand writes into its own output directory (``--out``, default
``$NMTATTN_OUT/<subcommand>`` or ``./nmtattn_out/<subcommand>``) along with
``run_config.json`` holding the resolved arguments and the tool version.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Errors are reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from . import alignment as al
from . import autodiff as ad
from . import probes as pr
from .attribution import PerturbationConfig, attribute
from .corpus import (CorpusError, CorpusSpec, PharaohError, Vocab, generate_corpus,
                     load_corpus, load_external_parallel, read_pharaoh, save_corpus,
                     write_pharaoh)
from .model import ModelConfig, SequenceError, VocabError, load_model
from .svg import bar_chart, heatmap
from .trainer import TrainConfig, TrainingDiverged, train

ENV_OUT = "NMTATTN_OUT"
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("nmtattn")


class CLIError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(EXIT_USAGE, "usage", message)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


class OutputDir:
    """Create the output directory and hold an exclusive lock file while running."""

    def __init__(self, path: Path):
        self.path = path
        self.lock = path / ".lock"

    def __enter__(self) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CLIError(EXIT_USAGE, "locked",
                           f"{self.path} is in use by another run (remove {self.lock} if stale)")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self.path

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# shared loaders


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise CLIError(EXIT_USAGE, "usage", f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise CLIError(EXIT_DATA, "data", f"{what} not found: {p}")
    return p


def _load_model(path):
    p = _require(path, "model")
    model, meta = load_model(p)
    if "src_vocab" not in meta or "tgt_vocab" not in meta:
        raise CLIError(EXIT_DATA, "data", f"{p}: checkpoint carries no vocabularies")
    return model, meta, Vocab.from_json(meta["src_vocab"]), Vocab.from_json(meta["tgt_vocab"])


def _examples(args, meta, sv: Vocab, tv: Vocab):
    """Examples to analyse: a corpus directory's dev split (or all) or external text."""
    if args.corpus is not None:
        if args.src or args.tgt:
            raise CLIError(EXIT_USAGE, "usage", "use either --corpus or --src/--tgt, not both")
        corpus = load_corpus(_require(args.corpus, "corpus"))
        if corpus.src_vocab.tokens != sv.tokens or corpus.tgt_vocab.tokens != tv.tokens:
            raise CLIError(EXIT_DATA, "data", "corpus vocabulary differs from the model's")
        if args.split == "all":
            examples = corpus.examples
        else:
            dev_size = meta.get("train_config", {}).get("dev_size", 500)
            examples = corpus.split(dev_size)[1]
    elif args.src and args.tgt:
        examples = load_external_parallel(_require(args.src, "src"), _require(args.tgt, "tgt"),
                                          args.gold, sv, tv, base=args.base)
    else:
        raise CLIError(EXIT_USAGE, "usage", "give --corpus or both --src and --tgt")
    if args.limit is not None:
        examples = examples[: args.limit]
    if not examples:
        raise CLIError(EXIT_DATA, "data", "no examples to analyse")
    return examples


def _has_gold(examples) -> bool:
    return any(ex.sure or ex.possible for ex in examples)


def _resolve_layer(arg: str, analyses, mode, setting, mask, num_layers: int):
    """Return ``(layer, per-layer AER table or None)``."""
    if arg == "auto":
        if not _has_gold([a.example for a in analyses]):
            raise CLIError(EXIT_USAGE, "usage", "--layer auto needs gold alignments")
        layer, table = al.select_best_layer(analyses, mode=mode, setting=setting, mask=mask)
        return layer, table
    try:
        layer = int(arg)
    except ValueError:
        raise CLIError(EXIT_USAGE, "usage", f"--layer must be 'auto' or an integer, got {arg!r}")
    if not -num_layers <= layer < num_layers:
        raise CLIError(EXIT_USAGE, "usage", f"--layer {layer} out of range for {num_layers} layers")
    return layer % num_layers, None


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args, out: Path) -> dict:
    spec = CorpusSpec()
    if args.spec:
        spec = CorpusSpec.from_json(json.loads(_require(args.spec, "spec").read_text()))
    overrides = {"seed": args.seed, "num_sentences": args.num_sentences}
    spec = CorpusSpec(**{**asdict(spec), **{k: v for k, v in overrides.items() if v is not None}})
    corpus = generate_corpus(spec)
    save_corpus(corpus, out)
    return {"sentences": len(corpus.examples), "src_vocab": len(corpus.src_vocab),
            "tgt_vocab": len(corpus.tgt_vocab)}


def _config_from(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise CLIError(EXIT_USAGE, "usage", f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return d


def cmd_train(args, out: Path) -> dict:
    corpus = load_corpus(_require(args.corpus, "corpus"))
    tdict, mdict = {}, {}
    if args.config:
        cfg = json.loads(_require(args.config, "config").read_text())
        tdict = _config_from(TrainConfig, cfg.get("train", {}))
        mdict = _config_from(ModelConfig, cfg.get("model", {}))
    for key, val in (("seed", args.seed), ("max_epochs", args.epochs), ("lr", args.lr),
                     ("dev_size", args.dev_size)):
        if val is not None:
            tdict[key] = val
    tcfg = TrainConfig(**tdict)
    mcfg = ModelConfig(**{**mdict, "src_vocab": len(corpus.src_vocab),
                          "tgt_vocab": len(corpus.tgt_vocab)})
    if tcfg.dev_size >= len(corpus.examples):
        raise CLIError(EXIT_USAGE, "usage", "dev_size must be smaller than the corpus")
    summary = train(tcfg, corpus, mcfg, out)
    _dump(out / "train_summary.json", summary)
    return summary


def cmd_align(args, out: Path) -> dict:
    model, meta, sv, tv = _load_model(args.model)
    examples = _examples(args, meta, sv, tv)
    if args.mask and any(sum(ex.src_finalizing) >= len(ex.src_ids) for ex in examples):
        raise CLIError(EXIT_DATA, "data", "a sentence consists only of finalizing tokens")
    analyses = al.analyze(model, examples, importance=args.mode != "avg")
    layer, table = _resolve_layer(args.layer, analyses, args.mode, args.setting, args.mask,
                                  model.config.num_decoder_layers)
    cw = al.corpus_head_weights(analyses) if args.mode == "hi-corpus" else None
    hyps = [al.induce(a, layer, args.mode, args.setting, args.mask, cw) for a in analyses]
    write_pharaoh([h.pairs() for h in hyps], out / "alignments.align")
    result = {
        "layer": layer,
        "mode": args.mode,
        "setting": args.setting,
        "masked": args.mask,
        "sentences": len(examples),
        "degenerate_rows": sum(len(h.soft.degenerate_rows) for h in hyps),
        "corpus_head_weights": None if cw is None else cw.tolist(),
    }
    if table is not None:
        result["layer_aer"] = [r.to_json() for r in table]
    if _has_gold(examples):
        write_pharaoh([(ex.sure, ex.possible) for ex in examples], out / "gold.align")
        score = al.corpus_aer([h.pairs() for h in hyps],
                              [(ex.sure, ex.possible) for ex in examples])
        result["aer"] = score.to_json()
        cats = None
        for a, h in zip(analyses, hyps):
            rep = al.categorize_errors(h.pairs(), a.example)
            cats = rep if cats is None else cats.merge(rep)
        result["error_categories"] = cats.to_json()
    _dump(out / "provenance.json", result)
    return {k: result[k] for k in ("layer", "mode", "setting", "masked", "sentences")} | (
        {"aer": result["aer"]["aer"]} if "aer" in result else {})


def cmd_eval_aer(args, out: Path) -> dict:
    hyp = read_pharaoh(_require(args.hyp, "hyp"), args.base)
    gold = read_pharaoh(_require(args.gold, "gold"), args.base)
    if len(hyp) != len(gold):
        raise CLIError(EXIT_DATA, "data", f"{len(hyp)} hypothesis lines vs {len(gold)} gold lines")
    score = al.corpus_aer([p for _, p in hyp], gold)
    result = score.to_json()
    _dump(out / "aer.json", result)
    return result


def _labels(vocab: Vocab, ids) -> list[str]:
    return vocab.decode(ids)


def cmd_attrib(args, out: Path) -> dict:
    model, meta, sv, tv = _load_model(args.model)
    examples = _examples(args, meta, sv, tv)
    cfg = PerturbationConfig(lam=args.lam, n_samples=args.samples, seed=args.seed)
    reports = []
    for k, ex in enumerate(examples):
        rep = attribute(model, ex, cfg, with_saliency=True,
                        with_source_saliency=args.source_saliency, src_vocab=sv, tgt_vocab=tv)
        reports.append(rep.to_json())
        if args.svg:
            toks = rep.tokens
            heat = heatmap(rep.psi, toks, toks, "sequential", f"prefix saliency, sentence {k}")
            (out / f"saliency_{k:04d}.svg").write_text(heat, encoding="utf-8")
            share = rep.target_share()[1:]
            bars = bar_chart(share, toks[1:], f"target-prefix share, sentence {k}")
            (out / f"contribution_{k:04d}.svg").write_text(bars, encoding="utf-8")
    _dump(out / "attribution.json", {"config": asdict(cfg), "sentences": reports})
    return {"sentences": len(reports)}


def cmd_probe(args, out: Path) -> dict:
    model, meta, sv, tv = _load_model(args.model)
    examples = _examples(args, meta, sv, tv)
    if not _has_gold(examples):
        raise CLIError(EXIT_USAGE, "usage", "probes select the best alignment head and need gold")
    analyses = al.analyze(model, examples)
    layer, _ = _resolve_layer(args.layer, analyses, "avg", "output", False,
                              model.config.num_decoder_layers)
    rep = pr.probe(analyses, layer, args.threshold)
    _dump(out / "probe.json", rep.to_json())
    if args.svg:
        a = analyses[0]
        src = _labels(sv, a.example.src_ids)
        bl, bh = rep.best_head
        norms = a.record.value_norms(bl)
        heads = [f"head {h}" for h in range(norms.shape[0])]
        (out / "value_norms.svg").write_text(
            heatmap(norms / max(norms.max(), 1e-12), heads, src, "sequential",
                    f"value norms (relative), layer {bl}"), encoding="utf-8")
        (out / "encoder_cosine.svg").write_text(
            heatmap(pr.cosine_matrix(a.record.enc_out)[0], src, src, "diverging",
                    "encoder output cosine"), encoding="utf-8")
        soft = al.soft_alignment(a.record, layer, None, "output")
        tgt = _labels(tv, a.example.tgt_ids[1:-1])
        (out / "attention.svg").write_text(
            heatmap(soft.matrix, tgt, src, "sequential", f"attention, layer {layer}"),
            encoding="utf-8")
        (out / "attn_output_norms.svg").write_text(
            bar_chart(pr.attn_output_norms(a.record)[layer], _labels(tv, a.example.tgt_ids[:-1]),
                      f"attention output norms, layer {layer}"), encoding="utf-8")
    return {"best_head": list(rep.best_head),
            "min_norm_finalizing_rate": rep.min_norm_finalizing_rate}


def cmd_report(args, out: Path) -> dict:
    """AER of every alignment method variant at every layer, plus error categories."""
    model, meta, sv, tv = _load_model(args.model)
    examples = _examples(args, meta, sv, tv)
    if not _has_gold(examples):
        raise CLIError(EXIT_USAGE, "usage", "report needs gold alignments")
    analyses = al.analyze(model, examples, importance=True)
    methods = {}
    for setting in al.SETTINGS:
        for mode in ("avg", "hi"):
            for mask in (False, True):
                table = al.layer_aer_table(analyses, mode, setting, mask)
                best = al.best_layer(table, setting)
                methods[f"{setting}/{mode}/{'mask' if mask else 'nomask'}"] = {
                    "layer_aer": [r.aer for r in table], "best_layer": best,
                    "best_aer": table[best].aer}
    layer = methods["output/avg/nomask"]["best_layer"]
    cats = None
    for a in analyses:
        rep = al.categorize_errors(al.induce(a, layer).pairs(), a.example)
        cats = rep if cats is None else cats.merge(rep)
    result = {"methods": methods, "error_categories": cats.to_json(), "layer": layer,
              "sentences": len(examples)}
    _dump(out / "report.json", result)
    names = sorted(methods)
    (out / "aer.svg").write_text(
        bar_chart([methods[k]["best_aer"] for k in names], names, "best-layer AER by method"),
        encoding="utf-8")
    fr = cats.fractions
    (out / "error_categories.svg").write_text(
        bar_chart([fr[k] for k in sorted(fr)], [al.CATEGORY_NAMES[k] for k in sorted(fr)],
                  "alignment error categories"), encoding="utf-8")
    return {k: v["best_aer"] for k, v in methods.items()}


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "align": cmd_align,
    "eval-aer": cmd_eval_aer,
    "attrib": cmd_attrib,
    "probe": cmd_probe,
    "report": cmd_report,
}


def _add_input(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="checkpoint written by `train`")
    p.add_argument("--corpus", help="corpus directory written by `gen-corpus`")
    p.add_argument("--split", choices=("dev", "all"), default="dev")
    p.add_argument("--src", help="external source text, one sentence per line")
    p.add_argument("--tgt", help="external target text, line-aligned with --src")
    p.add_argument("--gold", help="Pharaoh gold alignments for --src/--tgt (target-source pairs)")
    p.add_argument("--base", type=int, choices=(0, 1), default=0, help="Pharaoh index base")
    p.add_argument("--limit", type=int, help="only the first N sentences")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nmtattn", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", help=f"output directory (default ${ENV_OUT}/{name})")
        return p

    p = add("gen-corpus", "generate a synthetic parallel corpus with gold alignments")
    p.add_argument("--spec", help="corpus spec JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-sentences", type=int)

    p = add("train", "train a model on a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help='JSON with optional "train" and "model" sections')
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dev-size", type=int)

    p = add("align", "induce alignments from cross-attention")
    _add_input(p)
    p.add_argument("--layer", default="auto", help="decoder layer index or 'auto' (needs gold)")
    p.add_argument("--mode", choices=al.MODES, default="avg")
    p.add_argument("--mask", action="store_true", help="ignore finalizing source tokens")
    p.add_argument("--setting", choices=al.SETTINGS, default="output")

    p = add("eval-aer", "score Pharaoh hypotheses against Pharaoh gold")
    p.add_argument("--hyp", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--base", type=int, choices=(0, 1), default=0)

    p = add("attrib", "source/target contributions and prefix saliency")
    _add_input(p)
    p.add_argument("--lam", type=float, default=0.01, help="noise scale relative to embedding norm")
    p.add_argument("--samples", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source-saliency", action="store_true")
    p.add_argument("--svg", action="store_true")

    p = add("probe", "value norms, attention output norms, encoder cosine, finalizing rates")
    _add_input(p)
    p.add_argument("--layer", default="auto")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--svg", action="store_true")

    p = add("report", "AER of every method variant and error categories")
    _add_input(p)
    return parser


def _validate(args) -> None:
    if getattr(args, "limit", None) is not None and args.limit < 1:
        raise CLIError(EXIT_USAGE, "usage", "--limit must be >= 1")
    if args.command == "attrib":
        if args.lam < 0:
            raise CLIError(EXIT_USAGE, "usage", "--lam must be >= 0")
        if args.samples < 2:
            raise CLIError(EXIT_USAGE, "usage", "--samples must be >= 2")
    if args.command == "probe" and not 0 < args.threshold < 1:
        raise CLIError(EXIT_USAGE, "usage", "--threshold must lie in (0, 1)")
    if args.command in ("align", "attrib", "probe", "report"):
        _require(args.model, "model")


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(ENV_OUT, "nmtattn_out")
    return Path(root) / args.command


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _validate(args)
        out = _out_dir(args)
        with OutputDir(out):
            recorded = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "verbose")}
            _dump(out / "run_config.json", {"version": __version__, "args": recorded})
            summary = COMMANDS[args.command](args, out)
        print(json.dumps(summary, sort_keys=True, default=float))
        return 0
    except CLIError as e:
        err = {"error": e.kind, "message": str(e)}
        code = e.code
    except (CorpusError, PharaohError, VocabError, SequenceError, FileNotFoundError,
            json.JSONDecodeError) as e:
        err = {"error": "data", "message": str(e)}
        code = EXIT_DATA
    except (ad.NonFiniteError, TrainingDiverged, FloatingPointError) as e:
        err = {"error": "numerical", "message": str(e)}
        code = EXIT_NUMERIC
    except ValueError as e:
        err = {"error": "data", "message": str(e)}
        code = EXIT_DATA
    print(json.dumps(err, sort_keys=True).replace("\n", " "), file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
