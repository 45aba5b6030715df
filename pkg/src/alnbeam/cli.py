"""Command-line pipeline: gen-toy, train-model, train-align, align, symmetrize,
extract-constraints, decode, score, bootstrap.

Machine-readable JSON goes to stdout (or ``--out``); human summaries go to
stderr.  Failures exit with status 2 and print ``error[category]: message``.
The ``ALNBEAM_SEED`` environment variable overrides every ``--seed``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .align import (METHODS, AlignTrainConfig, corpus_aer, forced_alignment, load_align_head,
                    read_pharaoh, save_align_head, symmetrize_grow_diag, train_align_head, write_pharaoh)
from .constraints import extract_constraints, read_constraints, write_constraints
from .corpus import REORDER_RULES, ToySpec, gen_toy_corpus, load_corpus, read_lines, save_corpus
from .decode import DecodeConfig, decode
from .errors import AlnBeamError, ConfigError, DataError, FormatError
from .metrics import bleu, corpus_bleu_c, csr, paired_bootstrap, satisfied_flags
from .model import Vocab, greedy_decode, load_model, save_model


def _seed(args) -> int:
    env = os.environ.get("ALNBEAM_SEED")
    if env is None:
        return args.seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"ALNBEAM_SEED={env!r} is not an integer") from None


def _emit(args, obj):
    text = json.dumps(obj, sort_keys=True) + "\n"
    if getattr(args, "out_json", None):
        Path(args.out_json).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _say(msg: str):
    print(msg, file=sys.stderr)


def _cli_method(name: str) -> str:
    return name.replace("-", "_")


def _sentence_ids(vocab: Vocab, sents, side: str):
    try:
        return [vocab.encode(s) for s in sents]
    except AlnBeamError as e:
        raise DataError(f"{side}: {e}") from None


# -- subcommands --------------------------------------------------------------

def cmd_gen_toy(args):
    spec = ToySpec(lexicon_size=args.lexicon_size, ambiguity=args.ambiguity, reorder=args.reorder,
                   n_sentences=args.n_sentences, seed=_seed(args), min_len=args.min_len, max_len=args.max_len,
                   identity=args.identity)
    corpus = gen_toy_corpus(spec)
    if args.heldout:
        train, test = corpus.split(args.heldout)
        save_corpus(train, Path(args.out) / "train")
        save_corpus(test, Path(args.out) / "test")
    else:
        save_corpus(corpus, args.out)
    _say(f"wrote {len(corpus)} sentence pairs to {args.out}")
    _emit(args, {"out": str(args.out), "sentences": len(corpus), "vocab": len(corpus.vocab)})


def cmd_train_model(args):
    from .training import TrainConfig, greedy_token_accuracy, train_toy_model

    corpus = load_corpus(args.corpus)
    pairs = corpus.pairs()
    if args.reverse:
        pairs = [(t, s) for s, t in pairs]
    if args.limit:
        pairs = pairs[:args.limit]
    cfg = TrainConfig(d=args.d, n_heads=args.heads, n_layers=args.layers, d_ff=args.d_ff, steps=args.steps,
                      batch_size=args.batch_size, lr=args.lr, seed=_seed(args))
    t0 = time.perf_counter()
    model = train_toy_model(pairs, corpus.vocab, cfg)
    save_model(model, args.out)
    acc = greedy_token_accuracy(model, pairs[:200])
    _say(f"trained {args.steps} steps in {time.perf_counter() - t0:.1f}s; greedy token accuracy {acc:.3f}")
    _emit(args, {"model": str(args.out), "checksum": model.checksum(), "train_greedy_accuracy": acc})


def _supervision(args, model, corpus, pairs):
    if args.supervision == "gold":
        return corpus.gold[:len(pairs)]
    if args.supervision == "shift":
        if not args.reverse_model:
            raise ConfigError("--supervision shift needs --reverse-model")
        rev = load_model(args.reverse_model)
        sups = []
        for s, t in pairs:
            fwd = forced_alignment("shift", model, s, t, layer=args.layer)
            back = forced_alignment("shift", rev, t, s, layer=args.layer).transpose()
            sups.append(symmetrize_grow_diag(fwd, back, src_len=len(s), tgt_len=len(t)))
        return sups
    sups = read_pharaoh(args.supervision)
    if len(sups) < len(pairs):
        raise DataError(f"{args.supervision}: {len(sups)} alignments for {len(pairs)} sentences")
    return sups[:len(pairs)]


def cmd_train_align(args):
    model = load_model(args.model)
    corpus = load_corpus(args.corpus)
    pairs = corpus.pairs()
    if args.limit:
        pairs = pairs[:args.limit]
    sups = _supervision(args, model, corpus, pairs)
    cfg = AlignTrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, optimizer=args.optimizer,
                           seed=_seed(args))
    head = train_align_head(model, pairs, sups, args.kind, cfg, layer=args.layer)
    save_align_head(head, args.out)
    _say(f"{args.kind} head: loss {head.loss_history[0]:.4f} -> {head.loss_history[-1]:.4f}")
    _emit(args, {"head": str(args.out), "kind": args.kind, "final_loss": head.loss_history[-1],
                 "n_params": head.n_params})


def cmd_align(args):
    model = load_model(args.model)
    head = load_align_head(args.head) if args.head else None
    src = _sentence_ids(model.src_vocab, read_lines(args.src), args.src)
    tgt = _sentence_ids(model.tgt_vocab, read_lines(args.tgt), args.tgt)
    if len(src) != len(tgt):
        raise DataError(f"{len(src)} source but {len(tgt)} target sentences")
    method = _cli_method(args.method)
    preds = [forced_alignment(method, model, s, t, head, args.layer) for s, t in zip(src, tgt)]
    write_pharaoh(args.out, preds)
    report = {"alignments": str(args.out), "method": method, "sentences": len(preds)}
    if args.gold:
        report["aer"] = corpus_aer(preds, read_pharaoh(args.gold))
        _say(f"{method}: AER {report['aer']:.4f}")
    _emit(args, report)


def cmd_symmetrize(args):
    fwd, rev = read_pharaoh(args.fwd), read_pharaoh(args.rev)
    if len(fwd) != len(rev):
        raise DataError(f"{len(fwd)} forward but {len(rev)} reverse alignments")
    if args.transpose_rev:
        rev = [a.transpose() for a in rev]
    out = [symmetrize_grow_diag(f, r, final_and=not args.no_final_and) for f, r in zip(fwd, rev)]
    write_pharaoh(args.out, out)
    _emit(args, {"alignments": str(args.out), "sentences": len(out)})


def cmd_extract_constraints(args):
    model = load_model(args.model)
    corpus = load_corpus(args.corpus)
    seed = _seed(args)
    out = []
    for i, (s, t) in enumerate(corpus.pairs()):
        hyp = greedy_decode(model, s, len(t) + 10)
        cs = extract_constraints(corpus.gold[i], s, t, hyp, rng_seed=seed * 1_000_003 + i,
                                 max_constraints=args.max_constraints, max_len=args.max_len)
        out.append([type(c)(c.src_span, tuple(model.tgt_vocab.decode(c.tgt_tokens))) for c in cs])
    write_constraints(args.out, out)
    n = sum(len(cs) for cs in out)
    _say(f"{n} constraints over {len(out)} sentences")
    _emit(args, {"constraints": str(args.out), "total": n, "sentences": len(out)})


def _decode_one(job):
    model, head, src, cons, cfg, timing = job
    h = decode(model, head, src, cons, cfg)
    return h.as_json(model.tgt_vocab, timing=timing)


def cmd_decode(args):
    model = load_model(args.model)
    head = load_align_head(args.head) if args.head else None
    method = _cli_method(args.method)
    align_method = _cli_method(args.align_method) if args.align_method else None
    if method in ("replace", "align_vdba") and align_method in (None, "prior", "shift_aet", "postaln") and head is None:
        raise ConfigError(f"--method {args.method} needs --head (or --align-method naive/shift)")
    cfg = DecodeConfig(beam_size=args.beam, max_len=args.max_len, method=method, align_method=align_method,
                       threshold=args.threshold, temperature=args.temperature, layer=args.layer).validate()
    src = _sentence_ids(model.src_vocab, read_lines(args.src), args.src)
    if args.constraints:
        cons = read_constraints(args.constraints)
        if len(cons) != len(src):
            raise DataError(f"{len(cons)} constraint lines for {len(src)} sentences")
    else:
        cons = [[] for _ in src]
    jobs = [(model, head, s, c, cfg, not args.no_timing) for s, c in zip(src, cons)]
    t0 = time.perf_counter()
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_decode_one, jobs, chunksize=max(1, len(jobs) // (4 * args.jobs))))
    else:
        results = [_decode_one(j) for j in jobs]
    elapsed = time.perf_counter() - t0
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in results)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    _say(f"decoded {len(results)} sentences with {method} in {elapsed:.2f}s")


def _read_hyps(path) -> tuple[list[list[str]], float | None]:
    """Plain text (one sentence per line) or decode JSON Lines; returns (token lists, total seconds)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if lines and lines[0].lstrip().startswith("{"):
        hyps, micros = [], 0
        for i, line in enumerate(lines):
            try:
                obj = json.loads(line)
                hyps.append([str(t) for t in obj["tokens"]])
            except (json.JSONDecodeError, KeyError, TypeError):
                raise FormatError(f"{path}: line {i + 1} is not a decode record") from None
            micros += obj.get("micros", 0) or 0
        return hyps, (micros / 1e6 if micros else None)
    return [line.split() for line in lines], None


def _score(metrics, refs, hyps, cons, args, seconds):
    report = {}
    for m in metrics:
        if m == "aer":
            if not (args.pred and args.gold):
                raise ConfigError("--metric aer needs --pred and --gold")
            pred, gold = read_pharaoh(args.pred), read_pharaoh(args.gold)
            if len(pred) != len(gold):
                raise DataError(f"{len(pred)} predicted but {len(gold)} gold alignments")
            report["aer"] = corpus_aer(pred, gold)
            continue
        if refs is None or hyps is None:
            raise ConfigError(f"--metric {m} needs --ref and --hyp")
        if len(refs) != len(hyps):
            raise DataError(f"{len(refs)} references but {len(hyps)} hypotheses")
        if m == "bleu":
            report["bleu"] = bleu(refs, hyps)
            continue
        if cons is None:
            raise ConfigError(f"--metric {m} needs --constraints")
        if m == "csr":
            report["csr"] = csr(cons, hyps)
            report["per_constraint"] = [satisfied_flags(cs, h) for cs, h in zip(cons, hyps)]
        elif m == "bleu-c":
            report["bleu_c"] = corpus_bleu_c(refs, hyps, cons, args.window)
    if hyps is not None:
        report["time_seconds"] = seconds
    return report


def cmd_score(args):
    refs = read_lines(args.ref) if args.ref else None
    hyps, seconds = _read_hyps(args.hyp) if args.hyp else (None, None)
    cons = read_constraints(args.constraints) if args.constraints else None
    if cons is not None and hyps is not None and len(cons) != len(hyps):
        raise DataError(f"{len(cons)} constraint lines for {len(hyps)} hypotheses")
    metrics = args.metric or (["bleu", "bleu-c", "csr"] if cons is not None else ["bleu"])
    report = _score(metrics, refs, hyps, cons, args, seconds)
    if args.tsv:
        cols = [("BLEU-C", "bleu_c"), ("CSR", "csr"), ("BLEU", "bleu"), ("AER", "aer"), ("Time", "time_seconds")]
        cols = [(h, k) for h, k in cols if k in report]
        fmt = lambda v: "" if v is None else f"{v:.2f}"  # noqa: E731
        text = "\t".join(h for h, _ in cols) + "\n" + "\t".join(fmt(report[k]) for _, k in cols) + "\n"
        if args.out_json:
            Path(args.out_json).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    else:
        _emit(args, report)
    _say("  ".join(f"{k}={v:.2f}" for k, v in report.items() if isinstance(v, float)))


def cmd_bootstrap(args):
    refs = read_lines(args.ref)
    a, _ = _read_hyps(args.hyp_a)
    b, _ = _read_hyps(args.hyp_b)
    cons = None
    if args.metric == "bleu":
        metric = "bleu"
    else:
        if not args.constraints:
            raise ConfigError(f"--metric {args.metric} needs --constraints")
        cons = read_constraints(args.constraints)
        if args.metric == "bleu-c":
            def metric(rs, hs, cs):
                return corpus_bleu_c(rs, hs, cs, args.window)
        else:
            def metric(rs, hs, cs):
                return csr(cs, hs)
    if not (len(refs) == len(a) == len(b)) or (cons is not None and len(cons) != len(refs)):
        raise DataError("reference, hypothesis and constraint files differ in length")
    p = paired_bootstrap(metric, refs, a, b, n_samples=args.n_samples, seed=_seed(args), aux=cons)
    _say(f"p = {p:.4f} ({args.n_samples} samples)")
    _emit(args, {"metric": args.metric, "p_value": p, "n_samples": args.n_samples})


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alnbeam", description="Online posterior alignment and constrained decoding.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--json-out", dest="out_json", help="write the JSON summary here instead of stdout")
        return sp

    sp = add("gen-toy", cmd_gen_toy, "generate a synthetic parallel corpus with gold alignments")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--lexicon-size", type=int, default=24)
    sp.add_argument("--ambiguity", type=float, default=0.5, help="fraction of ambiguous source words")
    sp.add_argument("--reorder", choices=REORDER_RULES, default="verb-final")
    sp.add_argument("--n-sentences", type=int, default=2000)
    sp.add_argument("--min-len", type=int, default=4)
    sp.add_argument("--max-len", type=int, default=8)
    sp.add_argument("--identity", action="store_true", help="copy task: target words equal source words")
    sp.add_argument("--heldout", type=int, default=0, help="write the last N pairs to OUT/test, the rest to OUT/train")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("train-model", cmd_train_model, "train the base translation model on a corpus directory")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="model JSON path")
    sp.add_argument("--reverse", action="store_true", help="train target-to-source")
    sp.add_argument("--limit", type=int, default=0, help="use only the first N pairs")
    sp.add_argument("--d", type=int, default=32)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--d-ff", type=int, default=64)
    sp.add_argument("--steps", type=int, default=1500)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--lr", type=float, default=3e-3)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("train-align", cmd_train_align, "train an alignment head with the base model frozen")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="alignment head JSON path")
    sp.add_argument("--kind", choices=("post", "prior", "shift_aet"), default="post")
    sp.add_argument("--supervision", default="gold",
                    help="'gold', 'shift' (symmetrized ShiftATT, needs --reverse-model) or a Pharaoh file")
    sp.add_argument("--reverse-model", help="target-to-source model for --supervision shift")
    sp.add_argument("--layer", type=int, default=None, help="decoder layer (0-based, default penultimate)")
    sp.add_argument("--limit", type=int, default=1000)
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--lr", type=float, default=0.02)
    sp.add_argument("--batch-size", type=int, default=200)
    sp.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("align", cmd_align, "extract online alignments for fixed sentence pairs")
    sp.add_argument("--model", required=True)
    sp.add_argument("--src", required=True)
    sp.add_argument("--tgt", required=True)
    sp.add_argument("--out", required=True, help="Pharaoh output path")
    sp.add_argument("--method", choices=[m.replace("_", "-") for m in METHODS], default="postaln")
    sp.add_argument("--head", help="alignment head for prior, shift-aet and postaln")
    sp.add_argument("--layer", type=int, default=None)
    sp.add_argument("--gold", help="gold Pharaoh file; adds AER to the report")

    sp = add("symmetrize", cmd_symmetrize, "grow-diag(-final-and) symmetrization of two alignment files")
    sp.add_argument("--fwd", required=True)
    sp.add_argument("--rev", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--transpose-rev", action="store_true", help="reverse file is in target-source order")
    sp.add_argument("--no-final-and", action="store_true")

    sp = add("extract-constraints", cmd_extract_constraints,
             "sample gold phrase constraints that greedy decoding misses")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="constraint JSON Lines path")
    sp.add_argument("--max-constraints", type=int, default=3)
    sp.add_argument("--max-len", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("decode", cmd_decode, "translate a source file, optionally under lexical constraints")
    sp.add_argument("--model", required=True)
    sp.add_argument("--src", required=True)
    sp.add_argument("--out", help="JSON Lines output path (default stdout)")
    sp.add_argument("--constraints")
    sp.add_argument("--head")
    sp.add_argument("--method", choices=("none", "replace", "vdba", "align-vdba"), default="none")
    sp.add_argument("--align-method", choices=[m.replace("_", "-") for m in METHODS], default=None)
    sp.add_argument("--beam", type=int, default=5)
    sp.add_argument("--max-len", type=int, default=None)
    sp.add_argument("--threshold", type=float, default=None,
                    help="span-mass gate for align-vdba (default 0.1 at beam <= 5, else 0)")
    sp.add_argument("--temperature", type=float, default=2.0)
    sp.add_argument("--layer", type=int, default=None)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--no-timing", action="store_true", help="omit wall-clock fields (byte-stable output)")

    sp = add("score", cmd_score, "score outputs: AER, BLEU, BLEU-C and CSR")
    sp.add_argument("--metric", action="append", choices=("aer", "bleu", "bleu-c", "csr"))
    sp.add_argument("--ref")
    sp.add_argument("--hyp", help="plain text or decode JSON Lines")
    sp.add_argument("--constraints")
    sp.add_argument("--pred", help="predicted Pharaoh alignments (aer)")
    sp.add_argument("--gold", help="gold Pharaoh alignments (aer)")
    sp.add_argument("--window", type=int, default=3)
    sp.add_argument("--tsv", action="store_true", help="print a BLEU-C/CSR/BLEU/Time table row instead of JSON")

    sp = add("bootstrap", cmd_bootstrap, "paired bootstrap test of system A against baseline B")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--hyp-a", required=True)
    sp.add_argument("--hyp-b", required=True)
    sp.add_argument("--metric", choices=("bleu", "bleu-c", "csr"), default="bleu")
    sp.add_argument("--constraints")
    sp.add_argument("--window", type=int, default=3)
    sp.add_argument("--n-samples", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except AlnBeamError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error[data]: no such file {e.filename}", file=sys.stderr)
        return 2
    except (IsADirectoryError, PermissionError, UnicodeDecodeError) as e:
        print(f"error[data]: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error[data]: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
