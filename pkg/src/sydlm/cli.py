"""Batch front door: preprocess treebanks, train models, evaluate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every output artifact embeds a manifest (command line, seed, input
fingerprint, toolkit version, config snapshot); equal manifests produce
byte-identical metric files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from . import autodiff as ad
from .config import ConfigError, TrainConfig, apply_setting, parse_config_text
from .corpus import Corpus, PreprocessRules, preprocess_corpus
from .evaluation import (
    induce_trees,
    length_filter,
    perplexity,
    render_parallel,
    report_to_json,
    structure_report,
)
from .models import build_model
from .training import TrainingDiverged, train
from .trees import TreebankError, parse_bracketed

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print("usage error: %s" % message, file=sys.stderr)
        raise _UsageExit(message)


def _fingerprint(paths: list) -> str:
    h = hashlib.sha256()
    for path in paths:
        h.update(Path(path).read_bytes())
    return h.hexdigest()


def _manifest(argv: list, seed: int, input_paths: list, config: dict) -> dict:
    return {
        "command_line": "sydlm " + " ".join(argv),
        "seed": seed,
        "corpus_fingerprint": _fingerprint(input_paths),
        "toolkit_version": __version__,
        "config": config,
    }


def _env_seed(default: int) -> int:
    raw = os.environ.get("SYDLM_SEED")
    return int(raw) if raw else default


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def _load_rules(path: str | None, mode: str) -> PreprocessRules:
    rules = PreprocessRules(mode=mode)
    if path is None:
        return rules
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("%s:%d: expected key = value" % (path, lineno))
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "lowercase":
            rules.lowercase = value.lower() in ("true", "1", "yes", "on")
        elif key == "drop_tags":
            rules.drop_tags = frozenset(value.split())
        elif key == "number_pattern":
            rules.number_pattern = value
        elif key == "number_symbol":
            rules.number_symbol = value
        elif key == "vocab_max_size":
            rules.vocab_max_size = int(value)
        elif key == "mode":
            rules.mode = value
        else:
            raise ConfigError("%s:%d: unknown rule %r" % (path, lineno, key))
    if rules.mode not in ("concat", "sepsent"):
        raise ConfigError("mode must be concat or sepsent")
    return rules


def cmd_preprocess(args, argv) -> int:
    rules = _load_rules(args.rules, args.mode)
    trees = []
    for path in args.inputs:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise TreebankError("%s: %s" % (path, exc))
        try:
            trees.extend(parse_bracketed(text))
        except TreebankError as exc:
            raise TreebankError("%s: %s" % (path, exc))
    vocab = Corpus.load(args.vocab_from).vocab if args.vocab_from else None
    corpus = preprocess_corpus(trees, rules, vocab)
    corpus.manifest = _manifest(argv, 0, list(args.inputs), {"rules": {
        "lowercase": rules.lowercase,
        "drop_tags": sorted(rules.drop_tags),
        "number_pattern": rules.number_pattern,
        "number_symbol": rules.number_symbol,
        "vocab_max_size": rules.vocab_max_size,
        "mode": rules.mode,
    }})
    corpus.save(args.out)
    dist_path = args.out + ".dist"
    with open(dist_path, "w") as fh:
        for i in range(corpus.n_sentences):
            seq = corpus.gold_distances(i)
            fh.write((seq.to_line() if seq is not None else "0") + "\n")
    print("wrote %s (+ %s): %d tokens, %d sentences, vocab %d (%s mode)"
          % (args.out, dist_path, len(corpus.tokens), corpus.n_sentences,
             len(corpus.vocab), corpus.mode))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args, argv) -> int:
    corpus = Corpus.load(args.corpus)
    valid = Corpus.load(args.valid) if args.valid else None
    cfg = TrainConfig()
    cfg.seed = _env_seed(cfg.seed)
    if args.config:
        cfg = parse_config_text(Path(args.config).read_text(), base=cfg)
    for kv in args.set or []:
        if "=" not in kv:
            raise ConfigError("--set expects key=value, got %r" % kv)
        key, value = kv.split("=", 1)
        apply_setting(cfg, key.strip(), value)
    cfg.model.vocab_size = len(corpus.vocab)
    cfg.validate()

    model = build_model(cfg.model, cfg.seed)
    log, best = train(model, corpus, cfg, valid)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(argv, cfg.seed, [args.corpus] + ([args.valid] if args.valid else []),
                         cfg.to_dict())
    with open(outdir / "log.jsonl", "w") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    ad.save_checkpoint(str(outdir / "checkpoint.bin"), best,
                       header={"manifest": manifest, "config": cfg.to_dict()})
    last = log[-1]
    print("trained %d epochs: lm %.4f, valid ppl %.3f -> %s"
          % (last["epoch"], last["lm_loss"], last["valid_ppl"], outdir / "checkpoint.bin"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_model(checkpoint: str):
    header, arrays = ad.load_checkpoint(checkpoint)
    cfg = TrainConfig.from_dict(header["config"])
    cfg.model.validate()
    model = build_model(cfg.model, cfg.seed)
    for name, tensor in model.params.items():
        if name not in arrays:
            raise ConfigError("checkpoint is missing parameter %r" % name)
        if arrays[name].shape != tensor.data.shape:
            raise ConfigError("checkpoint parameter %r has shape %s, expected %s"
                              % (name, arrays[name].shape, tensor.data.shape))
        tensor.data = arrays[name].copy()
    return model, cfg, header


def cmd_eval(args, argv) -> int:
    model, cfg, header = _load_model(args.checkpoint)
    corpus = Corpus.load(args.corpus)
    if cfg.model.vocab_size != len(corpus.vocab):
        raise ConfigError("vocab mismatch: model %d vs corpus %d"
                          % (cfg.model.vocab_size, len(corpus.vocab)))

    metrics = {
        "manifest": _manifest(argv, cfg.seed, [args.corpus, args.checkpoint], cfg.to_dict()),
        "options": {"trees": args.trees, "algo": args.algo, "layer": args.layer,
                    "wsj10_maxlen": args.wsj10_maxlen},
        "perplexity": perplexity(model, corpus, batch_size=args.batch_size,
                                 bptt_length=args.bptt),
    }

    have_gold = any(t is not None for t in corpus.gold_trees_nary)
    report = None
    if have_gold:
        pred = induce_trees(model, corpus, stream=args.trees, algo=args.algo, layer=args.layer)
        report = structure_report(pred, corpus.gold_trees_nary)
        metrics["structure"] = report.to_json_dict()
        if args.wsj10_maxlen:
            sub = length_filter(corpus, args.wsj10_maxlen)
            pred_sub = induce_trees(model, sub, stream=args.trees, algo=args.algo, layer=args.layer)
            short = structure_report(pred_sub, sub.gold_trees_nary)
            metrics["structure_short"] = dict(short.to_json_dict(), max_len=args.wsj10_maxlen)
    else:
        metrics["structure"] = None

    text = report_to_json(metrics)
    if args.out:
        Path(args.out).write_text(text)
        print("wrote %s" % args.out)
    else:
        sys.stdout.write(text)

    if args.plot_csv and report is not None:
        with open(args.plot_csv, "w", newline="") as fh:
            csv.writer(fh).writerows(report.height_csv_rows())
        print("wrote %s" % args.plot_csv)

    if args.render:
        indices = [int(tok) for tok in args.render.split(",") if tok.strip() != ""]
        streams = [("gold", corpus.gold_trees_nary)]
        lm_trees = induce_trees(model, corpus, stream="lm", algo=args.algo, layer=args.layer)
        streams.insert(0, ("lm", lm_trees))
        if model.config.supervision_mode != "none":
            syd_trees = induce_trees(model, corpus, stream="syd", algo=args.algo, layer=args.layer)
            streams.insert(0, ("syd", syd_trees))
        for i in indices:
            if not 0 <= i < corpus.n_sentences:
                raise ConfigError("--render index %d out of range" % i)
            rows = [(name, trees[i]) for name, trees in streams if trees[i] is not None]
            print(render_parallel(corpus.sentence_words(i), rows))
            print()
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="sydlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="treebank files -> corpus dump")
    p.add_argument("inputs", nargs="+", help="bracketed treebank files")
    p.add_argument("--out", required=True, help="corpus dump path")
    p.add_argument("--mode", choices=["concat", "sepsent"], default="concat")
    p.add_argument("--rules", help="key = value rules file")
    p.add_argument("--vocab-from", help="reuse the vocab of an existing corpus dump")

    p = sub.add_parser("train", help="train a model on a corpus dump")
    p.add_argument("--corpus", required=True)
    p.add_argument("--valid", help="validation corpus dump")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable; wins over --config)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="perplexity + structure metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="metrics JSON path (default stdout)")
    p.add_argument("--trees", choices=["lm", "syd"], default="syd")
    p.add_argument("--algo", choices=["biased", "unbiased"], default="unbiased")
    p.add_argument("--layer", type=int, help="distance layer for --trees lm (1-based)")
    p.add_argument("--wsj10-maxlen", type=int, help="also report on sentences <= K tokens")
    p.add_argument("--render", help="comma-separated sentence indices to print")
    p.add_argument("--plot-csv", help="write height-accuracy CSV here")
    p.add_argument("--bptt", type=int, default=70)
    p.add_argument("--batch-size", type=int, default=1)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "preprocess":
            return cmd_preprocess(args, argv)
        if args.command == "train":
            return cmd_train(args, argv)
        return cmd_eval(args, argv)
    except _UsageExit:
        return EXIT_USAGE
    except (ConfigError, TreebankError, FileNotFoundError, ValueError) as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return EXIT_DATA
    except (ad.NumericError, TrainingDiverged) as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
