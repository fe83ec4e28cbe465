"""Command-line pipeline: synth, prepare, train, evaluate, ablate, sweep, inspect.

Settings come from three layers: built-in defaults, an optional flat
``key=value`` file given with ``--config``, and command-line flags. The
effective settings are echoed into every JSON report.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .corpus import (Corpus, CorpusError, build_corpus, load_corpus, make_test_instances, read_reviews,
                     save_corpus, write_reviews)
from .evaluation import evaluate, score_instances
from .model import (ABLATIONS, ConfigError, ModelConfig, ablate, load_checkpoint, parameter_count,
                    save_checkpoint)
from .synthetic import generate_synthetic
from .training import TrainConfig, train

logger = logging.getLogger("rns")


class UsageError(Exception):
    """Bad arguments or settings; reported with exit code 2."""


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _heights(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(h) for h in text)
    return tuple(int(h) for h in str(text).split(",") if h.strip())


# key -> (parser, default); every key may appear in a config file or as a flag
SETTINGS = {
    # corpus
    "min_user_interactions": (int, 10),
    "train_ratio": (float, 0.7),
    "doc_len": (int, 300),
    "min_count": (int, 5),
    # model
    "d": (int, 25),
    "K": (int, 5),
    "n": (int, 10),
    "filter_heights": (_heights, (1, 3, 5, 7, 9)),
    "L": (int, 5),
    "alpha": (float, 0.1),
    "use_union": (_bool, True),
    "use_individual": (_bool, True),
    "use_position": (_bool, True),
    "use_aspects": (_bool, True),
    "shared_word_emb": (_bool, False),
    # training
    "learning_rate": (float, 0.001),
    "x": (int, 3),
    "lam": (float, 0.0001),
    "epochs": (int, 30),
    "batch_size": (int, 128),
    "seed": (int, 0),
    "patience": (int, 0),
    # evaluation
    "protocol": (str, "per-user"),
    "N": (int, 5),
    "num_negatives": (int, 100),
}

CORPUS_KEYS = ("min_user_interactions", "train_ratio", "doc_len", "min_count")
MODEL_KEYS = ("d", "K", "n", "filter_heights", "L", "alpha", "use_union", "use_individual",
              "use_position", "use_aspects", "shared_word_emb")
TRAIN_KEYS = ("learning_rate", "x", "lam", "epochs", "batch_size", "seed", "patience")


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment, dashes equal underscores."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        out[key] = value
    return out


def resolve(args: argparse.Namespace, keys) -> dict:
    """Defaults, then the config file, then explicit flags."""
    from_file = read_config_file(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key in keys:
        parse, default = SETTINGS[key]
        value = getattr(args, key, None)
        if value is None:
            value = from_file.get(key, default)
        try:
            out[key] = parse(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    return out


def _add_settings(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        parse, _ = SETTINGS[key]
        flag = "--" + key.replace("_", "-")
        kind = str if parse in (_bool, _heights) else parse
        p.add_argument(flag, dest=key, type=kind, default=None, help=f"(default {SETTINGS[key][1]})")


def _model_config(settings: dict, corpus: Corpus) -> ModelConfig:
    cfg = ModelConfig(vocab_size=len(corpus.vocab), doc_len=corpus.doc_len,
                      **{k: settings[k] for k in MODEL_KEYS})
    return cfg.validate()


def _train_config(settings: dict) -> TrainConfig:
    return TrainConfig(**{k: settings[k] for k in TRAIN_KEYS}).validate()


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_corpus(path) -> Corpus:
    return load_corpus(_existing(path, "corpus cache"))


def _emit(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _check_eval(settings: dict) -> None:
    if settings["protocol"] not in ("per-user", "per-step"):
        raise UsageError("protocol must be per-user or per-step")
    if settings.get("N", 1) < 1 or settings["num_negatives"] < 1:
        raise UsageError("N and num_negatives must be >= 1")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    raw = generate_synthetic(args.users, args.items, args.L, args.pattern_strength, args.seed,
                             seq_len=args.seq_len, follow_noise=not args.sticky_chain)
    write_reviews(raw, args.out)
    logger.info("wrote %d interactions to %s", len(raw), args.out)
    return 0


def cmd_prepare(args) -> int:
    settings = resolve(args, CORPUS_KEYS)
    raw = _existing(args.raw, "raw review file")
    interactions, skipped = read_reviews(raw)
    corpus = build_corpus(interactions, **settings)
    if args.out:
        save_corpus(corpus, args.out)
    if args.stats or not args.out:
        report = corpus.stats.as_dict()
        report["skipped_lines"] = skipped
        report["vocab_size"] = len(corpus.vocab)
        report["config"] = settings
        _emit(report, None)
    return 0


def cmd_train(args) -> int:
    settings = resolve(args, MODEL_KEYS + TRAIN_KEYS)
    tc = _train_config(settings)
    corpus = _load_corpus(args.corpus)
    mc = ablate(_model_config(settings, corpus), args.variant)
    mc.validate()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    every = args.save_every
    extra = {"train": {k: settings[k] for k in TRAIN_KEYS}, "variant": args.variant}

    saved = set()

    def on_epoch(epoch, mean, params):
        if every > 0 and epoch % every == 0:
            save_checkpoint(out_dir / f"ckpt-{epoch}.rnsm", params, mc, {**extra, "epoch": epoch})
            saved.add(epoch)

    result = train(corpus, mc, tc, on_epoch=on_epoch)
    final = out_dir / f"ckpt-{result.epochs_run}.rnsm"
    if result.epochs_run not in saved:
        save_checkpoint(final, result.params, mc, {**extra, "epoch": result.epochs_run})
    _emit({"checkpoint": str(final), "epochs_run": result.epochs_run, "losses": result.losses,
           "parameters": parameter_count(mc), "config": {**mc.to_dict(), **extra["train"]}}, args.out)
    return 0


def _eval_report(params, mc, corpus, settings, tie_seed, per_instance=None) -> dict:
    instances = make_test_instances(corpus, mc.L, settings["num_negatives"], seed=settings["seed"],
                                    protocol=settings["protocol"])
    report = evaluate(params, mc, corpus, instances, settings["N"], tie_seed=tie_seed,
                      per_instance=per_instance)
    return {"protocol": settings["protocol"], "N": settings["N"], **report.as_dict()}


def cmd_evaluate(args) -> int:
    settings = resolve(args, ("protocol", "N", "num_negatives", "seed"))
    _check_eval(settings)
    corpus = _load_corpus(args.corpus)
    params, mc, extra = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    rows: list[dict] | None = [] if args.csv else None
    report = _eval_report(params, mc, corpus, settings, args.tie_shuffle, rows)
    report["config"] = {**mc.to_dict(), **settings, "tie_shuffle": args.tie_shuffle}
    if rows is not None:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["instance", "user", "precision", "recall", "ndcg", "hr"])
            w.writeheader()
            w.writerows(rows)
    _emit(report, args.out)
    return 0


def cmd_ablate(args) -> int:
    settings = resolve(args, MODEL_KEYS + TRAIN_KEYS + ("protocol", "N", "num_negatives"))
    _check_eval(settings)
    tc = _train_config(settings)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in ABLATIONS:
            raise UsageError(f"unknown variant {v!r}; choose from {sorted(ABLATIONS)}")
    corpus = _load_corpus(args.corpus)
    base = _model_config(settings, corpus)
    reports = []
    for v in variants:
        mc = ablate(base, v).validate()
        params = train(corpus, mc, tc).params
        rep = _eval_report(params, mc, corpus, settings, None)
        reports.append({"variant": v, "parameters": parameter_count(mc), **rep})
        logger.info("variant %s: hr=%.4f", v, rep["hr"])
    _emit({"variants": reports, "config": settings}, args.out)
    return 0


def cmd_sweep(args) -> int:
    settings = resolve(args, MODEL_KEYS + TRAIN_KEYS + ("protocol", "N", "num_negatives"))
    _check_eval(settings)
    tc = _train_config(settings)
    parse = SETTINGS[args.param][0]
    try:
        values = [parse(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad sweep value: {exc}") from None
    if not values:
        raise UsageError("no sweep values given")
    corpus = _load_corpus(args.corpus)
    base = _model_config(settings, corpus)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([args.param, "instances", "precision", "recall", "ndcg", "hr"])
    for value in values:
        mc = replace(base, **{args.param: value}).validate()
        params = train(corpus, mc, tc).params
        rep = _eval_report(params, mc, corpus, settings, None)
        w.writerow([value, rep["instances"], repr(rep["precision"]), repr(rep["recall"]),
                    repr(rep["ndcg"]), repr(rep["hr"])])
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_inspect(args) -> int:
    settings = resolve(args, ("protocol", "num_negatives", "seed"))
    _check_eval(settings)
    corpus = _load_corpus(args.corpus)
    params, mc, _ = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    try:
        u = corpus.user_index(args.user)
    except KeyError:
        raise UsageError(f"unknown user id {args.user!r}") from None
    instances = [t for t in make_test_instances(corpus, mc.L, settings["num_negatives"], seed=settings["seed"],
                                                protocol=settings["protocol"]) if t.user == u]
    traces: list = []
    scores = score_instances(params, mc, corpus, instances, traces=traces)
    # one trace per scoring chunk; rows are instance-major, candidate-minor
    rows = {}
    for start, C, trace in traces:
        for r in range(trace.union.shape[0]):
            rows[(start + r // C, r % C)] = (trace, r)
    out = []
    for k, inst in enumerate(instances):
        entries = []
        for item in inst.relevant:
            col = inst.candidates.index(item)
            trace, r = rows[(k, col)]
            entries.append({
                "item": corpus.item_ids[item],
                "score": float(scores[k][col]),
                "union_weights": trace.union[r].tolist(),
                "pointer": int(trace.pointer[r]) + 1,
                "beta": None if trace.beta is None else trace.beta[r].tolist(),
            })
        out.append({
            "instance": k,
            "position": inst.position,
            "history": [corpus.item_ids[i] if i else None for i in inst.history],
            "relevant": entries,
        })
    _emit({"user": args.user, "protocol": settings["protocol"], "instances": out,
           "config": {**mc.to_dict(), **settings}}, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rns", description="Review-driven sequential recommendation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a planted-pattern review file")
    s.add_argument("--users", type=int, default=20)
    s.add_argument("--items", type=int, default=200)
    s.add_argument("--L", type=int, default=5)
    s.add_argument("--pattern-strength", type=float, default=0.9)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--seq-len", type=int, default=None)
    s.add_argument("--sticky-chain", action="store_true",
                   help="random purchases do not move the chain (signal may sit further back)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="build a corpus cache from a JSON-lines review file")
    s.add_argument("raw")
    s.add_argument("--out", help="corpus cache path")
    s.add_argument("--stats", action="store_true", help="print dataset statistics as JSON")
    s.add_argument("--config")
    _add_settings(s, CORPUS_KEYS)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a model on a corpus cache")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--variant", default="full", choices=sorted(ABLATIONS))
    s.add_argument("--save-every", type=int, default=0, help="also checkpoint every k epochs")
    s.add_argument("--out", help="write the JSON summary here instead of stdout")
    s.add_argument("--config")
    _add_settings(s, MODEL_KEYS + TRAIN_KEYS)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="rank test candidates with a checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tie-shuffle", type=int, default=None, metavar="SEED",
                   help="break score ties randomly instead of by item id")
    s.add_argument("--csv", help="per-instance metrics CSV")
    s.add_argument("--out")
    s.add_argument("--config")
    _add_settings(s, ("protocol", "N", "num_negatives", "seed"))
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and evaluate model variants")
    s.add_argument("--corpus", required=True)
    s.add_argument("--variants", default=",".join(ABLATIONS))
    s.add_argument("--out")
    s.add_argument("--config")
    _add_settings(s, MODEL_KEYS + TRAIN_KEYS + ("protocol", "N", "num_negatives"))
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="train and evaluate across values of L or alpha")
    s.add_argument("--corpus", required=True)
    s.add_argument("--param", required=True, choices=["L", "alpha"])
    s.add_argument("--values", required=True, help="comma-separated")
    s.add_argument("--out")
    s.add_argument("--config")
    _add_settings(s, tuple(k for k in MODEL_KEYS if k not in ("L", "alpha")) + TRAIN_KEYS
                  + ("protocol", "N", "num_negatives"))
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("inspect", help="dump attention weights for one user's test instances")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--user", required=True, help="external user id")
    s.add_argument("--out")
    s.add_argument("--config")
    _add_settings(s, ("protocol", "num_negatives", "seed"))
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"rns: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"rns: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # TrainConfig/ModelConfig validation and bad inputs
        kind = 1 if isinstance(exc, CorpusError) else 2
        print(f"rns: error: {exc}", file=sys.stderr)
        return kind
    except Exception as exc:
        logger.debug("unhandled failure", exc_info=True)
        print(f"rns: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
