"""Command line interface.

Subcommands: gen-data, train, decode, eval, stats.  Every option can also be
supplied through a flat key=value config file (--config); explicit flags win
over the file, the file wins over defaults.  The effective option set is
hashed and stamped into output sidecars and checkpoints so artifacts can be
traced back to the exact configuration that produced them.

Exit codes: 0 success, 1 usage, 2 I/O, 3 invalid data or configuration,
4 training divergence.  Log verbosity comes from SPANEDIT_LOG
(error | info | debug, default info).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .autodiff import CheckpointError
from .corpus import (
    CorpusError,
    EditExample,
    TaskKind,
    TaskSpec,
    Vocab,
    build_vocab,
    generate_corpus,
    load_vocab,
    read_corpus,
    save_vocab,
    split_bucket,
    write_corpus,
)
from .metrics import evaluate, span_length_stats, write_histogram_csv
from .model import ModelConfig, ModelError, SpanCopyModel
from .objective import OBJECTIVES, DivergenceError, TrainConfig, train
from .search import decode, greedy_decode

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_DIVERGENCE = 4

META_FORMAT_VERSION = 1

logger = logging.getLogger("spanedit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # raise instead of sys.exit so main() owns the exit code
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_optional_int(text: str) -> int | None:
    low = str(text).strip().lower()
    if low in ("none", ""):
        return None
    return int(text)


@dataclass(frozen=True)
class Opt:
    name: str  # dest and config-file key
    type: Callable
    default: object
    help: str
    required: bool = False
    choices: tuple | None = None
    is_flag: bool = False  # boolean with --name / --no-name forms


_TASKS = tuple(kind.value for kind in TaskKind)

_GEN_OPTS = (
    Opt("task", str, None, "edit task to generate", required=True, choices=_TASKS),
    Opt("count", int, None, "number of examples", required=True),
    Opt("seed", int, 0, "corpus seed"),
    Opt("min_len", int, 6, "minimum input length"),
    Opt("max_len", int, 14, "maximum input length"),
    Opt("alphabet_size", int, 6, "distinct content tokens"),
    Opt("out", str, None, "output directory for train/valid/test.jsonl", required=True),
)

_DECODERS = ("greedy", "beam_merged", "beam_merge_at_end")

_TRAIN_OPTS = (
    Opt("data", str, None, "training corpus (JSONL)", required=True),
    Opt("out", str, None, "checkpoint output path", required=True),
    Opt("vocab_out", str, None, "vocab output path (default <out>.vocab)"),
    Opt("log", str, None, "training log path (JSONL, one record per epoch per split)"),
    Opt("epochs", int, 10, "training epochs"),
    Opt("batch_size", int, 32, "max examples per update"),
    Opt("lr", float, 1e-3, "learning rate"),
    Opt("clip_norm", float, 5.0, "global gradient norm clip"),
    Opt("seed", int, 0, "shuffling and dropout seed"),
    Opt("objective", str, "marginal", "training objective", choices=OBJECTIVES),
    Opt("embed_dim", int, 64, "embedding size"),
    Opt("enc_hidden", int, 64, "encoder hidden size per direction"),
    Opt("enc_layers", int, 2, "encoder layers"),
    Opt("dec_hidden", int, 64, "decoder hidden size"),
    Opt("dropout", float, 0.2, "dropout rate"),
    Opt("tie_embeddings", _parse_bool, True, "tie output projection to embeddings", is_flag=True),
    Opt("max_copy_len", _parse_optional_int, None, "copy span cap: none or 1"),
    Opt("precision", str, "float64", "parameter dtype", choices=("float32", "float64")),
    Opt("init_seed", int, 0, "parameter init seed"),
    Opt("vocab_size", int, 10000, "max vocabulary size"),
)

_DECODE_OPTS = (
    Opt("model", str, None, "checkpoint path", required=True),
    Opt("vocab", str, None, "vocab path", required=True),
    Opt("data", str, None, "corpus to decode (gen-data directory or JSONL file)"),
    Opt("split", str, "test", "corpus split", choices=("train", "valid", "test", "all")),
    Opt("input", str, None, "decode one space-separated token sequence instead of a corpus"),
    Opt("out", str, "-", "output path, '-' for stdout"),
    Opt("decoder", str, "beam_merged", "decoding strategy", choices=_DECODERS),
    Opt("beam_size", int, 20, "beam width"),
    Opt("max_len", _parse_optional_int, None, "output token budget (default 2n+16)"),
    Opt("threads", int, 1, "decode worker threads"),
)

_EVAL_OPTS = (
    Opt("model", str, None, "checkpoint path", required=True),
    Opt("vocab", str, None, "vocab path", required=True),
    Opt("data", str, None, "corpus to evaluate (gen-data directory or JSONL file)", required=True),
    Opt("split", str, "test", "corpus split", choices=("train", "valid", "test", "all")),
    Opt("out", str, "-", "report path, '-' for stdout"),
    Opt("decoder", str, "beam_merged", "decoding strategy", choices=("beam_merged", "beam_merge_at_end")),
    Opt("beam_size", int, 20, "beam width"),
    Opt("k", int, 20, "rank cutoff for accuracy@k"),
    Opt("max_len", _parse_optional_int, None, "output token budget (default 2n+16)"),
    Opt("threads", int, 1, "eval worker threads"),
)

_STATS_OPTS = (
    Opt("model", str, None, "checkpoint path", required=True),
    Opt("vocab", str, None, "vocab path", required=True),
    Opt("data", str, None, "corpus to trace (gen-data directory or JSONL file)", required=True),
    Opt("split", str, "test", "corpus split", choices=("train", "valid", "test", "all")),
    Opt("out", str, None, "span length histogram CSV path", required=True),
    Opt("max_len", _parse_optional_int, None, "output token budget (default 2n+16)"),
)

_COMMANDS: dict[str, tuple[Opt, ...]] = {
    "gen-data": _GEN_OPTS,
    "train": _TRAIN_OPTS,
    "decode": _DECODE_OPTS,
    "eval": _EVAL_OPTS,
    "stats": _STATS_OPTS,
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="spanedit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{%s}" % ",".join(_COMMANDS))
    for name, opts in _COMMANDS.items():
        p = sub.add_parser(name, add_help=True)
        p.error = parser.error  # single error pathway
        p.add_argument("--config", default=None, help="key=value config file")
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            if o.is_flag:
                p.add_argument(
                    flag, dest=o.name, action=argparse.BooleanOptionalAction,
                    default=argparse.SUPPRESS, help=o.help,
                )
            else:
                p.add_argument(
                    flag, dest=o.name, type=o.type, default=argparse.SUPPRESS,
                    choices=o.choices, help=o.help,
                )
    return parser


def _read_config_file(path: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise CorpusError(f"{path} line {lineno}: expected key=value, got {line!r}")
        key, value = body.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def _effective_options(args: argparse.Namespace, opts: tuple[Opt, ...]) -> dict:
    """Merge defaults < config file < explicit flags; validate keys/values."""
    merged = {o.name: o.default for o in opts}
    by_name = {o.name: o for o in opts}
    if args.config:
        for key, value in _read_config_file(args.config).items():
            o = by_name.get(key)
            if o is None:
                raise CorpusError(f"{args.config}: unknown option {key!r}")
            try:
                parsed = o.type(value)
            except ValueError as err:
                raise CorpusError(f"{args.config}: option {key!r}: {err}") from err
            if o.choices is not None and parsed not in o.choices:
                raise CorpusError(
                    f"{args.config}: option {key!r} must be one of {o.choices}, got {parsed!r}"
                )
            merged[key] = parsed
    for o in opts:
        if hasattr(args, o.name):
            merged[o.name] = getattr(args, o.name)
    missing = [o.name for o in opts if o.required and merged[o.name] is None]
    if missing:
        flags = ", ".join("--" + name.replace("_", "-") for name in missing)
        raise UsageError(f"missing required option(s): {flags}")
    return merged


def config_hash(options: dict) -> str:
    canon = "\n".join(f"{k}={json.dumps(options[k], sort_keys=True)}" for k in sorted(options))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _write_meta(out_path: str, command: str, options: dict) -> None:
    meta = {
        "format_version": META_FORMAT_VERSION,
        "command": command,
        "config_hash": config_hash(options),
        "options": {k: v for k, v in sorted(options.items())},
    }
    Path(str(out_path) + ".meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _split_by_index(examples: list[EditExample]) -> dict[str, list[EditExample]]:
    splits: dict[str, list[EditExample]] = {"train": [], "valid": [], "test": []}
    for i, ex in enumerate(examples):
        splits[split_bucket(i)].append(ex)
    return splits


def _load_split(data: str, split: str) -> list[EditExample]:
    """Read one split from a gen-data directory, or from a bare JSONL corpus
    (then split deterministically by example index)."""
    path = Path(data)
    if path.is_dir():
        names = ("train", "valid", "test") if split == "all" else (split,)
        out: list[EditExample] = []
        for name in names:
            out.extend(read_corpus(path / f"{name}.jsonl"))
        return out
    examples = read_corpus(path)
    if split == "all":
        return examples
    return _split_by_index(examples)[split]


def _load_model_vocab(opt: dict) -> tuple[SpanCopyModel, Vocab]:
    model = SpanCopyModel.load(opt["model"])
    vocab = load_vocab(opt["vocab"])
    if vocab.size != model.config.vocab_size:
        raise ModelError(
            f"vocab has {vocab.size} entries but the model expects {model.config.vocab_size}"
        )
    return model, vocab


# ---------------------------------------------------------------------------
# Commands


def _cmd_gen_data(opt: dict) -> int:
    spec = TaskSpec(
        kind=TaskKind(opt["task"]),
        alphabet_size=opt["alphabet_size"],
        min_len=opt["min_len"],
        max_len=opt["max_len"],
        seed=opt["seed"],
    )
    examples = generate_corpus(spec, opt["count"])
    out_dir = Path(opt["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = _split_by_index(examples)
    for name, exs in splits.items():
        write_corpus(out_dir / f"{name}.jsonl", exs)
    meta = {
        "format_version": META_FORMAT_VERSION,
        "command": "gen-data",
        "config_hash": config_hash(opt),
        "options": {k: v for k, v in sorted(opt.items())},
        "split_sizes": {name: len(exs) for name, exs in splits.items()},
    }
    (out_dir / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info(
        "wrote %d %s examples to %s (train/valid/test %d/%d/%d)",
        len(examples), opt["task"], out_dir,
        len(splits["train"]), len(splits["valid"]), len(splits["test"]),
    )
    return EXIT_OK


def _cmd_train(opt: dict) -> int:
    train_set = _load_split(opt["data"], "train")
    valid_set = _load_split(opt["data"], "valid")
    if not train_set:
        raise CorpusError(f"{opt['data']}: no training examples after the split")
    vocab = build_vocab(train_set, max_size=opt["vocab_size"])
    model_cfg = ModelConfig(
        vocab_size=vocab.size,
        embed_dim=opt["embed_dim"],
        enc_hidden=opt["enc_hidden"],
        enc_layers=opt["enc_layers"],
        dec_hidden=opt["dec_hidden"],
        dropout=opt["dropout"],
        tie_embeddings=opt["tie_embeddings"],
        max_copy_len=opt["max_copy_len"],
        precision=opt["precision"],
        init_seed=opt["init_seed"],
    )
    train_cfg = TrainConfig(
        epochs=opt["epochs"],
        batch_size=opt["batch_size"],
        lr=opt["lr"],
        clip_norm=opt["clip_norm"],
        seed=opt["seed"],
        objective=opt["objective"],
        log_path=opt["log"],
    )
    model = SpanCopyModel(model_cfg)
    logger.info(
        "training on %d examples (%d valid) for %d epochs, objective=%s",
        len(train_set), len(valid_set), train_cfg.epochs, train_cfg.objective,
    )
    records = train(model, vocab, train_set, valid_set, train_cfg)
    final = records[-1] if records else {}
    loss = final.get("loss")
    em = final.get("exact_match")
    logger.info(
        "final valid loss %.4f exact match %.3f",
        float("nan") if loss is None else loss,
        0.0 if em is None else em,
    )
    model.save(opt["out"], header_extra={"config_hash": config_hash(opt)})
    vocab_out = opt["vocab_out"] or (str(opt["out"]) + ".vocab")
    save_vocab(vocab_out, vocab)
    _write_meta(opt["out"], "train", opt)
    return EXIT_OK


def _trace_json(actions, vocab) -> list[dict]:
    out = []
    for a in actions:
        if hasattr(a, "token_id"):
            out.append({"op": "gen", "token": vocab.surface(a.token_id)})
        else:
            out.append({"op": "copy", "start": a.start, "end": a.end})
    return out


def _decode_one(model, vocab, tokens: list[str], opt: dict) -> dict:
    if opt["decoder"] == "greedy":
        g = greedy_decode(model, vocab, tokens, opt["max_len"])
        cands = [{
            "tokens": list(g.tokens),
            "log_prob": g.log_prob,
            "finished": g.finished,
            "rank": 1,
        }]
        return {"input": tokens, "candidates": cands, "trace": _trace_json(g.actions, vocab)}
    merge = "during" if opt["decoder"] == "beam_merged" else "end"
    result = decode(model, vocab, tokens, opt["beam_size"], opt["max_len"], merge)
    cands = [
        {
            "tokens": list(c.tokens),
            "log_prob": c.log_prob,
            "finished": c.finished,
            "rank": c.rank,
        }
        for c in result.candidates
    ]
    return {"input": tokens, "candidates": cands}


def _cmd_decode(opt: dict) -> int:
    if (opt["input"] is None) == (opt["data"] is None):
        raise UsageError("decode needs exactly one of --input or --data")
    model, vocab = _load_model_vocab(opt)
    if opt["input"] is not None:
        tokens = opt["input"].split()
        if not tokens:
            raise CorpusError("--input is empty")
        inputs = [tokens]
    else:
        inputs = [list(ex.input) for ex in _load_split(opt["data"], opt["split"])]
    if opt["threads"] > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=opt["threads"]) as pool:
            rows = list(pool.map(lambda toks: _decode_one(model, vocab, toks, opt), inputs))
    else:
        rows = [_decode_one(model, vocab, toks, opt) for toks in inputs]
    if opt["out"] == "-":
        for row in rows:
            sys.stdout.write(json.dumps(row, ensure_ascii=False) + "\n")
    else:
        with open(opt["out"], "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        _write_meta(opt["out"], "decode", opt)
    logger.info("decoded %d inputs", len(rows))
    return EXIT_OK


def _cmd_eval(opt: dict) -> int:
    model, vocab = _load_model_vocab(opt)
    examples = _load_split(opt["data"], opt["split"])
    if not examples:
        raise CorpusError(f"{opt['data']}: split {opt['split']!r} selected no examples")
    report = evaluate(
        model, vocab, examples,
        beam_size=opt["beam_size"], k=opt["k"], max_len=opt["max_len"],
        merge="during" if opt["decoder"] == "beam_merged" else "end",
        threads=opt["threads"],
    )
    if opt["out"] == "-":
        sys.stdout.write(report.to_json() + "\n")
    else:
        report.save(opt["out"])
        _write_meta(opt["out"], "eval", opt)
    logger.info(
        "evaluated %d examples: exact match %.3f",
        report.n_examples, report.metrics["exact_match"],
    )
    return EXIT_OK


def _cmd_stats(opt: dict) -> int:
    model, vocab = _load_model_vocab(opt)
    examples = _load_split(opt["data"], opt["split"])
    if not examples:
        raise CorpusError(f"{opt['data']}: split {opt['split']!r} selected no examples")
    traces = [
        greedy_decode(model, vocab, list(ex.input), opt["max_len"]).actions for ex in examples
    ]
    stats = span_length_stats(traces)
    write_histogram_csv(opt["out"], stats)
    _write_meta(opt["out"], "stats", opt)
    summary = {
        "n_examples": len(examples),
        "total_copies": stats.total_copies,
        "total_actions": stats.total_actions,
        "mean_copy_len": stats.mean,
        "median_copy_len": stats.median,
        "single_copy_fraction": stats.single_copy_fraction,
    }
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return EXIT_OK


_RUNNERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
}


def _setup_logging() -> None:
    raw = os.environ.get("SPANEDIT_LOG", "info").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if raw not in levels:
        raise CorpusError(f"SPANEDIT_LOG must be one of {sorted(levels)}, got {raw!r}")
    logging.basicConfig(
        level=levels[raw], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    logger.setLevel(levels[raw])


def main(argv: Sequence[str] | None = None) -> int:
    try:
        _setup_logging()
        parser = _build_parser()
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("spanedit: a command is required (gen-data, train, decode, eval, stats)")
        options = _effective_options(args, _COMMANDS[args.command])
        return _RUNNERS[args.command](options)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as err:
        logger.error("training diverged: %s", err)
        return EXIT_DIVERGENCE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as err:
        logger.error("%s", err)
        return EXIT_IO
    except (CorpusError, CheckpointError, ModelError) as err:
        logger.error("%s", err)
        return EXIT_VALIDATION
    except json.JSONDecodeError as err:
        logger.error("invalid JSON: %s", err)
        return EXIT_VALIDATION
    except ValueError as err:
        logger.error("%s", err)
        return EXIT_VALIDATION
    except OSError as err:
        logger.error("%s", err)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
