"""Command-line entry point: ``python -m thpn <command> [flags]``.

Commands: gen-data, train, eval, sweep-theta, chat. Every command accepts
``--config FILE`` (``key=value`` lines under ``[section]`` headers); a flag
given on the command line overrides the same key from the file.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence, TextIO

from . import corpus
from .corpus import Dialogue, KBTriple, ParseError, SyntheticConfig, build_context, tokenize
from .metrics import compute_report, retrieval_stats
from .model import Example, Hyperparams, parse_value
from .numerics import ConfigurationError
from .retrieval import RetrievalConfig, build_repository, retrieve
from .training import (CheckpointError, decode_all, evaluate, load_checkpoint, prepare_examples,
                       save_checkpoint, train, training_entities, vocab_for, write_atomic,
                       write_training_log)

log = logging.getLogger("thpn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3
SPLIT_NAMES = ("train", "valid", "test")
CHECKPOINT_NAME = "model.thpn"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a command needs to reproduce its outputs."""

    data: str = "data"
    out: str = "runs"
    seed: int = 0
    style: str = "slots"
    n_dialogues: int = 1000
    n_restaurants: int = 20
    splits: str = "80,10,10"
    vectors: str = ""
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def split_fractions(self) -> tuple[float, float, float]:
        try:
            parts = [float(x) for x in self.splits.split(",")]
        except ValueError:
            raise UsageError(f"splits must be three comma-separated numbers, got {self.splits!r}")
        if len(parts) != 3 or min(parts) < 0 or sum(parts) <= 0:
            raise UsageError(f"splits must be three non-negative numbers, got {self.splits!r}")
        total = sum(parts)
        return tuple(p / total for p in parts)

    def retrieval(self) -> RetrievalConfig:
        return RetrievalConfig(theta=self.hyperparams.theta, method=self.hyperparams.method)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "hyperparams"}
        hp = asdict(self.hyperparams)
        hp["loss_weights"] = list(hp["loss_weights"])
        out["hyperparams"] = hp
        return out


RUN_KEYS = {f.name for f in fields(RunConfig)} - {"hyperparams"}
HP_KEYS = {f.name for f in fields(Hyperparams)}

# CLI flag -> (config key, value when the switch is present)
SWITCHES = {
    "no_ir": ("no_ir", True),
    "no_ptr": ("no_ptr", True),
    "no_gate": ("no_gate", True),
    "no_mask_history": ("mask_history_new", False),
    "no_mask_retrieved": ("mask_retrieved_ew", False),
}
ALIASES = {"dim": "d", "max_len": "max_len", "hops": "hops"}


def read_config_file(path: str) -> dict[str, str]:
    """Flatten every section of a ``key=value`` config file into one mapping."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keep keys case-sensitive
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        parser.read_string(text, source=path)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}")
    except configparser.Error as exc:
        raise UsageError(f"bad config file {path}: {exc}")
    flat: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[key.replace("-", "_")] = value
    return flat


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw: dict[str, object] = {}
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    for name, value in vars(args).items():
        if name in ("config", "command", "func") or value is None:
            continue
        if name in SWITCHES:
            if value:
                key, v = SWITCHES[name]
                raw[key] = v
            continue
        raw[ALIASES.get(name, name)] = value
    cfg, hp = RunConfig(), Hyperparams()
    run_kw, hp_kw = {}, {}
    for key, value in raw.items():
        key = ALIASES.get(key, key)
        if key in RUN_KEYS:
            default = getattr(cfg, key)
            run_kw[key] = value if not isinstance(value, str) else parse_value(key, value, default)
        elif key in HP_KEYS:
            default = getattr(hp, key)
            if isinstance(value, str) and not isinstance(default, str):
                value = parse_value(key, value, default)
            hp_kw[key] = value
        elif key in COMMAND_ONLY:
            continue
        else:
            raise UsageError(f"unknown configuration key {key!r}")
    if "seed" in run_kw:
        hp_kw["seed"] = run_kw["seed"]
    hp = replace(hp, **hp_kw)
    hp.validate()
    return replace(cfg, hyperparams=hp, **run_kw)


# ------------------------------------------------------------------ data helpers


def split_path(data: str, split: str) -> str:
    return os.path.join(data, f"{split}.jsonl")


def load_split(data: str, split: str) -> list[Dialogue]:
    path = split_path(data, split) if os.path.isdir(data) else data
    try:
        return corpus.load_dialogues(path)
    except FileNotFoundError:
        raise DataError(f"missing data file {path}")
    except (ParseError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}")


class Workspace:
    """Training dialogues, retrieval repository and entity lexicon for one data directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.train = load_split(cfg.data, "train")
        if not self.train:
            raise DataError(f"no training dialogues under {cfg.data}")
        self.entities = training_entities(self.train)
        self.repo = None
        if not cfg.hyperparams.no_ir:
            kw = {"vector_file": cfg.vectors} if cfg.hyperparams.method == "external" else {}
            try:
                self.repo = build_repository(corpus.extract_qa_pairs(self.train), cfg.hyperparams.method, **kw)
            except (OSError, ValueError) as exc:
                raise DataError(str(exc))

    def examples(self, dialogues: Sequence[Dialogue], hp: Hyperparams, training: bool = False) -> list[Example]:
        return prepare_examples(dialogues, self.repo, hp, self.entities, exclude_self=training)

    def lexicon(self, dialogues: Sequence[Dialogue]) -> frozenset[str]:
        return self.entities | training_entities(dialogues)


def emit_json(path: str, obj) -> None:
    write_atomic(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: RunConfig, out=sys.stdout) -> dict:
    """Write train/valid/test JSON-lines files plus bAbI text mirrors into ``cfg.out``."""
    gen = SyntheticConfig(n_restaurants=cfg.n_restaurants, n_dialogues=cfg.n_dialogues,
                          task_style=cfg.style, seed=cfg.seed)
    gen.validate()
    fractions = cfg.split_fractions()
    dialogues = corpus.generate_synthetic(gen)
    n = len(dialogues)
    n_train = round(n * fractions[0])
    n_valid = round(n * fractions[1])
    parts = {"train": dialogues[:n_train], "valid": dialogues[n_train:n_train + n_valid],
             "test": dialogues[n_train + n_valid:]}
    counts = {}
    for name, ds in parts.items():
        write_atomic(os.path.join(cfg.out, f"{name}.jsonl"), corpus.write_jsonl(ds))
        write_atomic(os.path.join(cfg.out, f"{name}.babi.txt"), corpus.serialize_babi(ds))
        counts[name] = len(ds)
    manifest = {"config": cfg.to_dict(), "counts": counts}
    emit_json(os.path.join(cfg.out, "manifest.json"), manifest)
    print(f"wrote {counts['train']}/{counts['valid']}/{counts['test']} dialogues to {cfg.out}", file=out)
    return manifest


def cmd_train(cfg: RunConfig, out=sys.stdout) -> str:
    """Train on ``data/train.jsonl`` selecting by ``data/valid.jsonl``; returns the checkpoint path."""
    ws = Workspace(cfg)
    hp = cfg.hyperparams
    valid = load_split(cfg.data, "valid") if os.path.isdir(cfg.data) else []
    train_ex = ws.examples(ws.train, hp, training=True)
    val_ex = ws.examples(valid, hp) if valid else []

    def report(entry: dict) -> None:
        print(f"epoch {entry['epoch']:3d}  loss {entry['train_loss']:.4f}  "
              f"val {hp.select_metric} {entry['val_metric']:.4f}  ({entry['seconds']:.1f}s)", file=out)

    result = train(train_ex, vocab_for(ws.train), hp, val_ex, on_epoch=report)
    path = os.path.join(cfg.out, CHECKPOINT_NAME)
    save_checkpoint(result.model, path)
    write_atomic(os.path.join(cfg.out, "train_log.jsonl"), write_training_log(result.log))
    emit_json(os.path.join(cfg.out, "run_config.json"),
              {"config": cfg.to_dict(), "best_epoch": result.best_epoch})
    print(f"best epoch {result.best_epoch}; checkpoint {path}", file=out)
    return path


def _checkpoint_path(cfg: RunConfig, checkpoint: str | None) -> str:
    return checkpoint or os.path.join(cfg.out, CHECKPOINT_NAME)


def _load_model(cfg: RunConfig, checkpoint: str | None, args: argparse.Namespace | None):
    path = _checkpoint_path(cfg, checkpoint)
    if not os.path.exists(path):
        raise DataError(f"no checkpoint at {path}")
    expected = None
    if args is not None and (getattr(args, "dim", None) is not None or getattr(args, "hops", None) is not None):
        expected = cfg.hyperparams
    model = load_checkpoint(path, expected)
    # retrieval-time knobs may be overridden at test time; the rest comes from the checkpoint
    if args is not None:
        if getattr(args, "theta", None) is not None:
            model.hp = replace(model.hp, theta=cfg.hyperparams.theta)
        if getattr(args, "max_len", None) is not None:
            model.hp = replace(model.hp, max_len=cfg.hyperparams.max_len)
    return model, path


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None, split: str = "test",
             dump: str | None = None, report_path: str | None = None, oracle: bool = False,
             args: argparse.Namespace | None = None, out=sys.stdout) -> dict:
    """Greedy-decode a split and write the metrics report (plus an optional per-example dump)."""
    test = load_split(cfg.data, split)
    if oracle:
        # harness check: score the gold responses against themselves
        ws = Workspace(replace(cfg, hyperparams=replace(cfg.hyperparams, no_ir=True)))
        golds = [gold for _, _, _, gold in corpus.iter_examples(test)]
        rep = compute_report(golds, golds, ws.lexicon(test), config={"run": cfg.to_dict(), "oracle": True})
        obj = json.loads(rep.to_json())
    else:
        model, path = _load_model(cfg, checkpoint, args)
        run_cfg = replace(cfg, hyperparams=model.hp)
        ws = Workspace(run_cfg)
        if list(model.vocab.itos) != list(vocab_for(ws.train).itos):
            raise CheckpointError(f"{path}: vocabulary does not match the training split of {cfg.data}")
        examples = ws.examples(test, model.hp)
        rep, preds = evaluate(model, examples, ws.lexicon(test),
                              config={"run": run_cfg.to_dict(), "checkpoint": os.path.basename(path),
                                      "split": split})
        obj = json.loads(rep.to_json())
        if dump:
            write_atomic(dump, "".join(json.dumps(p.to_json(), sort_keys=True) + "\n" for p in preds))
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    write_atomic(report_path or os.path.join(cfg.out, f"report_{split}.json"), text)
    print(f"accuracy {obj['per_response_accuracy']:.4f}  BLEU {obj['bleu_x100']:.2f}  "
          f"entity F1 {obj['entity_f1']:.4f}  avg retrieved {obj['avg_retrieved']:.2f}", file=out)
    return obj


def cmd_sweep_theta(cfg: RunConfig, thetas: Sequence[float], checkpoint: str | None = None,
                    split: str = "test", table_path: str | None = None,
                    args: argparse.Namespace | None = None, out=sys.stdout) -> list[dict]:
    """Re-run retrieval (and decoding, when a checkpoint exists) for each threshold."""
    for t in thetas:
        if not 0.0 < t <= 1.0:
            raise UsageError(f"theta values must lie in (0, 1], got {t}")
    test = load_split(cfg.data, split)
    path = _checkpoint_path(cfg, checkpoint)
    model = None
    if checkpoint or os.path.exists(path):
        model, path = _load_model(cfg, checkpoint, None)
    base = model.hp if model is not None else cfg.hyperparams
    if base.no_ir:
        raise UsageError("a theta sweep needs retrieval; this run has no_ir set")
    ws = Workspace(replace(cfg, hyperparams=base))
    rows = []
    print(f"{'theta':>6} {'avg_retrieved':>14} {'metric':>8}", file=out)
    for t in thetas:
        hp = replace(base, theta=float(t))
        examples = ws.examples(test, hp)
        counts = [len(ex.retrieved.answers) for ex in examples]
        row = {"theta": float(t), "avg_retrieved": retrieval_stats(counts), "metric": None}
        if model is not None:
            model.hp = hp
            rep, _ = evaluate(model, examples, ws.lexicon(test))
            row["metric"] = rep.bleu if hp.select_metric == "bleu" else rep.per_response_accuracy
        rows.append(row)
        metric = "-" if row["metric"] is None else f"{row['metric']:.4f}"
        print(f"{t:>6.2f} {row['avg_retrieved']:>14.2f} {metric:>8}", file=out)
    emit_json(table_path or os.path.join(cfg.out, "theta_sweep.json"),
              {"config": replace(cfg, hyperparams=base).to_dict(), "rows": rows})
    return rows


# ------------------------------------------------------------------ chat


COLORS = {"vocab": "", "history": "\033[32m", "retrieved": "\033[34m"}
RESET = "\033[0m"


class ChatSession:
    """Stateful chat over a trained model: history accumulates until ``/reset``."""

    def __init__(self, model, repo, entities: frozenset[str], kb: Sequence[KBTriple] = (), color: bool = False):
        self.model, self.repo, self.entities = model, repo, entities
        self.kb: list[KBTriple] = list(kb)
        self.history: list[tuple[str, ...]] = []
        self.color = color

    def reset(self) -> None:
        self.history = []

    def add_fact(self, s: str, r: str, o: str) -> None:
        self.kb.append(KBTriple(s, r, o))

    def example(self, utterance: Sequence[str]) -> Example:
        history = self.history + [tuple(utterance)]
        hp = self.model.hp
        ctx = build_context(history, self.kb, mask_new=hp.mask_history_new)
        if hp.no_ir or self.repo is None:
            from .retrieval import empty_retrieval
            ret = empty_retrieval()
        else:
            ret = retrieve(history[-1], self.repo, RetrievalConfig(hp.theta, method=hp.method),
                           kb=self.kb, extra_entities=self.entities, mask_entities=hp.mask_retrieved_ew)
        return Example(ctx, ret, (), None, len(self.history) // 2, None)

    def respond(self, text: str):
        utt = tokenize(text)
        ex = self.example(utt)
        tokens, prov = self.model.generate(ex)
        self.history += [utt, tuple(tokens)]
        return ex, tokens, prov

    def render(self, tokens, prov) -> str:
        parts = []
        for tok, p in zip(tokens, prov):
            if self.color and COLORS[p.source]:
                parts.append(f"{COLORS[p.source]}{tok}{RESET}")
            else:
                parts.append(tok if p.source == "vocab" else f"{tok}[{p.source[0]}]")
        return " ".join(parts)

    def handle(self, line: str, out: TextIO) -> bool:
        """Process one input line; return False when the session should end."""
        line = line.strip()
        if not line:
            return True
        if line == "/quit":
            return False
        if line == "/reset":
            self.reset()
            print("(history cleared)", file=out)
            return True
        if line.startswith("/kb"):
            parts = line.split()
            if len(parts) != 4:
                print("usage: /kb <subject> <relation> <object>", file=out)
                return True
            self.add_fact(*parts[1:])
            print(f"(kb: {' '.join(parts[1:])})", file=out)
            return True
        if line.startswith("/"):
            print("commands: /reset, /kb <subject> <relation> <object>, /quit", file=out)
            return True
        ex, tokens, prov = self.respond(line)
        for answer, score in ex.retrieved.answers:
            print(f"  guide {score:.3f}: {' '.join(answer)}", file=out)
        print(f"bot: {self.render(tokens, prov)}", file=out)
        return True


def cmd_chat(cfg: RunConfig, checkpoint: str | None = None, stdin: TextIO = sys.stdin,
             out: TextIO = sys.stdout, args: argparse.Namespace | None = None) -> int:
    model, _ = _load_model(cfg, checkpoint, args)
    ws = Workspace(replace(cfg, hyperparams=model.hp))
    session = ChatSession(model, ws.repo, ws.entities, color=out.isatty())
    print("type an utterance; /reset, /kb <s> <r> <o>, /quit", file=out)
    while True:
        if out.isatty():
            print("you: ", end="", file=out, flush=True)
        line = stdin.readline()
        if not line or not session.handle(line, out):
            return EXIT_OK


# ------------------------------------------------------------------ argument parsing


COMMAND_ONLY = {"checkpoint", "split", "dump", "report", "oracle", "thetas", "table", "verbose"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--data", help="data directory (train/valid/test.jsonl) or a single file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--method", choices=("bm25", "cosine", "external"))
    p.add_argument("--vectors", help="question vector file for --method external")
    p.add_argument("--hops", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    for flag in SWITCHES:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true", default=None)
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="thpn", description="Retrieval-guided pointer-network dialogue models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic restaurant corpus")
    _common(g)
    g.add_argument("--style", choices=("slots", "kb_lookup", "full"))
    g.add_argument("--n-dialogues", dest="n_dialogues", type=int)
    g.add_argument("--n-restaurants", dest="n_restaurants", type=int)
    g.add_argument("--splits", help="train,valid,test proportions, e.g. 80,10,10")

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--split", default=None)
    e.add_argument("--dump", help="write per-example predictions with provenance (JSON lines)")
    e.add_argument("--report", help="report path (default OUT/report_SPLIT.json)")
    e.add_argument("--oracle", action="store_true", default=None,
                   help="score gold responses against themselves")

    s = sub.add_parser("sweep-theta", help="average retrieved answers and metric per theta")
    _common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--split", default=None)
    s.add_argument("--thetas", default=None, help="comma-separated list (default 0.3,0.4,0.5,0.6,1.0)")
    s.add_argument("--table", help="output path (default OUT/theta_sweep.json)")

    c = sub.add_parser("chat", help="interactive session with a trained model")
    _common(c)
    c.add_argument("--checkpoint")
    return parser


def run(argv: Sequence[str] | None = None, stdin: TextIO = sys.stdin, out: TextIO = sys.stdout) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, out=out)
        elif args.command == "train":
            cmd_train(cfg, out=out)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.split or "test", args.dump, args.report,
                     bool(args.oracle), args=args, out=out)
        elif args.command == "sweep-theta":
            try:
                thetas = [float(x) for x in (args.thetas or "0.3,0.4,0.5,0.6,1.0").split(",")]
            except ValueError:
                raise UsageError(f"bad --thetas {args.thetas!r}")
            cmd_sweep_theta(cfg, thetas, args.checkpoint, args.split or "test", args.table, args=args, out=out)
        elif args.command == "chat":
            return cmd_chat(cfg, args.checkpoint, stdin=stdin, out=out, args=args)
    except (UsageError, ConfigurationError) as exc:
        print(f"thpn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"thpn: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, ParseError, OSError) as exc:
        print(f"thpn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
