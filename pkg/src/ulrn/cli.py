"""``ulrn`` command-line entry point.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime or
numeric failure, 3 file-system problems.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable

from . import checkpoint as ckpt
from .data import BOS, detokenize, load_labeled, load_pairs, make_synthetic_corpora, tokenize
from .errors import ConfigError, ContractError, DatasetError, UlrnError
from .evaluator import DEFAULT_MAX_NEW, HarmClassifier, ModelRow, evaluate, format_table, train_classifier, write_reports
from .model import DEFAULT_LORA_TARGETS, ModelConfig, generate
from .objectives import LossWeights
from .unlearner import RunConfig, run_finetune_lora, run_pretrain, run_unlearn

log = logging.getLogger("ulrn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class IOProblem(Exception):
    pass


def _opt_float(text: str):
    return None if str(text).strip().lower() in ("none", "off", "") else float(text)


def _opt_int(text: str):
    return None if str(text).strip().lower() in ("none", "") else int(text)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(s.strip() for s in str(text).split(",") if s.strip())


@dataclass(frozen=True)
class Option:
    section: str
    key: str
    parse: Callable
    default: object
    help: str
    flag: str | None = None

    @property
    def dest(self) -> str:
        return f"{self.section}__{self.key}"

    @property
    def option_string(self) -> str:
        return self.flag or "--" + self.key.replace("_", "-")


_RC = RunConfig()
_MC = ModelConfig()
_LW = LossWeights()

TRAIN_OPTIONS = [
    Option("run", "iterations", int, _RC.iterations, "optimizer steps"),
    Option("run", "batch_size", int, _RC.batch_size, "records per step"),
    Option("run", "seed", int, _RC.seed, "seed for initialization, batching and sampling"),
    Option("run", "optimizer", str, _RC.optimizer, "plain or adam, for pretrain and finetune"),
    Option("run", "lr", float, _RC.lr, "learning rate for pretrain and finetune"),
    Option("run", "clip_norm", _opt_float, _RC.clip_norm, "global gradient-norm cap, or none"),
    Option("run", "checkpoint_every", int, _RC.checkpoint_every, "steps between periodic checkpoints"),
    Option("run", "log_every", int, _RC.log_every, "steps between loss summaries"),
    Option("run", "data_format", str, _RC.data_format, "jsonl or plain"),
    Option("run", "out_dir", str, None, "output directory (required)"),
    Option("run", "corpus", _list, (), "comma-separated training corpora for pretrain and finetune"),
    Option("run", "forget", str, None, "forget dataset for unlearn"),
    Option("run", "normal", str, None, "normal dataset for unlearn"),
    Option("run", "base_checkpoint", str, None, "base model for finetune"),
    Option("run", "reference_checkpoint", str, None, "model to unlearn from; also the frozen reference"),
    Option("run", "resume", str, None, "resume from this periodic checkpoint"),
    Option("model", "d_model", int, _MC.d_model, "embedding width"),
    Option("model", "n_layers", int, _MC.n_layers, "transformer blocks"),
    Option("model", "n_heads", int, _MC.n_heads, "attention heads"),
    Option("model", "context_len", int, _MC.context_len, "maximum sequence length"),
    Option("weights", "eps1", float, _LW.eps1, "weight of the forget loss"),
    Option("weights", "eps2", float, _LW.eps2, "weight of the random-response loss"),
    Option("weights", "eps3", float, _LW.eps3, "weight of the normal-data KL loss"),
    Option("weights", "lr", float, _LW.lr, "unlearning learning rate", flag="--unlearn-lr"),
    Option("weights", "forget_sign", float, _LW.forget_sign, "-1 for ascent on the forget set, +1 for descent"),
    Option("unlearn", "optimizer", str, _RC.unlearn_optimizer, "plain or adam for unlearning", flag="--unlearn-optimizer"),
    Option("unlearn", "kl_mode", str, _RC.kl_mode, "full or scalar"),
    Option("unlearn", "rdn_k", int, _RC.rdn_k, "random responses per forget prompt"),
    Option("unlearn", "pool_size", _opt_int, _RC.pool_size, "random pool size (default: all normal responses)"),
    Option("unlearn", "divergence_guard", _bool, _RC.divergence_guard, "drop eps1 to 0 once the forget loss saturates"),
    Option("lora", "rank", int, _RC.lora_rank, "adapter rank", flag="--lora-rank"),
    Option("lora", "alpha", float, _RC.lora_alpha, "adapter scale numerator", flag="--lora-alpha"),
    Option("lora", "targets", _list, DEFAULT_LORA_TARGETS, "comma-separated projections, e.g. attn.q,attn.v", flag="--lora-targets"),
]

EVAL_OPTIONS = [
    Option("eval", "n_prompts", int, 100, "prompts per dataset"),
    Option("eval", "max_new", int, DEFAULT_MAX_NEW, "greedy tokens per generation"),
    Option("eval", "forget", str, None, "forget dataset"),
    Option("eval", "normal", str, None, "normal dataset"),
    Option("eval", "classifier", str, None, "classifier file from train-classifier"),
    Option("eval", "out_dir", str, None, "where report.json, report.txt and audit.jsonl go"),
]

ALL_OPTIONS = {(o.section, o.key): o for o in TRAIN_OPTIONS + EVAL_OPTIONS}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_options(p: argparse.ArgumentParser, options) -> None:
    p.add_argument("--config", help="INI file; command-line flags override it")
    for o in options:
        kwargs = {"dest": o.dest, "default": None, "help": f"{o.help} [{o.section}] {o.key} (default: {_show(o.default)})"}
        if o.parse is _bool:
            p.add_argument(o.option_string, action=argparse.BooleanOptionalAction, **kwargs)
        else:
            p.add_argument(o.option_string, metavar=o.key.upper(), **kwargs)


def _show(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(value)
    return "none" if value is None else str(value)


def resolve(args: argparse.Namespace, options) -> dict[tuple[str, str], object]:
    """Merge defaults, the --config file and flags; collect every bad key at once."""
    values = {(o.section, o.key): o.default for o in options}
    problems = []
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise IOProblem(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
        for section in cp.sections():
            for key, raw in cp.items(section):
                opt = ALL_OPTIONS.get((section, key))
                if opt is None:
                    problems.append(f"unknown key [{section}] {key}")
                    continue
                if (section, key) not in values:
                    continue
                try:
                    values[(section, key)] = opt.parse(raw)
                except ValueError as exc:
                    problems.append(f"[{section}] {key}: {exc}")
    for o in options:
        raw = getattr(args, o.dest, None)
        if raw is None:
            continue
        try:
            values[(o.section, o.key)] = o.parse(raw)
        except ValueError as exc:
            problems.append(f"{o.option_string}: {exc}")
    if problems:
        raise ConfigError(problems)
    return values


def write_effective_config(values: dict, out_dir) -> Path:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for (section, key), value in values.items():
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, _show(value))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective-config.ini"
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return path


def build_run_config(values: dict, pipeline: str) -> RunConfig:
    v = {f"{s}.{k}": val for (s, k), val in values.items()}
    problems = []
    try:
        model = ModelConfig(
            d_model=v["model.d_model"], n_layers=v["model.n_layers"], n_heads=v["model.n_heads"],
            context_len=v["model.context_len"], seed=v["run.seed"],
        )
    except ConfigError as exc:
        problems.extend(exc.problems)
        model = ModelConfig()
    try:
        weights = LossWeights(
            eps1=v["weights.eps1"], eps2=v["weights.eps2"], eps3=v["weights.eps3"],
            lr=v["weights.lr"], forget_sign=v["weights.forget_sign"],
        )
    except ConfigError as exc:
        problems.extend(exc.problems)
        weights = LossWeights()
    if not v["run.out_dir"]:
        problems.append("out_dir is required")
    cfg = RunConfig(
        pipeline=pipeline,
        iterations=v["run.iterations"],
        batch_size=v["run.batch_size"],
        weights=weights,
        optimizer=v["run.optimizer"],
        lr=v["run.lr"],
        unlearn_optimizer=v["unlearn.optimizer"],
        clip_norm=v["run.clip_norm"],
        divergence_guard=v["unlearn.divergence_guard"],
        kl_mode=v["unlearn.kl_mode"],
        rdn_k=v["unlearn.rdn_k"],
        pool_size=v["unlearn.pool_size"],
        lora_rank=v["lora.rank"],
        lora_alpha=v["lora.alpha"],
        lora_targets=tuple(v["lora.targets"]),
        checkpoint_every=v["run.checkpoint_every"],
        log_every=v["run.log_every"],
        seed=v["run.seed"],
        model=model,
        data_format=v["run.data_format"],
        corpus=tuple(v["run.corpus"]),
        forget=v["run.forget"],
        normal=v["run.normal"],
        base_checkpoint=v["run.base_checkpoint"],
        reference_checkpoint=v["run.reference_checkpoint"],
        resume=v["run.resume"],
        out_dir=v["run.out_dir"] or "",
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def _require_files(paths: dict[str, str | None]) -> None:
    missing = [f"{label}: {p}" for label, p in paths.items() if p and not Path(p).exists()]
    if missing:
        raise IOProblem("missing input files:\n  " + "\n  ".join(missing))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    corpora = make_synthetic_corpora(args.seed, args.n_forget, args.n_normal, args.n_labeled)
    for path in corpora.write(args.out_dir):
        print(path)
    return EXIT_OK


def _train(args, pipeline: str) -> int:
    values = resolve(args, TRAIN_OPTIONS)
    cfg = build_run_config(values, pipeline)
    inputs = {f"corpus[{i}]": p for i, p in enumerate(cfg.corpus)}
    inputs.update(forget=cfg.forget, normal=cfg.normal, resume=cfg.resume)
    if pipeline == "finetune":
        inputs["base_checkpoint"] = cfg.base_checkpoint
    if pipeline == "unlearn":
        inputs["reference_checkpoint"] = cfg.reference_checkpoint
    _require_files(inputs)
    write_effective_config(values, cfg.out_dir)
    runner = {"pretrain": run_pretrain, "finetune": run_finetune_lora, "unlearn": run_unlearn}[pipeline]
    result = runner(cfg, on_log=print)
    print(f"final checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def cmd_generate(args) -> int:
    _require_files({"checkpoint": args.checkpoint})
    c = ckpt.load(args.checkpoint, requires_grad=False)
    prompt = [BOS] + tokenize(args.prompt)
    g = generate(c.params, prompt, args.max_new, args.mode, args.temperature, args.seed, c.adapters or None)
    text = detokenize(g.continuation)
    if args.json:
        print(json.dumps({
            "prompt": args.prompt,
            "continuation": text,
            "tokens": g.tokens,
            "stopped_on_eos": g.stopped_on_eos,
            "truncated": g.truncated,
            "checkpoint_tag": c.tag,
        }))
    else:
        print(args.prompt + text)
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    _require_files({"labeled": args.labeled})
    clf = train_classifier(load_labeled(args.labeled), args.epochs, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    clf.save(out)
    print(f"held-out accuracy {clf.accuracy:.4f} (train {clf.train_accuracy:.4f}); saved {out}")
    if clf.accuracy < 0.95:
        log.warning("held-out accuracy below 0.95; effectiveness scores will be unreliable")
    return EXIT_OK


def _parse_checkpoint_arg(text: str) -> tuple[str, str]:
    tag, sep, path = text.partition("=")
    if not sep:
        return Path(text).stem, text
    return tag, path


def cmd_evaluate(args) -> int:
    values = resolve(args, EVAL_OPTIONS)
    v = {k: val for (_, k), val in values.items()}
    problems = [f"{k} is required" for k in ("forget", "normal", "out_dir") if not v[k]]
    if not args.checkpoint:
        problems.append("at least one --checkpoint TAG=PATH is required")
    if problems:
        raise ConfigError(problems)
    if not v["classifier"] or not Path(v["classifier"]).exists():
        raise IOProblem(
            f"classifier not found: {v['classifier']}\n"
            "run `ulrn train-classifier --labeled <labeled.jsonl> --out <classifier.npz>` first"
        )
    _require_files({"forget": v["forget"], "normal": v["normal"]})
    rows = []
    for entry in args.checkpoint:
        tag, path = _parse_checkpoint_arg(entry)
        if not Path(path).exists():
            log.warning("checkpoint %s for row %r is missing; row omitted", path, tag)
            continue
        c = ckpt.load(path, requires_grad=False)
        rows.append(ModelRow(tag, c.params, c.adapters))
    if not rows:
        raise IOProblem("none of the checkpoints could be found")
    context = rows[0].params.config.context_len
    forget = load_pairs(v["forget"], "jsonl", context)
    normal = load_pairs(v["normal"], "jsonl", context)
    classifier = HarmClassifier.load(v["classifier"])
    write_effective_config(values, v["out_dir"])
    audit: dict = {}
    reports = evaluate(rows, forget, normal, classifier, v["n_prompts"], v["max_new"], audit)
    write_reports(reports, v["out_dir"], audit)
    print(format_table(reports))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ulrn", description="Gradient-ascent unlearning for a small byte-level transformer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic forget, normal and labeled corpora")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-forget", type=int, default=200)
    p.add_argument("--n-normal", type=int, default=200)
    p.add_argument("--n-labeled", type=int, default=400)
    p.set_defaults(func=cmd_synth)

    for name, helptext in (
        ("pretrain", "train a fresh model on --corpus"),
        ("finetune", "train LoRA adapters on --corpus over a frozen --base-checkpoint"),
        ("unlearn", "run the unlearning loop from --reference-checkpoint"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_options(p, TRAIN_OPTIONS)
        p.set_defaults(func=lambda a, _n=name: _train(a, _n))

    p = sub.add_parser("generate", help="print a continuation of --prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=DEFAULT_MAX_NEW)
    p.add_argument("--mode", choices=("greedy", "temperature"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="emit one JSON record instead of text")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-classifier", help="fit the harm classifier on a labeled JSONL file")
    p.add_argument("--labeled", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="classifier.npz")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("evaluate", help="score checkpoints and write report.json / report.txt")
    p.add_argument("--checkpoint", action="append", default=[], metavar="TAG=PATH",
                   help="model row; repeat in table order (baseline first)")
    _add_options(p, EVAL_OPTIONS)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IOProblem, ckpt.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UlrnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
