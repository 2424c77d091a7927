"""Command-line surface: corpus generation, training, evaluation, strategy
comparison, inherit/error analysis, and an interactive tracking loop.

Every command accepts --config pointing at a flat JSON document; any field
can be overridden by the command-line flag of the same name. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import metrics
from .corpus import CorpusError, Dialogue, DialogueState, Turn, tokenize_utterance
from .generator import GeneratorConfig, generate_synthetic_corpus
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .tracker import build_noise_plans, track_corpus, track_dialogue
from .training import (
    TrainConfig,
    TrainingError,
    load_corpus_dir,
    train,
    write_history,
)

logger = logging.getLogger("msp_dst.cli")


class ConfigError(ValueError):
    pass


def _setup_logging() -> None:
    level = os.environ.get("MSP_DST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args: argparse.Namespace, parser_defaults: dict) -> dict:
    cfg: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a flat JSON object")
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is None:
            continue
        # flags beat the config file; argparse defaults fill remaining gaps
        if key in parser_defaults and value == parser_defaults[key] and key in cfg:
            continue
        cfg[key] = value
    return cfg


def _require(cfg: dict, key: str) -> object:
    if cfg.get(key) is None:
        raise ConfigError(f"missing required option: {key}")
    return cfg[key]


def _model_config(cfg: dict, strategy: str) -> ModelConfig:
    return ModelConfig(
        strategy=strategy,
        dim=int(cfg.get("dim", 64)),
        blocks=int(cfg.get("blocks", 2)),
        attn_heads=int(cfg.get("attn_heads", 4)),
        max_len=int(cfg.get("max_len", 512)),
        K=int(cfg.get("pool_size", 4)),
        pool_mode=cfg.get("pool_mode", "full"),
        categorical_heads=bool(cfg.get("categorical_heads", True)),
        embedding_seed=int(cfg.get("seed", 0)),
    )


def _train_config(cfg: dict) -> TrainConfig:
    base = TrainConfig.paper_scale() if cfg.get("preset") == "paper" else TrainConfig()
    return TrainConfig(
        alpha=float(cfg.get("alpha", base.alpha)),
        beta=float(cfg.get("beta", base.beta)),
        gamma=float(cfg.get("gamma", base.gamma)),
        lr=float(cfg.get("lr", base.lr)),
        epochs=int(cfg.get("epochs", base.epochs)),
        warmup=float(cfg.get("warmup", base.warmup)),
        patience=int(cfg.get("patience", base.patience)),
        seed=int(cfg.get("seed", 0)),
        batch_size=int(cfg.get("batch_size", base.batch_size)),
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    out = Path(_require(cfg, "out"))
    try:
        gen_cfg = GeneratorConfig(
            n_dialogues=int(cfg.get("n_dialogues", 2000)),
            correction_rate=float(cfg.get("correction_rate", 0.2)),
            indirect_rate=float(cfg.get("indirect_rate", 0.3)),
            distractor_rate=float(cfg.get("distractor_rate", 0.3)),
            dontcare_rate=float(cfg.get("dontcare_rate", 0.08)),
            two_domain_rate=float(cfg.get("two_domain_rate", 0.65)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    paths = generate_synthetic_corpus(gen_cfg, int(cfg.get("seed", 0)), out)
    print(f"wrote corpus to {out} ({', '.join(sorted(p.name for p in paths.values()))})")
    return 0


def cmd_train(cfg: dict) -> int:
    corpus_dir = Path(_require(cfg, "corpus"))
    if not corpus_dir.exists():
        raise ConfigError(f"corpus directory {corpus_dir} does not exist")
    out = Path(_require(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    strategy = cfg.get("strategy", "msp")
    bundle = load_corpus_dir(corpus_dir)
    model, history = train(_train_config(cfg), _model_config(cfg, strategy), bundle)
    ckpt = out / "checkpoint.pt"
    save_checkpoint(model, ckpt)
    write_history(history, out / "history.jsonl")
    print(f"trained {strategy} model -> {ckpt} "
          f"(best dev jga {max(h['dev_jga'] for h in history):.4f})")
    return 0


def _eval_checkpoint(cfg: dict, forced_noise: bool):
    ckpt = Path(_require(cfg, "checkpoint"))
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    corpus_dir = Path(_require(cfg, "corpus"))
    bundle = load_corpus_dir(corpus_dir)
    model = load_checkpoint(ckpt, schema=bundle.schema)
    strategy = cfg.get("strategy")
    split = cfg.get("split", "test")
    dialogues = getattr(bundle, split)
    if not dialogues:
        raise ConfigError(f"split {split!r} is empty")
    noise = None
    if forced_noise:
        noise = build_noise_plans(dialogues, bundle.schema,
                                  seed=int(cfg.get("noise_seed", 0)),
                                  rate=float(cfg.get("noise_rate", 1.0)))
    result = track_corpus(model, dialogues, strategy=strategy, noise=noise)
    return bundle, model, dialogues, result


def cmd_eval(cfg: dict) -> int:
    bundle, model, dialogues, result = _eval_checkpoint(cfg, forced_noise=False)
    preds, golds = metrics.aligned_states(result, dialogues)
    golds_by_id = {d.id: [t.gold_state for t in d.turns] for d in dialogues}
    inherit = metrics.inherit_analysis(result.all_traces(), golds_by_id,
                                       bundle.events, bundle.schema)
    report = metrics.build_report(preds, golds, bundle.schema, inherit)
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report(report, out / "report.json")
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for row in result.all_traces():
            fh.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")
    print(f"jga {report['jga']:.4f} over {report['turns']} turns "
          f"-> {out / 'report.json'}")
    return 0


def cmd_analyze(cfg: dict) -> int:
    forced = bool(cfg.get("forced_noise", False))
    bundle, model, dialogues, result = _eval_checkpoint(cfg, forced_noise=forced)
    preds, golds = metrics.aligned_states(result, dialogues)
    golds_by_id = {d.id: [t.gold_state for t in d.turns] for d in dialogues}
    inherit = metrics.inherit_analysis(result.all_traces(), golds_by_id,
                                       bundle.events, bundle.schema)
    per_slot = metrics.slot_metrics(preds, golds, bundle.schema)
    print(metrics.render_slot_table(per_slot))
    print()
    for key, value in inherit.to_dict().items():
        print(f"{key}: {value}")
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    analysis = {"inherit": inherit.to_dict(), "slots": per_slot,
                "forced_noise": forced}
    metrics.write_report(analysis, out / "analysis.json")
    return 0


def cmd_compare(cfg: dict) -> int:
    corpus_dir = Path(_require(cfg, "corpus"))
    bundle = load_corpus_dir(corpus_dir)
    out = Path(_require(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    strategies = cfg.get("strategies",
                         ["pure_context", "changed_state", "full_state", "msp"])
    seeds = [int(s) for s in cfg.get("seeds", [0, 1, 2])]
    results: dict[str, dict[int, float]] = {s: {} for s in strategies}
    for strategy in strategies:
        for seed in seeds:
            run_dir = out / f"{strategy}-seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            ckpt = run_dir / "checkpoint.pt"
            if ckpt.exists() and cfg.get("reuse_checkpoints", True):
                model = load_checkpoint(ckpt, schema=bundle.schema)
            else:
                run_cfg = dict(cfg)
                run_cfg["seed"] = seed
                model, history = train(_train_config(run_cfg),
                                       _model_config(run_cfg, strategy), bundle)
                save_checkpoint(model, ckpt)
                write_history(history, run_dir / "history.jsonl")
            result = track_corpus(model, bundle.test)
            preds, golds = metrics.aligned_states(result, bundle.test)
            results[strategy][seed] = metrics.joint_goal_accuracy(
                preds, golds, bundle.schema)
    summary = metrics.compare_strategies(results)
    print(metrics.render_comparison(summary))
    metrics.write_report(summary, out / "compare.json")
    return 0


def cmd_repl(cfg: dict) -> int:
    ckpt = Path(_require(cfg, "checkpoint"))
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    model = load_checkpoint(ckpt)
    schema = model.schema
    print(f"tracking with strategy {model.config.strategy}; "
          ":reset clears state, :quit exits")
    turns: list[Turn] = []
    pending_agent: list[str] | None = None
    while True:
        prompt = "agent> " if pending_agent is None else "user> "
        try:
            line = input(prompt)
        except EOFError:
            return 0
        line = line.strip()
        if line == ":quit":
            return 0
        if line == ":reset":
            turns = []
            pending_agent = None
            print("state cleared")
            continue
        if pending_agent is None:
            pending_agent = tokenize_utterance(line)
            continue
        turns.append(Turn(pending_agent, tokenize_utterance(line),
                          DialogueState.empty(schema)))
        pending_agent = None
        dialogue = Dialogue(id="repl", turns=turns)
        states, trace = track_dialogue(model, dialogue)
        state = states[-1]
        rows = [r for r in trace if r.turn == len(turns)]
        print(f"turn {len(turns)} state:")
        printed = False
        for slot in schema.slot_names:
            value = state.values[slot]
            if value == "none":
                continue
            disposition = next(r.disposition for r in rows if r.slot == slot)
            print(f"  {slot} = {value} ({disposition})")
            printed = True
        if not printed:
            print("  (empty)")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msp-dst",
        description="mentioned-slot-pool dialogue state tracker",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--n-dialogues", dest="n_dialogues", type=int, default=None)
    p.add_argument("--correction-rate", dest="correction_rate", type=float, default=None)
    p.add_argument("--indirect-rate", dest="indirect_rate", type=float, default=None)
    p.add_argument("--distractor-rate", dest="distractor_rate", type=float, default=None)

    p = sub.add_parser("train", help="train one strategy on a corpus")
    common(p)
    p.add_argument("--corpus", help="corpus directory from gen-data")
    p.add_argument("--schema", help="unused when --corpus carries schema.json")
    p.add_argument("--strategy", choices=["pure_context", "changed_state",
                                          "full_state", "msp"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    p.add_argument("--pool-mode", dest="pool_mode", choices=["full", "self"],
                   default=None)
    p.add_argument("--dim", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--strategy", default=None)
    p.add_argument("--split", choices=["train", "dev", "test"], default="test")

    p = sub.add_parser("analyze", help="inherit analysis and error distribution")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--split", choices=["train", "dev", "test"], default="test")
    p.add_argument("--forced-noise", dest="forced_noise", action="store_true",
                   default=None)
    p.add_argument("--noise-seed", dest="noise_seed", type=int, default=None)

    p = sub.add_parser("compare", help="train and compare update strategies")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--strategies", nargs="+", default=None)

    p = sub.add_parser("repl", help="interactive turn-by-turn tracking")
    common(p)
    p.add_argument("--checkpoint")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
    "repl": cmd_repl,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default for a in parser._actions}
    try:
        cfg = _load_config(args, defaults)
        return COMMANDS[args.command](cfg)
    except (ConfigError, CorpusError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, RuntimeError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
