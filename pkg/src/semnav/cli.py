"""``semnav`` command line: gen, train, eval, ablate, parse and trace.

Configuration comes from ``--config FILE`` (JSON, the same schema as the
``config.json`` every command writes), then dedicated flags, then generic
``--set section.key=value`` overrides; later sources win. Failures exit
with status 2 after printing ``error: <ErrorClass>: <message>`` on stderr.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as X
from .config import POLICIES, RunConfig, load_config
from .errors import ConfigurationError, SemnavError
from .semparser import load_lexicon, parse, tokenize
from .simworld import dumps_json

# dedicated flag -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "lexicon": "lexicon",
    "out": "out",
    "steps": "train.steps",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "checkpoint_every": "train.checkpoint_every",
    "train_worlds": "data.train_worlds",
    "unseen_worlds": "data.unseen_worlds",
    "tasks_per_world": "data.train_tasks_per_world",
    "n_views": "model.n_views",
    "max_objects": "model.max_objects",
    "threshold": "eval.threshold",
    "policy": "eval.policy",
    "workers": "eval.workers",
    "limit": "eval.limit",
}


def resolve_config(args, base=None):
    cfg = base or (load_config(args.config) if getattr(args, "config", None) else RunConfig())
    overrides = {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return cfg.replace(**overrides) if overrides else cfg


def cmd_gen(args):
    cfg = resolve_config(args)
    manifest = X.generate_dataset(cfg, cfg.out, force=args.force)
    counts = {k: v["episodes"] for k, v in manifest["splits"].items()}
    print(f"dataset written to {cfg.out}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train(args):
    out = Path(args.out) if args.out else None
    if args.resume:
        if out is None or not (out / "config.json").is_file():
            raise ConfigurationError("--resume needs --out pointing at an existing run")
        cfg = resolve_config(args, base=load_config(out / "config.json"))
    else:
        cfg = resolve_config(args)
        X.prepare_dir(cfg.out, args.force)
    data = X.load_dataset(args.data)

    def report(step, loss):
        if step % args.log_every == 0:
            logging.getLogger("semnav").info("step %d loss %.6f", step, loss)

    X.train(cfg, data, cfg.out, resume=args.resume, on_step=report)
    print(f"trained {cfg.train.steps} steps; checkpoint {Path(cfg.out) / 'model.ckpt'}")


def cmd_eval(args):
    agent, ckpt_cfg, _, step = X.load_model(args.checkpoint)
    cfg = resolve_config(args, base=ckpt_cfg)
    data = X.load_dataset(args.data)
    X.check_compatible(cfg, data)
    data.split(args.split)  # fail early on an unknown split
    out = X.prepare_dir(args.out or Path(args.checkpoint).parent / f"eval_{args.split}", args.force)
    metrics, episodes = X.evaluate_split(agent, cfg, data, args.split, workers=cfg.eval.workers,
                                         ckpt_path=args.checkpoint)
    X.write_eval(out, args.split, cfg.eval.policy, step, metrics, episodes)
    print(X.format_metrics(metrics))


def cmd_ablate(args):
    cfg = resolve_config(args)
    data = X.load_dataset(args.data)
    names = None if args.grid is None else [n.strip() for n in args.grid.split(",") if n.strip()]
    m_values = [int(m) for m in args.m_sweep.split(",") if m.strip()] if args.m_sweep else []
    out = X.prepare_dir(cfg.out, args.force)
    X.write_text(out / "config.json", dumps_json(cfg.to_json()))
    report = X.run_ablation(cfg, data, names, m_values, split=args.split)
    X.write_text(out / "ablation.json", dumps_json(report))
    table = X.format_ablation(report)
    X.write_text(out / "ablation.tsv", table)
    print(table)


def cmd_parse(args):
    lexicon = load_lexicon(args.lexicon)
    texts = [args.text] if args.text is not None else Path(args.file).read_text().splitlines()
    for text in texts:
        if text.strip():
            print(dumps_json(parse(tokenize(text), lexicon).to_json(lexicon)))


def cmd_trace(args):
    agent, ckpt_cfg, _, _ = X.load_model(args.checkpoint)
    cfg = resolve_config(args, base=ckpt_cfg)
    data = X.load_dataset(args.data)
    X.check_compatible(cfg, data)
    tasks = data.split(args.split)
    if not 0 <= args.index < len(tasks):
        raise ConfigurationError(f"episode index {args.index} outside split of {len(tasks)} episodes")
    (ep,) = X.run_episodes(agent, data, tasks, [args.index], cfg.eval.policy, cfg.seed)
    text = trace_text(ep)
    if args.output:
        X.write_text(args.output, text)
    else:
        print(text)


def trace_text(ep):
    """One header line then one line per decision, keys in fixed order."""
    head = ep.to_json()
    steps = head.pop("steps")
    lines = [dumps_json({"episode": head})]
    lines += [dumps_json({"step": i, **rec}) for i, rec in enumerate(steps)]
    return "\n".join(lines)


def build_parser():
    p = argparse.ArgumentParser(prog="semnav", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, help="global seed; every random choice derives from it")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="JSON run config; flags override it")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        sp.add_argument("--lexicon", help="lexicon JSON (default: bundled)")
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)

    sp = sub.add_parser("gen", help="generate worlds and task splits")
    common(sp, "dataset directory")
    sp.add_argument("--train-worlds", type=int)
    sp.add_argument("--unseen-worlds", type=int)
    sp.add_argument("--tasks-per-world", type=int)
    sp.add_argument("--n-views", type=int)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="teacher-forced training")
    common(sp, "run directory")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--max-objects", type=int)
    sp.add_argument("--n-views", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    sp.add_argument("--log-every", type=int, default=100)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="roll out a split and report metrics")
    common(sp, "report directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val_seen")
    sp.add_argument("--policy", choices=POLICIES)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--limit", type=int, help="evaluate only the first N episodes")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    common(sp, "report directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val_seen")
    sp.add_argument("--grid", help=f"comma-separated rows out of: {', '.join(X.CELL_NAMES)}")
    sp.add_argument("--m-sweep", default="1,2,3,4", help="object counts for the M sweep ('' to skip)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--limit", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("parse", help="extract direction and landmark spans")
    sp.add_argument("text", nargs="?")
    sp.add_argument("--file", help="one instruction per line")
    sp.add_argument("--lexicon")
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("trace", help="write the decision trace of one episode")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val_seen")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--policy", choices=POLICIES)
    sp.add_argument("--output", help="file to write (default: stdout)")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_trace)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "parse" and (args.text is None) == (args.file is None):
        parser.error("parse needs exactly one of TEXT or --file")
    try:
        args.func(args)
    except SemnavError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
