"""Dataset generation, training loop, evaluation and the ablation grid.

Every randomness source is derived from the run seed:

* world ``i`` of the training pool has seed ``seed * 10000 + i`` and the
  held-out (unseen) worlds continue at ``seed * 10000 + 5000 + i``;
* the batch drawn at update ``t`` comes from ``default_rng([seed, 5, t])``,
  so a resumed run draws exactly what an uninterrupted one would;
* stochastic rollout policies use ``default_rng([seed, 9, episode index])``.
"""
import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import simworld
from .agent import ModelConfig, NavigationAgent, rollout, train_step
from .config import RunConfig
from .errors import ConfigurationError, DatasetError, DiagnosticError
from .numkernel import checkpoint
from .semparser import LexiconConfig, load_lexicon
from .simworld import Task, World, dumps_json, evaluate, generate_task, generate_world

log = logging.getLogger("semnav")

DATASET_FORMAT = "semnav-dataset/1"
MODEL_FORMAT = "semnav-model/1"
SPLITS = ("train", "val_seen", "val_unseen")
VAL_SEEN_OFFSET = 100000  # task seeds of val_seen episodes start here


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") or not text else text + "\n")


def prepare_dir(path, force):
    """Create ``path``; refuse a non-empty one unless ``force`` (which clears it)."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigurationError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- dataset

def world_seeds(seed, data):
    base = seed * 10000
    return ([base + i for i in range(data.train_worlds)],
            [base + 5000 + i for i in range(data.unseen_worlds)])


def world_size(world_seed, data):
    return int(np.random.default_rng([world_seed, 3]).integers(data.min_nodes, data.max_nodes + 1))


def build_world(world_seed, cfg, lexicon):
    return generate_world(world_seed, world_size(world_seed, cfg.data), cfg.data.avg_degree,
                          lexicon.category_names, n_views=cfg.model.n_views, d_v=cfg.model.d_v)


def build_tasks(world, seeds, cfg, lexicon):
    return [generate_task(world, s, lexicon, cfg.data.min_hops, cfg.data.max_hops) for s in seeds]


def generate_dataset(cfg, out, force=False):
    """Write worlds, per-split task lists, the lexicon and a manifest under ``out``."""
    out = prepare_dir(out, force)
    lexicon = load_lexicon(cfg.lexicon)
    train_ids, unseen_ids = world_seeds(cfg.seed, cfg.data)
    d = cfg.data
    splits = {name: [] for name in SPLITS}
    for ws in train_ids + unseen_ids:
        world = build_world(ws, cfg, lexicon)
        write_text(out / "worlds" / f"{ws}.json", dumps_json(world.to_json()))
        if ws in unseen_ids:
            splits["val_unseen"] += build_tasks(world, range(d.val_unseen_tasks_per_world), cfg, lexicon)
        else:
            splits["train"] += build_tasks(world, range(d.train_tasks_per_world), cfg, lexicon)
            seen = range(VAL_SEEN_OFFSET, VAL_SEEN_OFFSET + d.val_seen_tasks_per_world)
            splits["val_seen"] += build_tasks(world, seen, cfg, lexicon)
    for name, tasks in splits.items():
        write_text(out / "splits" / f"{name}.jsonl", "\n".join(dumps_json(t.to_json()) for t in tasks))
    write_text(out / "lexicon.json", dumps_json(lexicon.to_json()))
    manifest = {
        "format": DATASET_FORMAT,
        "seed": cfg.seed,
        "n_views": cfg.model.n_views,
        "d_v": cfg.model.d_v,
        "splits": {
            "train": {"worlds": train_ids, "episodes": len(splits["train"])},
            "val_seen": {"worlds": train_ids, "episodes": len(splits["val_seen"])},
            "val_unseen": {"worlds": unseen_ids, "episodes": len(splits["val_unseen"])},
        },
    }
    write_text(out / "manifest.json", dumps_json(manifest))
    write_text(out / "config.json", dumps_json(cfg.to_json()))
    return manifest


@dataclass
class Dataset:
    root: Path
    manifest: dict
    lexicon: LexiconConfig
    worlds: dict  # world seed -> World
    splits: dict  # split name -> list of Task

    def split(self, name):
        if name not in self.splits:
            raise ConfigurationError(f"unknown split {name!r}; valid splits: {', '.join(self.splits)}")
        return self.splits[name]


def load_dataset(root):
    root = Path(root)
    if not (root / "manifest.json").is_file():
        raise DatasetError(f"no dataset at {root} (missing {root / 'manifest.json'})")
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{root / 'manifest.json'} is not a {DATASET_FORMAT} manifest")
    lexicon = LexiconConfig.from_json(json.loads((root / "lexicon.json").read_text()))
    seeds = sorted({s for info in manifest["splits"].values() for s in info["worlds"]})
    worlds = {s: World.from_json(json.loads((root / "worlds" / f"{s}.json").read_text())) for s in seeds}
    splits = {}
    for name in manifest["splits"]:
        path = root / "splits" / f"{name}.jsonl"
        lines = [ln for ln in path.read_text().splitlines() if ln]
        splits[name] = [Task.from_json(json.loads(ln)) for ln in lines]
    return Dataset(root, manifest, lexicon, worlds, splits)


def check_compatible(cfg, data):
    m = data.manifest
    if (m["n_views"], m["d_v"]) != (cfg.model.n_views, cfg.model.d_v):
        raise ConfigurationError(
            f"dataset has {m['n_views']} views of width {m['d_v']}, "
            f"model expects {cfg.model.n_views} views of width {cfg.model.d_v}")


# ---------------------------------------------------------------- checkpoints

def save_model(path, agent, cfg, lexicon, step):
    # the output location is left out so checkpoint bytes do not depend on it
    config = {k: v for k, v in cfg.to_json().items() if k != "out"}
    meta = {"format": MODEL_FORMAT, "step": step, "config": config, "lexicon": lexicon.to_json()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, agent.named_parameters(), meta)


def load_model(path):
    """Return (agent, run config, lexicon, step) from a checkpoint file."""
    arrays, meta = checkpoint.load(path)
    if meta.get("format") != MODEL_FORMAT:
        raise DatasetError(f"{path} is not a {MODEL_FORMAT} checkpoint")
    cfg = RunConfig.from_json(meta["config"])
    lexicon = LexiconConfig.from_json(meta["lexicon"])
    agent = NavigationAgent.build(cfg.model, lexicon, cfg.seed)
    agent.load_state_dict(dict(arrays))
    return agent, cfg, lexicon, meta["step"]


def checkpoint_name(step):
    return f"step_{step:07d}.ckpt"


# ---------------------------------------------------------------- training

def batch_indices(seed, step, n, batch_size):
    rng = np.random.default_rng([seed, 5, step])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def train(cfg, data, out, resume=False, agent=None, on_step=None):
    """Run ``cfg.train.steps`` SGD updates, logging loss and writing checkpoints.

    Files under ``out``: ``loss.tsv`` (step, mean per-step loss),
    ``checkpoints/step_*.ckpt`` every ``checkpoint_every`` updates and at
    the end, and ``model.ckpt`` (the final parameters). With ``resume`` the
    newest checkpoint is loaded and the loss log is truncated to it.
    """
    out = Path(out)
    check_compatible(cfg, data)
    tasks = data.split("train")
    if not tasks:
        raise DatasetError(f"dataset {data.root} has no training episodes")
    t = cfg.train
    start, lines = 0, []
    ckpt_dir = out / "checkpoints"
    if resume:
        found = sorted(ckpt_dir.glob("step_*.ckpt"))
        if not found:
            raise DatasetError(f"nothing to resume in {ckpt_dir}")
        agent, _, _, start = load_model(found[-1])
        lines = (out / "loss.tsv").read_text().splitlines()[1:start + 1]
    elif agent is None:
        agent = NavigationAgent.build(cfg.model, data.lexicon, cfg.seed)
    write_text(out / "config.json", dumps_json(cfg.to_json()))
    if start == 0:
        save_model(ckpt_dir / checkpoint_name(0), agent, cfg, data.lexicon, 0)
    with open(out / "loss.tsv", "w") as fh:
        fh.write("step\tloss\n")
        for line in lines:
            fh.write(line + "\n")
        for step in range(start, t.steps):
            batch = [tasks[i] for i in batch_indices(cfg.seed, step, len(tasks), t.batch_size)]
            loss = train_step(agent, batch, data.worlds, data.lexicon, lr=t.lr, clip=t.clip)
            if not np.isfinite(loss):
                raise DiagnosticError(f"non-finite loss {loss} at step {step + 1}")
            fh.write(f"{step + 1}\t{loss!r}\n")
            fh.flush()
            if on_step is not None:
                on_step(step + 1, loss)
            if (step + 1) % t.checkpoint_every == 0 or step + 1 == t.steps:
                save_model(ckpt_dir / checkpoint_name(step + 1), agent, cfg, data.lexicon, step + 1)
    shutil.copyfile(ckpt_dir / checkpoint_name(max(t.steps, start)), out / "model.ckpt")
    return agent


def read_loss_log(path):
    rows = Path(path).read_text().splitlines()[1:]
    return [(int(a), float(b)) for a, b in (r.split("\t") for r in rows)]


# ---------------------------------------------------------------- evaluation

def run_episodes(agent, data, tasks, indices, policy, seed, max_steps=None):
    out = []
    for i in indices:
        task = tasks[i]
        rng = np.random.default_rng([seed, 9, i]) if policy in ("sample", "random") else None
        out.append(rollout(agent, data.worlds[task.world_seed], task, data.lexicon,
                           policy=policy, max_steps=max_steps, rng=rng))
    return out


_worker = {}


def _worker_init(ckpt_path, data_root):
    _worker["agent"] = load_model(ckpt_path)[0]
    _worker["data"] = load_dataset(data_root)


def _worker_run(args):
    split, indices, policy, seed = args
    data = _worker["data"]
    eps = run_episodes(_worker["agent"], data, data.split(split), indices, policy, seed)
    return [(i, ep) for i, ep in zip(indices, eps)]


def check_episode_invariants(episodes, threshold):
    for ep in episodes:
        m = simworld.episode_metrics(ep, threshold)
        if m["SPL"] > m["SR"] or m["OSR"] < m["SR"] or (m["NE"] <= threshold) != bool(m["SR"]):
            raise DiagnosticError(f"metric invariant violated for episode {ep.world_seed}/{ep.task_seed}: {m}")


def evaluate_split(agent, cfg, data, split, policy=None, limit=None, workers=1, ckpt_path=None):
    """Roll out ``split`` and return (metrics, episodes) in canonical task order."""
    policy = policy or cfg.eval.policy
    limit = cfg.eval.limit if limit is None else limit
    tasks = data.split(split)
    n = len(tasks) if not limit else min(limit, len(tasks))
    if n == 0:
        raise DatasetError(f"split {split!r} of {data.root} is empty")
    indices = list(range(n))
    if workers > 1 and ckpt_path is not None:
        chunks = [indices[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(workers, initializer=_worker_init,
                                 initargs=(str(ckpt_path), str(data.root))) as pool:
            results = [r for part in pool.map(_worker_run, [(split, c, policy, cfg.seed) for c in chunks])
                       for r in part]
        episodes = [ep for _, ep in sorted(results, key=lambda r: r[0])]
    else:
        episodes = run_episodes(agent, data, tasks, indices, policy, cfg.seed)
    check_episode_invariants(episodes, cfg.eval.threshold)
    return evaluate(episodes, cfg.eval.threshold), episodes


def write_eval(out, split, policy, step, metrics, episodes):
    out = Path(out)
    report = {"split": split, "policy": policy, "checkpoint_step": step, "metrics": metrics}
    write_text(out / "metrics.json", dumps_json(report))
    write_text(out / "traces.jsonl", "\n".join(dumps_json(ep.to_json()) for ep in episodes))
    write_text(out / "metrics.tsv", format_metrics(metrics))


def format_metrics(metrics):
    rows = ["metric\tvalue"]
    for name in simworld.METRIC_NAMES + ("episodes",):
        v = metrics.get(name)
        rows.append(f"{name}\t{'n/a' if v is None else repr(v)}")
    return "\n".join(rows)


# ---------------------------------------------------------------- ablation

MODULE_ROWS = (
    ("full", {}),
    ("w/o ASV", {"no_asv_objects": True}),
    ("w/o IGL", {"no_igl": True}),
    ("w/o ASV+IGL", {"no_asv_objects": True, "no_igl": True}),
)
MEMORY_ROWS = (
    ("w/o GAA", {"mean_instead_of_gaa": True}),
    ("w/o RMF", {"no_rmf": True}),
    ("w/o global", {"rmf_drop": "global"}),
    ("w/o local", {"rmf_drop": "local"}),
    ("w/o text", {"rmf_drop": "text"}),
    ("full", {}),
)
ROW_SETS = {"modules": MODULE_ROWS, "memory": MEMORY_ROWS}
CELL_NAMES = tuple(dict.fromkeys(name for rows in ROW_SETS.values() for name, _ in rows))


def ablation_grid(names=None, m_values=(1, 2, 3, 4)):
    """List of (table, row name, model overrides); ``names`` filters rows."""
    if names is not None:
        bad = set(names) - set(CELL_NAMES)
        if bad:
            raise ConfigurationError(f"unknown ablation rows {sorted(bad)}; valid: {', '.join(CELL_NAMES)}")
    grid = []
    for table, rows in ROW_SETS.items():
        grid += [(table, name, ov) for name, ov in rows if names is None or name in names]
    grid += [("objects", f"M={m}", {"max_objects": m}) for m in m_values]
    return grid


def run_cell(cfg, data, overrides, split, limit):
    """Train a fresh model with ``overrides`` under the shared seed, then evaluate."""
    model = ModelConfig.from_json({**cfg.model.to_json(), **overrides})
    cell_cfg = RunConfig.from_json({**cfg.to_json(), "model": model.to_json()})
    agent = NavigationAgent.build(model, data.lexicon, cfg.seed)
    tasks = data.split("train")
    losses = []
    for step in range(cfg.train.steps):
        batch = [tasks[i] for i in batch_indices(cfg.seed, step, len(tasks), cfg.train.batch_size)]
        losses.append(train_step(agent, batch, data.worlds, data.lexicon, lr=cfg.train.lr, clip=cfg.train.clip))
    metrics, _ = evaluate_split(agent, cell_cfg, data, split, policy="greedy", limit=limit)
    return {"overrides": overrides, "final_loss": losses[-1] if losses else None, "metrics": metrics}


def run_ablation(cfg, data, names=None, m_values=(1, 2, 3, 4), split="val_seen", limit=None):
    """Train and evaluate every grid cell; identical model configs are trained once."""
    check_compatible(cfg, data)
    limit = cfg.eval.limit if limit is None else limit
    cache, rows = {}, []
    for table, name, overrides in ablation_grid(names, m_values):
        key = dumps_json(ModelConfig.from_json({**cfg.model.to_json(), **overrides}).to_json())
        if key not in cache:
            log.info("ablation cell %s/%s", table, name)
            cache[key] = run_cell(cfg, data, overrides, split, limit)
        rows.append({"table": table, "row": name, **cache[key]})
    full = next((r for r in rows if r["row"] == "full"), None)
    for r in rows:
        r["full_ge"] = None if full is None else bool(full["metrics"]["SR"] >= r["metrics"]["SR"])
    return {"split": split, "steps": cfg.train.steps, "rows": rows}


def format_ablation(report):
    lines = [f"# split={report['split']} steps={report['steps']}",
             "table\trow\tSR\tSPL\tNE\tOSR\tfull>=row"]
    for r in report["rows"]:
        m = r["metrics"]
        flag = "-" if r["full_ge"] is None else ("yes" if r["full_ge"] else "no")
        lines.append(f"{r['table']}\t{r['row']}\t{m['SR']:.4f}\t{m['SPL']:.4f}\t{m['NE']:.4f}\t{m['OSR']:.4f}\t{flag}")
    return "\n".join(lines)
