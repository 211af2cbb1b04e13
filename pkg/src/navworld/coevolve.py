"""Closed-loop curriculum: epoch loop, mastery gating, baseline conditions and run reporting.

Each epoch generates a batch of navigation episodes at the condition's
difficulty level, rolls the agent out, lets a learning agent update its rule
list and memory after every episode, and finally applies the mastery gate:
the level advances by one when the mean epoch success rate over the most
recent (up to five) epochs reaches the level's threshold.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import tempfile
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .agents import (GreedyPolicy, MemoryStore, NullPolicy, OraclePolicy, RuleAgent, RuleList, env_tags,
                     extract_failures, template_synthesizer, update_rules)
from .builder import generate_scene
from .env import EnvConfig, NavEnv, rollout
from .genspec import ARCHETYPES, GenerationSpec
from .metrics import MetricReport, aggregate
from .navgrid import DIFFICULTY_LEVELS, Episode, NavError, OccupancyGrid, apply_difficulty, build_grid, sample_episode
from .scene import Catalog, SceneGraph, default_catalog
from .skills import load_registry

log = logging.getLogger(__name__)

THRESHOLDS = (0.80, 0.75, 0.70, 0.65, 0.60, 0.55, 0.50, 0.45)
MAX_LEVEL = len(THRESHOLDS) - 1
WINDOW = 5
CONDITIONS = ("CoEvolve", "FixedL3", "RandomLevel", "NoLearning")
CONDITION_ALIASES = {c.lower(): c for c in CONDITIONS} | {"co-evolve": "CoEvolve", "fixed-l3": "FixedL3",
                                                          "random-level": "RandomLevel", "no-learning": "NoLearning"}
AGENTS = ("rules", "oracle", "greedy", "null")
SCENE_COUNTS = {"building": 10, "tree": 14, "vehicle": 6, "street_furniture": 10, "prop": 6, "container": 2}
GENERATION_RETRIES = 5


class ExperimentError(RuntimeError):
    pass


def parse_condition(name: str) -> str:
    key = name.strip()
    if key in CONDITIONS:
        return key
    try:
        return CONDITION_ALIASES[key.lower()]
    except KeyError:
        raise ValueError(f"unknown condition {name!r}; expected one of {CONDITIONS}") from None


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


# -- curriculum --------------------------------------------------------------

@dataclass
class CurriculumState:
    level: int = 0
    window: list[float] = field(default_factory=list)
    thresholds: tuple[float, ...] = THRESHOLDS

    def __post_init__(self):
        if not 0 <= self.level <= MAX_LEVEL:
            raise ValueError("level out of range")
        if len(self.window) > WINDOW:
            raise ValueError("window longer than 5")

    def record(self, sr: float) -> None:
        self.window.append(float(sr))
        del self.window[:-WINDOW]


def maybe_advance(state: CurriculumState) -> tuple[CurriculumState, bool]:
    """Advance one level iff the window mean reaches the current threshold (and the top is not reached).

    The window is cleared on advance so each level must earn at least one fresh epoch.
    """
    if not state.window:
        raise ValueError("cannot gate on an empty window")
    mean = sum(state.window) / len(state.window)
    if state.level < MAX_LEVEL and mean >= state.thresholds[state.level]:
        return CurriculumState(state.level + 1, [], state.thresholds), True
    return CurriculumState(state.level, list(state.window), state.thresholds), False


# -- configuration and reports -----------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    condition: str = "CoEvolve"
    epochs: int = 25
    episodes_per_epoch: int = 20
    eval_every: int = 5
    seed: int = 0
    agent: str = "rules"
    heldout_episodes: int = 100
    train_scenes: int = 5
    heldout_scenes: int = 5
    max_steps: int = 500
    nav_half_extent: float = 3000.0

    def __post_init__(self):
        object.__setattr__(self, "condition", parse_condition(self.condition))
        if self.agent not in AGENTS:
            raise ValueError(f"unknown agent {self.agent!r}; expected one of {AGENTS}")
        for name in ("epochs", "episodes_per_epoch", "eval_every", "train_scenes", "heldout_scenes", "max_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.heldout_episodes < 0 or self.nav_half_extent <= 0:
            raise ValueError("invalid held-out size or navigation extent")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown run config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochReport:
    epoch: int
    level: int | None  # None when levels are drawn per episode
    outcomes: list[dict]
    sr: float
    rolling: float | None
    window: list[float]
    advanced: bool
    rules: int
    eval: dict | None = None
    feedback: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpochReport":
        return cls(**d)


@dataclass
class RunResult:
    config: RunConfig
    epochs: list[EpochReport]
    evals: list[dict]
    rules: RuleList
    memory: MemoryStore
    seconds: float = 0.0

    @property
    def final_eval(self) -> dict | None:
        return self.evals[-1]["metrics"] if self.evals else None

    def save(self, out_dir: str | Path) -> Path:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(json.dumps(self.config.to_dict(), indent=1, sort_keys=True) + "\n")
        with open(d / "epochs.jsonl", "w") as fh:
            for r in self.epochs:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        with open(d / "eval.jsonl", "w") as fh:
            for e in self.evals:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
        self.rules.save(d / "rules_final.json")
        self.memory.save(d / "memory.json")
        (d / "curves.csv").write_text(curves_csv(self.epochs))
        return d


# -- environment pool ----------------------------------------------------------

@dataclass
class Task:
    episode: Episode
    grid: OccupancyGrid
    scene_ref: str
    archetype: str
    density: float


@dataclass
class ScenePool:
    """Generated scenes and their base navigation grids; episodes are sampled on augmented copies."""

    scenes: list[SceneGraph]
    grids: list[OccupancyGrid]
    refs: list[str]
    archetypes: list[str]
    catalog: Catalog

    @classmethod
    def generate(cls, n: int, rng: np.random.Generator, half_extent: float, prefix: str,
                 catalog: Catalog | None = None) -> "ScenePool":
        catalog = catalog or default_catalog()
        scenes, grids, refs, archs = [], [], [], []
        with tempfile.TemporaryDirectory() as tmp:
            index = load_registry(tmp)
            offset = int(rng.integers(len(ARCHETYPES)))
            for i in range(n):
                arch = ARCHETYPES[(offset + i) % len(ARCHETYPES)]
                seed = int(rng.integers(2**31))
                scene, _, verdict = generate_scene(GenerationSpec(arch, SCENE_COUNTS, seed=seed), index=index,
                                                   catalog=catalog)
                scenes.append(scene)
                grids.append(build_grid(scene, catalog, half_extent=half_extent))
                refs.append(f"{prefix}{i}-{arch}-{seed}")
                archs.append(arch)
        return cls(scenes, grids, refs, archs, catalog)

    def sample(self, level: int, rng: np.random.Generator, episode_id: str) -> Task:
        last = None
        for _ in range(GENERATION_RETRIES):
            k = int(rng.integers(len(self.scenes)))
            try:
                aug = apply_difficulty(self.scenes[k], self.grids[k], level, rng, self.catalog)
                ep = sample_episode(aug.grid, level_index=level, rng=rng, scene_ref=self.refs[k],
                                    episode_id=episode_id)
            except NavError as exc:
                last = exc
                continue
            return Task(ep, aug.grid, self.refs[k], self.archetypes[k], aug.level.obstacle_density)
        raise ExperimentError(f"episode generation failed {GENERATION_RETRIES} times at level {level}: {last}")


def heldout_set(pool: ScenePool, n: int, rng: np.random.Generator) -> list[Task]:
    """``n`` episodes stratified uniformly over the eight levels (level = index mod 8)."""
    return [pool.sample(i % len(DIFFICULTY_LEVELS), rng, f"heldout-{i:03d}") for i in range(n)]


# -- agents ------------------------------------------------------------------------

class Learner:
    """Agent plus its learning state; ``learn`` toggles rule synthesis and memory updates."""

    def __init__(self, kind: str = "rules", learn: bool = True,
                 synthesizer: Callable = template_synthesizer, config: EnvConfig = EnvConfig()):
        self.kind = kind
        self.learn = learn and kind == "rules"
        self.synthesizer = synthesizer
        self.rules = RuleList()
        self.memory = MemoryStore()
        self.episodes_seen = 0
        self.success_distance_m = config.success_distance_m

    def policy(self, frozen: bool = False):
        if self.kind == "oracle":
            return OraclePolicy()
        if self.kind == "greedy":
            return GreedyPolicy()
        if self.kind == "null":
            return NullPolicy()
        rules = self.rules.clone() if frozen else self.rules
        return RuleAgent(rules, self.episodes_seen + 1, self.success_distance_m)

    def observe(self, task: Task, result) -> list:
        """Post-episode update: failures, rule synthesis and list maintenance, then memory."""
        self.episodes_seen += 1
        failures = extract_failures(result, task.episode)
        if self.learn:
            tags = env_tags(task.density, task.episode.L_star, task.archetype)
            bundle = self.memory.retrieve(tags, k=3)
            new = self.synthesizer(failures, self.rules, self.episodes_seen, {"memory": bundle})
            self.rules = update_rules(self.rules, new, self.episodes_seen)
            self.memory.update(result.actions, task.episode.id, tags, result.success,
                               [f.category for f in failures], self.episodes_seen)
        return failures


def run_task(task: Task, policy, config: EnvConfig):
    env = NavEnv(task.grid, config)
    return rollout(env, policy, task.episode)


def evaluate(learner: Learner, tasks: list[Task], config: EnvConfig) -> MetricReport:
    """Roll out a frozen copy of the agent (activation stats are not written back)."""
    records = []
    for task in tasks:
        pol = learner.policy(frozen=True)
        records.append(run_task(task, pol, config).record)
    return aggregate(records)


def _epoch_level(condition: str, state: CurriculumState, rng: np.random.Generator) -> int | None:
    if condition == "FixedL3":
        return 3
    if condition == "RandomLevel":
        return None
    return state.level


def run_epoch(epoch: int, state: CurriculumState, learner: Learner, pool: ScenePool, config: RunConfig,
              rng: np.random.Generator, env_config: EnvConfig) -> tuple[EpochReport, CurriculumState]:
    level = _epoch_level(config.condition, state, rng)
    outcomes = []
    for i in range(config.episodes_per_epoch):
        lv = int(rng.integers(len(DIFFICULTY_LEVELS))) if level is None else level
        task = pool.sample(lv, rng, f"e{epoch:02d}-{i:02d}")
        res = run_task(task, learner.policy(), env_config)
        failures = learner.observe(task, res)
        outcomes.append({"episode_id": task.episode.id, "level": lv, "scene": task.scene_ref,
                         "success": bool(res.success), "steps": res.steps, "L_star": task.episode.L_star,
                         "failures": [f.category for f in failures]})
    sr = sum(o["success"] for o in outcomes) / len(outcomes)
    advanced = False
    window: list[float] = []
    rolling = None
    if config.condition in ("CoEvolve", "NoLearning"):
        state = CurriculumState(state.level, list(state.window), state.thresholds)
        state.record(sr)
        window = list(state.window)
        rolling = sum(window) / len(window)
        state, advanced = maybe_advance(state)
    failure_counts: dict[str, int] = {}
    for o in outcomes:
        for c in o["failures"]:
            failure_counts[c] = failure_counts.get(c, 0) + 1
    report = EpochReport(epoch, level, outcomes, sr, rolling,
                         window, advanced, len(learner.rules),
                         feedback={"failures": failure_counts,
                                   "scenes": sorted({o["scene"] for o in outcomes})})
    return report, state


def run_experiment(config: RunConfig, progress: Callable[[EpochReport], None] | None = None,
                   pools: tuple[ScenePool, ScenePool, list[Task]] | None = None) -> RunResult:
    """Full run: scene pools, a fixed held-out set, ``epochs`` epochs and scheduled held-out evaluations."""
    t0 = time.perf_counter()
    env_config = EnvConfig(max_steps=config.max_steps)
    if pools is None:
        pools = build_pools(config)
    train, _, heldout = pools
    learner = Learner(config.agent, learn=config.condition != "NoLearning", config=env_config)
    state = CurriculumState()
    reports, evals = [], []
    for epoch in range(1, config.epochs + 1):
        rng = stream(config.seed, f"epoch-{epoch}")
        report, state = run_epoch(epoch, state, learner, train, config, rng, env_config)
        if epoch % config.eval_every == 0 and heldout:
            metrics = evaluate(learner, heldout, env_config)
            report.eval = metrics.to_dict()
            evals.append({"epoch": epoch, "metrics": metrics.to_dict(), "rules": len(learner.rules)})
        reports.append(report)
        if progress is not None:
            progress(report)
    return RunResult(config, reports, evals, learner.rules, learner.memory, time.perf_counter() - t0)


def build_pools(config: RunConfig) -> tuple[ScenePool, ScenePool, list[Task]]:
    """Training pool, held-out pool and held-out episodes; they depend on the seed only, not the condition."""
    train = ScenePool.generate(config.train_scenes, stream(config.seed, "train-scenes"), config.nav_half_extent,
                               "train")
    held = ScenePool.generate(config.heldout_scenes, stream(config.seed, "heldout-scenes"),
                              config.nav_half_extent, "heldout")
    tasks = heldout_set(held, config.heldout_episodes, stream(config.seed, "heldout-episodes"))
    return train, held, tasks


def run_conditions(base: RunConfig, conditions=CONDITIONS,
                   progress: Callable[[str, EpochReport], None] | None = None) -> dict[str, RunResult]:
    """Run several conditions with shared scene pools and held-out set."""
    pools = build_pools(base)
    out = {}
    for cond in conditions:
        cfg = replace(base, condition=parse_condition(cond))
        cb = (lambda r, c=cfg.condition: progress(c, r)) if progress else None
        out[cfg.condition] = run_experiment(cfg, cb, pools)
    return out


# -- reporting -------------------------------------------------------------------------

CURVE_FIELDS = ("epoch", "level", "sr", "rolling", "advanced", "rules", "eval_SR", "eval_SPL")


def curves_csv(reports: list[EpochReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for r in reports:
        ev = r.eval or {}
        w.writerow([r.epoch, "" if r.level is None else r.level, f"{r.sr:.4f}", "" if r.rolling is None else f"{r.rolling:.4f}",
                    int(r.advanced), r.rules, "" if not ev else f"{ev['SR']:.4f}",
                    "" if not ev else f"{ev['SPL']:.4f}"])
    return buf.getvalue()


def load_run(run_dir: str | Path) -> tuple[RunConfig, list[EpochReport], list[dict]]:
    d = Path(run_dir)
    if not (d / "epochs.jsonl").exists():
        raise FileNotFoundError(f"{d} is not a run directory (no epochs.jsonl)")
    cfg = RunConfig.from_dict(json.loads((d / "config.json").read_text()))
    epochs = [EpochReport.from_dict(json.loads(line)) for line in (d / "epochs.jsonl").read_text().splitlines()
              if line.strip()]
    if not epochs:
        raise ValueError(f"{d} has no epoch reports")
    evals = [json.loads(line) for line in (d / "eval.jsonl").read_text().splitlines() if line.strip()] \
        if (d / "eval.jsonl").exists() else []
    return cfg, epochs, evals


def report(run_dirs: list[str | Path], out_dir: str | Path, svg: bool = True) -> dict:
    """Per-condition epoch curves (CSV, optional SVG) and a final held-out metrics table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not run_dirs:
        raise ValueError("no run directories given")
    runs = {}
    for rd in run_dirs:
        cfg, epochs, evals = load_run(rd)
        runs[cfg.condition if cfg.condition not in runs else f"{cfg.condition}-{Path(rd).name}"] = (epochs, evals)
    table = []
    for name, (epochs, evals) in runs.items():
        (out / f"curves_{name}.csv").write_text(curves_csv(epochs))
        final = evals[-1]["metrics"] if evals else None
        transitions = [r.epoch for r in epochs if r.advanced]
        table.append({"condition": name, "final": final, "final_level": epochs[-1].level,
                      "level_transitions": transitions})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "SR", "SPL", "SoftSPL", "nDTW", "N", "final_level"])
    for row in table:
        f = row["final"] or {}
        w.writerow([row["condition"]] + [f"{f[k]:.4f}" if k in f else "" for k in ("SR", "SPL", "SoftSPL", "nDTW")]
                   + [f.get("N", ""), row["final_level"]])
    (out / "final_metrics.csv").write_text(buf.getvalue())
    if svg:
        _plot(runs, out / "curves.svg")
    return {"conditions": table}


def _plot(runs: dict, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for name, (epochs, evals) in runs.items():
        ep = [r.epoch for r in epochs]
        axes[0].plot(ep, [r.sr for r in epochs], label=name)
        axes[1].step(ep, [r.level for r in epochs], where="post", label=name)
        if evals:
            axes[2].plot([e["epoch"] for e in evals], [e["metrics"]["SR"] for e in evals], marker="o", label=name)
    for ax, title in zip(axes, ("training SR per epoch", "difficulty level", "held-out SR")):
        ax.set_title(title)
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    axes[2].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
