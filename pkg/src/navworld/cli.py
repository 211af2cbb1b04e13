"""Command-line entry point: generate, verify, episodes, rollout, evaluate, coevolve, serve, report.

Exit codes: 0 ok, 2 schema error (malformed input files or flags), 3 domain
error (valid input that the domain rejects), 4 experiment error (a run or a
remote component failed).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .agents import (ExternalPolicy, GreedyPolicy, NullPolicy, OracleBudgetError, OraclePolicy, RuleAgent,
                     RuleError, RuleList)
from .builder import BuildError, InfeasibleError, generate_scene
from .coevolve import ExperimentError, RunConfig, report, run_experiment, stream
from .env import EnvConfig, EnvError, NavEnv, rollout
from .genspec import GenerationSpec, SpecError
from .metrics import TrajectoryRecord, aggregate
from .navgrid import NavError, apply_difficulty, build_grid, load_episodes, sample_episode, save_episodes
from .scene import SceneError, SceneGraph, default_catalog
from .skills import load_registry
from .tool_server import Session, serve
from .verifiers import JudgeUnavailable, ExternalJudge, judge_scene, summarize_scene

log = logging.getLogger("navworld")

EXIT_OK, EXIT_SCHEMA, EXIT_DOMAIN, EXIT_EXPERIMENT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- helpers -----------------------------------------------------------------

def _read_json(path: str | Path) -> object:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_SCHEMA, f"{p}: no such file")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_SCHEMA, f"{p}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _load_scene(path: str | Path) -> SceneGraph:
    d = _read_json(path)
    if not isinstance(d, dict):
        raise CliError(EXIT_SCHEMA, f"{path}: not a scene file: expected a JSON object")
    try:
        return SceneGraph.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SceneError):
            raise
        raise CliError(EXIT_SCHEMA, f"{path}: not a scene file: {exc}") from None


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs: list, outputs: list, seed) -> Path:
    """Exactly one manifest per output directory; rewritten by each command run into it."""
    cfg = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config": json.loads(cfg),
        "config_hash": hashlib.sha256(cfg.encode()).hexdigest(),
        "inputs": [str(p) for p in inputs],
        "outputs": {str(p.name): _sha256_file(p) for p in map(Path, outputs) if p.is_file()},
        "seed": seed,
        "tool_version": f"navworld {__version__}",
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _out_dir(path: str) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _grid_for(scene, catalog, half_extent):
    return build_grid(scene, catalog, half_extent=half_extent)


# -- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    try:
        spec = GenerationSpec.from_json(Path(args.spec).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(EXIT_SCHEMA, f"{args.spec}: no such file") from None
    if args.seed is not None:
        spec = GenerationSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    out = _out_dir(args.out)
    skills = Path(args.skills) if args.skills else out / "skills"
    skills.mkdir(parents=True, exist_ok=True)
    judge = _judge(args.judge)
    scene, trace, verdict = generate_scene(spec, judge=judge, index=load_registry(skills),
                                           out_dir=out if args.screenshots else None)
    scene.save(out / "scene.json")
    with open(out / "trace.jsonl", "w") as fh:
        for row in trace.to_jsonl_rows():
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (out / "verdict.json").write_text(json.dumps(verdict.to_dict(), indent=1, sort_keys=True) + "\n")
    write_manifest(out, "generate", {"spec": spec.to_dict(), "judge": args.judge}, [args.spec],
                   [out / "scene.json", out / "trace.jsonl", out / "verdict.json"], spec.seed)
    print(f"{verdict.status}: {len(scene)} actors -> {out / 'scene.json'}")
    return EXIT_OK


def _judge(spec: str):
    if spec in (None, "rule"):
        return "rule"
    if spec.startswith("tcp:"):
        host, _, port = spec[4:].rpartition(":")
        return ExternalJudge(host or "127.0.0.1", int(port))
    raise CliError(EXIT_SCHEMA, f"--judge must be 'rule' or 'tcp:host:port', got {spec!r}")


def cmd_verify(args) -> int:
    scene = _load_scene(args.scene)
    catalog = default_catalog()
    summary = summarize_scene(scene, catalog)
    verdict = judge_scene(_judge(args.judge), args.request or "", summary)
    out = _out_dir(args.out)
    (out / "verdict.json").write_text(json.dumps({**verdict.to_dict(), "metrics": summary["metrics"]},
                                                 indent=1, sort_keys=True) + "\n")
    write_manifest(out, "verify", {"request": args.request, "judge": args.judge}, [args.scene],
                   [out / "verdict.json"], None)
    print(f"{verdict.status}: " + ", ".join(f"{k}={v:.3f}" for k, v in sorted(summary["metrics"].items())
                                            if isinstance(v, (int, float))))
    return EXIT_OK


def cmd_episodes(args) -> int:
    scene = _load_scene(args.scene)
    catalog = default_catalog()
    out = _out_dir(args.out)
    rng = stream(args.seed, "episodes")
    grid = _grid_for(scene, catalog, args.half_extent)
    scene_ref = str(Path(args.scene))
    if args.level is not None:
        aug = apply_difficulty(scene, grid, args.level, stream(args.seed, "augment"), catalog)
        scene, grid = aug.scene, aug.grid
        scene.save(out / "scene_augmented.json")
        scene_ref = str(out / "scene_augmented.json")
    bounds = tuple(args.bounds) if args.bounds else (300.0, 2000.0)
    episodes, failures = [], []
    for i in range(args.n):
        try:
            episodes.append(sample_episode(grid, scene, args.task, bounds, rng, level_index=args.level,
                                           catalog=catalog, category=args.category, scene_ref=scene_ref,
                                           episode_id=f"ep-{i:04d}"))
        except NavError as exc:
            if not hasattr(exc, "stats"):
                raise
            failures.append({"index": i, "error": str(exc), **exc.stats})
    save_episodes(out / "episodes.jsonl", episodes)
    outputs = [out / "episodes.jsonl"]
    if failures:
        (out / "shortfall.json").write_text(json.dumps({"requested": args.n, "sampled": len(episodes),
                                                        "failures": failures}, indent=1) + "\n")
        outputs.append(out / "shortfall.json")
    write_manifest(out, "episodes", {"task": args.task, "level": args.level, "bounds": bounds, "n": args.n,
                                     "category": args.category, "half_extent": args.half_extent},
                   [args.scene], outputs, args.seed)
    print(f"{len(episodes)}/{args.n} episodes -> {out / 'episodes.jsonl'}")
    if failures:
        print(f"shortfall: {len(failures)} episodes could not be sampled (see shortfall.json)", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


def make_policy(spec: str):
    if spec == "oracle":
        return OraclePolicy()
    if spec == "greedy":
        return GreedyPolicy()
    if spec == "null":
        return NullPolicy()
    if spec.startswith("rules:"):
        path = Path(spec[6:])
        if not path.exists():
            raise CliError(EXIT_DOMAIN, f"rules file {path} does not exist")
        try:
            return RuleAgent(RuleList.load(path))
        except RuleError as exc:
            raise CliError(EXIT_SCHEMA, f"{path}: {exc}") from None
    if spec.startswith("external:"):
        host, _, port = spec[9:].rpartition(":")
        return ExternalPolicy(host or "127.0.0.1", int(port))
    raise CliError(EXIT_SCHEMA, f"unknown policy {spec!r}; use oracle, greedy, null, rules:PATH or external:HOST:PORT")


def cmd_rollout(args) -> int:
    episodes = load_episodes(args.episodes)
    catalog = default_catalog()
    policy = make_policy(args.policy)
    config = EnvConfig(max_steps=args.max_steps)
    out = _out_dir(args.out)
    grids = {}
    n_success = 0
    inputs = [args.episodes]
    with open(out / "trajectories.jsonl", "w") as fh:
        for ep in episodes:
            ref = args.scene or ep.scene_ref
            if not ref:
                raise CliError(EXIT_DOMAIN, f"episode {ep.id} has no scene reference; pass --scene")
            if ref not in grids:
                grids[ref] = _grid_for(_load_scene(ref), catalog, args.half_extent)
                inputs.append(ref)
            env = NavEnv(grids[ref], config)
            try:
                res = rollout(env, policy, ep, seed=args.seed)
            except ConnectionError as exc:
                raise CliError(EXIT_EXPERIMENT, str(exc)) from None
            n_success += res.success
            fh.write(json.dumps({**res.to_dict(), "log_sha256": env.log_digest()}, sort_keys=True) + "\n")
    if isinstance(policy, ExternalPolicy):
        policy.close()
    write_manifest(out, "rollout", {"policy": args.policy, "max_steps": args.max_steps,
                                    "half_extent": args.half_extent}, inputs, [out / "trajectories.jsonl"],
                   args.seed)
    print(f"SR {n_success}/{len(episodes)} -> {out / 'trajectories.jsonl'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    path = Path(args.trajectories)
    if not path.exists():
        raise CliError(EXIT_SCHEMA, f"{path}: no such file")
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            records.append(TrajectoryRecord.from_dict(row.get("record", row)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CliError(EXIT_SCHEMA, f"{path}: line {n}: {exc}") from None
    if not records:
        raise CliError(EXIT_DOMAIN, f"{path}: no trajectories to evaluate")
    rep = aggregate(records, eta=args.eta, delta=args.delta)
    out = _out_dir(args.out)
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(with_episodes=True), indent=1, sort_keys=True) + "\n")
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rep.per_episode[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rep.per_episode)
    write_manifest(out, "evaluate", {"eta": args.eta, "delta": args.delta}, [args.trajectories],
                   [out / "metrics.json", out / "episodes.csv"], None)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rep.to_dict().items()))
    return EXIT_OK


def cmd_coevolve(args) -> int:
    base = _read_json(args.config) if args.config else {}
    if not isinstance(base, dict):
        raise CliError(EXIT_SCHEMA, "run config must be a JSON object")
    overrides = {"condition": args.condition, "seed": args.seed, "epochs": args.epochs,
                 "episodes_per_epoch": args.episodes_per_epoch, "eval_every": args.eval_every,
                 "max_steps": args.max_steps, "agent": args.agent, "heldout_episodes": args.heldout}
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        cfg = RunConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_SCHEMA, f"run config: {exc}") from None
    out = _out_dir(args.out)

    def progress(r):
        ev = f" eval SR {r.eval['SR']:.2f}" if r.eval else ""
        print(f"epoch {r.epoch:2d} level {r.level} SR {r.sr:.2f} rules {r.rules}"
              + (" advanced" if r.advanced else "") + ev, flush=True)

    result = run_experiment(cfg, progress if not args.quiet else None)
    result.save(out)
    names = ["config.json", "epochs.jsonl", "eval.jsonl", "rules_final.json", "memory.json", "curves.csv"]
    write_manifest(out, "coevolve", cfg.to_dict(), [args.config] if args.config else [],
                   [out / n for n in names], cfg.seed)
    final = result.final_eval
    print(f"{cfg.condition}: final level {result.epochs[-1].level}"
          + (f", held-out SR {final['SR']:.3f}" if final else "") + f" ({result.seconds:.0f}s)")
    return EXIT_OK


def cmd_serve(args) -> int:
    catalog = default_catalog()
    scene = _load_scene(args.scene) if args.scene else None

    def factory():
        s = Session(catalog=catalog, out_dir=Path(args.out) if args.out else None)
        if scene is not None:
            s.scene = SceneGraph.from_dict(scene.to_dict())
        return s

    try:
        serve(args.serve, factory)
    except ValueError as exc:
        raise CliError(EXIT_SCHEMA, str(exc)) from None
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_report(args) -> int:
    runs = [Path(r) for r in args.runs]
    for r in runs:
        if not (r / "epochs.jsonl").exists():
            raise CliError(EXIT_DOMAIN, f"{r} is not a completed run directory")
    out = _out_dir(args.out)
    summary = report(runs, out, svg=not args.no_svg)
    (out / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    outputs = sorted(p for p in out.iterdir() if p.name != "manifest.json")
    write_manifest(out, "report", {"svg": not args.no_svg}, runs, outputs, None)
    for row in summary["conditions"]:
        f = row["final"] or {}
        print(f"{row['condition']:12s} SR {f.get('SR', float('nan')):.3f} SPL {f.get('SPL', float('nan')):.3f} "
              f"final level {row['final_level']}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navworld", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"navworld {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build a scene from a generation spec")
    g.add_argument("--spec", required=True, help="generation spec (JSON)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="overrides the seed given in --spec")
    g.add_argument("--skills", help="skill directory (default: OUT/skills)")
    g.add_argument("--judge", default="rule", help="'rule' or tcp:host:port")
    g.add_argument("--screenshots", action="store_true", help="write verification screenshots into OUT")
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("verify", help="run the rule checks and the judge on a scene")
    v.add_argument("--scene", required=True)
    v.add_argument("--request", default="")
    v.add_argument("--judge", default="rule")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("episodes", help="sample navigation episodes on a scene")
    e.add_argument("--scene", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--task", default="PointNav", choices=("PointNav", "ObjectNav"))
    e.add_argument("--level", type=int, choices=range(8), help="difficulty level (adds obstacles)")
    e.add_argument("--bounds", type=float, nargs=2, metavar=("MIN_CM", "MAX_CM"))
    e.add_argument("--category", help="ObjectNav target category")
    e.add_argument("-n", "--n", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--half-extent", type=float, default=None, help="grid half-size in cm (default: ground)")
    e.set_defaults(func=cmd_episodes)

    r = sub.add_parser("rollout", help="roll a policy out on episodes")
    r.add_argument("--episodes", required=True)
    r.add_argument("--policy", default="greedy", help="oracle | greedy | null | rules:PATH | external:HOST:PORT")
    r.add_argument("--scene", help="scene file (default: each episode's scene reference)")
    r.add_argument("--out", required=True)
    r.add_argument("--max-steps", type=int, default=EnvConfig().max_steps)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--half-extent", type=float, default=None)
    r.set_defaults(func=cmd_rollout)

    m = sub.add_parser("evaluate", help="aggregate SR / SPL / SoftSPL / nDTW over trajectories")
    m.add_argument("--trajectories", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--eta", type=float, default=5.0)
    m.add_argument("--delta", type=float, default=None, help="success radius in cm (default: per record)")
    m.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("coevolve", help="run one curriculum condition")
    c.add_argument("--out", required=True)
    c.add_argument("--config", help="run config JSON; flags override its values")
    c.add_argument("--condition", help="CoEvolve | FixedL3 | RandomLevel | NoLearning")
    c.add_argument("--seed", type=int)
    c.add_argument("--epochs", type=int)
    c.add_argument("--episodes-per-epoch", type=int)
    c.add_argument("--eval-every", type=int)
    c.add_argument("--max-steps", type=int)
    c.add_argument("--heldout", type=int, help="held-out episode count")
    c.add_argument("--agent", choices=("rules", "oracle", "greedy", "null"))
    c.add_argument("--quiet", action="store_true")
    c.set_defaults(func=cmd_coevolve)

    s = sub.add_parser("serve", help="run the tool server")
    s.add_argument("--serve", default="stdio", help="stdio or tcp:host:port")
    s.add_argument("--scene", help="preload a scene into every session")
    s.add_argument("--out", help="directory for screenshots")
    s.set_defaults(func=cmd_serve)

    rp = sub.add_parser("report", help="tables and curves from run directories")
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--no-svg", action="store_true")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SpecError, RuleError) as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (SceneError, NavError, EnvError, BuildError, InfeasibleError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ExperimentError, OracleBudgetError, JudgeUnavailable, ConnectionError) as exc:
        print(f"experiment error: {exc}", file=sys.stderr)
        return EXIT_EXPERIMENT


if __name__ == "__main__":
    sys.exit(main())
