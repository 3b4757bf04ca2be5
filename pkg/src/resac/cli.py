"""``resac`` command line: simulate, train, evaluate, verify, rareness.

Exit codes: 0 success, 1 usage or input error, 2 verification violation,
3 numerical halt during training.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .sim import CorridorSim, SCENARIOS, load_corridor, write_trajectory_csv
from .trainer import (
    Trainer,
    TrainerConfig,
    content_hash,
    episode_seed,
    load_agent,
    smoke_trainer_config,
    substream,
    write_metrics_csv,
)
from .verify import SUITES, run_suite

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION, EXIT_HALT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, config: dict, seed: int, scenario: dict, artifacts: list[str]) -> Path:
    """Written before the long work starts; never rewritten by the same run."""
    path = out / "manifest.json"
    _write_json(path, {
        "command": command,
        "config": config,
        "seed": seed,
        "started": _now(),
        "scenario_hash": content_hash(scenario),
        "artifacts": artifacts,
    })
    return path


def _corridor(spec):
    try:
        return load_corridor(spec)
    except FileNotFoundError as exc:
        raise UsageError(f"cannot read corridor config {spec}: {exc}") from exc
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid corridor config {spec}: {exc}") from exc


# --- simulate -------------------------------------------------------------------------------


def _policy(name: str, corridor, seed: int, rollout: int):
    if name == "zero_hold":
        return lambda obs: 0.0
    if name == "random":
        rng = substream(seed, "random-policy", rollout)
        return lambda obs: float(rng.uniform(0.0, corridor.h_max))
    try:
        agent, _ = load_agent(name, corridor)
    except FileNotFoundError as exc:
        raise UsageError(f"cannot read checkpoint {name}: {exc}") from exc
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"unusable checkpoint {name}: {exc}") from exc
    return lambda obs: agent.act(obs, corridor.tau, corridor.h_max, None)[1]


def cmd_simulate(args) -> int:
    corridor = _corridor(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.rollouts
    names = ["trajectory.csv"] if n == 1 else [f"trajectory_{i:03d}.csv" for i in range(n)]
    write_manifest(out, "simulate", {"corridor": corridor.to_json(), "policy": args.policy, "rollouts": n},
                   args.seed, corridor.to_json(), names + ["summary.json"])
    runs = []
    for i, name in enumerate(names):
        policy = _policy(args.policy, corridor, args.seed, i)
        sim = CorridorSim(corridor)
        req = sim.reset(args.seed if n == 1 else episode_seed(args.seed, i))
        while not req.episode_done:
            req = sim.step(policy(req.observation))
        write_trajectory_csv(out / name, sim.trajectory_rows())
        runs.append({
            "trajectory": name, "total_reward": sim.total_reward(), "fleet_size": sim.fleet_size,
            "clamped_actions": sim.clamped_actions, "decisions": len(sim.decisions),
            "ledger_balanced": sim.ledger_balanced(), "overtaking_violations": sim.overtaking_violations,
        })
    rewards = np.array([r["total_reward"] for r in runs])
    summary = {
        "policy": args.policy, "rollouts": runs, "mean_total_reward": float(rewards.mean()),
        "std_total_reward": float(rewards.std(ddof=1)) if n > 1 else 0.0,
        "max_fleet_size": max(r["fleet_size"] for r in runs),
        "clamped_actions": int(sum(r["clamped_actions"] for r in runs)),
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "rollouts"}, sort_keys=True))
    return EXIT_OK


# --- train ----------------------------------------------------------------------------------


def _trainer_config(args) -> TrainerConfig:
    try:
        if args.config:
            cfg = TrainerConfig.load(args.config)
        elif args.smoke:
            cfg = smoke_trainer_config()
        else:
            cfg = TrainerConfig()
        overrides = {}
        if args.mode:
            overrides["mode"] = args.mode
        if args.episodes is not None:
            overrides["episodes"] = args.episodes
        if args.K is not None:
            overrides["K"] = args.K
        return TrainerConfig.from_json({**cfg.to_json(), **overrides})
    except FileNotFoundError as exc:
        raise UsageError(f"cannot read trainer config {args.config}: {exc}") from exc
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid trainer config: {exc}") from exc


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        try:
            trainer = Trainer.from_checkpoint(args.resume)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot resume from {args.resume}: {exc}") from exc
        total = args.episodes if args.episodes is not None else trainer.cfg.episodes
    else:
        cfg = _trainer_config(args)
        corridor = _corridor(args.corridor or ("smoke" if args.smoke else None))
        trainer = Trainer(cfg, corridor, args.seed)
        total = cfg.episodes
    manifest = out / "manifest.json"
    if not manifest.exists():
        write_manifest(out, "train", {"trainer": trainer.base_cfg.to_json(), "corridor": trainer.corridor.to_json()},
                       trainer.seed, trainer.corridor.to_json(), ["metrics.csv", "checkpoint_*.json"])

    def progress(m):
        if not args.quiet:
            print(f"episode {m.episode:4d} reward {m.cum_reward:12.3f} q_mean {m.q_mean:10.3f} alpha {m.alpha:.4f}", flush=True)

    result = trainer.train(episodes=total, out_dir=out, progress=progress)
    write_metrics_csv(out / "metrics.csv", trainer.metrics)
    if result.halted:
        print(f"numerical halt: {result.halt_reason}", file=sys.stderr)
        return EXIT_HALT
    return EXIT_OK


# --- evaluate -------------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    try:
        agent, doc = load_agent(args.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"unusable checkpoint {args.checkpoint}: {exc}") from exc
    from .sim import CorridorConfig

    corridor = _corridor(args.config) if args.config else CorridorConfig.from_json(doc["corridor"])
    if tuple(corridor.cardinalities) != agent.cardinalities:
        raise UsageError(
            f"shape mismatch: checkpoint categorical cardinalities {agent.cardinalities} "
            f"vs corridor {tuple(corridor.cardinalities)}"
        )
    if args.trainer_config:
        want = _trainer_config(argparse.Namespace(config=args.trainer_config, smoke=False, mode=None, episodes=None, K=None)).resolved()
        if want.K != agent.K or tuple(want.hidden) != tuple(agent.cfg.hidden):
            raise UsageError(
                f"shape mismatch: checkpoint K={agent.K} hidden={list(agent.cfg.hidden)} "
                f"vs config K={want.K} hidden={list(want.hidden)}"
            )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = ["predictions.csv", "records.csv", "rareness_model.json", "summary.json", "learning_curve.csv"]
    write_manifest(out, "evaluate", {"checkpoint": str(args.checkpoint), "rollouts": args.rollouts,
                                     "per_head": not args.whole_ensemble, "corridor": corridor.to_json()},
                   args.seed, corridor.to_json(), files)
    gamma = agent.cfg.gamma
    data = ev.score_rollouts(agent, corridor, args.seed, args.rollouts, gamma)
    if args.fit_trajectory:
        fit_rows = [r for p in args.fit_trajectory for r in ev.read_trajectory_csv(p)]
    else:
        fit_rows = ev.score_rollouts(agent, corridor, args.seed, max(args.rollouts, 1), gamma, stochastic=True, tag="fit").rows
    model = ev.fit_rareness(fit_rows)
    records, aligned = ev.build_records(data, model, per_head=not args.whole_ensemble)
    ev.write_predictions(out / "predictions.csv", data)
    ev.write_records(out / "records.csv", records, data.K)
    ev.dump_json(out / "rareness_model.json", model.to_json())
    q_mc = np.array([r["q_mc"] for r in records])
    summ = ev.summary(aligned, q_mc)
    summ.update({"decisions": len(data.rows), "K": data.K, "rollouts": args.rollouts})
    ev.dump_json(out / "summary.json", summ)
    from .trainer import EpisodeMetrics

    write_metrics_csv(out / "learning_curve.csv", [EpisodeMetrics(**m) for m in doc.get("metrics", [])])
    print(json.dumps(summ, sort_keys=True))
    return EXIT_OK


# --- rareness -------------------------------------------------------------------------------


def parse_bins(spec: str, rareness: np.ndarray) -> np.ndarray:
    """'deciles', an integer count of quantile bins, or comma-separated explicit edges."""
    if spec == "deciles":
        return ev.decile_edges(rareness)
    if "," in spec:
        return np.array([float(x) for x in spec.split(",")])
    try:
        n = int(spec)
    except ValueError as exc:
        raise UsageError(f"--bins: expected 'deciles', a count or comma-separated edges, got {spec!r}") from exc
    if n < 1:
        raise UsageError("--bins: count must be >= 1")
    edges = np.unique(np.quantile(rareness, np.linspace(0.0, 1.0, n + 1)))
    if edges.size < 2:  # every record has the same rareness
        edges = np.array([edges[0], edges[0] + 1.0])
    return edges


def cmd_rareness(args) -> int:
    try:
        heads, q_mc, rareness = ev.read_records(args.records)
    except FileNotFoundError as exc:
        raise UsageError(f"cannot read records {args.records}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    edges = parse_bins(args.bins, rareness)
    try:
        rows = ev.oracle_mae_by_bin(heads, q_mc, rareness, edges)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_bins(out, rows)
    for r in rows:
        print(f"[{r.bin_lo:.4g}, {r.bin_hi:.4g}]  n={r.count:6d}  mean_mae={r.mean_mae:.6g}  oracle_mae={r.oracle_mae:.6g}")
    return EXIT_OK


# --- verify ---------------------------------------------------------------------------------


def cmd_verify(args) -> int:
    report = run_suite(args.suite, args.trials, args.seed)
    text = json.dumps(report, indent=1, sort_keys=True, default=str)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"verify_{args.suite}.json").write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_VIOLATION


# --- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="resac", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    scen = f"corridor JSON path or built-in scenario ({', '.join(SCENARIOS)})"

    s = sub.add_parser("simulate", help="roll out a fixed or trained policy")
    s.add_argument("--config", default="default", help=scen)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--policy", default="zero_hold", help="zero_hold, random, or a checkpoint path")
    s.add_argument("--rollouts", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train an agent")
    t.add_argument("--config", help="trainer config JSON")
    t.add_argument("--corridor", help=scen)
    t.add_argument("--smoke", action="store_true", help="desk-scale trainer settings on the smoke corridor")
    t.add_argument("--mode", choices=["resac", "sac", "epistemic_only", "aleatoric_only"])
    t.add_argument("--episodes", type=int)
    t.add_argument("--K", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score held-out rollouts with every critic head")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help=f"{scen}; defaults to the checkpoint's corridor")
    e.add_argument("--trainer-config", help="assert the checkpoint matches this trainer config")
    e.add_argument("--rollouts", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--fit-trajectory", nargs="*", help="trajectory CSVs to fit the rareness model on")
    e.add_argument("--whole-ensemble", action="store_true", help="one alignment map for all heads")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("--suite", default="all", choices=sorted(SUITES) + ["all"])
    v.add_argument("--trials", type=int)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("rareness", help="bin evaluation records by rareness")
    r.add_argument("--records", required=True)
    r.add_argument("--bins", default="deciles")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rareness)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "rollouts", 1) is not None and getattr(args, "rollouts", 1) < 1:
        parser.error("--rollouts must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"resac: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
