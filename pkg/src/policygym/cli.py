"""Command-line surface: validate, rollout, verify, score, synthesize, fixture.

Exit codes: 0 success, 1 task failure, 2 usage error, 3 internal error.
With --json exactly one JSON document goes to stdout; diagnostics go to
stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import advantage as adv
from .errors import (
    CompilationExhausted,
    ExplorationDiverged,
    InsufficientTrials,
    MixedPackages,
    PolicygymError,
    PortFailure,
)
from .executor import open_environment, safe_execute_tool
from .packages import TaskPackage, check_snapshot_schema, load_package, save_package
from .rollout import (
    ROLE_AGENT_TOOL,
    Trajectory,
    Turn,
    export_trajectory,
    import_trajectory,
    pass_at_k,
    pass_hat_k,
    run_episode,
)
from .snapshots import Snapshot
from .verify import (
    canonicalize,
    canonicalize_connection,
    dense_reward,
    diff,
    diff_canonical,
    proximity,
)

EXIT_OK = 0
EXIT_TASK = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3


class _Failure(Exception):
    def __init__(self, message: str, code: int = EXIT_TASK):
        super().__init__(message)
        self.code = code


def _load_package_arg(path: str, args) -> TaskPackage:
    if not Path(path).is_dir():
        raise _Failure(f"package directory not found: {path}", EXIT_USAGE)
    pkg = load_package(path)
    overrides = {}
    if getattr(args, "epsilon", None) is not None:
        overrides["epsilon"] = args.epsilon
    if getattr(args, "lambda_err", None) is not None:
        overrides["lambda_err"] = args.lambda_err
    if overrides:
        cfg = dataclasses.replace(pkg.diff_config, **overrides)
        pkg = dataclasses.replace(pkg, diff_config=cfg)
    return pkg


# --- commands -----------------------------------------------------------------

def cmd_validate(args) -> dict:
    pkg = _load_package_arg(args.package, args)
    kinds = {}
    for tool in pkg.env.tool_catalog:
        kinds[tool.kind] = kinds.get(tool.kind, 0) + 1
    report = {
        "package": args.package,
        "name": pkg.name,
        "domain": pkg.domain,
        "tables": len(pkg.env.permissions) + 1,  # plus the escalations log
        "read_write_tables": len(pkg.env.tables("read_write")),
        "read_only_tables": len(pkg.env.tables("read_only")),
        "tools": {"total": len(pkg.env.tool_catalog), **kinds},
        "delta0": pkg.delta0,
        "trivial": pkg.trivial,
        "max_turns": pkg.limits.max_turns,
        "stop_token": pkg.limits.stop_token,
    }
    lines = [
        f"package {pkg.name!r} ({pkg.domain})",
        f"tables: {report['tables']} "
        f"({report['read_write_tables']} read-write, {report['read_only_tables']} read-only)",
        "tools: {total} ({query} query, {insert} insert, {update} update, "
        "{escalation} escalation)".format(**report["tools"]),
        f"delta0: {pkg.delta0}",
    ]
    if pkg.trivial:
        lines.append("warning: trivial task (origin already equals target)")
    report["_lines"] = lines
    return report


def cmd_verify(args) -> dict:
    pkg = _load_package_arg(args.package, args)
    for path in (args.snapshot_a, args.snapshot_b):
        if not Path(path).is_file():
            raise _Failure(f"snapshot not found: {path}", EXIT_USAGE)
    a = Snapshot.from_file(args.snapshot_a)
    b = Snapshot.from_file(args.snapshot_b)
    check_snapshot_schema(pkg, a, args.snapshot_a)
    check_snapshot_schema(pkg, b, args.snapshot_b)
    d = diff(a, b, pkg.diff_config)
    per_table = {
        table: {"added": len(delta.added), "removed": len(delta.removed)}
        for table, delta in sorted(d.per_table.items())
        if delta.added or delta.removed
    }
    report = {
        "total": d.total,
        "r_final": 1 if d.total == 0 else 0,
        "per_table": per_table,
        "_lines": [d.render_text(), f"R_final: {1 if d.total == 0 else 0}"],
    }
    return report


def cmd_rollout(args) -> dict:
    from .ports import SubprocessAgentPort, SubprocessUserPort

    if args.k < 1:
        raise _Failure("--k must be >= 1", EXIT_USAGE)
    pkg = _load_package_arg(args.package, args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    limits = pkg.limits.to_json()

    def one_episode(i: int) -> Trajectory:
        agent = SubprocessAgentPort(args.agent_cmd, timeout=args.port_timeout, limits=limits)
        user = SubprocessUserPort(args.user_cmd, timeout=args.port_timeout, limits=limits)
        try:
            return run_episode(pkg, agent, user, seed=args.seed + i)
        finally:
            agent.close()
            user.close()

    if args.parallel > 1:
        with ThreadPoolExecutor(max_workers=args.parallel) as pool:
            trajectories = list(pool.map(one_episode, range(args.k)))
    else:
        trajectories = [one_episode(i) for i in range(args.k)]

    episodes = []
    port_failed = False
    for i, t in enumerate(trajectories):
        path = out_dir / f"trajectory_{i:03d}.jsonl"
        export_trajectory(t, path)
        if "port failure" in t.note:
            port_failed = True
        episodes.append({
            "episode": i,
            "r_final": t.r_final,
            "final_diff": t.final_diff,
            "termination": t.termination,
            "sum_dense": round(t.sum_dense, 12),
            "export": str(path),
            "note": t.note,
        })
    successes = sum(t.r_final for t in trajectories)
    metrics = {
        "pass_at_k": {str(j): pass_at_k(args.k, successes, j) for j in range(1, args.k + 1)},
        "pass_hat_k": {str(j): pass_hat_k(args.k, successes, j) for j in range(1, args.k + 1)},
    }
    lines = [
        f"episode {e['episode']}: r_final={e['r_final']} "
        f"termination={e['termination']} export={e['export']}"
        for e in episodes
    ]
    for j in range(1, args.k + 1):
        lines.append(
            f"pass@{j}={metrics['pass_at_k'][str(j)]:.4f} "
            f"pass^{j}={metrics['pass_hat_k'][str(j)]:.4f}"
        )
    report = {"episodes": episodes, "successes": successes, "trials": args.k,
              "metrics": metrics, "_lines": lines}
    if port_failed:
        report["_lines"].append("error: one or more episodes hit a port failure")
        report["port_failure"] = True
        report["_exit_code"] = EXIT_TASK
    return report


def _rescore(pkg: TaskPackage, recorded: Trajectory) -> Trajectory:
    """Replay the recorded tool calls from the origin and recompute rewards.

    The recorded per-turn digests must match the replay exactly; any drift
    means the trajectory does not belong to this package state."""
    cfg = pkg.diff_config
    target = canonicalize(pkg.target_snapshot, cfg)
    turns: list[Turn] = []
    with open_environment(pkg) as env:
        current = diff_canonical(canonicalize_connection(env.connection, cfg), target).total
        p_prev = proximity(current, pkg.delta0, cfg.epsilon)
        for turn in recorded.turns:
            if turn.role != ROLE_AGENT_TOOL:
                turns.append(turn)
                continue
            result = safe_execute_tool(env, turn.content)
            if result.state_digest != turn.state_digest:
                raise _Failure(
                    f"replay digest mismatch at turn {turn.index}; "
                    "trajectory does not replay against this package"
                )
            current = diff_canonical(
                canonicalize_connection(env.connection, cfg), target
            ).total
            p_t = proximity(current, pkg.delta0, cfg.epsilon)
            reward = dense_reward(p_t, p_prev, result.status == "error", cfg.lambda_err)
            turns.append(dataclasses.replace(turn, proximity=p_t, reward=reward))
            p_prev = p_t
        final_diff = diff_canonical(canonicalize_connection(env.connection, cfg), target).total
    sum_dense = sum(t.reward for t in turns if t.role == ROLE_AGENT_TOOL)
    return dataclasses.replace(
        recorded, turns=tuple(turns), final_diff=final_diff,
        r_final=1 if final_diff == 0 else 0, sum_dense=sum_dense,
    )


def cmd_score(args) -> dict:
    pkg = _load_package_arg(args.package, args)
    paths = [args.trajectory] + list(args.group)
    for path in paths:
        if not Path(path).is_file():
            raise _Failure(f"trajectory not found: {path}", EXIT_USAGE)
    recorded = [import_trajectory(p) for p in paths]
    for path, t in zip(paths, recorded):
        if t.package_id != pkg.name:
            raise MixedPackages(f"{path} belongs to package {t.package_id!r}, not {pkg.name!r}")
    rescored = [_rescore(pkg, t) for t in recorded]
    table = adv.build_advantage_table(rescored)
    if args.out:
        adv.export_advantage_table(table, args.out)
    rows = [
        {"trajectory_id": r.trajectory_id, "turn_index": r.turn_index,
         "A_i": r.a_i, "r_t": r.r_t, "A_it": r.a_it}
        for r in table.turn_advantages
    ]
    report = {
        "group_id": table.group_id,
        "r_final": [t.r_final for t in rescored],
        "sum_dense": [round(t.sum_dense, 12) for t in rescored],
        "trajectory_advantages": list(table.trajectory_advantages),
        "turn_advantages": rows,
        "export": args.out or "",
    }
    report["_lines"] = [
        f"group {table.group_id}: A = {list(table.trajectory_advantages)}",
    ] + [
        f"  {r['trajectory_id']} turn {r['turn_index']}: "
        f"A_i={r['A_i']:+.4f} r_t={r['r_t']:+.4f} A_it={r['A_it']:+.4f}"
        for r in rows
    ]
    return report


def cmd_synthesize(args) -> dict:
    from .fixtures import corporate_travel
    from .synthesis import StubGenerationPort, synthesize_package

    seed_path = Path(args.seed_domain)
    if not seed_path.is_file():
        raise _Failure(f"seed domain file not found: {seed_path}", EXIT_USAGE)
    seed_domain = seed_path.read_text("utf-8")

    if args.port == "stub":
        port = StubGenerationPort(corporate_travel.canned_generation_outputs())
        name = corporate_travel.FIXTURE_NAME
        domain = corporate_travel.FIXTURE_DOMAIN
    else:
        from .ports import SubprocessGenerationPort

        try:
            port = SubprocessGenerationPort(args.port, timeout=args.port_timeout)
        except PortFailure as exc:
            raise _Failure(str(exc), EXIT_USAGE) from exc
        name = seed_path.stem
        domain = ""

    try:
        pkg, log = synthesize_package(
            seed_domain, port, max_attempts=args.max_attempts,
            name=name, domain=domain, seed=args.seed,
        )
    except CompilationExhausted as exc:
        raise _Failure(f"architect stage failed: {exc}", EXIT_TASK) from exc
    except ExplorationDiverged as exc:
        raise _Failure(f"explorer stage failed: {exc}", EXIT_TASK) from exc
    finally:
        if hasattr(port, "close"):
            port.close()

    out_dir = Path(args.out_dir)
    save_package(pkg, out_dir)
    (out_dir / "synthesis_log.json").write_text(
        json.dumps(log, indent=2, sort_keys=True) + "\n", "utf-8"
    )
    report = {
        "package": str(out_dir),
        "name": pkg.name,
        "delta0": pkg.delta0,
        "adjacency_score": log["adjacency_score"],
        "stages": log["stages"],
        "actions": len(log["actions"]),
        "_lines": [
            f"package written to {out_dir}",
            f"delta0={pkg.delta0} adjacency_score={log['adjacency_score']:.3f} "
            f"actions={len(log['actions'])}",
        ],
    }
    return report


def cmd_fixture(args) -> dict:
    from .fixtures import corporate_travel

    pkg = corporate_travel.build(args.out_dir)
    return {
        "package": str(args.out_dir),
        "name": pkg.name,
        "delta0": pkg.delta0,
        "_lines": [f"fixture package written to {args.out_dir} (delta0={pkg.delta0})"],
    }


# --- wiring --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="policygym",
        description="runtime, verifier and synthesis toolkit for policy-governed "
                    "stateful tool-calling environments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--json", action="store_true", help="emit one JSON document on stdout")
        p.add_argument("--epsilon", type=float, default=None, help="override diff epsilon")
        p.add_argument("--lambda-err", dest="lambda_err", type=float, default=None,
                       help="override the violation penalty")

    p = sub.add_parser("validate", help="load and validate a package")
    p.add_argument("package")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("verify", help="diff two snapshots under a package's config")
    p.add_argument("snapshot_a")
    p.add_argument("snapshot_b")
    p.add_argument("package")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("rollout", help="run k episodes with subprocess ports")
    p.add_argument("package")
    p.add_argument("--agent-cmd", required=True, help="agent port command line")
    p.add_argument("--user-cmd", required=True, help="user port command line")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=1, help="number of episodes")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out-dir", default="rollouts", help="trajectory export directory")
    p.add_argument("--port-timeout", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("score", help="re-score trajectories and export advantages")
    p.add_argument("trajectory")
    p.add_argument("package")
    p.add_argument("group", nargs="*", help="additional trajectories in the same group")
    p.add_argument("--out", default="", help="advantage table export path")
    common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("synthesize", help="run the synthesis pipeline end to end")
    p.add_argument("seed_domain", help="file holding the seed domain text")
    p.add_argument("port", help="'stub' or a generation-port command line")
    p.add_argument("out_dir")
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--port-timeout", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("fixture", help="materialize the bundled corporate travel package")
    p.add_argument("out_dir")
    common(p)
    p.set_defaults(func=cmd_fixture)

    return parser


def _emit(report: dict, as_json: bool) -> None:
    if as_json:
        clean = {k: v for k, v in report.items() if not k.startswith("_")}
        print(json.dumps(clean, sort_keys=True))
    else:
        for line in report.get("_lines", []):
            print(line)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage to stderr
        return EXIT_USAGE if exc.code not in (0, None) else 0
    if getattr(args, "port_timeout", None) is None and hasattr(args, "port_timeout"):
        from .ports import DEFAULT_PORT_TIMEOUT

        args.port_timeout = DEFAULT_PORT_TIMEOUT
    try:
        report = args.func(args)
    except _Failure as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.json:
            print(json.dumps({"error": str(exc)}))
        return exc.code
    except (MixedPackages, InsufficientTrials) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.json:
            print(json.dumps({"error": str(exc)}))
        return EXIT_USAGE
    except PolicygymError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.json:
            print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}))
        return EXIT_TASK
    except Exception as exc:  # noqa: BLE001
        traceback.print_exc()
        if args.json:
            print(json.dumps({"error": f"internal: {exc}"}))
        return EXIT_INTERNAL
    _emit(report, args.json)
    return report.pop("_exit_code", EXIT_OK)


if __name__ == "__main__":
    raise SystemExit(main())
