"""Command-line surface.

Subcommands: run one task, bench a suite directory, replay a memory
stream, run a game-convergence experiment, inspect a trace, and
materialize the bundled suite. Every command is deterministic under
scripted backends: repeated invocations write byte-identical trace and
report files.

Exit codes: 0 success, 1 task failure, 2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from sage import config as configmod
from sage import suite as suitemod
from sage.backend import load_script, make_backend
from sage.gamesim import (
    DegenerateGameError,
    GameState,
    iterate_to_equilibrium,
    load_game,
    nash_solve,
)
from sage.lineio import escape
from sage.memory import (
    MemoryState,
    dumps_state,
    effective_strength,
    make_item,
    retention,
    tick,
    update_memory,
)
from sage.orchestrator import (
    ABLATIONS,
    Backends,
    EpisodeTrace,
    OUTCOMES,
    SUCCESS,
    classify_failure,
    load_task,
    load_trace,
    run_episode,
    save_trace,
)


@dataclass
class SuiteResult:
    outcomes: dict[str, str]  # task id -> outcome
    iterations: dict[str, int] = field(default_factory=dict)

    @property
    def task_count(self) -> int:
        return len(self.outcomes)

    @property
    def success_rate(self) -> float:
        if not self.outcomes:
            return 0.0
        wins = sum(1 for o in self.outcomes.values() if o == SUCCESS)
        return wins / len(self.outcomes)

    @property
    def outcome_histogram(self) -> dict[str, int]:
        hist = {name: 0 for name in OUTCOMES}
        for outcome in self.outcomes.values():
            hist[outcome] += 1
        return hist

    @property
    def mean_iterations(self) -> float:
        if not self.iterations:
            return 0.0
        return sum(self.iterations.values()) / len(self.iterations)


def run_suite_dir(
    suite_dir: str, options: dict[str, str], ablation: str | None = None
) -> tuple[SuiteResult, list[EpisodeTrace]]:
    """Run every *.task in the directory against its sibling *.script."""
    task_files = sorted(
        f for f in os.listdir(suite_dir) if f.endswith(".task")
    )
    if not task_files:
        raise ValueError(f"no .task files in {suite_dir}")
    loop_config = configmod.orchestrator_config(options)
    outcomes: dict[str, str] = {}
    iterations: dict[str, int] = {}
    traces = []
    for name in task_files:
        task = load_task(os.path.join(suite_dir, name))
        script_path = os.path.join(suite_dir, name[: -len(".task")] + ".script")
        if not os.path.exists(script_path):
            raise ValueError(f"missing script for task {task.id}: {script_path}")
        backend = load_script(script_path)
        trace = run_episode(
            task, loop_config, Backends.single(backend), ablation=ablation
        )
        classify_failure(trace)  # integrity check on everything we emit
        outcomes[task.id] = trace.outcome
        iterations[task.id] = trace.iterations_used
        traces.append(trace)
    return SuiteResult(outcomes=outcomes, iterations=iterations), traces


def format_suite_table(result: SuiteResult, ablation: str | None) -> str:
    width = max([len(tid) for tid in result.outcomes] + [4])
    lines = [
        f"suite result ({'full' if ablation is None else ablation})",
        f"{'task'.ljust(width)}  outcome          iters",
        "-" * (width + 25),
    ]
    for tid in sorted(result.outcomes):
        lines.append(
            f"{tid.ljust(width)}  {result.outcomes[tid].ljust(15)}  {result.iterations[tid]}"
        )
    lines.append("-" * (width + 25))
    hist = result.outcome_histogram
    lines.append(
        "counts: " + "  ".join(f"{name}={hist[name]}" for name in OUTCOMES)
    )
    lines.append(f"success_rate: {result.success_rate:.4f}")
    lines.append(f"mean_iterations: {result.mean_iterations:.4f}")
    return "\n".join(lines)


def suite_records(result: SuiteResult, ablation: str | None) -> str:
    """Line-delimited machine records for a bench run."""
    lines = []
    for tid in sorted(result.outcomes):
        lines.append(
            json.dumps(
                {
                    "task": tid,
                    "outcome": result.outcomes[tid],
                    "iterations": result.iterations[tid],
                },
                sort_keys=True,
            )
        )
    lines.append(
        json.dumps(
            {
                "ablation": ablation or "full",
                "histogram": result.outcome_histogram,
                "mean_iterations": result.mean_iterations,
                "success_rate": result.success_rate,
                "tasks": result.task_count,
            },
            sort_keys=True,
        )
    )
    return "\n".join(lines) + "\n"


# -- memsim ---------------------------------------------------------------------


def parse_stream(payload: str) -> tuple[list[tuple[int, str, str]], int]:
    """Stream lines are `step<TAB>id<TAB>text`; `@until N` sets the horizon."""
    events: list[tuple[int, str, str]] = []
    until = 0
    from sage.lineio import unescape

    for lineno, raw in enumerate(payload.splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("@until"):
            until = int(line.split()[1])
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"stream line {lineno}: expected step<TAB>id<TAB>text")
        events.append((int(fields[0]), unescape(fields[1]), unescape(fields[2])))
    events.sort(key=lambda e: e[0])
    horizon = max([until] + [step for step, _, _ in events]) if events or until else 0
    return events, horizon


@dataclass
class MemsimReport:
    final_state: MemoryState
    lifecycle: list[tuple[int, str, str, str]]  # step, id, from, to
    samples: list[tuple[int, str, str, float, float]]  # step, id, loc, R, S


def run_memsim(
    events: list[tuple[int, str, str]], horizon: int, state: MemoryState
) -> MemsimReport:
    """Replay timed insertions through the update rule and decay sweeps."""
    lifecycle: list[tuple[int, str, str, str]] = []
    samples: list[tuple[int, str, str, float, float]] = []

    def locations() -> dict[str, str]:
        out = {}
        for item in state.stm + state.ltm + state.discarded:
            out[item.id] = item.location.value
        return out

    def diff(before: dict[str, str], step: int) -> None:
        after = locations()
        for item_id, loc in after.items():
            old = before.get(item_id, "NEW")
            if old != loc:
                lifecycle.append((step, item_id, old, loc))

    pending = list(events)
    while True:
        now = state.current_step
        before = locations()
        while pending and pending[0][0] == now:
            _, item_id, text = pending.pop(0)
            update_memory(state, make_item(item_id, text, now), tau=0.0)
        diff(before, now)
        for item in state.resident_items():
            tau = now - item.last_access_step
            samples.append(
                (
                    now,
                    item.id,
                    item.location.value,
                    retention(item, tau, now, state.config),
                    effective_strength(item, now, state.config),
                )
            )
        if now >= horizon:
            break
        before = locations()
        tick(state)
        diff(before, state.current_step)
    return MemsimReport(final_state=state, lifecycle=lifecycle, samples=samples)


def format_memsim_report(report: MemsimReport) -> str:
    state = report.final_state
    lines = [f"memsim report (final step {state.current_step})"]
    lines.append(f"STM {len(state.stm)} | LTM {len(state.ltm)} | discarded {len(state.discarded)}")
    lines.append("")
    lines.append("lifecycle:")
    for step, item_id, old, new in report.lifecycle:
        lines.append(f"  step {step}: {item_id} {old} -> {new}")
    lines.append("")
    lines.append("retention samples (step, id, location, retention, strength):")
    for step, item_id, loc, r, s in report.samples:
        lines.append(f"  {step}\t{escape(item_id)}\t{loc}\t{r:.6f}\t{s:.6f}")
    return "\n".join(lines)


# -- command handlers -------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        task = load_task(args.task)
        options = configmod.load_config(args.config)
        loop_config = configmod.orchestrator_config(options)
        if options.get("backend.kind", "scripted") == "scripted" and not options.get(
            "backend.script_path"
        ):
            sibling = os.path.splitext(args.task)[0] + ".script"
            if os.path.exists(sibling):
                options["backend.script_path"] = sibling
        backend = make_backend(options)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    trace = run_episode(
        task, loop_config, Backends.single(backend), ablation=args.ablate
    )
    classify_failure(trace)
    trace_path = args.trace or (os.path.splitext(args.task)[0] + ".trace")
    save_trace(trace, trace_path)
    print(
        f"task {task.id}: {trace.outcome} after {trace.iterations_used} iteration(s); "
        f"trace -> {trace_path}"
    )
    return 0 if trace.outcome == SUCCESS else 1


def cmd_bench(args) -> int:
    try:
        options = configmod.load_config(args.config)
        result, traces = run_suite_dir(args.suite_dir, options, args.ablate)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out_dir = args.out or "sage_bench_out"
    os.makedirs(out_dir, exist_ok=True)
    for trace in traces:
        save_trace(trace, os.path.join(out_dir, f"{trace.task_id}.trace"))
    table = format_suite_table(result, args.ablate)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    with open(os.path.join(out_dir, "report.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(suite_records(result, args.ablate))
    print(table)
    return 0 if result.success_rate == 1.0 else 1


def cmd_memsim(args) -> int:
    try:
        options = configmod.load_config(args.config)
        with open(args.stream, encoding="utf-8") as fh:
            events, horizon = parse_stream(fh.read())
        state = MemoryState(config=configmod.memory_config(options))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    report = run_memsim(events, horizon, state)
    text = format_memsim_report(report)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
            fh.write("\nfinal snapshot:\n")
            fh.write(dumps_state(report.final_state))
    return 0


def cmd_gamesim(args) -> int:
    try:
        options = configmod.load_config(args.config)
        game = load_game(args.game)
        learn = configmod.learning_config(options)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    d = game.dim
    init = GameState(theta=np.zeros(d), f=np.zeros(d))
    try:
        nash_solve(game)  # degenerate games are a configuration error here
        report = iterate_to_equilibrium(
            game,
            init,
            learn,
            deviation_samples=int(options.get("game.deviation_samples", 1000)),
            seed=int(options.get("game.seed", 0)),
        )
    except DegenerateGameError as exc:
        print(f"error: degenerate game: {exc}", file=sys.stderr)
        return 2

    print(f"status: {report.status}")
    print(f"outer_rounds: {report.outer_rounds}")
    print(f"gradient_steps: {report.gradient_steps}")
    print(f"contraction_norm: {game.contraction_norm():.6f}")
    print(f"theta: {np.array2string(report.state.theta, precision=8)}")
    print(f"f: {np.array2string(report.state.f, precision=8)}")
    print(f"distance_to_equilibrium: {report.distance_to_equilibrium:.3e}")
    print(f"max_assistant_deviation_gain: {report.max_assistant_deviation_gain:.3e}")
    print(f"max_checker_deviation_gain: {report.max_checker_deviation_gain:.3e}")
    print("trajectory (round, distance):")
    for outer, dist in report.trajectory:
        print(f"  {outer}\t{dist:.6e}")
    return 0 if report.converged else 1


def cmd_inspect(args) -> int:
    try:
        trace = load_trace(args.trace)
        recomputed = classify_failure(trace)
    except (OSError, ValueError, KeyError) as exc:  # TraceIntegrityError is a ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 2

    print(
        f"trace {trace.episode_id} task={trace.task_id} outcome={trace.outcome} "
        f"(recomputed {recomputed}) iterations={trace.iterations_used}/{trace.max_iterations}"
    )
    for event in trace.events:
        print(f"  {event.step}\t{event.role}\t{event.event_type}\t{escape(event.payload)}")
    return 0


def cmd_suite(args) -> int:
    names = suitemod.write_suite(args.directory)
    print(f"wrote {len(names)} tasks to {args.directory}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sage", description="assistant/checker feedback loop harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one task and write its trace")
    p.add_argument("task")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", help="trace output path (default: <task>.trace)")
    p.add_argument("--ablate", choices=ABLATIONS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run every task in a suite directory")
    p.add_argument("suite_dir")
    p.add_argument("--config", required=True)
    p.add_argument("--ablate", choices=ABLATIONS)
    p.add_argument("--out", help="output directory (default: sage_bench_out)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("memsim", help="replay a timed text stream through memory")
    p.add_argument("stream")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="also write the report and final snapshot here")
    p.set_defaults(func=cmd_memsim)

    p = sub.add_parser("gamesim", help="iterate a quadratic game to equilibrium")
    p.add_argument("game")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_gamesim)

    p = sub.add_parser("inspect", help="pretty-print and verify a trace file")
    p.add_argument("trace")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("suite", help="materialize the bundled 20-task suite")
    p.add_argument("directory")
    p.set_defaults(func=cmd_suite)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
