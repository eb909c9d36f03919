"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one `[acceptance] ... PASS/FAIL` line (visible with
`pytest -s tests/test_acceptance.py`). Everything runs on scripted
backends and in-process fakes; nothing touches the network.
"""

import math
import random
import time
from contextlib import contextmanager

import mpmath
import numpy as np
import pytest
from scipy import stats

from sage.backend import ScriptedBackend, ScriptEntry
from sage.cli import main, run_suite_dir
from sage.config import load_config
from sage.gamesim import (
    GameState,
    LearningConfig,
    QuadraticGame,
    assistant_gradient,
    finite_diff_gradient,
    iterate_to_equilibrium,
    least_squares_fit,
    squared_error_objective,
)
from sage.memory import (
    InformationItem,
    Location,
    MemoryConfig,
    brute_force_select,
    compute_entropy,
    lagrange_threshold,
    retention,
    retention_branch,
    select_retained,
    strength,
)
from sage.orchestrator import (
    Backends,
    OUTCOMES,
    OrchestratorConfig,
    TaskSpec,
    classify_failure,
    dumps_trace,
    loads_trace,
    run_episode,
)
from sage.suite import always_wrong_pair, oversized_pair, write_suite


@contextmanager
def criterion(label):
    try:
        yield
    except BaseException:
        print(f"[acceptance] {label}: FAIL")
        raise
    print(f"[acceptance] {label}: PASS")


def synthetic_item(item_id, entropy, created, last_access):
    return InformationItem(
        id=item_id,
        text="synthetic",
        created_step=created,
        last_access_step=last_access,
        entropy_bits=entropy,
    )


def test_c01_memory_selection_optimality():
    with criterion("C1 memory-selection optimality (500 instances, <10s)"):
        rng = random.Random(20240817)
        config = MemoryConfig()
        started = time.monotonic()
        for _ in range(500):
            n = rng.randint(1, 12)
            now = rng.randint(0, 40)
            items = []
            for k in range(n):
                created = rng.randint(0, now)
                items.append(
                    synthetic_item(
                        f"i{k:02d}",
                        rng.uniform(0.0, 8.0),
                        created,
                        rng.randint(created, now),
                    )
                )
            capacity = rng.randint(1, 6)
            greedy = select_retained(items, capacity, now, config)
            exhaustive = brute_force_select(items, capacity, now, config)
            assert [i.id for i in greedy] == [i.id for i in exhaustive]
            total_greedy = sum(strength(i, now, config) for i in greedy)
            total_brute = sum(strength(i, now, config) for i in exhaustive)
            assert total_greedy == total_brute  # identical sets, exact equality

            lam = lagrange_threshold(items, capacity, now, config)
            threshold_set = [i for i in items if strength(i, now, config) >= lam]
            threshold_set.sort(
                key=lambda i: (-strength(i, now, config), -i.created_step, i.id)
            )
            assert [i.id for i in threshold_set[:capacity]] == [i.id for i in greedy]
        assert time.monotonic() - started < 10.0


def test_c02_update_rule_partition_and_boundaries():
    with criterion("C2 update-rule partition (1e5 random triples) and boundaries"):
        rng = random.Random(99)
        for _ in range(100_000):
            theta1 = rng.uniform(1e-6, 1.0)
            theta2 = rng.uniform(0.0, theta1 * 0.999999)
            r = rng.uniform(0.0, 1.0)
            fired = [r >= theta1, theta2 <= r < theta1, r < theta2]
            assert sum(fired) == 1
            where = retention_branch(r, theta1, theta2)
            assert where is (
                Location.STM
                if fired[0]
                else Location.LTM
                if fired[1]
                else Location.DISCARDED
            )
        assert retention_branch(0.7, 0.7, 0.3) is Location.STM
        assert retention_branch(0.3, 0.7, 0.3) is Location.LTM
        rng2 = random.Random(7)
        for _ in range(1000):
            t1 = rng2.uniform(0.1, 1.0)
            t2 = rng2.uniform(0.0, t1 * 0.99)
            assert retention_branch(t1, t1, t2) is Location.STM
            assert retention_branch(t2, t1, t2) is Location.LTM


def test_c03_decay_analytics():
    with criterion("C3 decay analytics (exact tau=0, 1e-9 spot values, monotonicity)"):
        fresh = synthetic_item("a", 3.0, 0, 0)
        assert retention(fresh, 0.0, 0) == 1.0  # exact

        unit = synthetic_item("u", 1.0, 0, 0)  # S = 1 at age 0
        assert abs(retention(unit, 1.0, 0) - float(mpmath.e ** -1)) < 1e-9
        assert abs(retention(unit, 2.0, 0) - float(mpmath.e ** -2)) < 1e-9

        rng = random.Random(5)
        for _ in range(10_000):
            s = rng.uniform(0.05, 9.0)
            item = synthetic_item("m", s, 0, 0)
            tau_lo = rng.uniform(0.0, 5.0)
            tau_hi = tau_lo + rng.uniform(1e-6, 5.0)
            assert retention(item, tau_hi, 0) < retention(item, tau_lo, 0)
        for _ in range(10_000):
            tau = rng.uniform(1e-3, 5.0)
            s_lo = rng.uniform(0.05, 8.0)
            s_hi = s_lo + rng.uniform(1e-6, 2.0)
            lo = synthetic_item("lo", s_lo, 0, 0)
            hi = synthetic_item("hi", s_hi, 0, 0)
            assert retention(hi, tau, 0) > retention(lo, tau, 0)


def test_c04_entropy_against_independent_implementation():
    with criterion("C4 entropy vs scipy (1000 multisets, 1e-9) and bounds"):
        rng = random.Random(13)
        alphabet = [f"tok{i}" for i in range(20)]
        for _ in range(1000):
            tokens = [rng.choice(alphabet) for _ in range(rng.randint(1, 80))]
            text = " ".join(tokens)
            counts = {}
            for t in tokens:
                counts[t] = counts.get(t, 0) + 1
            reference = float(stats.entropy(list(counts.values()), base=2))
            h = compute_entropy(text)
            assert abs(h - reference) < 1e-9
            assert 0.0 <= h <= math.log2(len(counts)) + 1e-12


def _random_contraction_game(rng, d=4):
    A = rng.standard_normal((d, d))
    P = A @ A.T + d * np.eye(d)
    B = rng.standard_normal((d, d))
    M = B @ B.T + d * np.eye(d)
    Q = rng.standard_normal((d, d))
    K = rng.standard_normal((d, d))
    game = QuadraticGame(
        P=P, M=M, Q=Q, K=K, b=rng.standard_normal(d), c=rng.standard_normal(d)
    )
    target = rng.uniform(0.05, 0.89)
    scale = math.sqrt(target / game.contraction_norm())
    return QuadraticGame(P=P, M=M, Q=Q * scale, K=K * scale, b=game.b, c=game.c)


def test_c05_nash_convergence():
    with criterion("C5 equilibrium convergence (d=1 exact, 100 random games, <30s)"):
        started = time.monotonic()

        game = QuadraticGame(P=[[1.0]], M=[[1.0]], Q=[[0.5]], K=[[0.5]], b=[1.0], c=[1.0])
        report = iterate_to_equilibrium(
            game,
            GameState(theta=[0.0], f=[0.0]),
            LearningConfig(alpha=1.0, tol=1e-8),
            deviation_samples=1000,
            seed=11,
        )
        assert report.converged
        assert abs(report.state.theta[0] - 2.0) < 1e-6
        assert abs(report.state.f[0] - 2.0) < 1e-6
        assert report.gradient_steps + report.outer_rounds < 2000
        assert report.max_assistant_deviation_gain <= 1e-8
        assert report.max_checker_deviation_gain <= 1e-8

        rng = np.random.default_rng(20240817)
        converged = 0
        for k in range(100):
            g = _random_contraction_game(rng)
            assert g.contraction_norm() < 0.9
            alpha = 1.0 / float(np.linalg.eigvalsh(g.P).max())
            rep = iterate_to_equilibrium(
                g,
                GameState(theta=np.zeros(4), f=np.zeros(4)),
                LearningConfig(alpha=alpha, tol=1e-8, max_iters=10000),
                deviation_samples=1000,
                seed=k,
            )
            assert rep.converged
            assert rep.distance_to_equilibrium < 1e-6
            assert rep.max_assistant_deviation_gain <= 1e-8
            assert rep.max_checker_deviation_gain <= 1e-8
            converged += 1
        assert converged == 100
        assert time.monotonic() - started < 30.0


def test_c06_gradient_fidelity():
    with criterion("C6 analytic vs finite-difference gradient (100 states, <1e-5)"):
        rng = np.random.default_rng(99)
        for _ in range(100):
            game = _random_contraction_game(rng)
            state = GameState(
                theta=rng.uniform(-3, 3, size=4), f=rng.uniform(-3, 3, size=4)
            )
            analytic = assistant_gradient(game, state.theta, state.f)
            numeric = finite_diff_gradient(game, state, h=1e-6)
            rel = np.linalg.norm(analytic - numeric) / max(
                np.linalg.norm(analytic), 1e-12
            )
            assert rel < 1e-5


def test_c07_checker_convexity_and_fit():
    with criterion("C7 checker objective convexity (1e4 triples) and grid oracle"):
        rng = np.random.default_rng(1001)
        for _ in range(100):
            X = rng.standard_normal((8, 3))
            y = rng.standard_normal(8)
            points = [(X[i], float(y[i])) for i in range(8)]
            for _ in range(100):
                f1 = rng.standard_normal(3)
                f2 = rng.standard_normal(3)
                lam = float(rng.uniform())
                mid = squared_error_objective(points, lam * f1 + (1 - lam) * f2)
                chord = lam * squared_error_objective(points, f1) + (
                    1 - lam
                ) * squared_error_objective(points, f2)
                assert mid <= chord + 1e-12

        for trial in range(20):
            X = rng.standard_normal((12, 2))
            w_true = rng.uniform(-2, 2, size=2)
            y = X @ w_true + 0.1 * rng.standard_normal(12)
            points = [(X[i], float(y[i])) for i in range(12)]
            fit = least_squares_fit(points)
            lo = np.array([-6.0, -6.0])
            hi = np.array([6.0, 6.0])
            for _ in range(8):
                axes = [np.linspace(lo[i], hi[i], 21) for i in range(2)]
                mesh = np.meshgrid(*axes, indexing="ij")
                grid = np.stack([m.ravel() for m in mesh], axis=1)
                errors = ((y[None, :] - grid @ X.T) ** 2).sum(axis=1)
                best = grid[int(np.argmin(errors))]
                spacing = (hi - lo) / 20
                lo = best - 2 * spacing
                hi = best + 2 * spacing
            assert np.all(np.abs(fit.weights - best) < 1e-4)


def test_c08_mechanism_ablation(tmp_path):
    with criterion("C8 suite ablations + taxonomy scenarios (<5s, no network)"):
        started = time.monotonic()
        suite_dir = tmp_path / "suite"
        write_suite(suite_dir)
        options = load_config(suite_dir / "config.txt")

        full, _ = run_suite_dir(str(suite_dir), options)
        single, _ = run_suite_dir(str(suite_dir), options, "single_shot")
        no_reflection, _ = run_suite_dir(str(suite_dir), options, "no_reflection")

        assert full.success_rate == 1.0
        assert single.success_rate == 0.0
        assert no_reflection.success_rate < full.success_rate
        for result in (full, single, no_reflection):
            assert sum(result.outcome_histogram.values()) == result.task_count == 20
        # full SAGE dominates single_shot task by task
        assert all(
            (full.outcomes[tid] == "SUCCESS") >= (single.outcomes[tid] == "SUCCESS")
            for tid in full.outcomes
        )

        config = OrchestratorConfig()
        task, script = always_wrong_pair()
        trace = run_episode(task, config, Backends.single(ScriptedBackend(script)))
        assert trace.outcome == "TLE"
        assert trace.iterations_used == config.max_iterations

        task, script = oversized_pair(config.context_char_limit)
        trace = run_episode(task, config, Backends.single(ScriptedBackend(script)))
        assert trace.outcome == "CLE"
        assert time.monotonic() - started < 5.0


def test_c09_bench_determinism(tmp_path):
    with criterion("C9 byte-identical bench runs"):
        suite_dir = tmp_path / "suite"
        write_suite(suite_dir)
        out_dirs = []
        for tag in ("first", "second"):
            out = tmp_path / tag
            code = main(
                [
                    "bench",
                    str(suite_dir),
                    "--config",
                    str(suite_dir / "config.txt"),
                    "--out",
                    str(out),
                ]
            )
            assert code == 0
            out_dirs.append(out)
        names_a = sorted(p.name for p in out_dirs[0].iterdir())
        names_b = sorted(p.name for p in out_dirs[1].iterdir())
        assert names_a == names_b and len(names_a) == 22  # 20 traces + 2 reports
        for name in names_a:
            assert (out_dirs[0] / name).read_bytes() == (out_dirs[1] / name).read_bytes()


def _trace_corpus(count=1000):
    """Parameterized episodes covering all five outcomes."""
    config = OrchestratorConfig(max_iterations=3, context_char_limit=2000)
    scenarios = []

    def task(tid, **kw):
        fields = dict(
            id=tid,
            description=f"scenario {tid}: produce the keyword.",
            instance="the keyword is kept in this instance: opal.",
            oracle="EXACT_MATCH",
            expected="opal",
        )
        fields.update(kw)
        return TaskSpec(**fields)

    pass_script = lambda at: [
        ScriptEntry("ASSISTANT", at, "opal"),
        ScriptEntry("ASSISTANT", "*", "quartz maybe"),
        ScriptEntry("CHECKER", "*", "not the keyword."),
        ScriptEntry("REFLECTOR", "*", "look for the keyword marker."),
    ]
    wrong_script = [
        ScriptEntry("ASSISTANT", "*", "quartz maybe"),
        ScriptEntry("CHECKER", "*", "not the keyword."),
        ScriptEntry("REFLECTOR", "*", "look for the keyword marker."),
    ]
    blank_script = [ScriptEntry("ASSISTANT", "*", " ")]
    forbidden_script = [ScriptEntry("ASSISTANT", "*", "rm -rf everything")]

    for n in range(count):
        kind = n % 5
        tid = f"s{n:04d}"
        if kind == 0:
            scenarios.append((task(tid), pass_script(1 + n % 3)))
        elif kind == 1:
            scenarios.append((task(tid), wrong_script))
        elif kind == 2:
            scenarios.append((task(tid, instance="pad pad pad " * 300), wrong_script))
        elif kind == 3:
            scenarios.append((task(tid), blank_script))
        else:
            scenarios.append(
                (task(tid, forbidden_actions=["rm -rf"]), forbidden_script)
            )
    traces = [
        run_episode(t, config, Backends.single(ScriptedBackend(s)))
        for t, s in scenarios
    ]
    return traces


def _mutations_detected(payload: str, outcome: str) -> bool:
    """Substitute single bytes inside the outcome field; all must be caught."""
    marker = f"outcome={outcome}"
    start = payload.index(marker) + len("outcome=")
    for offset in range(len(outcome)):
        original = payload[start + offset]
        for replacement in ("A", "T", "C", "S", "X", "_"):
            if replacement == original:
                continue
            mutated = (
                payload[: start + offset]
                + replacement
                + payload[start + offset + 1 :]
            )
            try:
                classify_failure(loads_trace(mutated))
                return False  # mutation slipped through
            except (ValueError, KeyError):
                continue  # TraceIntegrityError is a ValueError
    return True


def test_c10_trace_integrity(tmp_path):
    with criterion("C10 trace integrity (1000 traces, single-byte mutations)"):
        traces = _trace_corpus(1000)
        outcome_kinds = set()
        for trace in traces:
            assert classify_failure(trace) == trace.outcome
            clone = loads_trace(dumps_trace(trace))
            assert classify_failure(clone) == trace.outcome
            outcome_kinds.add(trace.outcome)
        assert outcome_kinds == set(OUTCOMES)

        # full substitution sweep on one representative per outcome
        representative = {}
        for trace in traces:
            representative.setdefault(trace.outcome, trace)
        for outcome, trace in sorted(representative.items()):
            assert _mutations_detected(dumps_trace(trace), outcome)

        # plus a rotating single mutation on every generated trace
        for n, trace in enumerate(traces):
            payload = dumps_trace(trace)
            marker = f"outcome={trace.outcome}"
            start = payload.index(marker) + len("outcome=")
            offset = n % len(trace.outcome)
            original = payload[start + offset]
            replacement = "T" if original != "T" else "C"
            mutated = payload[: start + offset] + replacement + payload[start + offset + 1 :]
            with pytest.raises((ValueError, KeyError)):
                classify_failure(loads_trace(mutated))
