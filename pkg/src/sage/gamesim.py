"""Two-player quadratic game between the assistant and the checker.

The assistant picks theta to maximize

    R_A(theta, f) = -1/2 theta'P theta + theta'(b + Q f)

by gradient ascent; the checker picks f to maximize

    R_C(theta, f) = -1/2 f'M f + f'(c + K theta)

by its exact convex best response M^{-1}(c + K theta). With P and M
symmetric positive definite both utilities are strictly concave in the
owner's strategy, the simultaneous first-order conditions are linear,
and the unique equilibrium comes out of one stacked solve. Alternating
the two updates converges whenever the best-response composition is a
contraction, i.e. ||P^{-1} Q M^{-1} K||_2 < 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPD_EIG_FLOOR = 1e-10
STACKED_COND_LIMIT = 1e12

# Gradient steps per best-response round before the checker replies.
INNER_STEP_CAP = 200


class DegenerateGameError(ValueError):
    """The stacked first-order system is (numerically) singular."""


@dataclass
class QuadraticGame:
    P: np.ndarray
    M: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self) -> None:
        self.P = np.asarray(self.P, dtype=float)
        self.M = np.asarray(self.M, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        d = self.b.shape[0]
        for name, mat in (("P", self.P), ("M", self.M), ("Q", self.Q), ("K", self.K)):
            if mat.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}, got {mat.shape}")
        if self.c.shape != (d,):
            raise ValueError("b and c must have the same dimension")
        for name, mat in (("P", self.P), ("M", self.M)):
            if not np.allclose(mat, mat.T, atol=1e-10):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(mat).min() <= SPD_EIG_FLOOR:
                raise ValueError(f"{name} must be positive definite")

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def contraction_norm(self) -> float:
        """Spectral norm of P^{-1} Q M^{-1} K; < 1 guarantees convergence."""
        inner = np.linalg.solve(self.P, self.Q) @ np.linalg.solve(self.M, self.K)
        return float(np.linalg.norm(inner, 2))


@dataclass
class GameState:
    theta: np.ndarray
    f: np.ndarray
    iteration: int = 0

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.f))):
            raise ValueError("strategies must be finite")


@dataclass
class LearningConfig:
    alpha: float = 0.5
    lambda_a: float = 1.0
    lambda_d: float = 1.0
    tol: float = 1e-8
    max_iters: int = 10000

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lambda_a < 0 or self.lambda_d < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


def assistant_utility(game: QuadraticGame, theta: np.ndarray, f: np.ndarray) -> float:
    theta = np.asarray(theta, dtype=float)
    f = np.asarray(f, dtype=float)
    return float(-0.5 * theta @ game.P @ theta + theta @ (game.b + game.Q @ f))


def checker_utility(game: QuadraticGame, theta: np.ndarray, f: np.ndarray) -> float:
    theta = np.asarray(theta, dtype=float)
    f = np.asarray(f, dtype=float)
    return float(-0.5 * f @ game.M @ f + f @ (game.c + game.K @ theta))


def assistant_gradient(
    game: QuadraticGame,
    theta: np.ndarray,
    f: np.ndarray,
    lambda_a: float = 1.0,
    lambda_d: float = 1.0,
) -> np.ndarray:
    """Gradient of the weighted utility split.

    The utility decomposes as -(lambda_a * L_task + lambda_d * L_feedback)
    with L_task = 1/2 theta'P theta - theta'b and L_feedback = -theta'Q f;
    at unit weights this is exactly grad R_A = -P theta + b + Q f.
    """
    return -lambda_a * (game.P @ theta - game.b) + lambda_d * (game.Q @ f)


def checker_gradient(game: QuadraticGame, theta: np.ndarray, f: np.ndarray) -> np.ndarray:
    return -(game.M @ f) + game.c + game.K @ theta


def nash_solve(game: QuadraticGame) -> tuple[np.ndarray, np.ndarray]:
    """Unique equilibrium from the stacked first-order conditions.

    Solves P theta - Q f = b and -K theta + M f = c in one 2d x 2d
    system; a (numerically) singular stack raises DegenerateGameError.
    """
    d = game.dim
    top = np.hstack([game.P, -game.Q])
    bottom = np.hstack([-game.K, game.M])
    stacked = np.vstack([top, bottom])
    rhs = np.concatenate([game.b, game.c])
    cond = np.linalg.cond(stacked)
    if not np.isfinite(cond) or cond > STACKED_COND_LIMIT:
        raise DegenerateGameError(
            f"stacked best-response system is singular (cond={cond:.3g})"
        )
    solution = np.linalg.solve(stacked, rhs)
    return solution[:d].copy(), solution[d:].copy()


def policy_gradient_step(
    game: QuadraticGame, state: GameState, config: LearningConfig
) -> GameState:
    """One ascent step on the assistant's utility; f is untouched."""
    grad = assistant_gradient(game, state.theta, state.f, config.lambda_a, config.lambda_d)
    return GameState(
        theta=state.theta + config.alpha * grad,
        f=state.f.copy(),
        iteration=state.iteration + 1,
    )


def checker_best_response(game: QuadraticGame, theta: np.ndarray) -> np.ndarray:
    """Exact convex optimum argmax_f R_C = M^{-1}(c + K theta)."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    return np.linalg.solve(game.M, game.c + game.K @ theta)


def finite_diff_gradient(
    game: QuadraticGame, state: GameState, h: float = 1e-6
) -> np.ndarray:
    """Central-difference estimate of the assistant's gradient."""
    if h <= 0:
        raise ValueError("h must be positive")
    grad = np.zeros_like(state.theta)
    for i in range(state.theta.shape[0]):
        up = state.theta.copy()
        down = state.theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (
            assistant_utility(game, up, state.f)
            - assistant_utility(game, down, state.f)
        ) / (2 * h)
    return grad


@dataclass
class FitResult:
    weights: np.ndarray
    rank: int
    degenerate: bool


def least_squares_fit(points: list[tuple[np.ndarray, float]]) -> FitResult:
    """Exact linear least-squares over (x, y) pairs.

    Rank-deficient designs fall back to the minimum-norm solution and
    are flagged instead of raising.
    """
    if not points:
        raise ValueError("points must be non-empty")
    X = np.asarray([np.asarray(x, dtype=float).reshape(-1) for x, _ in points])
    y = np.asarray([float(v) for _, v in points])
    d = X.shape[1]
    if len(points) < d:
        raise ValueError(f"need at least {d} points for dimension {d}")
    weights, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    return FitResult(weights=weights, rank=int(rank), degenerate=rank < d)


def squared_error_objective(
    points: list[tuple[np.ndarray, float]], weights: np.ndarray
) -> float:
    """J(w) = sum_i (y_i - w.x_i)^2, the checker's convex objective."""
    X = np.asarray([np.asarray(x, dtype=float).reshape(-1) for x, _ in points])
    y = np.asarray([float(v) for _, v in points])
    residual = y - X @ np.asarray(weights, dtype=float)
    return float(residual @ residual)


@dataclass
class ConvergenceReport:
    converged: bool
    status: str  # CONVERGED | DIVERGED
    outer_rounds: int
    gradient_steps: int
    state: GameState
    equilibrium: tuple[np.ndarray, np.ndarray] | None
    distance_to_equilibrium: float
    max_assistant_deviation_gain: float
    max_checker_deviation_gain: float
    trajectory: list[tuple[int, float]] = field(default_factory=list)


def deviation_check(
    game: QuadraticGame,
    theta: np.ndarray,
    f: np.ndarray,
    samples: int = 1000,
    seed: int = 0,
) -> tuple[float, float]:
    """Max utility gain over random unilateral deviations for each player.

    Non-positive gains (up to floating-point noise) certify the profile
    is an equilibrium in the sampled directions.
    """
    rng = np.random.default_rng(seed)
    d = theta.shape[0]
    scales = np.repeat([0.01, 0.1, 1.0], math.ceil(samples / 3))[:samples]
    base_a = assistant_utility(game, theta, f)
    base_c = checker_utility(game, theta, f)

    deltas = rng.standard_normal((samples, d)) * scales[:, None]
    thetas = theta[None, :] + deltas
    gains_a = (
        -0.5 * np.einsum("ij,jk,ik->i", thetas, game.P, thetas)
        + thetas @ (game.b + game.Q @ f)
        - base_a
    )
    deltas = rng.standard_normal((samples, d)) * scales[:, None]
    fs = f[None, :] + deltas
    gains_c = (
        -0.5 * np.einsum("ij,jk,ik->i", fs, game.M, fs)
        + fs @ (game.c + game.K @ theta)
        - base_c
    )
    return float(gains_a.max()), float(gains_c.max())


def iterate_to_equilibrium(
    game: QuadraticGame,
    init: GameState,
    config: LearningConfig,
    deviation_samples: int = 1000,
    seed: int = 0,
) -> ConvergenceReport:
    """Alternate assistant gradient ascent and checker best response.

    Each round runs gradient steps until the assistant's own gradient is
    small (capped), then the checker replies exactly. Stops when both
    strategy changes fall below tol, or flags DIVERGED at max_iters.
    """
    try:
        equilibrium = nash_solve(game)
    except DegenerateGameError:
        equilibrium = None

    state = GameState(theta=init.theta.copy(), f=init.f.copy(), iteration=init.iteration)
    trajectory: list[tuple[int, float]] = []
    inner_tol = config.tol / 10.0
    converged = False
    outer = 0
    gradient_steps = 0

    def distance(s: GameState) -> float:
        if equilibrium is None:
            return float("nan")
        return float(
            np.linalg.norm(s.theta - equilibrium[0])
            + np.linalg.norm(s.f - equilibrium[1])
        )

    def diverged_report(last_state: GameState) -> ConvergenceReport:
        return ConvergenceReport(
            converged=False,
            status="DIVERGED",
            outer_rounds=outer,
            gradient_steps=gradient_steps,
            state=last_state,
            equilibrium=equilibrium,
            distance_to_equilibrium=float("nan"),
            max_assistant_deviation_gain=float("nan"),
            max_checker_deviation_gain=float("nan"),
            trajectory=trajectory,
        )

    trajectory.append((0, distance(state)))
    while outer < config.max_iters and gradient_steps < config.max_iters:
        outer += 1
        theta_prev = state.theta.copy()
        f_prev = state.f.copy()

        for _ in range(INNER_STEP_CAP):
            grad = assistant_gradient(
                game, state.theta, state.f, config.lambda_a, config.lambda_d
            )
            if not np.all(np.isfinite(grad)):
                return diverged_report(state)
            if np.linalg.norm(grad) < inner_tol:
                break
            try:
                state = policy_gradient_step(game, state, config)
            except ValueError:  # strategies left the finite range
                return diverged_report(state)
            gradient_steps += 1

        try:
            state = GameState(
                theta=state.theta,
                f=checker_best_response(game, state.theta),
                iteration=state.iteration,
            )
        except ValueError:
            return diverged_report(state)
        trajectory.append((outer, distance(state)))

        if (
            np.linalg.norm(state.theta - theta_prev) < config.tol
            and np.linalg.norm(state.f - f_prev) < config.tol
        ):
            converged = True
            break

    gain_a, gain_c = deviation_check(
        game, state.theta, state.f, samples=deviation_samples, seed=seed
    )
    return ConvergenceReport(
        converged=converged,
        status="CONVERGED" if converged else "DIVERGED",
        outer_rounds=outer,
        gradient_steps=gradient_steps,
        state=state,
        equilibrium=equilibrium,
        distance_to_equilibrium=distance(state),
        max_assistant_deviation_gain=gain_a,
        max_checker_deviation_gain=gain_c,
        trajectory=trajectory,
    )


# -- game file parsing ---------------------------------------------------------
#
# Plain-text format, one assignment per line, rows separated by ';':
#   P = 2 0 ; 0 2
#   b = 1 1
# Q, K default to zero matrices; b, c default to zero vectors.


def parse_game_file(payload: str) -> QuadraticGame:
    values: dict[str, str] = {}
    for raw in payload.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad game line: {raw!r}")
        key, _, rest = line.partition("=")
        values[key.strip()] = rest.strip()

    if "P" not in values or "M" not in values:
        raise ValueError("game file must define P and M")

    def matrix(text: str) -> np.ndarray:
        rows = [
            [float(tok) for tok in row.split()]
            for row in text.split(";")
            if row.strip()
        ]
        return np.asarray(rows, dtype=float)

    P = matrix(values["P"])
    d = P.shape[0]
    M = matrix(values["M"])
    Q = matrix(values["Q"]) if "Q" in values else np.zeros((d, d))
    K = matrix(values["K"]) if "K" in values else np.zeros((d, d))
    b = (
        np.asarray([float(t) for t in values["b"].split()])
        if "b" in values
        else np.zeros(d)
    )
    c = (
        np.asarray([float(t) for t in values["c"].split()])
        if "c" in values
        else np.zeros(d)
    )
    return QuadraticGame(P=P, M=M, Q=Q, K=K, b=b, c=c)


def load_game(path) -> QuadraticGame:
    with open(path, encoding="utf-8") as fh:
        return parse_game_file(fh.read())
