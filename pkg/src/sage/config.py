"""Key-value config files.

One `key = value` per line, `#` comments. Keys are dotted per module:
memory.*, loop.*, backend.*, game.*. Unknown keys are kept verbatim so
callers can layer their own.
"""

from __future__ import annotations

from sage.gamesim import LearningConfig
from sage.memory import MemoryConfig
from sage.orchestrator import OrchestratorConfig


def parse_config(payload: str) -> dict[str, str]:
    options: dict[str, str] = {}
    for lineno, raw in enumerate(payload.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        options[key.strip()] = value.strip()
    return options


def load_config(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def memory_config(options: dict[str, str]) -> MemoryConfig:
    return MemoryConfig(
        theta1=float(options.get("memory.theta1", 0.7)),
        theta2=float(options.get("memory.theta2", 0.3)),
        stm_capacity=int(options.get("memory.stm_capacity", 16)),
        ltm_capacity=int(options.get("memory.ltm_capacity", 256)),
        gamma_default=float(options.get("memory.gamma", 1.5)),
        decay_base=float(options.get("memory.decay_base", 1.0)),
    )


def orchestrator_config(options: dict[str, str]) -> OrchestratorConfig:
    return OrchestratorConfig(
        max_iterations=int(options.get("loop.max_iterations", 8)),
        context_char_limit=int(options.get("loop.context_char_limit", 16384)),
        reflection_budget_chars=int(options.get("loop.reflection_budget", 2048)),
        recall_k=int(options.get("loop.recall_k", 4)),
        assistant_temperature=float(options.get("loop.assistant_temperature", 0.0)),
        memory=memory_config(options),
    )


def learning_config(options: dict[str, str]) -> LearningConfig:
    return LearningConfig(
        alpha=float(options.get("game.alpha", 0.5)),
        lambda_a=float(options.get("game.lambda_a", 1.0)),
        lambda_d=float(options.get("game.lambda_d", 1.0)),
        tol=float(options.get("game.tol", 1e-8)),
        max_iters=int(options.get("game.max_iters", 10000)),
    )
