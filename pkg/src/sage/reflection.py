"""Verbal self-reflection over an episode's outputs and rewards.

A reflection is derived from the output sequence and reward sequence so
far and appended straight into long-term memory (unconditional union,
no retention gate on the way in); once stored it decays like any other
item. Reflections are identified in the pool by their id prefix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from sage import templates
from sage.backend import CompletionRequest, Message, REFLECTOR
from sage.memory import (
    InformationItem,
    Location,
    MemoryState,
    _enforce_capacities,
    compute_entropy,
    effective_strength,
)

REFLECTION_ID_PREFIX = "refl:"


@dataclass
class ReflectionRecord:
    episode_id: str
    step: int
    text: str
    source_output_ids: list[str]
    source_rewards: list[float]
    degraded: bool = False

    def __post_init__(self) -> None:
        if len(self.source_output_ids) != len(self.source_rewards):
            raise ValueError("output ids and rewards must have equal length")
        if not self.source_output_ids:
            raise ValueError("a reflection needs at least one output/reward pair")
        if not self.text:
            raise ValueError("reflection text must be non-empty")
        for r in self.source_rewards:
            if not (0.0 <= r <= 1.0):
                raise ValueError(f"reward {r} outside [0, 1]")


def fallback_reflection_text(rewards: Sequence[float]) -> str:
    """Deterministic summary used when no backend reflection is available."""
    failures = [i for i, r in enumerate(rewards, 1) if r < 1.0]
    if not failures:
        return "no failures recorded"
    if rewards[-1] == 1.0:
        return (
            f"{len(failures)} failures before success; "
            f"last failure at iteration {failures[-1]}"
        )
    return (
        f"{len(failures)} failures without success; "
        f"last failure at iteration {failures[-1]}"
    )


def build_reflection_prompt(
    outputs: Sequence[tuple[str, str]], rewards: Sequence[float]
) -> str:
    lines = [templates.REFLECT_PREAMBLE, "", "[trajectory]"]
    for (output_id, text), reward in zip(outputs, rewards):
        lines.append(f"{output_id} (reward {reward:g}): {text}")
    lines.append("")
    lines.append("[rewards] " + " ".join(f"{r:g}" for r in rewards))
    return "\n".join(lines)


def reflect(
    outputs: Sequence[tuple[str, str]],
    rewards: Sequence[float],
    backend,
    episode_id: str = "",
    step: int = 0,
    iteration: int | None = None,
) -> ReflectionRecord:
    """Derive a reflection from outputs o_1..t and rewards R_1..t.

    ``outputs`` are (id, text) pairs. Backend failure (or a missing
    backend) degrades to the deterministic pass/fail summary.
    """
    if len(outputs) != len(rewards):
        raise ValueError("outputs and rewards must have equal length")
    if not outputs:
        raise ValueError("at least one output/reward pair required")
    iteration = iteration if iteration is not None else len(outputs)

    text = None
    degraded = False
    if backend is not None:
        request = CompletionRequest(
            role_tag=REFLECTOR,
            messages=[Message("USER", build_reflection_prompt(outputs, rewards))],
        )
        try:
            candidate = backend.complete(request, iteration)
            if candidate and candidate.strip():
                text = candidate
        except Exception:
            text = None
    if text is None:
        text = fallback_reflection_text(rewards)
        degraded = True

    return ReflectionRecord(
        episode_id=episode_id,
        step=step,
        text=text,
        source_output_ids=[oid for oid, _ in outputs],
        source_rewards=list(rewards),
        degraded=degraded,
    )


def reflection_item_id(record: ReflectionRecord) -> str:
    return f"{REFLECTION_ID_PREFIX}{record.episode_id}:{record.step}"


def store_reflection(state: MemoryState, record: ReflectionRecord) -> MemoryState:
    """Union the reflection into LTM, bypassing the retention gate.

    Storing the same record twice rehearses the existing item instead of
    duplicating it. Capacity still applies: the lowest-strength LTM
    member after the union is evicted, which may be the newcomer itself.
    """
    item_id = reflection_item_id(record)
    if state.is_discarded(item_id):
        return state
    existing = state.find(item_id)
    if existing is not None:
        existing.last_access_step = state.current_step
        return state
    item = InformationItem(
        id=item_id,
        text=record.text,
        created_step=state.current_step,
        last_access_step=state.current_step,
        entropy_bits=compute_entropy(record.text),
        location=Location.LTM,
    )
    state.ltm.append(item)
    _enforce_capacities(state)
    return state


def render_reflection_context(
    state: MemoryState, budget_chars: int, rehearse: bool = False
) -> str:
    """LTM reflection texts, strongest first, within the character budget.

    With ``rehearse`` the rendered items count as accessed (their last
    access moves to the current step); plain rendering is a pure read.
    """
    if budget_chars < 1:
        raise ValueError("budget_chars must be positive")
    now = state.current_step
    config = state.config
    reflections = sorted(
        (i for i in state.ltm if i.id.startswith(REFLECTION_ID_PREFIX)),
        key=lambda i: (-effective_strength(i, now, config), i.id),
    )
    parts: list[str] = []
    total = 0
    for item in reflections:
        cost = len(item.text) if not parts else len(item.text) + 1  # +1 separator
        if total + cost > budget_chars:
            break
        parts.append(item.text)
        total += cost
        if rehearse:
            item.last_access_step = now
    return "\n".join(parts)
