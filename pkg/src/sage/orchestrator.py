"""The three-role loop: task in, assistant output, checker verdict.

One episode alternates assistant generation and checker evaluation
until the checker validates the output or the iteration cap is hit.
After every failed round (when another round is coming) the assistant
reflects on the trajectory, the reflection and the round's output and
critique are folded into memory, and the memory clock advances.

Verdicts are always decided by the task's deterministic oracle; a model
backend only ever contributes critique prose, so it can never flip a
result. Episode outcomes use the failure taxonomy SUCCESS / CLE
(context limit exceeded) / TLE (task limit exceeded, i.e. cap reached)
/ INVALID_FORMAT / INVALID_ACTION, and every outcome is recomputable
from the trace events alone, which is how trace corruption is caught.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

from sage import templates
from sage.backend import (
    ASSISTANT as ROLE_ASSISTANT_TAG,
    BackendConfigError,
    BackendUnavailableError,
    CHECKER as ROLE_CHECKER_TAG,
    CompletionRequest,
    Message,
    UNSCRIPTED,
)
from sage.lineio import escape, unescape
from sage.memory import (
    Location,
    MemoryConfig,
    MemoryState,
    make_item,
    optimize_item,
    recall,
    tick,
    update_memory,
)
from sage.reflection import (
    reflect,
    render_reflection_context,
    store_reflection,
)

# Outcomes (the error taxonomy plus success).
SUCCESS = "SUCCESS"
CLE = "CLE"
TLE = "TLE"
INVALID_FORMAT = "INVALID_FORMAT"
INVALID_ACTION = "INVALID_ACTION"
OUTCOMES = (SUCCESS, CLE, TLE, INVALID_FORMAT, INVALID_ACTION)

# Trace event vocabulary.
ROLES = ("USER", "ASSISTANT", "CHECKER", "SYSTEM")
EVENT_TYPES = ("PROMPT", "OUTPUT", "FEEDBACK", "REFLECTION", "MEMORY_OP")

PASS = "PASS"
FAIL = "FAIL"

ORACLES = ("EXACT_MATCH", "NORMALIZED_MATCH", "CONTAINS")

ABLATIONS = ("no_memory", "no_reflection", "single_shot")

# System-event payload markers that anchor outcome recomputation.
MARK_OVERFLOW = "CONTEXT_OVERFLOW"
MARK_UNAVAILABLE = "BACKEND_UNAVAILABLE"
MARK_BAD_FORMAT = "INVALID_FORMAT"
MARK_BAD_ACTION = "INVALID_ACTION"

TRACE_FORMAT = "trace/v1"


class TraceIntegrityError(ValueError):
    """Recorded outcome disagrees with what the events imply."""


@dataclass
class TaskSpec:
    id: str
    description: str
    instance: str
    constraints: list[str] = field(default_factory=list)
    oracle: str = "EXACT_MATCH"
    expected: str = ""
    forbidden_actions: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("task id must be non-empty")
        if not self.description or not self.instance:
            raise ValueError("description and instance must be non-empty")
        if self.oracle not in ORACLES:
            raise ValueError(f"unknown oracle {self.oracle!r}")
        if not self.expected:
            raise ValueError("oracle expected answer must be non-empty")


@dataclass
class FeedbackRecord:
    iteration: int
    verdict: str
    score: float
    critique: str

    def __post_init__(self) -> None:
        if self.verdict not in (PASS, FAIL):
            raise ValueError(f"verdict must be PASS or FAIL, got {self.verdict!r}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("score must be in [0, 1]")
        if self.verdict == PASS and self.score != 1.0:
            raise ValueError("a PASS verdict requires score 1.0")


@dataclass
class TraceEvent:
    step: int
    role: str
    event_type: str
    payload: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.event_type not in EVENT_TYPES:
            raise ValueError(f"unknown event type {self.event_type!r}")


@dataclass
class EpisodeTrace:
    episode_id: str
    task_id: str
    events: list[TraceEvent]
    outcome: str
    iterations_used: int
    max_iterations: int

    def __post_init__(self) -> None:
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")


@dataclass
class OrchestratorConfig:
    max_iterations: int = 8
    context_char_limit: int = 16384
    reflection_budget_chars: int = 2048
    recall_k: int = 4
    assistant_temperature: float = 0.0  # checker/reflector always run at 0
    memory: MemoryConfig = field(default_factory=MemoryConfig)

    def __post_init__(self) -> None:
        if min(
            self.max_iterations,
            self.context_char_limit,
            self.reflection_budget_chars,
            self.recall_k,
        ) < 1:
            raise ValueError("all orchestrator limits must be positive")
        if not (0.0 <= self.assistant_temperature <= 2.0):
            raise ValueError("assistant_temperature must be in [0, 2]")


@dataclass
class Backends:
    """One backend per role; checker/reflector default to the assistant's."""

    assistant: object
    checker: object | None = None
    reflector: object | None = None

    @classmethod
    def single(cls, backend) -> "Backends":
        return cls(assistant=backend, checker=backend, reflector=backend)

    def checker_backend(self):
        return self.checker if self.checker is not None else self.assistant

    def reflector_backend(self):
        return self.reflector if self.reflector is not None else self.assistant


@dataclass
class EvolutionGoals:
    """Next-episode adaptation derived from a finished trace."""

    optimize_items: list[str] = field(default_factory=list)
    pin_reflections: list[str] = field(default_factory=list)
    recall_k_delta: int = 0

    def is_empty(self) -> bool:
        return not self.optimize_items and not self.pin_reflections and self.recall_k_delta == 0


@dataclass
class Episode:
    """Mutable in-flight episode state."""

    episode_id: str
    task: TaskSpec
    config: OrchestratorConfig
    memory: MemoryState
    events: list[TraceEvent] = field(default_factory=list)
    pinned_reflections: list[str] = field(default_factory=list)
    latest_feedback: FeedbackRecord | None = None
    outputs: list[tuple[str, str]] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    outcome: str | None = None

    def record(self, role: str, event_type: str, payload: str) -> TraceEvent:
        event = TraceEvent(len(self.events), role, event_type, payload)
        self.events.append(event)
        return event


def init_episode(
    task: TaskSpec,
    config: OrchestratorConfig,
    memory: MemoryState | None = None,
    episode_id: str | None = None,
    pinned_reflections: list[str] | None = None,
) -> Episode:
    """Set up prompts, trace and memory for one episode.

    A carried-over MemoryState keeps its contents, so reflections from
    earlier episodes surface in this one's assistant prompts.
    """
    episode = Episode(
        episode_id=episode_id or f"ep-{task.id}",
        task=task,
        config=config,
        memory=memory if memory is not None else MemoryState(config=config.memory),
        pinned_reflections=list(pinned_reflections or []),
    )
    user_prompt = templates.USER_TEMPLATE.format(
        description=task.description,
        instance=task.instance,
        constraints="\n".join(task.constraints) or "(none)",
    )
    episode.record("USER", "PROMPT", user_prompt)
    return episode


def _block(header: str, body: str) -> str:
    return f"\n\n[{header}]\n{body}" if body else ""


def build_assistant_prompt(episode: Episode, ablation: str | None = None) -> str:
    """Assemble the conditioning set: task, latest critique, reflections,
    recalled memory. Rendered reflections and recalled items count as
    accessed (rehearsal)."""
    task = episode.task
    config = episode.config

    feedback = ""
    if episode.latest_feedback is not None:
        fb = episode.latest_feedback
        feedback = f"iteration {fb.iteration} verdict {fb.verdict}: {fb.critique}"

    reflections = ""
    memory_block = ""
    if ablation != "no_memory":
        reflections = render_reflection_context(
            episode.memory, config.reflection_budget_chars, rehearse=True
        )
        hits = recall(episode.memory, task.description, config.recall_k)
        memory_block = "\n".join(item.text for item in hits)
    if episode.pinned_reflections:
        pinned = "\n".join(episode.pinned_reflections)
        reflections = f"{pinned}\n{reflections}" if reflections else pinned

    return templates.ASSISTANT_TEMPLATE.format(
        description=task.description,
        instance=task.instance,
        constraints="\n".join(task.constraints) or "(none)",
        feedback=_block("checker feedback", feedback),
        reflections=_block("reflections", reflections),
        memory=_block("memory", memory_block),
    )


def assistant_step(
    episode: Episode, backend, iteration: int, ablation: str | None = None
) -> str | None:
    """One assistant turn. Returns the output, or None after recording a
    terminal condition (context overflow, backend loss, bad output)."""
    if episode.outcome is not None:
        raise ValueError("episode already terminated")
    prompt = build_assistant_prompt(episode, ablation)
    episode.record("ASSISTANT", "PROMPT", prompt)

    if len(prompt) > episode.config.context_char_limit:
        episode.record(
            "SYSTEM",
            "OUTPUT",
            f"{MARK_OVERFLOW} chars={len(prompt)} limit={episode.config.context_char_limit}",
        )
        episode.outcome = CLE
        return None

    request = CompletionRequest(
        role_tag=ROLE_ASSISTANT_TAG,
        messages=[Message("USER", prompt)],
        temperature=episode.config.assistant_temperature,
    )
    try:
        output = backend.complete(request, iteration)
    except BackendUnavailableError as exc:
        episode.record("SYSTEM", "OUTPUT", f"{MARK_UNAVAILABLE} {exc}")
        episode.outcome = INVALID_ACTION
        return None

    episode.record("ASSISTANT", "OUTPUT", output)

    if not output.strip():
        episode.record("SYSTEM", "OUTPUT", f"{MARK_BAD_FORMAT} blank output")
        episode.outcome = INVALID_FORMAT
        return None
    for token in episode.task.forbidden_actions:
        if token and token in output:
            episode.record("SYSTEM", "OUTPUT", f"{MARK_BAD_ACTION} token={token}")
            episode.outcome = INVALID_ACTION
            return None
    return output


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def oracle_match(output: str, task: TaskSpec) -> bool:
    if task.oracle == "EXACT_MATCH":
        return output.strip() == task.expected
    if task.oracle == "NORMALIZED_MATCH":
        return _normalize(output) == _normalize(task.expected)
    return task.expected in output  # CONTAINS


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance, iterative two-row DP."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def edit_similarity(a: str, b: str) -> float:
    """1 - d / max(|a|, |b|); 1.0 for two empty strings."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(a, b) / longest


def checker_evaluate(
    output: str, task: TaskSpec, backend=None, iteration: int = 1
) -> FeedbackRecord:
    """Oracle-grounded verdict plus critique prose.

    The match against the expected answer fixes PASS/FAIL and the score;
    the backend (when present and scripted for the round) only supplies
    the critique text, falling back to a deterministic template.
    """
    passed = oracle_match(output, task)
    if passed:
        return FeedbackRecord(
            iteration=iteration, verdict=PASS, score=1.0, critique="output validated"
        )
    score = edit_similarity(output, task.expected)
    score = min(score, 1.0 - 1e-9)  # FAIL score stays below 1

    critique = None
    if backend is not None:
        prompt = templates.CHECKER_TEMPLATE.format(
            description=task.description, instance=task.instance, output=output
        )
        request = CompletionRequest(
            role_tag=ROLE_CHECKER_TAG, messages=[Message("USER", prompt)]
        )
        try:
            candidate = backend.complete(request, iteration)
            if candidate and candidate.strip() and candidate != UNSCRIPTED:
                critique = candidate
        except (BackendUnavailableError, BackendConfigError):
            critique = None
    if critique is None:
        critique = (
            f"output does not match the reference for task {task.id} "
            f"(similarity {score:.3f})"
        )
    return FeedbackRecord(iteration=iteration, verdict=FAIL, score=score, critique=critique)


def _feedback_payload(fb: FeedbackRecord) -> str:
    return f"{fb.iteration}|{fb.verdict}|{fb.score!r}|{fb.critique}"


def parse_feedback_payload(payload: str) -> FeedbackRecord:
    iteration, verdict, score, critique = payload.split("|", 3)
    return FeedbackRecord(
        iteration=int(iteration), verdict=verdict, score=float(score), critique=critique
    )


def run_episode(
    task: TaskSpec,
    config: OrchestratorConfig,
    backends: Backends,
    memory: MemoryState | None = None,
    ablation: str | None = None,
    episode_id: str | None = None,
    pinned_reflections: list[str] | None = None,
) -> EpisodeTrace:
    """Drive one task to an outcome and return the full trace.

    ``ablation`` disables one mechanism: no_memory (recall and stores
    skipped), no_reflection (reflect skipped), single_shot (cap forced
    to 1).
    """
    if ablation is not None and ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    cap = 1 if ablation == "single_shot" else config.max_iterations
    episode = init_episode(task, config, memory, episode_id, pinned_reflections)

    iterations_used = 0
    for iteration in range(1, cap + 1):
        output = assistant_step(episode, backends.assistant, iteration, ablation)
        if output is None:
            break
        iterations_used = iteration

        fb = checker_evaluate(output, task, backends.checker_backend(), iteration)
        episode.record("CHECKER", "FEEDBACK", _feedback_payload(fb))
        episode.latest_feedback = fb
        episode.outputs.append((f"o{iteration}", output))
        episode.rewards.append(fb.score)

        if fb.verdict == PASS:
            episode.outcome = SUCCESS
            break
        if iteration == cap:
            episode.outcome = TLE
            break

        # Failed with rounds to spare: reflect, remember, advance the clock.
        if ablation != "no_reflection":
            record = reflect(
                episode.outputs,
                episode.rewards,
                backends.reflector_backend(),
                episode_id=episode.episode_id,
                step=len(episode.events),
                iteration=iteration,
            )
            episode.record("ASSISTANT", "REFLECTION", record.text)
            if ablation != "no_memory":
                store_reflection(episode.memory, record)
                episode.record(
                    "SYSTEM",
                    "MEMORY_OP",
                    f"store_reflection id=refl:{record.episode_id}:{record.step} "
                    f"chars={len(record.text)}",
                )
        if ablation != "no_memory":
            for kind, text in (("out", output), ("fb", fb.critique)):
                item = make_item(
                    f"{kind}:{episode.episode_id}:{iteration}",
                    text,
                    episode.memory.current_step,
                )
                update_memory(episode.memory, item, tau=0.0)
                placed = episode.memory.find(item.id)
                loc = placed.location.value if placed is not None else "DISCARDED"
                episode.record(
                    "SYSTEM",
                    "MEMORY_OP",
                    f"insert id={item.id} loc={loc} chars={len(text)}",
                )
            tick(episode.memory)
            episode.record(
                "SYSTEM", "MEMORY_OP", f"tick step={episode.memory.current_step}"
            )

    if episode.outcome is None:
        raise RuntimeError("episode ended without an outcome")  # unreachable
    return EpisodeTrace(
        episode_id=episode.episode_id,
        task_id=task.id,
        events=episode.events,
        outcome=episode.outcome,
        iterations_used=sum(
            1 for e in episode.events if e.role == "ASSISTANT" and e.event_type == "OUTPUT"
        ),
        max_iterations=cap,
    )


def classify_failure(trace: EpisodeTrace) -> str:
    """Recompute the outcome from events and cross-check the record.

    Raises TraceIntegrityError when the recorded outcome disagrees with
    what the events imply (e.g. a corrupted outcome field).
    """
    markers = [
        e.payload
        for e in trace.events
        if e.role == "SYSTEM" and e.event_type == "OUTPUT"
    ]
    recomputed: str | None = None
    for payload in markers:
        if payload.startswith(MARK_OVERFLOW):
            recomputed = CLE
        elif payload.startswith(MARK_UNAVAILABLE) or payload.startswith(MARK_BAD_ACTION):
            recomputed = INVALID_ACTION
        elif payload.startswith(MARK_BAD_FORMAT):
            recomputed = INVALID_FORMAT
        if recomputed:
            break
    if recomputed is None:
        feedback = [e for e in trace.events if e.event_type == "FEEDBACK"]
        if not feedback:
            raise TraceIntegrityError("no feedback events and no failure markers")
        last = parse_feedback_payload(feedback[-1].payload)
        recomputed = SUCCESS if last.verdict == PASS else TLE
    if recomputed != trace.outcome:
        raise TraceIntegrityError(
            f"recorded outcome {trace.outcome} but events imply {recomputed}"
        )
    return recomputed


def formulate_goals(trace: EpisodeTrace) -> EvolutionGoals:
    """Next-episode adjustments from a finished trace.

    Success needs nothing. A repeated identical critique in a
    capped-out episode pins the reflection that followed it (so the
    next prompt leads with it); a context overflow queues compression
    of the longest remembered item and shrinks recall.
    """
    goals = EvolutionGoals()
    if trace.outcome == SUCCESS:
        return goals

    if trace.outcome == TLE:
        seen: dict[str, int] = {}
        for idx, event in enumerate(trace.events):
            if event.event_type != "FEEDBACK":
                continue
            fb = parse_feedback_payload(event.payload)
            if fb.verdict != FAIL:
                continue
            if fb.critique in seen:
                first_idx = seen[fb.critique]
                for later in trace.events[first_idx + 1 :]:
                    if later.event_type == "REFLECTION":
                        if later.payload not in goals.pin_reflections:
                            goals.pin_reflections.append(later.payload)
                        break
            else:
                seen[fb.critique] = idx

    if trace.outcome == CLE:
        longest_id = None
        longest_chars = -1
        for event in trace.events:
            if event.event_type != "MEMORY_OP" or not event.payload.startswith("insert "):
                continue
            fields = dict(
                part.split("=", 1) for part in event.payload.split()[1:] if "=" in part
            )
            if fields.get("loc") != Location.STM.value:
                continue
            chars = int(fields.get("chars", "0"))
            if chars > longest_chars:
                longest_chars = chars
                longest_id = fields.get("id")
        if longest_id is not None:
            goals.optimize_items.append(longest_id)
        goals.recall_k_delta = -1

    return goals


def apply_goals(
    goals: EvolutionGoals, memory: MemoryState, config: OrchestratorConfig
) -> OrchestratorConfig:
    """Apply memory-side adjustments in place; return the adjusted config.

    Pinned reflections are carried separately (pass
    ``goals.pin_reflections`` to the next run_episode call).
    """
    for item_id in goals.optimize_items:
        item = memory.find(item_id)
        if item is None:
            continue
        optimized = optimize_item(item, gamma=config.memory.gamma_default)
        pool = memory.stm if item.location is Location.STM else memory.ltm
        pool[pool.index(item)] = optimized
    new_k = max(1, config.recall_k + goals.recall_k_delta)
    return dc_replace(config, recall_k=new_k)


# -- trace serialization -------------------------------------------------------
#
# trace/v1 is line-oriented: a header with ids, outcome and limits, then
# one event per line: step, role, type, escaped payload.


def dumps_trace(trace: EpisodeTrace) -> str:
    header = "\t".join(
        [
            TRACE_FORMAT,
            f"episode={escape(trace.episode_id)}",
            f"task={escape(trace.task_id)}",
            f"outcome={trace.outcome}",
            f"iterations={trace.iterations_used}",
            f"max_iterations={trace.max_iterations}",
        ]
    )
    lines = [header]
    for event in trace.events:
        lines.append(
            "\t".join(
                [str(event.step), event.role, event.event_type, escape(event.payload)]
            )
        )
    return "\n".join(lines) + "\n"


def loads_trace(payload: str) -> EpisodeTrace:
    lines = payload.split("\n")
    if not lines or not lines[0].startswith(TRACE_FORMAT + "\t"):
        raise ValueError(f"not a {TRACE_FORMAT} file")
    head: dict[str, str] = {}
    for part in lines[0].split("\t")[1:]:
        key, _, value = part.partition("=")
        head[key] = value
    events = []
    for line in lines[1:]:
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ValueError(f"malformed event line: {line!r}")
        events.append(
            TraceEvent(
                step=int(fields[0]),
                role=fields[1],
                event_type=fields[2],
                payload=unescape(fields[3]),
            )
        )
    return EpisodeTrace(
        episode_id=unescape(head["episode"]),
        task_id=unescape(head["task"]),
        events=events,
        outcome=head["outcome"],
        iterations_used=int(head["iterations"]),
        max_iterations=int(head["max_iterations"]),
    )


def save_trace(trace: EpisodeTrace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_trace(trace))


def load_trace(path) -> EpisodeTrace:
    with open(path, encoding="utf-8", newline="") as fh:
        return loads_trace(fh.read())


# -- task files ----------------------------------------------------------------
#
# Key-value lines; constraint/forbidden_action repeat; text values may
# use backslash escapes for embedded newlines/tabs.


def parse_task_file(payload: str) -> TaskSpec:
    single: dict[str, str] = {}
    constraints: list[str] = []
    forbidden: list[str] = []
    for raw in payload.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad task line: {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = unescape(value.strip())
        if key == "constraint":
            constraints.append(value)
        elif key == "forbidden_action":
            forbidden.append(value)
        else:
            single[key] = value
    try:
        return TaskSpec(
            id=single["id"],
            description=single["description"],
            instance=single["instance"],
            constraints=constraints,
            oracle=single.get("oracle", "EXACT_MATCH"),
            expected=single["expected"],
            forbidden_actions=forbidden,
        )
    except KeyError as exc:
        raise ValueError(f"task file missing key: {exc}") from exc


def dump_task_file(task: TaskSpec) -> str:
    lines = [
        f"id = {escape(task.id)}",
        f"description = {escape(task.description)}",
        f"instance = {escape(task.instance)}",
        f"oracle = {task.oracle}",
        f"expected = {escape(task.expected)}",
    ]
    for c in task.constraints:
        lines.append(f"constraint = {escape(c)}")
    for f_ in task.forbidden_actions:
        lines.append(f"forbidden_action = {escape(f_)}")
    return "\n".join(lines) + "\n"


def load_task(path) -> TaskSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_task_file(fh.read())
