"""Bundled 20-task scripted suite.

Each task pairs a deterministic oracle with a script that simulates an
assistant which only answers correctly once the loop has actually
delivered something into its prompt:

- feedback tasks: the correct entry requires a hint token that only the
  checker's critique carries, so one failed round suffices;
- reflection tasks: the hint token only ever appears in the scripted
  reflection, so skipping reflection caps the task out;
- memory tasks: the round-1 critique carries the hint, round 2's
  critique replaces it in the feedback slot, and round 3 can only see
  it again through memory recall.

Everything is generated from fixed word pools (no RNG): expected
answers for the transformation and puzzle families are computed by
applying the transformation in code, and a benchmark run is therefore
byte-for-byte reproducible.
"""

from __future__ import annotations

import os

from sage.backend import ScriptEntry, dump_script
from sage.orchestrator import TaskSpec, dump_task_file

SUITE_SIZE = 20

FEEDBACK, REFLECTION, MEMORY = "feedback", "reflection", "memory"
_MECHANISMS = (FEEDBACK, REFLECTION, MEMORY)

_TOWNS = ["Melve", "Ostrin", "Kadena", "Virelle", "Tamsin", "Orlebar", "Quessa"]
_GOODS = ["cobalt", "amber", "basalt", "lithium", "saffron", "quartz", "indigo"]
_CITIES = ["Darrow", "Helmsley", "Prayton", "Veskar", "Lunden", "Marrow", "Selkirk"]
_WORDS = ["lantern", "gravity", "monsoon", "ceramic", "whisper", "juniper", "basilisk"]
_PUZZLE_WORDS = ["stone", "cradle", "meadow", "harbor", "timber", "copper"]
_SUFFIXES = ["ward", "most", "line", "fall", "gate", "wick"]

_WRONG_FIRST = "i am not certain yet."
_WRONG_SECOND = "closer, but still guessing."
_WRONG_FALLBACK = "no final answer available."
_GENERIC_CRITIQUE = "incorrect; re-read everything available to you and try again."
_GENERIC_REFLECTION = "plan: slow down and re-check each given detail before answering."


def _hint(kind: str, tid: str) -> str:
    return f"{kind}-hint-{tid}"


def _qa_task(index: int, tid: str) -> tuple[TaskSpec, str]:
    town = _TOWNS[index % len(_TOWNS)]
    good = _GOODS[index % len(_GOODS)]
    city = _CITIES[index % len(_CITIES)]
    other = _TOWNS[(index + 3) % len(_TOWNS)]
    other_good = _GOODS[(index + 3) % len(_GOODS)]
    corpus = (
        f"Passage 1: The harbor town of {town} exports {good}. "
        f"Passage 2: All {good} from {town} is refined in {city}. "
        f"Passage 3: The village of {other} mostly trades {other_good}."
    )
    description = (
        f"Case {tid}: answer the question using the mini corpus. "
        f"Which city refines the {good} exported by {town}?"
    )
    task = TaskSpec(
        id=tid,
        description=description,
        instance=corpus,
        constraints=["answer with the city name only"],
        oracle="EXACT_MATCH",
        expected=city,
    )
    return task, city


_TRANSFORMS = [
    ("reverse the characters", lambda s: s[::-1]),
    ("uppercase every letter", lambda s: s.upper()),
    ("remove all vowels", lambda s: "".join(ch for ch in s if ch not in "aeiou")),
    ("repeat the string twice with a hyphen between", lambda s: f"{s}-{s}"),
    ("sort the letters alphabetically", lambda s: "".join(sorted(s))),
    ("swap the first and second halves", lambda s: s[len(s) // 2 :] + s[: len(s) // 2]),
    ("surround the string with angle brackets", lambda s: f"<{s}>"),
]


def _string_task(index: int, tid: str) -> tuple[TaskSpec, str]:
    rule, fn = _TRANSFORMS[index % len(_TRANSFORMS)]
    word = _WORDS[index % len(_WORDS)]
    expected = fn(word)
    task = TaskSpec(
        id=tid,
        description=f"Case {tid}: transform the source string. Rule: {rule}.",
        instance=f"source: {word}",
        constraints=["output the transformed string only"],
        oracle="NORMALIZED_MATCH" if index % 2 else "EXACT_MATCH",
        expected=expected,
    )
    return task, expected


def _puzzle_task(index: int, tid: str) -> tuple[TaskSpec, str]:
    word = _PUZZLE_WORDS[index % len(_PUZZLE_WORDS)]
    suffix = _SUFFIXES[index % len(_SUFFIXES)]
    result = (word[1:] + suffix).upper()
    steps = (
        f"Start with the word '{word}'. "
        f"Step 1: remove the first letter. "
        f"Step 2: append '{suffix}'. "
        f"Step 3: uppercase everything."
    )
    task = TaskSpec(
        id=tid,
        description=f"Case {tid}: follow the steps in order and output the final result.",
        instance=steps,
        constraints=["apply the steps exactly once, in order"],
        oracle="CONTAINS",
        expected=result,
    )
    return task, f"The final result is {result}"


def _build_script(task: TaskSpec, correct: str, mechanism: str) -> list[ScriptEntry]:
    tid = task.id
    entries = [ScriptEntry("ASSISTANT", 1, _WRONG_FIRST)]
    if mechanism == FEEDBACK:
        hint = _hint("critique", tid)
        entries += [
            ScriptEntry("ASSISTANT", "*", correct, require=hint),
            ScriptEntry("ASSISTANT", "*", _WRONG_FALLBACK),
            ScriptEntry(
                "CHECKER",
                "*",
                f"case {tid} went wrong; use this pointer: {hint} and look again.",
            ),
            ScriptEntry("REFLECTOR", "*", _GENERIC_REFLECTION),
        ]
    elif mechanism == REFLECTION:
        hint = _hint("plan", tid)
        entries += [
            ScriptEntry("ASSISTANT", "*", correct, require=hint),
            ScriptEntry("ASSISTANT", "*", _WRONG_FALLBACK),
            ScriptEntry("CHECKER", "*", _GENERIC_CRITIQUE),
            ScriptEntry(
                "REFLECTOR",
                "*",
                f"plan for case {tid}: remember the marker {hint} and answer directly.",
            ),
        ]
    else:  # MEMORY
        first = _hint("first-clue", tid)
        second = _hint("second-clue", tid)
        entries += [
            ScriptEntry("ASSISTANT", 2, _WRONG_SECOND),
            ScriptEntry("ASSISTANT", "*", correct, require=first),
            ScriptEntry("ASSISTANT", "*", _WRONG_FALLBACK),
            ScriptEntry("CHECKER", 1, f"case {tid} first clue: {first}."),
            ScriptEntry("CHECKER", 2, f"case {tid} second clue: {second}."),
            ScriptEntry("CHECKER", "*", _GENERIC_CRITIQUE),
            ScriptEntry("REFLECTOR", "*", _GENERIC_REFLECTION),
        ]
    return entries


def bundled_suite() -> list[tuple[TaskSpec, list[ScriptEntry], str]]:
    """The 20 (task, script, mechanism) triples."""
    out = []
    for index in range(SUITE_SIZE):
        mechanism = _MECHANISMS[index % 3]
        tid = f"t{index + 1:02d}-{mechanism[:4]}"
        if index < 7:
            task, correct = _qa_task(index, tid)
        elif index < 14:
            task, correct = _string_task(index - 7, tid)
        else:
            task, correct = _puzzle_task(index - 14, tid)
        out.append((task, _build_script(task, correct, mechanism), mechanism))
    return out


DEFAULT_CONFIG_TEXT = """\
# default desk-scale configuration
loop.max_iterations = 8
loop.context_char_limit = 16384
loop.reflection_budget = 2048
loop.recall_k = 4
memory.theta1 = 0.7
memory.theta2 = 0.3
memory.stm_capacity = 16
memory.ltm_capacity = 256
memory.gamma = 1.5
memory.decay_base = 1.0
backend.kind = scripted
"""


def write_suite(directory) -> list[str]:
    """Materialize the bundled suite as task/script file pairs."""
    os.makedirs(directory, exist_ok=True)
    names = []
    for task, script, _ in bundled_suite():
        task_path = os.path.join(directory, f"{task.id}.task")
        with open(task_path, "w", encoding="utf-8") as fh:
            fh.write(dump_task_file(task))
        with open(os.path.join(directory, f"{task.id}.script"), "w", encoding="utf-8") as fh:
            fh.write(dump_script(script))
        names.append(task.id)
    with open(os.path.join(directory, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(DEFAULT_CONFIG_TEXT)
    return names


# -- extra scripted scenarios (not part of the 20) -----------------------------


def always_wrong_pair() -> tuple[TaskSpec, list[ScriptEntry]]:
    """Fails every round: the episode runs into the iteration cap."""
    task = TaskSpec(
        id="x-always-wrong",
        description="Case x-always-wrong: name the capital of the moon.",
        instance="there is no answer in the corpus.",
        oracle="EXACT_MATCH",
        expected="unanswerable",
    )
    script = [
        ScriptEntry("ASSISTANT", "*", _WRONG_FALLBACK),
        ScriptEntry("CHECKER", "*", _GENERIC_CRITIQUE),
        ScriptEntry("REFLECTOR", "*", _GENERIC_REFLECTION),
    ]
    return task, script


def oversized_pair(context_char_limit: int) -> tuple[TaskSpec, list[ScriptEntry]]:
    """Instance bigger than the context limit: overflow before round 1."""
    filler = "long corpus line with unhelpful padding text. " * (
        context_char_limit // 40 + 2
    )
    task = TaskSpec(
        id="x-oversized",
        description="Case x-oversized: summarize the corpus in one word.",
        instance=filler,
        oracle="EXACT_MATCH",
        expected="padding",
    )
    script = [
        ScriptEntry("ASSISTANT", "*", "padding"),
        ScriptEntry("CHECKER", "*", _GENERIC_CRITIQUE),
    ]
    return task, script


def blank_output_pair() -> tuple[TaskSpec, list[ScriptEntry]]:
    """Assistant emits whitespace only: invalid format."""
    task = TaskSpec(
        id="x-blank",
        description="Case x-blank: echo the word ready.",
        instance="say ready.",
        oracle="EXACT_MATCH",
        expected="ready",
    )
    script = [
        ScriptEntry("ASSISTANT", "*", " "),
        ScriptEntry("CHECKER", "*", _GENERIC_CRITIQUE),
    ]
    return task, script


def forbidden_action_pair() -> tuple[TaskSpec, list[ScriptEntry]]:
    """Assistant uses a disallowed action token: invalid action."""
    task = TaskSpec(
        id="x-forbidden",
        description="Case x-forbidden: clean up the records politely.",
        instance="tidy the ledger without destructive commands.",
        oracle="EXACT_MATCH",
        expected="done",
        forbidden_actions=["DROP TABLE"],
    )
    script = [
        ScriptEntry("ASSISTANT", "*", "DROP TABLE ledger"),
        ScriptEntry("CHECKER", "*", _GENERIC_CRITIQUE),
    ]
    return task, script
