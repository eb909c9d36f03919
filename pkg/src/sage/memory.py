"""Dual-pool memory with Ebbinghaus decay and entropy-based retention.

Every stored item carries a Shannon entropy H (bits, over its lowercased
whitespace tokens) and decays along the forgetting curve

    R(tau) = exp(-tau / S),    S = m * H / f(age)

where tau and age are counted in discrete steps since the item was last
accessed, f(age) = 1 + ln(1 + age / decay_base) is the forgetting factor,
and m is a strength multiplier (> 1 only for linguistically compressed
items while they sit in short-term memory; long-term residency always
uses the base strength).

Retention drives a three-way update rule with thresholds theta2 < theta1:

    R >= theta1          -> keep in short-term memory (STM)
    theta2 <= R < theta1 -> transfer to long-term memory (LTM)
    R < theta2           -> discard (terminal)

Capacity is counted in items. STM overflow demotes the lowest-retention
resident (the STM branch is unavailable to it, so it lands in LTM or is
discarded); LTM overflow evicts the lowest-strength resident, which is
exactly the marginal rule of the capacity-constrained selection problem
solved by :func:`select_retained` / :func:`lagrange_threshold`.

All operations are single-writer: they mutate the given state in place
and return it. Snapshots round-trip byte-for-byte through
:func:`dumps_state` / :func:`loads_state`.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import combinations
from typing import Callable, Sequence

from sage.lineio import escape as _escape, unescape as _unescape

__all__ = [
    "Location",
    "InformationItem",
    "MemoryConfig",
    "MemoryState",
    "compute_entropy",
    "forgetting_factor",
    "strength",
    "effective_strength",
    "retention",
    "retention_branch",
    "optimize_item",
    "make_item",
    "update_memory",
    "tick",
    "select_retained",
    "lagrange_threshold",
    "brute_force_select",
    "recall",
    "dumps_state",
    "loads_state",
    "save_state",
    "load_state",
]

# Exhaustive-search guard for the selection oracle.
BRUTE_FORCE_MAX_ITEMS = 20

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


class Location(str, Enum):
    STM = "STM"
    LTM = "LTM"
    DISCARDED = "DISCARDED"


@dataclass
class InformationItem:
    """One unit of memory content.

    ``strength_multiplier`` is 1 unless the item has been through
    linguistic compression (``optimized``), in which case it is the
    boost applied while the item is STM-resident.
    """

    id: str
    text: str
    created_step: int
    last_access_step: int
    entropy_bits: float
    optimized: bool = False
    strength_multiplier: float = 1.0
    location: Location = Location.STM

    def __post_init__(self) -> None:
        if self.entropy_bits < 0:
            raise ValueError(f"entropy_bits must be >= 0, got {self.entropy_bits}")
        if self.created_step < 0:
            raise ValueError("created_step must be >= 0")
        if self.last_access_step < self.created_step:
            raise ValueError("last_access_step must be >= created_step")
        if self.strength_multiplier < 1.0:
            raise ValueError("strength_multiplier must be >= 1")
        if not self.optimized and self.strength_multiplier != 1.0:
            raise ValueError("unoptimized items must have strength_multiplier == 1")


@dataclass
class MemoryConfig:
    """Thresholds, capacities and decay scale for one memory state."""

    theta1: float = 0.7
    theta2: float = 0.3
    stm_capacity: int = 16
    ltm_capacity: int = 256
    gamma_default: float = 1.5
    decay_base: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 < self.theta1 <= 1.0):
            raise ValueError(f"theta1 must be in (0, 1], got {self.theta1}")
        if not (0.0 <= self.theta2 < 1.0):
            raise ValueError(f"theta2 must be in [0, 1), got {self.theta2}")
        if self.theta2 >= self.theta1:
            raise ValueError(
                f"theta2 ({self.theta2}) must be strictly below theta1 ({self.theta1})"
            )
        if self.stm_capacity < 1 or self.ltm_capacity < 1:
            raise ValueError("capacities must be positive")
        if self.gamma_default < 1.0:
            raise ValueError("gamma_default must be >= 1")
        if self.decay_base <= 0.0:
            raise ValueError("decay_base must be > 0")


@dataclass
class MemoryState:
    """STM and LTM pools plus the discrete step clock.

    ``discarded`` is kept so the terminality invariant (a discarded id
    never re-enters a pool) survives serialization round-trips.
    """

    config: MemoryConfig = field(default_factory=MemoryConfig)
    stm: list[InformationItem] = field(default_factory=list)
    ltm: list[InformationItem] = field(default_factory=list)
    discarded: list[InformationItem] = field(default_factory=list)
    current_step: int = 0

    def resident_items(self) -> list[InformationItem]:
        return list(self.stm) + list(self.ltm)

    def find(self, item_id: str) -> InformationItem | None:
        for item in self.stm:
            if item.id == item_id:
                return item
        for item in self.ltm:
            if item.id == item_id:
                return item
        return None

    def is_discarded(self, item_id: str) -> bool:
        return any(item.id == item_id for item in self.discarded)


def compute_entropy(text: str) -> float:
    """Shannon entropy in bits of the word-frequency distribution.

    Tokens are lowercased whitespace-separated words; empty text gives 0.
    """
    tokens = text.lower().split()
    if not tokens:
        return 0.0
    counts = Counter(tokens)
    total = len(tokens)
    h = 0.0
    for count in counts.values():
        p = count / total
        h -= p * math.log2(p)
    return max(h, 0.0)


def forgetting_factor(age_steps: int, config: MemoryConfig) -> float:
    """f(age) = 1 + ln(1 + age / decay_base); f(0) = 1, strictly increasing."""
    if age_steps < 0:
        raise ValueError("age_steps must be >= 0")
    return 1.0 + math.log(1.0 + age_steps / config.decay_base)


def strength(
    item: InformationItem, now: int, config: MemoryConfig | None = None
) -> float:
    """Retention strength m * H / f(age), age = steps since last access.

    Accessing an item elsewhere (rehearsal) resets its last-access step
    and therefore raises the strength used in future evaluations.
    """
    config = config or MemoryConfig()
    if now < item.last_access_step:
        raise ValueError(
            f"now ({now}) precedes last_access_step ({item.last_access_step})"
        )
    age = now - item.last_access_step
    return item.strength_multiplier * item.entropy_bits / forgetting_factor(age, config)


def effective_strength(
    item: InformationItem, now: int, config: MemoryConfig | None = None
) -> float:
    """Strength honoring residence: LTM items never get the multiplier."""
    s = strength(item, now, config)
    if item.location is Location.LTM and item.strength_multiplier != 1.0:
        return s / item.strength_multiplier
    return s


def retention(
    item: InformationItem,
    tau: float,
    now: int,
    config: MemoryConfig | None = None,
) -> float:
    """Retention rate exp(-tau / S_eff) in (0, 1].

    S_eff honors residence (see :func:`effective_strength`). Zero
    strength uses the limit convention: 1 at tau = 0, else 0.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    s_eff = effective_strength(item, now, config)
    if s_eff <= 0.0:
        return 1.0 if tau == 0 else 0.0
    return math.exp(-tau / s_eff)


def retention_branch(r: float, theta1: float, theta2: float) -> Location:
    """The three-way update rule; exactly one branch fires for any R.

    Boundaries are inclusive on the upper rule: R = theta1 stays in STM,
    R = theta2 transfers to LTM.
    """
    if theta2 >= theta1:
        raise ValueError(f"theta2 ({theta2}) must be strictly below theta1 ({theta1})")
    if r >= theta1:
        return Location.STM
    if r >= theta2:
        return Location.LTM
    return Location.DISCARDED


def make_item(item_id: str, text: str, step: int) -> InformationItem:
    """Build a fresh unoptimized item with entropy computed from the text."""
    return InformationItem(
        id=item_id,
        text=text,
        created_step=step,
        last_access_step=step,
        entropy_bits=compute_entropy(text),
    )


def optimize_item(
    item: InformationItem,
    gamma: float = 1.5,
    backend: Callable[[str], str] | None = None,
) -> InformationItem:
    """Linguistic compression: returns a boosted copy with condensed text.

    With a backend (any text -> text callable, e.g. a summarization
    completion) the backend's output is used; on backend failure, or
    without one, the deterministic fallback keeps the highest-entropy
    sentences (original order) while their combined length stays within
    half the original text.
    """
    if item.location is Location.DISCARDED:
        raise ValueError("cannot optimize a discarded item")
    if gamma < 1.0:
        raise ValueError("gamma must be >= 1")
    new_text = None
    if backend is not None:
        try:
            candidate = backend(item.text)
            if isinstance(candidate, str) and candidate.strip():
                new_text = candidate
        except Exception:
            new_text = None
    if new_text is None:
        new_text = _compress_text(item.text)
    return replace(
        item,
        text=new_text,
        entropy_bits=item.entropy_bits,
        optimized=True,
        strength_multiplier=gamma,
    )


def _compress_text(text: str) -> str:
    sentences = [s for s in _SENTENCE_SPLIT.split(text.strip()) if s]
    if len(sentences) <= 1:
        return text
    budget = len(text) / 2
    ranked = sorted(
        range(len(sentences)),
        key=lambda i: (-compute_entropy(sentences[i]), i),
    )
    kept: set[int] = {ranked[0]}  # never compress to nothing
    total = len(sentences[ranked[0]])
    for i in ranked[1:]:
        if total + len(sentences[i]) > budget:
            continue
        kept.add(i)
        total += len(sentences[i])
    return " ".join(sentences[i] for i in sorted(kept))


def _insertion_retention(
    item: InformationItem, tau: float, now: int, config: MemoryConfig
) -> float:
    # Insertion is evaluated as if STM-resident, so a compressed item's
    # boosted strength decides its placement.
    probe = replace(item, location=Location.STM)
    return retention(probe, tau, now, config)


def update_memory(state: MemoryState, item: InformationItem, tau: float) -> MemoryState:
    """Place, transfer or discard one item by its retention rate.

    A duplicate id replaces the resident item (rehearsal: the last
    access moves to the current step, the original creation step is
    kept). A previously discarded id is terminal and the call is a
    no-op. Overflow handling cascades as described in the module
    docstring.
    """
    config = state.config
    if state.is_discarded(item.id):
        return state

    existing = state.find(item.id)
    if existing is not None:
        _remove(state, existing.id)
        item = replace(
            item,
            created_step=existing.created_step,
            last_access_step=state.current_step,
        )

    r = _insertion_retention(item, tau, state.current_step, config)
    target = retention_branch(r, config.theta1, config.theta2)
    _place(state, item, target)
    _enforce_capacities(state)
    return state


def tick(state: MemoryState) -> MemoryState:
    """Advance the clock one step and sweep both pools.

    During a sweep items only move down (STM -> LTM -> discarded); an
    LTM item whose retention climbs back above theta1 stays in LTM.
    """
    state.current_step += 1
    now = state.current_step
    config = state.config
    ltm_before = list(state.ltm)  # items transferred below are not re-swept

    for item in list(state.stm):
        tau = now - item.last_access_step
        r = retention(item, tau, now, config)
        target = retention_branch(r, config.theta1, config.theta2)
        if target is not Location.STM:
            _remove(state, item.id)
            _place(state, item, target)

    for item in ltm_before:
        tau = now - item.last_access_step
        r = retention(item, tau, now, config)
        if retention_branch(r, config.theta1, config.theta2) is Location.DISCARDED:
            _remove(state, item.id)
            _place(state, item, Location.DISCARDED)

    _enforce_capacities(state)
    return state


def _place(state: MemoryState, item: InformationItem, where: Location) -> None:
    item.location = where
    if where is Location.STM:
        state.stm.append(item)
    elif where is Location.LTM:
        state.ltm.append(item)
    else:
        state.discarded.append(item)


def _remove(state: MemoryState, item_id: str) -> None:
    state.stm = [i for i in state.stm if i.id != item_id]
    state.ltm = [i for i in state.ltm if i.id != item_id]


def _enforce_capacities(state: MemoryState) -> None:
    config = state.config
    now = state.current_step
    while len(state.stm) > config.stm_capacity:
        victim = min(
            state.stm,
            key=lambda i: (
                retention(i, now - i.last_access_step, now, config),
                i.created_step,
                i.id,
            ),
        )
        _remove(state, victim.id)
        r = retention(victim, now - victim.last_access_step, now, config)
        # STM is full, so the top branch is unavailable to the victim.
        if r >= config.theta2:
            _place(state, victim, Location.LTM)
        else:
            _place(state, victim, Location.DISCARDED)
    while len(state.ltm) > config.ltm_capacity:
        victim = min(
            state.ltm,
            key=lambda i: (effective_strength(i, now, config), i.created_step, i.id),
        )
        _remove(state, victim.id)
        _place(state, victim, Location.DISCARDED)


def _selection_key(item: InformationItem, now: int, config: MemoryConfig):
    # Higher strength first, then newer creation, then smaller id.
    return (-strength(item, now, config), -item.created_step, item.id)


def select_retained(
    items: Sequence[InformationItem],
    capacity: int,
    now: int,
    config: MemoryConfig | None = None,
) -> list[InformationItem]:
    """Greedy top-C subset by strength (optimal for unit-weight items)."""
    if capacity < 1:
        raise ValueError("capacity must be positive")
    config = config or MemoryConfig()
    ranked = sorted(items, key=lambda i: _selection_key(i, now, config))
    return ranked[:capacity]


def lagrange_threshold(
    items: Sequence[InformationItem],
    capacity: int,
    now: int,
    config: MemoryConfig | None = None,
) -> float:
    """The strength cutoff: the capacity-th largest strength.

    Items at or above the cutoff, truncated in selection order, are
    exactly the greedy selection.
    """
    if not items:
        raise ValueError("items must be non-empty")
    if capacity < 1:
        raise ValueError("capacity must be positive")
    config = config or MemoryConfig()
    strengths = sorted((strength(i, now, config) for i in items), reverse=True)
    return strengths[min(capacity, len(strengths)) - 1]


def brute_force_select(
    items: Sequence[InformationItem],
    capacity: int,
    now: int,
    config: MemoryConfig | None = None,
) -> list[InformationItem]:
    """Exhaustive selection oracle; refuses more than 20 items.

    Ties on total strength prefer the larger subset, then the
    lexicographically first subset in selection-key order, which is the
    same tie-break :func:`select_retained` realizes greedily.
    """
    if len(items) > BRUTE_FORCE_MAX_ITEMS:
        raise ValueError(
            f"brute force limited to {BRUTE_FORCE_MAX_ITEMS} items, got {len(items)}"
        )
    if capacity < 1:
        raise ValueError("capacity must be positive")
    config = config or MemoryConfig()
    # Pre-sorting by selection key makes every combination come out
    # already in tie-break order.
    ranked = sorted(items, key=lambda i: _selection_key(i, now, config))
    keys = [_selection_key(i, now, config) for i in ranked]
    strengths = [strength(i, now, config) for i in ranked]
    best: tuple | None = None
    best_subset: tuple[int, ...] = ()
    for size in range(0, min(capacity, len(ranked)) + 1):
        for combo in combinations(range(len(ranked)), size):
            total = sum(strengths[j] for j in combo)
            cand = (-total, -size, tuple(keys[j] for j in combo))
            if best is None or cand < best:
                best = cand
                best_subset = combo
    return [ranked[j] for j in best_subset]


def _token_counts(text: str) -> Counter:
    return Counter(text.lower().split())


def _cosine(a: Counter, b: Counter) -> float:
    if not a or not b:
        return 0.0
    dot = sum(count * b[token] for token, count in a.items())
    if dot == 0:
        return 0.0
    norm_a = math.sqrt(sum(c * c for c in a.values()))
    norm_b = math.sqrt(sum(c * c for c in b.values()))
    return dot / (norm_a * norm_b)


def recall(state: MemoryState, query: str, k: int) -> list[InformationItem]:
    """Top-k resident items by token-count cosine similarity to the query.

    Zero-similarity items are dropped; ties break by higher strength,
    then smaller id. Returned items are rehearsed (last access reset to
    the current step).
    """
    if k < 1:
        raise ValueError("k must be positive")
    query_counts = _token_counts(query)
    now = state.current_step
    config = state.config
    scored = []
    for item in state.resident_items():
        sim = _cosine(query_counts, _token_counts(item.text))
        if sim > 0.0:
            scored.append((-sim, -effective_strength(item, now, config), item.id, item))
    scored.sort(key=lambda t: t[:3])
    hits = [entry[3] for entry in scored[:k]]
    for item in hits:
        item.last_access_step = now
    return hits


# -- serialization ------------------------------------------------------------
#
# memstate/v1 is line-oriented: a header with the clock and config, then
# one item per line (id, location, created, last_access, entropy,
# optimized flag, multiplier, escaped text), STM then LTM then discarded.

_FORMAT = "memstate/v1"


def dumps_state(state: MemoryState) -> str:
    config = state.config
    header = "\t".join(
        [
            _FORMAT,
            f"step={state.current_step}",
            f"theta1={config.theta1!r}",
            f"theta2={config.theta2!r}",
            f"stm_capacity={config.stm_capacity}",
            f"ltm_capacity={config.ltm_capacity}",
            f"gamma={config.gamma_default!r}",
            f"decay_base={config.decay_base!r}",
        ]
    )
    lines = [header]
    for item in list(state.stm) + list(state.ltm) + list(state.discarded):
        lines.append(
            "\t".join(
                [
                    _escape(item.id),
                    item.location.value,
                    str(item.created_step),
                    str(item.last_access_step),
                    repr(item.entropy_bits),
                    "1" if item.optimized else "0",
                    repr(item.strength_multiplier),
                    _escape(item.text),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def loads_state(payload: str) -> MemoryState:
    lines = [line for line in payload.split("\n") if line]
    if not lines or not lines[0].startswith(_FORMAT):
        raise ValueError(f"not a {_FORMAT} snapshot")
    head: dict[str, str] = {}
    for part in lines[0].split("\t")[1:]:
        key, _, value = part.partition("=")
        head[key] = value
    config = MemoryConfig(
        theta1=float(head["theta1"]),
        theta2=float(head["theta2"]),
        stm_capacity=int(head["stm_capacity"]),
        ltm_capacity=int(head["ltm_capacity"]),
        gamma_default=float(head["gamma"]),
        decay_base=float(head["decay_base"]),
    )
    state = MemoryState(config=config, current_step=int(head["step"]))
    for line in lines[1:]:
        fields = line.split("\t")
        if len(fields) != 8:
            raise ValueError(f"malformed item line: {line!r}")
        item = InformationItem(
            id=_unescape(fields[0]),
            text=_unescape(fields[7]),
            created_step=int(fields[2]),
            last_access_step=int(fields[3]),
            entropy_bits=float(fields[4]),
            optimized=fields[5] == "1",
            strength_multiplier=float(fields[6]),
            location=Location(fields[1]),
        )
        if item.location is Location.STM:
            state.stm.append(item)
        elif item.location is Location.LTM:
            state.ltm.append(item)
        else:
            state.discarded.append(item)
    return state


def save_state(state: MemoryState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_state(state))


def load_state(path) -> MemoryState:
    with open(path, encoding="utf-8") as fh:
        return loads_state(fh.read())
