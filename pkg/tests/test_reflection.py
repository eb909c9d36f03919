"""Reflection derivation, storage into LTM, and context rendering."""

import pytest

from sage.backend import ScriptedBackend, ScriptEntry
from sage.memory import InformationItem, Location, MemoryConfig, MemoryState, tick
from sage.reflection import (
    REFLECTION_ID_PREFIX,
    ReflectionRecord,
    build_reflection_prompt,
    fallback_reflection_text,
    reflect,
    reflection_item_id,
    render_reflection_context,
    store_reflection,
)
from sage.templates import REFLECT_PREAMBLE


class ExplodingBackend:
    def complete(self, request, iteration):
        raise RuntimeError("backend down")


def scripted(text):
    return ScriptedBackend([ScriptEntry("REFLECTOR", "*", text)])


def record(text="watch the quoting rules", episode="ep1", step=3):
    return ReflectionRecord(
        episode_id=episode,
        step=step,
        text=text,
        source_output_ids=["o1"],
        source_rewards=[0.0],
    )


# -- reflect ---------------------------------------------------------------------


def test_reflect_scripted_passthrough():
    rec = reflect([("o1", "bad sql")], [0.2], scripted("avoid invalid SQL quoting"))
    assert rec.text == "avoid invalid SQL quoting"
    assert not rec.degraded
    assert rec.source_output_ids == ["o1"]


def test_reflect_mismatched_lengths():
    with pytest.raises(ValueError):
        reflect([("o1", "x"), ("o2", "y")], [0.1], scripted("irrelevant"))


def test_reflect_empty_trajectory():
    with pytest.raises(ValueError):
        reflect([], [], scripted("irrelevant"))


def test_reflect_backend_failure_uses_fallback():
    outputs = [("o1", "a"), ("o2", "b"), ("o3", "c")]
    rec = reflect(outputs, [0.0, 0.0, 1.0], ExplodingBackend())
    assert rec.text == "2 failures before success; last failure at iteration 2"
    assert rec.degraded


def test_fallback_text_without_success():
    assert (
        fallback_reflection_text([0.0, 0.5])
        == "2 failures without success; last failure at iteration 2"
    )


def test_reflection_prompt_carries_preamble_and_trajectory():
    prompt = build_reflection_prompt([("o1", "first try")], [0.25])
    assert prompt.startswith(REFLECT_PREAMBLE)
    assert "o1 (reward 0.25): first try" in prompt


def test_record_validation():
    with pytest.raises(ValueError):
        ReflectionRecord("e", 0, "", ["o1"], [0.0])
    with pytest.raises(ValueError):
        ReflectionRecord("e", 0, "text", ["o1"], [1.5])


# -- store_reflection -------------------------------------------------------------


def test_store_into_empty_ltm():
    state = MemoryState()
    store_reflection(state, record())
    assert len(state.ltm) == 1
    assert state.ltm[0].id.startswith(REFLECTION_ID_PREFIX)
    assert not state.stm  # never touches STM


def test_store_same_record_twice_rehearses():
    state = MemoryState()
    rec = record()
    store_reflection(state, rec)
    tick(state)
    store_reflection(state, rec)
    assert len(state.ltm) == 1
    assert state.ltm[0].last_access_step == state.current_step


def test_store_eviction_at_capacity():
    # two strong residents, capacity two: the weaker newcomer is the
    # lowest-strength member after the union and gets evicted
    state = MemoryState(config=MemoryConfig(ltm_capacity=2))
    for n in range(2):
        state.ltm.append(
            InformationItem(
                id=f"strong{n}",
                text="dense content",
                created_step=0,
                last_access_step=0,
                entropy_bits=5.0,
                location=Location.LTM,
            )
        )
    weak = record(text="x y")  # 1 bit, weakest of the three
    store_reflection(state, weak)
    assert {i.id for i in state.ltm} == {"strong0", "strong1"}
    assert state.is_discarded(reflection_item_id(weak))


def test_store_reflection_count_never_decreases_within_episode():
    state = MemoryState()
    counts = []
    for step in range(6):
        store_reflection(state, record(text=f"lesson number {step} learned", step=step))
        counts.append(sum(1 for i in state.ltm if i.id.startswith(REFLECTION_ID_PREFIX)))
        tick(state)
    assert counts == sorted(counts)


# -- render_reflection_context -----------------------------------------------------


def test_render_empty_ltm():
    assert render_reflection_context(MemoryState(), 100) == ""


def test_render_single_fits_budget():
    state = MemoryState()
    text = "k" * 50
    store_reflection(state, record(text=text))
    assert render_reflection_context(state, 100) == text


def test_render_budget_keeps_top_strength_only():
    state = MemoryState()
    texts = {
        "refl:a:0": "low low low low",            # repeated tokens, weak
        "refl:b:0": "many distinct tokens here",  # strongest
        "refl:c:0": "mid mid value words",
    }
    for item_id, text in texts.items():
        state.ltm.append(
            InformationItem(
                id=item_id,
                text=text,
                created_step=0,
                last_access_step=0,
                entropy_bits={"refl:a:0": 0.5, "refl:b:0": 3.0, "refl:c:0": 1.5}[item_id],
                location=Location.LTM,
            )
        )
    rendered = render_reflection_context(state, budget_chars=len(texts["refl:b:0"]) + 2)
    assert rendered == texts["refl:b:0"]


def test_render_respects_budget_always():
    state = MemoryState()
    for n in range(5):
        store_reflection(state, record(text=f"observation {n} about the task", step=n))
    for budget in range(1, 200, 7):
        assert len(render_reflection_context(state, budget)) <= budget


def test_render_deterministic():
    state = MemoryState()
    for n in range(4):
        store_reflection(state, record(text=f"note {n} with several words", step=n))
    a = render_reflection_context(state, 80)
    b = render_reflection_context(state, 80)
    assert a == b
