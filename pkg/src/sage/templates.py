"""Versioned prompt templates for the three roles.

Substitution placeholders: {description}, {instance}, {constraints},
{feedback}, {reflections}, {memory} (assistant), plus {output} on the
checker side. The feedback/reflections/memory values carry their own
section headers and collapse to nothing when empty, so a first-round
prompt contains no critique block at all. Bump the version string when
editing so traces stay attributable.
"""

PROMPT_VERSION = "prompts/v1"
REFLECT_VERSION = "reflect/v1"

USER_TEMPLATE = """\
[task]
{description}

[instance]
{instance}

[constraints]
{constraints}
"""

ASSISTANT_TEMPLATE = """\
You are the assistant. Solve the task below and reply with the answer only.

[task]
{description}

[instance]
{instance}

[constraints]
{constraints}
{feedback}{reflections}{memory}"""

CHECKER_TEMPLATE = """\
You are the checker. The verdict has already been decided by comparing the
output against the reference; write a short critique that would help the
assistant improve.

[task]
{description}

[instance]
{instance}

[assistant output]
{output}
"""

REFLECT_PREAMBLE = (
    "You will be given the history of a past experience where you were given "
    "a task and failed to complete it. Reflect on the strategy and actions "
    "taken. Devise a concise, new plan of action that accounts for your "
    "previous mistakes."
)
