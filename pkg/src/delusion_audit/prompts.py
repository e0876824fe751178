"""Prompt templates shipped as text files under ``templates/``.

Each file carries a ``# version:`` header and two sections, ``[system]`` and
``[user]``. A blank line closing the system section marks a paragraph break
between the two parts in the full prompt text; the chat messages themselves
never carry it. Placeholders (``{question}``, ``{answer}``, ``{previous_answer}``,
``{passages}``) are substituted by plain string replacement so literal
braces elsewhere in a prompt never need escaping.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .errors import ContractError

PLACEHOLDERS = ("question", "answer", "previous_answer", "passages")

BELIEF_TEMPLATES = ("logits", "p_true", "consistency", "verb_1s", "verb_2s")
HONESTY_LEVELS = (
    "can_refuse",
    "less_refuse",
    "more_refuse",
    "medium_refuse",
    "high_refuse",
    "most_refuse",
)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system_text: str
    user_template: str
    version: int = 1
    gap: bool = False

    @property
    def placeholders(self) -> frozenset[str]:
        found = re.findall(r"\{(\w+)\}", self.system_text + self.user_template)
        return frozenset(p for p in found if p in PLACEHOLDERS)

    def render(self, **values: str) -> tuple[tuple[str, str], ...]:
        missing = self.placeholders - values.keys()
        if missing:
            raise ContractError(f"template {self.name!r} needs {sorted(missing)}")
        user = self.user_template
        for key in self.placeholders:
            user = user.replace("{" + key + "}", values[key])
        return (("system", self.system_text), ("user", user))

    def render_text(self, **values: str) -> str:
        """The whole prompt as one text, system part first."""
        (_, system), (_, user) = self.render(**values)
        return system + ("\n\n" if self.gap else "\n") + user


def parse_template(name: str, text: str) -> PromptTemplate:
    version = 1
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.split("\n"):
        if current is None and line.startswith("#"):
            m = re.search(r"version:\s*(\d+)", line)
            if m:
                version = int(m.group(1))
            continue
        if line in ("[system]", "[user]"):
            current = line[1:-1]
            sections[current] = []
            continue
        if current is None:
            continue
        sections[current].append(line)
    if set(sections) != {"system", "user"}:
        raise ContractError(f"template {name!r} needs [system] and [user] sections")
    system_lines = sections["system"]
    gap = bool(system_lines) and system_lines[-1] == ""
    if gap:
        system_lines = system_lines[:-1]
    # files end with a newline, which is not part of the prompt
    user_lines = sections["user"]
    if user_lines and user_lines[-1] == "":
        user_lines = user_lines[:-1]
    return PromptTemplate(
        name, "\n".join(system_lines), "\n".join(user_lines), version, gap
    )


@lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    try:
        text = resources.files("delusion_audit").joinpath(f"templates/{name}.txt").read_text(
            encoding="utf-8"
        )
    except FileNotFoundError as exc:
        raise ContractError(f"no prompt template named {name!r}") from exc
    return parse_template(name, text)


def honesty_template(level: str) -> PromptTemplate:
    if level not in HONESTY_LEVELS:
        raise ContractError(f"unknown honesty level {level!r}")
    return load_template(f"honesty_{level}")


def format_passages(passages) -> str:
    return "\n\n".join(f"Document {i}:\n{p}" for i, p in enumerate(passages, start=1))


def dump_prompt(label: str, template: PromptTemplate, **values: str) -> str:
    """One ``--dry-run`` block: a header line, then the full prompt text."""
    return f"=== {label} ===\n{template.render_text(**values)}\n"


def parse_dump(text: str) -> dict[str, str]:
    """Inverse of concatenated :func:`dump_prompt` blocks."""
    parts = re.split(r"^=== (.+) ===\n", text, flags=re.MULTILINE)
    # parts: [preamble, label, body, label, body, ...]; each body ends in "\n"
    return {label: body[:-1] for label, body in zip(parts[1::2], parts[2::2])}
