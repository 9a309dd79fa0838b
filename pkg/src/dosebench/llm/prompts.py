"""Observation serialization, prompt assembly, and reply parsing."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from ..env import StepRecord, format_clock

_TEMPLATE_DIR = Path(__file__).parent / "templates"


class PromptKind(str, Enum):
    BASE_ZERO_SHOT = "base"
    PRIOR_ZERO_SHOT = "prior"
    PRIOR_COT = "cot"
    PRIOR_MEAL_COT = "meal-cot"


class ParseStatus(str, Enum):
    OK = "ok"
    CLAMPED = "clamped"
    UNPARSEABLE = "unparseable"
    FALLBACK_USED = "fallback_used"


# (system template, request template) per prompt kind.
_TEMPLATE_FILES = {
    PromptKind.BASE_ZERO_SHOT: ("system_base.txt", "request_zero_shot.txt"),
    PromptKind.PRIOR_ZERO_SHOT: ("system_prior.txt", "request_zero_shot.txt"),
    PromptKind.PRIOR_COT: ("system_prior.txt", "request_cot.txt"),
    PromptKind.PRIOR_MEAL_COT: ("system_prior.txt", "request_meal_cot.txt"),
}

_NUMBER_RE = re.compile(r"[-+]?\d+(?:\.\d+)?")
_ANS_RE = re.compile(r"<ans>(.*?)</ans>", re.DOTALL)
_TAIL_WINDOW = 200


def load_templates(kind: PromptKind) -> tuple[str, str]:
    system_file, request_file = _TEMPLATE_FILES[PromptKind(kind)]
    system = (_TEMPLATE_DIR / system_file).read_text().rstrip("\n")
    request = (_TEMPLATE_DIR / request_file).read_text().rstrip("\n")
    return system, request


def serialize_observation(history: list[StepRecord],
                          include_meals: bool = False) -> str:
    """One line per 15-minute step in the EHR-style text layout.

    The first line carries the "(initial measurement)" annotation. With
    include_meals, steps whose interval contained food get a trailing
    ", meal taken" clause (amount deliberately hidden).
    """
    if not history:
        raise ValueError("history must contain at least one step")
    lines = []
    for rec in history:
        day, clock = format_clock(rec.clock)
        time_part = f"Time: {clock}"
        if rec.step == 0:
            time_part += " (initial measurement)"
        line = (f"Day {day}, {time_part}, glucose: {rec.bg_sensor:.2f} mg/dL, "
                f"insulin rate: {rec.rate:.4f} unit/hour, "
                f"insulin dose: {rec.dose:.2f} unit")
        if include_meals and rec.meal_carbs > 0:
            line += ", meal taken"
        lines.append(line + ".")
    return "\n".join(lines)


def build_prompt(kind: PromptKind, obs_text: str) -> list[dict]:
    """Message list for the chat API: system text plus the request block."""
    kind = PromptKind(kind)
    system, request = load_templates(kind)
    return [
        {"role": "system", "content": system},
        {"role": "user", "content": request.format(observations=obs_text)},
    ]


def parse_zero_shot(text: str) -> float | None:
    """First numeric literal in the reply, or None if there is none."""
    match = _NUMBER_RE.search(text)
    if match is None:
        return None
    return float(match.group(0))


def parse_cot(text: str) -> float | None:
    """Dose from the last well-formed <ans> tag.

    Falls back to first-numeral extraction over the reply's tail when no tag
    parses; returns None if nothing numeric is found anywhere.
    """
    for span in reversed(_ANS_RE.findall(text)):
        inner = span.strip()
        if _NUMBER_RE.fullmatch(inner):
            return float(inner)
    return parse_zero_shot(text[-_TAIL_WINDOW:])


def clamp_action(dose: float) -> tuple[float, ParseStatus]:
    """Clamp into [0, 9] U/h; flags whether clamping changed the value."""
    import math
    if not math.isfinite(dose):
        return 0.0, ParseStatus.UNPARSEABLE
    clamped = min(max(dose, 0.0), 9.0)
    status = ParseStatus.CLAMPED if clamped != dose else ParseStatus.OK
    return clamped, status
