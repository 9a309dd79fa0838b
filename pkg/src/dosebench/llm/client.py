"""Chat-completions client: request, parse, clamp, retry, fallback, audit."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import requests

from .prompts import (ParseStatus, PromptKind, build_prompt, clamp_action,
                      parse_cot, parse_zero_shot, serialize_observation)

ENV_BASE_URL = "DOSEBENCH_LLM_BASE_URL"
ENV_API_KEY = "DOSEBENCH_LLM_API_KEY"

_COT_KINDS = (PromptKind.PRIOR_COT, PromptKind.PRIOR_MEAL_COT)


@dataclass
class LlmConfig:
    base_url: str = ""
    model_name: str = "qwen2.5-7b-instruct"
    temperature: float = 0.7
    max_tokens: int | None = None    # None -> 16 zero-shot, 1024 CoT
    request_timeout: float = 30.0
    max_retries: int = 2
    fallback_dose: float = 0.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if not (0 <= self.fallback_dose <= 9):
            raise ValueError("fallback_dose must lie in [0, 9]")

    def resolved_base_url(self) -> str:
        url = self.base_url or os.environ.get(ENV_BASE_URL, "")
        if not url:
            raise ValueError(f"no base URL configured (set {ENV_BASE_URL})")
        return url.rstrip("/")

    def tokens_for(self, kind: PromptKind) -> int:
        if self.max_tokens is not None:
            return self.max_tokens
        return 1024 if PromptKind(kind) in _COT_KINDS else 16


@dataclass
class ChatExchange:
    messages: list
    raw_response: str | None
    parsed_dose: float | None
    parse_status: ParseStatus
    attempts: int = 1

    def to_json(self) -> str:
        return json.dumps({
            "messages": self.messages,
            "raw_response": self.raw_response,
            "parsed_dose": self.parsed_dose,
            "parse_status": self.parse_status.value,
            "attempts": self.attempts,
        }, sort_keys=True)


def http_transport(messages, config: LlmConfig, kind: PromptKind) -> str:
    """POST to the chat-completions endpoint; returns the reply content."""
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(ENV_API_KEY)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = {
        "model": config.model_name,
        "messages": messages,
        "temperature": config.temperature,
        "max_tokens": config.tokens_for(kind),
    }
    resp = requests.post(f"{config.resolved_base_url()}/v1/chat/completions",
                         json=body, headers=headers,
                         timeout=config.request_timeout)
    resp.raise_for_status()
    return resp.json()["choices"][0]["message"]["content"]


def llm_act(history, kind: PromptKind, config: LlmConfig,
            transport=None) -> tuple[float, ChatExchange]:
    """Serialize -> prompt -> request -> parse -> clamp, with retries.

    Never raises into the episode loop: transport failures and unparseable
    replies consume retries and finally resolve to the fallback dose.
    """
    kind = PromptKind(kind)
    obs_text = serialize_observation(
        history, include_meals=kind == PromptKind.PRIOR_MEAL_COT)
    messages = build_prompt(kind, obs_text)
    parse = parse_cot if kind in _COT_KINDS else parse_zero_shot
    send = transport or http_transport

    raw = None
    attempts = 0
    for attempt in range(config.max_retries + 1):
        attempts = attempt + 1
        try:
            raw = send(messages, config, kind)
        except Exception:
            continue
        dose = parse(raw)
        if dose is None:
            continue
        action, status = clamp_action(dose)
        if status is ParseStatus.UNPARSEABLE:
            continue
        return action, ChatExchange(messages=messages, raw_response=raw,
                                    parsed_dose=dose, parse_status=status,
                                    attempts=attempts)
    return config.fallback_dose, ChatExchange(
        messages=messages, raw_response=raw, parsed_dose=None,
        parse_status=ParseStatus.FALLBACK_USED, attempts=attempts)


class AuditLog:
    """JSON-lines exchange log, one exchange per line."""

    def __init__(self, path):
        self._fh = open(path, "a")

    def record(self, exchange: ChatExchange):
        self._fh.write(exchange.to_json() + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()
