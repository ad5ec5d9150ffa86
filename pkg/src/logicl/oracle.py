"""Prompt assembly, LLM querying, and anomaly-probability parsing.

The remote client speaks OpenAI-compatible chat completions. The mock client
is a pure function of (prompt, spec) used to exercise the delta matrix,
training, and inference pipelines offline; its keyword/concept rule set is a
test-fixture asset, not part of the product contract.
"""

import hashlib
import json
import math
import os
import re
import time
from dataclasses import dataclass, field

from .corpus import LogSequence
from .embedding import MESSAGE_SEPARATOR, AUTH_TOKEN_ENV
from .errors import ConfigError, OracleParseError, TransportError

INSTRUCTION_PLAIN = (
    "You are a reliability engineer inspecting system log sequences. "
    "Decide whether the final log sequence is anomalous. "
    'Respond with a single JSON object of the form {"probability": p} '
    "where p is a number between 0 and 1 giving the probability that the "
    "sequence is anomalous."
)

INSTRUCTION_COT = (
    "You are a reliability engineer inspecting system log sequences. "
    "Decide whether the final log sequence is anomalous. "
    "Reason step by step about the diagnostic evidence, then respond with a "
    'single JSON object of the form {"probability": p, "reasoning": r} '
    "where p is a number between 0 and 1 giving the probability that the "
    "sequence is anomalous and r summarizes your diagnosis."
)

LABEL_WORDS = {0: "normal", 1: "anomalous"}


@dataclass
class Prompt:
    """Instruction, ordered labeled demonstrations, and the query sequence."""

    instruction: str
    demonstrations: list[tuple[LogSequence, int]]
    query: LogSequence
    cot_enabled: bool = False


@dataclass
class OracleResponse:
    probability: float
    reasoning: str | None
    raw: str


@dataclass
class RemoteOracleParams:
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.0
    max_retries: int = 3
    timeout: float = 60.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")


@dataclass
class MockOracleParams:
    """Deterministic stand-in rule set.

    probability = sigmoid(bias + sum(weight * count of keyword in query text)
                          + demo adjustment)

    The adjustment nudges toward the majority label of the demonstrations that
    share a concept with the query. A concept maps query-side keywords to
    demo-side keywords; with an empty concept table, sharing falls back to the
    weighted keywords appearing in both texts.
    """

    bias: float = 0.0
    keyword_weights: dict = field(default_factory=dict)
    concepts: dict = field(default_factory=dict)
    demo_gain: float = 2.0


@dataclass
class OracleSpec:
    kind: str = "mock"
    mock: MockOracleParams = field(default_factory=MockOracleParams)
    remote: RemoteOracleParams = field(default_factory=RemoteOracleParams)

    def __post_init__(self):
        if self.kind not in ("mock", "remote"):
            raise ConfigError(f"unknown oracle kind {self.kind!r}")
        if self.kind == "remote" and not self.remote.endpoint:
            raise ConfigError("remote oracle needs an endpoint")


def build_prompt(demos, query: LogSequence, cot: bool = False) -> Prompt:
    """Deterministic prompt: demos in given order, each with its label word."""
    return Prompt(
        instruction=INSTRUCTION_COT if cot else INSTRUCTION_PLAIN,
        demonstrations=list(demos),
        query=query,
        cot_enabled=cot,
    )


def render_prompt(prompt: Prompt) -> str:
    """Serialize a prompt to the exact text sent to the LLM."""
    parts = [prompt.instruction]
    for seq, label in prompt.demonstrations:
        parts.append(
            f"Log sequence:\n{seq.joined_text(MESSAGE_SEPARATOR)}\nLabel: {LABEL_WORDS[label]}"
        )
    parts.append(f"Log sequence:\n{prompt.query.joined_text(MESSAGE_SEPARATOR)}\nLabel: ?")
    return "\n\n".join(parts)


_FALLBACK_PROB = re.compile(r"probability[^0-9]*?(\d+(?:\.\d+)?|\.\d+)", re.IGNORECASE)


def _first_json_object(text: str):
    """Yield every decodable JSON object embedded in the text, left to right."""
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            yield obj
        pos = text.find("{", pos + 1)


def parse_response(text: str) -> OracleResponse:
    """Extract an anomaly probability from LLM output.

    Primary path: the first JSON object carrying a numeric "probability".
    Fallback: the first decimal following the token "probability".
    Values outside [0, 1] are an error, never silently clamped.
    """
    for obj in _first_json_object(text):
        prob = obj.get("probability")
        if isinstance(prob, (int, float)) and not isinstance(prob, bool):
            prob = float(prob)
            if not 0.0 <= prob <= 1.0:
                raise OracleParseError(f"probability {prob} outside [0, 1]", raw_text=text)
            reasoning = obj.get("reasoning")
            return OracleResponse(
                probability=prob,
                reasoning=str(reasoning) if reasoning is not None else None,
                raw=text,
            )
    m = _FALLBACK_PROB.search(text)
    if m:
        prob = float(m.group(1))
        if not 0.0 <= prob <= 1.0:
            raise OracleParseError(f"probability {prob} outside [0, 1]", raw_text=text)
        return OracleResponse(probability=prob, reasoning=None, raw=text)
    raise OracleParseError("no parsable probability in response", raw_text=text)


def format_response(resp: OracleResponse) -> str:
    """Canonical JSON shape; parse_response(format_response(r)) round-trips."""
    payload = {"probability": resp.probability}
    if resp.reasoning is not None:
        payload["reasoning"] = resp.reasoning
    return json.dumps(payload)


def _sigmoid(z: float) -> float:
    z = max(-60.0, min(60.0, z))
    return 1.0 / (1.0 + math.exp(-z))


def _concepts_in(text: str, params: MockOracleParams, side: str) -> set[str]:
    if params.concepts:
        return {
            name
            for name, sides in params.concepts.items()
            if any(kw in text for kw in sides.get(side, ()))
        }
    # Fallback: each weighted keyword is its own concept.
    return {kw for kw in params.keyword_weights if kw in text}


def _mock_answer(prompt: Prompt, params: MockOracleParams) -> OracleResponse:
    query_text = prompt.query.joined_text(MESSAGE_SEPARATOR)
    z = params.bias
    for kw, weight in params.keyword_weights.items():
        z += weight * query_text.count(kw)

    query_concepts = _concepts_in(query_text, params, "query")
    votes = {0: 0, 1: 0}
    for seq, label in prompt.demonstrations:
        demo_concepts = _concepts_in(seq.joined_text(MESSAGE_SEPARATOR), params, "demo")
        if demo_concepts & query_concepts:
            votes[label] += 1
    if votes[1] > votes[0]:
        z += params.demo_gain
    elif votes[0] > votes[1]:
        z -= params.demo_gain

    probability = min(1.0, max(0.0, _sigmoid(z)))
    reasoning = None
    if prompt.cot_enabled:
        reasoning = (
            f"matched concepts {sorted(query_concepts)}; "
            f"relevant demonstrations: {votes[0]} normal, {votes[1]} anomalous"
        )
    resp = OracleResponse(probability=probability, reasoning=reasoning, raw="")
    resp.raw = format_response(resp)
    return resp


def _remote_answer(prompt: Prompt, params: RemoteOracleParams) -> OracleResponse:
    import requests

    url = params.endpoint.rstrip("/") + "/v1/chat/completions"
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(AUTH_TOKEN_ENV, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = {
        "model": params.model,
        "messages": [{"role": "user", "content": render_prompt(prompt)}],
        "temperature": params.temperature,
    }
    last_exc = None
    for attempt in range(params.max_retries + 1):
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=params.timeout)
            resp.raise_for_status()
            content = resp.json()["choices"][0]["message"]["content"]
            return parse_response(content)
        except OracleParseError:
            raise
        except Exception as exc:
            last_exc = exc
            if attempt < params.max_retries:
                time.sleep(0.5 * 2**attempt)
    raise TransportError(
        f"chat completion failed after {params.max_retries + 1} attempts: {last_exc}"
    ) from last_exc


def query_oracle(prompt: Prompt, spec: OracleSpec) -> OracleResponse:
    """Anomaly-probability estimate for the prompt's query sequence."""
    if spec.kind == "mock":
        return _mock_answer(prompt, spec.mock)
    return _remote_answer(prompt, spec.remote)


def oracle_fingerprint(spec: OracleSpec) -> str:
    if spec.kind == "mock":
        blob = json.dumps(
            {
                "kind": "mock",
                "bias": spec.mock.bias,
                "keyword_weights": spec.mock.keyword_weights,
                "concepts": spec.mock.concepts,
                "demo_gain": spec.mock.demo_gain,
            },
            sort_keys=True,
        )
    else:
        blob = json.dumps(
            {
                "kind": "remote",
                "endpoint": spec.remote.endpoint,
                "model": spec.remote.model,
                "temperature": spec.remote.temperature,
            },
            sort_keys=True,
        )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
