"""Multi-turn extraction session against one page image.

The model sees the system prompt, the (downscaled) page and the query. Each
assistant turn either calls ``image_zoom_and_ocr_tool`` (executed here, result
appended as a tool turn carrying the crop and its recognition text) or commits a
fenced JSON evidence list, which ends the session. An empty list means the page
is irrelevant.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import httpx
from PIL import Image

from . import templates
from .errors import (
    BackendMalformed,
    BackendUnavailable,
    DegenerateBox,
    InvalidBox,
    MalformedEvidence,
    MalformedToolCall,
    ModelUnavailable,
    OutOfFrame,
    TurnBudgetExhausted,
    UnscriptedInput,
)
from .geometry import NormBox
from .toolkit import (
    TOOL_NAME,
    ElementType,
    ImagePayload,
    OcrBackend,
    ToolCall,
    ToolResult,
    execute,
    fit_within,
    png_data_url,
)

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")
PAGE_REF = "page"

CORRECTION_TEMPLATE = (
    "The previous output could not be parsed ({error}). Call the tool strictly in the "
    "<tool_call> format, or output the final evidence list as a ```json block."
)
NUDGE = "Continue: call image_zoom_and_ocr_tool or output the final evidence list as a ```json block."


@dataclass(frozen=True)
class EvidenceItem:
    evidence: str
    box: NormBox

    def __post_init__(self) -> None:
        if not self.evidence.strip():
            raise ValueError("evidence text must be non-empty")

    def to_dict(self) -> dict:
        return {"evidence": self.evidence, "bbox": self.box.to_list()}


@dataclass
class AgentTurn:
    role: str
    text: str
    image_parts: list[str] = field(default_factory=list)
    parsed_tool_call: ToolCall | None = None
    parsed_evidence: list[EvidenceItem] | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.parsed_tool_call is not None and self.role != "assistant":
            raise ValueError("only assistant turns carry tool calls")

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "text": self.text,
            "image_parts": list(self.image_parts),
            "parsed_tool_call": self.parsed_tool_call.to_dict() if self.parsed_tool_call else None,
            "parsed_evidence": None
            if self.parsed_evidence is None
            else [item.to_dict() for item in self.parsed_evidence],
        }


@dataclass
class PageExtraction:
    page_id: str
    relevant: bool
    items: list[EvidenceItem]
    tool_results: list[ToolResult]
    transcript: list[AgentTurn]
    attempts_used: int = 1
    failure: str | None = None

    def __post_init__(self) -> None:
        if self.relevant != bool(self.items):
            raise ValueError("relevant must equal non-emptiness of items")

    def pred_boxes(self) -> list[NormBox]:
        return [item.box for item in self.items]

    def transcript_dict(self) -> dict:
        return {
            "page_id": self.page_id,
            "attempts_used": self.attempts_used,
            "failure": self.failure,
            "turns": [t.to_dict() for t in self.transcript],
        }


@dataclass(frozen=True)
class SessionConfig:
    max_turns: int = 8
    max_attempts: int = 3
    model_endpoint: str | None = None
    temperature: float = 1.0
    page_max_dim: int = 1024

    def __post_init__(self) -> None:
        if self.max_turns < 2:
            raise ValueError("max_turns must be at least 2")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        if self.page_max_dim < 1:
            raise ValueError("page_max_dim must be positive")


# -- parsing --------------------------------------------------------------

_THINK_RE = re.compile(r"<think>.*?</think>", re.DOTALL)
_TOOL_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)
_FENCE_RE = re.compile(r"```json[ \t]*\r?\n(.*?)```", re.DOTALL | re.IGNORECASE)

_ANGLES = {0, 90, 180, 270}
_TYPES = {t.value for t in ElementType}


def _strip_thinking(text: str) -> str:
    return _THINK_RE.sub("", text)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_bbox(raw: Any, error: type[Exception]) -> NormBox:
    if not isinstance(raw, list) or len(raw) != 4 or not all(_is_int(v) for v in raw):
        raise error(f"bbox must be a list of 4 integers, got {raw!r}")
    try:
        return NormBox(*raw)
    except InvalidBox as exc:
        raise error(str(exc)) from exc


def parse_tool_call(model_text: str) -> ToolCall | None:
    """Extract the tool call between ``<tool_call>`` delimiters.

    Returns None when no delimited block is present; raises MalformedToolCall
    when a block is present but does not satisfy the tool schema.
    """
    body = _strip_thinking(model_text)
    match = _TOOL_RE.search(body)
    if match is None:
        if "<tool_call>" in body or "</tool_call>" in body:
            raise MalformedToolCall("unterminated <tool_call> block")
        return None
    try:
        obj = json.loads(match.group(1))
    except json.JSONDecodeError as exc:
        raise MalformedToolCall(f"tool call is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedToolCall("tool call must be a JSON object")
    if obj.get("name") != TOOL_NAME:
        raise MalformedToolCall(f"unknown tool {obj.get('name')!r}")
    args = obj.get("arguments")
    if not isinstance(args, dict):
        raise MalformedToolCall("tool call arguments must be an object")
    missing = [k for k in ("label", "bbox", "angle", "type") if k not in args]
    if missing:
        raise MalformedToolCall(f"tool call missing arguments: {', '.join(missing)}")
    label = args["label"]
    if not isinstance(label, str) or not label.strip():
        raise MalformedToolCall("label must be a non-empty string")
    box = _check_bbox(args["bbox"], MalformedToolCall)
    angle = args["angle"]
    if not _is_int(angle) or angle not in _ANGLES:
        raise MalformedToolCall(f"angle must be one of 0/90/180/270, got {angle!r}")
    if args["type"] not in _TYPES:
        raise MalformedToolCall(f"type must be one of {sorted(_TYPES)}, got {args['type']!r}")
    return ToolCall.from_arguments({"label": label, "bbox": box.to_list(), "angle": angle, "type": args["type"]})


def _strip_hash_comments(src: str) -> str:
    # the output template annotates bbox with a trailing "# ..." comment; drop those outside strings
    out, in_str, escaped, skipping = [], False, False, False
    for ch in src:
        if skipping:
            if ch == "\n":
                skipping = False
                out.append(ch)
            continue
        if in_str:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch == "#":
            skipping = True
            continue
        out.append(ch)
    return "".join(out)


def parse_evidence(model_text: str) -> list[EvidenceItem] | None:
    """Extract the final fenced ``json`` evidence list.

    ``[]`` is a valid verdict (page irrelevant). Returns None when no fenced
    block exists; raises MalformedEvidence when the block breaks the schema.
    """
    blocks = _FENCE_RE.findall(_strip_thinking(model_text))
    if not blocks:
        return None
    raw = blocks[-1]
    try:
        data = json.loads(raw)
    except json.JSONDecodeError:
        try:
            data = json.loads(_strip_hash_comments(raw))
        except json.JSONDecodeError as exc:
            raise MalformedEvidence(f"evidence block is not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise MalformedEvidence("evidence block must be a JSON list")
    items = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise MalformedEvidence(f"evidence item {i} is not an object")
        text = entry.get("evidence")
        if not isinstance(text, str) or not text.strip():
            raise MalformedEvidence(f"evidence item {i} lacks a non-empty evidence string")
        items.append(EvidenceItem(text, _check_bbox(entry.get("bbox"), MalformedEvidence)))
    return items


# -- model clients --------------------------------------------------------

SessionKey = tuple[str, str]


class ModelClient(Protocol):
    def complete(self, messages: list[dict], *, temperature: float, session_key: SessionKey) -> str:
        """Return the assistant text for the next turn."""


class HttpModelClient:
    """Chat-completions style client: role-tagged messages with text and base64 image parts."""

    def __init__(
        self,
        endpoint: str,
        model: str = "agentic-ocr",
        api_key: str | None = None,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        if client is not None and api_key:
            self._client.headers.update(headers)

    def complete(self, messages: list[dict], *, temperature: float, session_key: SessionKey) -> str:
        body = {"model": self.model, "messages": messages, "temperature": temperature}
        try:
            resp = self._client.post(self.endpoint, json=body)
        except httpx.TransportError as exc:
            raise ModelUnavailable(f"model endpoint {self.endpoint} unreachable: {exc}") from exc
        if resp.status_code >= 500:
            raise ModelUnavailable(f"model endpoint returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ModelUnavailable(f"model endpoint rejected request: HTTP {resp.status_code} {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ModelUnavailable(f"unexpected model response shape: {exc}") from exc
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        return content or ""


class ScriptedModel:
    """Replays canned assistant texts, one queue per (query, page id).

    Queues persist across attempts, so a retry consumes the next reply.
    """

    def __init__(self, scripts: Mapping[SessionKey, Sequence[str]] | None = None):
        self._scripts = {tuple(k): list(v) for k, v in (scripts or {}).items()}
        self._cursor: dict[SessionKey, int] = {}
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_records(cls, records: Sequence[Mapping]) -> "ScriptedModel":
        return cls({(r["query"], r["page_id"]): r["replies"] for r in records})

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedModel":
        return cls.from_records(json.loads(Path(path).read_text(encoding="utf-8")))

    def calls_for(self, key: SessionKey) -> int:
        return self._cursor.get(key, 0)

    def complete(self, messages: list[dict], *, temperature: float, session_key: SessionKey) -> str:
        with self._lock:
            queue = self._scripts.get(session_key)
            pos = self._cursor.get(session_key, 0)
            if queue is None or pos >= len(queue):
                raise UnscriptedInput(f"no scripted reply #{pos + 1} for {session_key!r}")
            self._cursor[session_key] = pos + 1
            self.calls += 1
            return queue[pos]


# -- session --------------------------------------------------------------

class _Conversation:
    def __init__(self, query: str, page: Image.Image):
        self.turns: list[AgentTurn] = [
            AgentTurn("system", templates.agent_system_prompt()),
            AgentTurn("user", query, image_parts=[PAGE_REF]),
        ]
        self.images: dict[str, Image.Image] = {PAGE_REF: page}
        self._encoded: dict[str, str] = {}

    def add(self, turn: AgentTurn) -> AgentTurn:
        self.turns.append(turn)
        return turn

    def _data_url(self, ref: str) -> str:
        if ref not in self._encoded:
            self._encoded[ref] = png_data_url(self.images[ref])
        return self._encoded[ref]

    def messages(self) -> list[dict]:
        out = []
        for turn in self.turns:
            if not turn.image_parts:
                out.append({"role": turn.role, "content": turn.text})
                continue
            parts: list[dict] = [{"type": "image_url", "image_url": {"url": self._data_url(r)}} for r in turn.image_parts]
            if turn.text:
                parts.append({"type": "text", "text": turn.text})
            out.append({"role": turn.role, "content": parts})
        return out


def _observation(result: ToolResult) -> str:
    body: dict[str, Any] = {"name": TOOL_NAME, "label": result.call.label, "type": result.call.element_type.value}
    if isinstance(result.payload, ImagePayload):
        body["result"] = "cropped image only, no OCR"
    elif result.call.element_type is ElementType.REGION:
        body["result"] = json.loads(result.payload.render())
    else:
        body["result"] = result.payload.render()
    return json.dumps(body, ensure_ascii=False)


def _fail(exc: Exception, conv: _Conversation, tool_results: list[ToolResult]) -> Exception:
    exc.transcript = conv.turns  # type: ignore[attr-defined]
    exc.tool_results = tool_results  # type: ignore[attr-defined]
    return exc


def run_session(
    query: str,
    page_image: Image.Image,
    config: SessionConfig,
    backend: OcrBackend | None,
    model_client: ModelClient,
    page_id: str = "page",
) -> PageExtraction:
    """One extraction attempt. Failures raise with ``.transcript`` attached."""
    conv = _Conversation(query, fit_within(page_image, config.page_max_dim))
    tool_results: list[ToolResult] = []
    repaired = False
    key = (query, page_id)
    for _ in range(config.max_turns):
        try:
            text = model_client.complete(conv.messages(), temperature=config.temperature, session_key=key)
        except ModelUnavailable as exc:
            raise _fail(exc, conv, tool_results)
        turn = conv.add(AgentTurn("assistant", text))
        try:
            call = parse_tool_call(text)
            items = None if call is not None else parse_evidence(text)
        except (MalformedToolCall, MalformedEvidence) as exc:
            if repaired:
                raise _fail(exc, conv, tool_results)
            repaired = True
            conv.add(AgentTurn("user", CORRECTION_TEMPLATE.format(error=exc)))
            continue

        if call is not None:
            turn.parsed_tool_call = call
            try:
                result = execute(page_image, call, backend)
            except (DegenerateBox, OutOfFrame) as exc:
                conv.add(AgentTurn("tool", json.dumps({"name": TOOL_NAME, "error": str(exc)})))
                continue
            except (BackendUnavailable, BackendMalformed) as exc:
                raise _fail(exc, conv, tool_results)
            tool_results.append(result)
            ref = f"crop-{len(tool_results)}"
            conv.images[ref] = result.crop
            conv.add(AgentTurn("tool", _observation(result), image_parts=[ref]))
            continue

        if items is None:
            conv.add(AgentTurn("user", NUDGE))
            continue
        turn.parsed_evidence = items
        return PageExtraction(
            page_id=page_id,
            relevant=bool(items),
            items=items,
            tool_results=tool_results,
            transcript=conv.turns,
        )
    raise _fail(TurnBudgetExhausted(f"no evidence list within {config.max_turns} turns"), conv, tool_results)


_ATTEMPT_FAILURES = (TurnBudgetExhausted, MalformedToolCall, MalformedEvidence, BackendUnavailable, BackendMalformed)


def run_with_retries(
    query: str,
    page_image: Image.Image,
    config: SessionConfig,
    backend: OcrBackend | None,
    model_client: ModelClient,
    page_id: str = "page",
) -> PageExtraction:
    """Repeat sessions until one yields evidence; irrelevant only if every attempt comes back empty."""
    transport_failures = 0
    last_transcript: list[AgentTurn] = []
    last_failure: str | None = None
    for attempt in range(1, config.max_attempts + 1):
        try:
            extraction = run_session(query, page_image, config, backend, model_client, page_id)
        except ModelUnavailable as exc:
            transport_failures += 1
            last_failure = f"ModelUnavailable: {exc}"
            last_transcript = getattr(exc, "transcript", last_transcript)
            logger.warning("attempt %d for %s: %s", attempt, page_id, exc)
            continue
        except _ATTEMPT_FAILURES as exc:
            last_failure = f"{type(exc).__name__}: {exc}"
            last_transcript = getattr(exc, "transcript", last_transcript)
            logger.info("attempt %d for %s failed: %s", attempt, page_id, last_failure)
            continue
        extraction.attempts_used = attempt
        if extraction.relevant:
            return extraction
        last_transcript, last_failure = extraction.transcript, None
    if transport_failures == config.max_attempts:
        raise ModelUnavailable(f"all {config.max_attempts} attempts for {page_id} hit transport failures")
    return PageExtraction(
        page_id=page_id,
        relevant=False,
        items=[],
        tool_results=[],
        transcript=last_transcript,
        attempts_used=config.max_attempts,
        failure=last_failure,
    )


def check_alternation(turns: Sequence[AgentTurn]) -> bool:
    """system, user, then assistant turns each optionally followed by a tool or user turn.

    A tool turn must follow an assistant turn that carries a parsed tool call.
    """
    if len(turns) < 2 or turns[0].role != "system" or turns[1].role != "user":
        return False
    prev: AgentTurn | None = None
    for turn in turns[2:]:
        if turn.role == "assistant":
            if prev is not None and prev.role == "assistant":
                return False
        elif turn.role == "tool":
            if prev is None or prev.role != "assistant" or prev.parsed_tool_call is None:
                return False
        elif turn.role == "user":
            if prev is None or prev.role != "assistant":
                return False
        else:
            return False
        prev = turn
    return True
