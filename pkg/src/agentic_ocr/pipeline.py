"""Visual-RAG integration: retrieved pages in, evidence bundle and generator answer out.

Flow per query: take the reranker's top-k pages (optionally adding adjacent
pages), run an extraction session on each page independently, collect the
relevant ones into an :class:`EvidenceBundle`, then assemble one of four
generator inputs and call the generator.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx
from PIL import Image

from . import templates
from .agent import ModelClient, PageExtraction, SessionConfig, run_with_retries
from .errors import AgenticOcrError, GeneratorUnavailable, MissingOcrText, UnscriptedInput
from .toolkit import OcrBackend, ToolResult, encode_png, fit_within, png_data_url

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 30
PAGE_MAX_DIM = 1024
THUMB_MAX_DIM = 512
CROP_MAX_DIM = 512

ImageLoader = Callable[[str], Image.Image]


def load_image_file(ref: str) -> Image.Image:
    with Image.open(ref) as im:
        im.load()
        return im.convert("RGB") if im.mode not in ("RGB", "L") else im.copy()


@dataclass(frozen=True)
class RetrievedPage:
    doc_id: str
    page_index: int  # 0-based physical index
    score: float
    image_ref: str
    expansion: bool = False

    @property
    def page_id(self) -> str:
        return f"{self.doc_id}-p{self.page_index}"

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "page_index": self.page_index,
            "page_id": self.page_id,
            "score": self.score,
            "image_ref": self.image_ref,
            "expansion": self.expansion,
        }


def select_top_k(pages: Sequence[RetrievedPage], k: int = DEFAULT_TOP_K) -> list[RetrievedPage]:
    """Highest-scoring ``k`` pages; equal scores keep their input order."""
    return sorted(pages, key=lambda p: -p.score)[:k]


def expand_adjacent(
    pages: Sequence[RetrievedPage],
    doc_page_counts: Mapping[str, int],
    image_ref_for: Callable[[str, int], str] | None = None,
) -> list[RetrievedPage]:
    """Add each retrieved page's immediate neighbours that are not already present.

    Inserted pages carry score 0 and ``expansion=True`` and are appended in
    discovery order; they are not themselves expanded, which keeps the
    operation idempotent.
    """
    out = list(pages)
    seen = {(p.doc_id, p.page_index) for p in pages}
    for page in pages:
        if page.expansion:
            continue
        count = doc_page_counts[page.doc_id]
        for idx in (page.page_index - 1, page.page_index + 1):
            if 0 <= idx < count and (page.doc_id, idx) not in seen:
                seen.add((page.doc_id, idx))
                ref = image_ref_for(page.doc_id, idx) if image_ref_for else ""
                out.append(RetrievedPage(page.doc_id, idx, 0.0, ref, expansion=True))
    return out


# -- extraction -----------------------------------------------------------

@dataclass
class BundleEntry:
    page: RetrievedPage
    extraction: PageExtraction

    def crop_refs(self) -> list[str]:
        return [f"{self.page.page_id}-crop-{i}.png" for i in range(1, len(self.extraction.tool_results) + 1)]

    def recognition_texts(self) -> list[str]:
        return [r.recognition_text for r in self.extraction.tool_results]

    def comments(self) -> list[str]:
        return [item.evidence for item in self.extraction.items]

    def to_dict(self) -> dict:
        ext = self.extraction
        return {
            "page": self.page.to_dict(),
            "relevant": ext.relevant,
            "attempts_used": ext.attempts_used,
            "items": [item.to_dict() for item in ext.items],
            "tool_results": [
                {
                    "crop_ref": ref,
                    "call": r.call.to_dict(),
                    "crop_rect": [r.crop_rect.left, r.crop_rect.top, r.crop_rect.width, r.crop_rect.height],
                    "element_type": r.call.element_type.value,
                    "recognition": r.recognition_text,
                }
                for ref, r in zip(self.crop_refs(), ext.tool_results)
            ],
            "comments": self.comments(),
            "transcript_ref": f"{self.page.page_id}.json",
        }


@dataclass
class EvidenceBundle:
    query_id: str
    query: str
    entries: list[BundleEntry] = field(default_factory=list)
    irrelevant: list[BundleEntry] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def relevant_page_ids(self) -> list[str]:
        return [e.page.page_id for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "query": self.query,
            "entries": [e.to_dict() for e in self.entries],
            "irrelevant": [
                {"page": e.page.to_dict(), "attempts_used": e.extraction.attempts_used,
                 "failure": e.extraction.failure, "transcript_ref": f"{e.page.page_id}.json"}
                for e in self.irrelevant
            ],
            "failures": list(self.failures),
        }

    def find_tool_result(self, page_id: str, index: int) -> ToolResult:
        for entry in self.entries:
            if entry.page.page_id == page_id:
                return entry.extraction.tool_results[index - 1]
        raise KeyError(page_id)

    def write(self, directory: str | Path) -> Path:
        """Persist as ``bundle.json``, ``crops/*.png`` and ``transcripts/*.json``."""
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        for sub in ("crops", "transcripts"):
            if (root / sub).exists():
                shutil.rmtree(root / sub)
            (root / sub).mkdir()
        (root / "bundle.json").write_text(_dumps(self.to_dict()), encoding="utf-8")
        for entry in self.entries:
            for ref, result in zip(entry.crop_refs(), entry.extraction.tool_results):
                (root / "crops" / ref).write_bytes(encode_png(result.crop))
        for entry in self.entries + self.irrelevant:
            (root / "transcripts" / f"{entry.page.page_id}.json").write_text(
                _dumps(entry.extraction.transcript_dict()), encoding="utf-8"
            )
        return root


def _dumps(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def extract(
    query_id: str,
    query: str,
    pages: Sequence[RetrievedPage],
    session_config: SessionConfig,
    fan_out: int,
    backend: OcrBackend | None,
    model_client: ModelClient,
    load_image: ImageLoader = load_image_file,
) -> EvidenceBundle:
    """Run one session per page with at most ``fan_out`` in flight.

    Bundle order follows ``pages`` regardless of completion order. Pages whose
    sessions fail outright are listed in ``failures`` instead of aborting the query.
    """
    if fan_out < 1:
        raise ValueError("fan_out must be at least 1")

    def work(page: RetrievedPage):
        try:
            image = load_image(page.image_ref)
            return run_with_retries(query, image, session_config, backend, model_client, page.page_id)
        except (AgenticOcrError, OSError) as exc:
            return exc

    with ThreadPoolExecutor(max_workers=fan_out) as pool:
        outcomes = list(pool.map(work, pages))

    bundle = EvidenceBundle(query_id, query)
    for page, outcome in zip(pages, outcomes):
        if isinstance(outcome, Exception):
            logger.warning("page %s failed: %s", page.page_id, outcome)
            bundle.failures.append({"page_id": page.page_id, "error": type(outcome).__name__, "message": str(outcome)})
        elif outcome.relevant:
            bundle.entries.append(BundleEntry(page, outcome))
        else:
            bundle.irrelevant.append(BundleEntry(page, outcome))
    return bundle


# -- generator input ------------------------------------------------------

class InputConfig(str, enum.Enum):
    PAGE = "page"
    PAGE_OCR = "page_ocr"
    EVIDENCE = "evidence"
    EVIDENCE_OCR = "evidence_ocr"


@dataclass(frozen=True)
class ImagePart:
    ref: str  # "page:<page_id>" or "crop:<page_id>:<n>"
    image: Image.Image = field(compare=False, repr=False)
    max_dim: int

    @property
    def size(self) -> tuple[int, int]:
        return self.image.size


@dataclass(frozen=True)
class TextPart:
    text: str
    kind: str  # page_ocr | recognition | comment


@dataclass
class GeneratorInput:
    config: InputConfig
    parts: list  # list[ImagePart | TextPart]

    def image_parts(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]

    def text_parts(self) -> list[TextPart]:
        return [p for p in self.parts if isinstance(p, TextPart)]

    def signature(self) -> list[tuple]:
        """Hashable description of the parts, used for containment checks."""
        return [("image", p.ref, p.size) if isinstance(p, ImagePart) else ("text", p.kind, p.text) for p in self.parts]


def build_generator_input(
    bundle: EvidenceBundle,
    config: InputConfig | str,
    page_ocr_texts: Mapping[str, str] | None = None,
    load_image: ImageLoader = load_image_file,
    page_max_dim: int = PAGE_MAX_DIM,
    thumb_max_dim: int = THUMB_MAX_DIM,
    crop_max_dim: int = CROP_MAX_DIM,
) -> GeneratorInput:
    config = InputConfig(config)
    if config is InputConfig.PAGE_OCR and page_ocr_texts is None:
        raise MissingOcrText("page_ocr configuration needs full-page OCR texts")
    with_evidence = config in (InputConfig.EVIDENCE, InputConfig.EVIDENCE_OCR)
    parts: list = []
    for entry in bundle.entries:
        pid = entry.page.page_id
        page_dim = thumb_max_dim if with_evidence else page_max_dim
        parts.append(ImagePart(f"page:{pid}", fit_within(load_image(entry.page.image_ref), page_dim), page_dim))
        if config is InputConfig.PAGE_OCR:
            try:
                parts.append(TextPart(page_ocr_texts[pid], "page_ocr"))
            except KeyError:
                raise MissingOcrText(f"no full-page OCR text for {pid}") from None
        if with_evidence:
            for n, result in enumerate(entry.extraction.tool_results, start=1):
                parts.append(ImagePart(f"crop:{pid}:{n}", fit_within(result.crop, crop_max_dim), crop_max_dim))
        if config is InputConfig.EVIDENCE_OCR:
            for result in entry.extraction.tool_results:
                text = result.recognition_text
                if text:
                    parts.append(TextPart(text, "recognition"))
            for comment in entry.comments():
                parts.append(TextPart(comment, "comment"))
    return GeneratorInput(config, parts)


# -- token accounting and generator ---------------------------------------

@dataclass(frozen=True)
class TokenReport:
    input_tokens: int
    output_tokens: int
    counter: str
    estimated: bool = False

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")


@dataclass(frozen=True)
class TokenCounter:
    """Additive estimator: ceil(utf-8 bytes / 4) per text, one token per patch per image."""

    bytes_per_token: int = 4
    patch: int = 28

    @property
    def name(self) -> str:
        return f"estimate:bytes/{self.bytes_per_token}+patch{self.patch}"

    def text(self, text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / self.bytes_per_token)

    def image(self, size: tuple[int, int]) -> int:
        w, h = size
        return math.ceil(w / self.patch) * math.ceil(h / self.patch)

    def parts(self, parts: Iterable) -> int:
        return sum(self.image(p.size) if isinstance(p, ImagePart) else self.text(p.text) for p in parts)

    def request(self, system: str, gen_input: GeneratorInput, question: str) -> int:
        return self.text(system) + self.parts(gen_input.parts) + self.text(question)


class GeneratorClient(Protocol):
    def generate(self, messages: list[dict]) -> dict:
        """Return ``{"text": str, "usage": {"input_tokens": int, "output_tokens": int} | None}``."""


def _image_url(image: Image.Image) -> dict:
    return {"type": "image_url", "image_url": {"url": png_data_url(image)}}


def generator_messages(gen_input: GeneratorInput, question: str) -> list[dict]:
    content = []
    for part in gen_input.parts:
        content.append(_image_url(part.image) if isinstance(part, ImagePart) else {"type": "text", "text": part.text})
    content.append({"type": "text", "text": f"Question: {question}"})
    return [
        {"role": "system", "content": templates.generator_system_prompt()},
        {"role": "user", "content": content},
    ]


class HttpGeneratorClient:
    def __init__(self, endpoint: str, model: str, api_key: str | None = None, timeout: float = 300.0,
                 client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def generate(self, messages: list[dict]) -> dict:
        try:
            resp = self._client.post(self.endpoint, json={"model": self.model, "messages": messages})
            resp.raise_for_status()
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
            raise GeneratorUnavailable(f"generator {self.endpoint} failed: {exc}") from exc
        usage = data.get("usage")
        if isinstance(usage, dict) and "prompt_tokens" in usage:
            usage = {"input_tokens": usage["prompt_tokens"], "output_tokens": usage.get("completion_tokens", 0)}
        return {"text": text, "usage": usage}


class ScriptedGenerator:
    """Returns canned answers keyed by question text."""

    def __init__(self, answers: Mapping[str, Mapping]):
        self.answers = {k: dict(v) for k, v in answers.items()}
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedGenerator":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def generate(self, messages: list[dict]) -> dict:
        self.calls += 1
        last = messages[-1]["content"][-1]["text"]
        question = last.removeprefix("Question: ")
        try:
            entry = self.answers[question]
        except KeyError:
            raise UnscriptedInput(f"no scripted answer for question {question!r}") from None
        return {"text": entry["answer"], "usage": entry.get("usage")}


@dataclass(frozen=True)
class GenerationResult:
    answer: str
    tokens: TokenReport


def invoke_generator(
    gen_input: GeneratorInput,
    question: str,
    client: GeneratorClient,
    counter: TokenCounter = TokenCounter(),
) -> GenerationResult:
    """Send prompt + parts + question. Provider-reported usage wins; otherwise the estimate is flagged."""
    response = client.generate(generator_messages(gen_input, question))
    answer = response["text"]
    usage = response.get("usage")
    if usage and "input_tokens" in usage and "output_tokens" in usage:
        report = TokenReport(int(usage["input_tokens"]), int(usage["output_tokens"]), "provider")
    else:
        report = TokenReport(
            counter.request(templates.generator_system_prompt(), gen_input, question),
            counter.text(answer),
            counter.name,
            estimated=True,
        )
    return GenerationResult(answer, report)


def run_record(
    query_id: str,
    config: InputConfig,
    result: GenerationResult,
    retrieved: Sequence[RetrievedPage],
    bundle: EvidenceBundle,
    gold_pages: Sequence[str] | None = None,
) -> dict:
    record = {
        "query_id": query_id,
        "config": config.value,
        "answer": result.answer,
        "input_tokens": result.tokens.input_tokens,
        "output_tokens": result.tokens.output_tokens,
        "token_counter": result.tokens.counter,
        "usage_estimated": result.tokens.estimated,
        "retrieved_pages": [p.page_id for p in retrieved],
        "relevant_pages": bundle.relevant_page_ids,
        "failed_pages": [f["page_id"] for f in bundle.failures],
    }
    if gold_pages is not None:
        record["gold_pages"] = list(gold_pages)
    return record
