"""Executor for ``image_zoom_and_ocr_tool``.

A call crops a page region, rotates it counter-clockwise, and routes it to an OCR
backend by element type:

* ``region``  -- layout analysis plus recognition; block boxes come back in the
  crop's own 0-1000 frame and are projected onto the page here.
* ``text`` / ``table`` / ``equation`` -- recognition of a single element, no layout.
* ``image``   -- crop only.

Backend wire contract (JSON over HTTP POST)::

    request   {"mode": "<region|text|table|equation>", "image_b64": "<png>", "options": {...}}
    response  {"blocks": [{"bbox": [x0, y0, x1, y1], "kind": "...", "content": "..."}]}   # region
              {"text": "..."}                                                              # other modes
"""

from __future__ import annotations

import base64
import enum
import hashlib
import io
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Union

import httpx
from PIL import Image

from .errors import BackendMalformed, BackendUnavailable, InvalidBox, UnscriptedInput
from .geometry import NormBox, PixelRect, Rotation, remap_to_page, to_pixels

logger = logging.getLogger(__name__)

TOOL_NAME = "image_zoom_and_ocr_tool"


class ElementType(str, enum.Enum):
    REGION = "region"
    TEXT = "text"
    TABLE = "table"
    IMAGE = "image"
    EQUATION = "equation"


@dataclass(frozen=True)
class ToolCall:
    label: str
    box: NormBox
    rotation: Rotation
    element_type: ElementType

    def __post_init__(self) -> None:
        if not self.label or not self.label.strip():
            raise ValueError("tool call label must be non-empty")

    def arguments(self) -> dict:
        return {
            "label": self.label,
            "bbox": self.box.to_list(),
            "angle": int(self.rotation),
            "type": self.element_type.value,
        }

    def to_dict(self) -> dict:
        return {"name": TOOL_NAME, "arguments": self.arguments()}

    @classmethod
    def from_arguments(cls, args: Mapping[str, Any]) -> "ToolCall":
        """Build from the ``arguments`` object of a tool call. Raises ValueError on bad input."""
        return cls(
            label=args["label"],
            box=NormBox.from_seq(args["bbox"]),
            rotation=Rotation.parse(args["angle"]),
            element_type=ElementType(args["type"]),
        )


@dataclass(frozen=True)
class LayoutBlock:
    box: NormBox  # page coordinates
    kind: str
    content: str

    def to_dict(self) -> dict:
        return {"bbox": self.box.to_list(), "kind": self.kind, "content": self.content}


@dataclass(frozen=True)
class LayoutPayload:
    blocks: tuple[LayoutBlock, ...]

    def render(self) -> str:
        return json.dumps([b.to_dict() for b in self.blocks], ensure_ascii=False)


@dataclass(frozen=True)
class TextPayload:
    text: str

    def render(self) -> str:
        return self.text


@dataclass(frozen=True)
class TablePayload:
    markup: str

    def render(self) -> str:
        return self.markup


@dataclass(frozen=True)
class EquationPayload:
    markup: str

    def render(self) -> str:
        return self.markup


@dataclass(frozen=True)
class ImagePayload:
    def render(self) -> str:
        return ""


Payload = Union[LayoutPayload, TextPayload, TablePayload, EquationPayload, ImagePayload]

PAYLOAD_FOR_TYPE: dict[ElementType, type] = {
    ElementType.REGION: LayoutPayload,
    ElementType.TEXT: TextPayload,
    ElementType.TABLE: TablePayload,
    ElementType.EQUATION: EquationPayload,
    ElementType.IMAGE: ImagePayload,
}


@dataclass
class ToolResult:
    call: ToolCall
    crop: Image.Image = field(repr=False)
    crop_rect: PixelRect
    payload: Payload

    @property
    def recognition_text(self) -> str:
        return self.payload.render()


# -- images ---------------------------------------------------------------

def image_digest(image: Image.Image) -> str:
    """Content hash over mode, size and raw pixels (independent of file encoding)."""
    h = hashlib.sha256()
    h.update(f"{image.mode}:{image.width}x{image.height}:".encode())
    h.update(image.tobytes())
    return h.hexdigest()


def encode_png(image: Image.Image) -> bytes:
    # fast zlib level: these bytes go on the wire, not into an archive
    buf = io.BytesIO()
    image.save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def decode_png(data: bytes) -> Image.Image:
    image = Image.open(io.BytesIO(data))
    image.load()
    return image


_TRANSPOSE = {
    Rotation.R90: Image.Transpose.ROTATE_90,
    Rotation.R180: Image.Transpose.ROTATE_180,
    Rotation.R270: Image.Transpose.ROTATE_270,
}


def rotate_image(image: Image.Image, rotation: Rotation) -> Image.Image:
    """Lossless counter-clockwise rotation by a multiple of 90 degrees; always a new image."""
    if rotation is Rotation.R0:
        return image.copy()
    return image.transpose(_TRANSPOSE[rotation])


def crop_image(page: Image.Image, rect: PixelRect) -> Image.Image:
    return page.crop(rect.as_pil_box()).copy()


_URL_CACHE: OrderedDict[str, str] = OrderedDict()
_URL_CACHE_SIZE = 32
_URL_LOCK = threading.Lock()


def png_data_url(image: Image.Image) -> str:
    """``data:`` URL of the PNG encoding, memoized by content since retries resend the same page."""
    key = image_digest(image)
    with _URL_LOCK:
        if key in _URL_CACHE:
            _URL_CACHE.move_to_end(key)
            return _URL_CACHE[key]
    url = "data:image/png;base64," + base64.b64encode(encode_png(image)).decode("ascii")
    with _URL_LOCK:
        _URL_CACHE[key] = url
        while len(_URL_CACHE) > _URL_CACHE_SIZE:
            _URL_CACHE.popitem(last=False)
    return url


def fit_within(image: Image.Image, max_dim: int) -> Image.Image:
    """Downscale (never upscale) so that neither side exceeds ``max_dim``."""
    if max(image.size) <= max_dim:
        return image.copy()
    scale = max_dim / max(image.size)
    size = (max(1, round(image.width * scale)), max(1, round(image.height * scale)))
    return image.resize(size, Image.Resampling.LANCZOS)


# -- backends -------------------------------------------------------------

@dataclass(frozen=True)
class OcrBackendDescriptor:
    endpoint: str
    modes: tuple[str, ...] = ("region", "text", "table", "equation")
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("backend timeout must be positive")


class OcrBackend(Protocol):
    def recognize(self, mode: str, image_png: bytes, options: Mapping[str, Any] | None = None) -> dict:
        """Return the raw JSON response body for one recognition request."""


class HttpOcrBackend:
    """Client for an OCR service speaking the JSON contract in the module docstring.

    Transport faults (connection errors, timeouts, 5xx) are retried once.
    """

    def __init__(self, descriptor: OcrBackendDescriptor, client: httpx.Client | None = None, retries: int = 1):
        self.descriptor = descriptor
        self.retries = retries
        self._client = client or httpx.Client(timeout=descriptor.timeout)

    def recognize(self, mode: str, image_png: bytes, options: Mapping[str, Any] | None = None) -> dict:
        if mode not in self.descriptor.modes:
            raise BackendMalformed(f"backend at {self.descriptor.endpoint} does not support mode {mode!r}")
        body = {"mode": mode, "image_b64": base64.b64encode(image_png).decode("ascii"), "options": dict(options or {})}
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.descriptor.endpoint, json=body, timeout=self.descriptor.timeout)
            except httpx.TransportError as exc:
                last_exc = exc
                logger.warning("OCR backend transport error (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last_exc = BackendUnavailable(f"backend returned HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendMalformed(f"backend rejected request with HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()
            except ValueError as exc:
                raise BackendMalformed(f"backend response is not JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise BackendMalformed("backend response must be a JSON object")
            return data
        raise BackendUnavailable(f"OCR backend {self.descriptor.endpoint} unreachable: {last_exc}")


class MockOcrBackend:
    """Deterministic backend double keyed by image content hash and mode.

    Fixture document layout: ``{"<sha256>": {"<mode>": <response body>, ...}, ...}``.
    """

    def __init__(self, scripts: Mapping[str, Mapping[str, dict]] | None = None):
        self.scripts: dict[str, dict[str, dict]] = {k: dict(v) for k, v in (scripts or {}).items()}
        self.requests: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "MockOcrBackend":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.scripts, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")

    def script(self, image: Image.Image, mode: str, response: dict) -> str:
        digest = image_digest(image)
        self.scripts.setdefault(digest, {})[mode] = response
        return digest

    def recognize(self, mode: str, image_png: bytes, options: Mapping[str, Any] | None = None) -> dict:
        digest = image_digest(decode_png(image_png))
        with self._lock:
            self.requests.append((digest, mode))
        try:
            return json.loads(json.dumps(self.scripts[digest][mode]))
        except KeyError:
            raise UnscriptedInput(f"no scripted {mode!r} response for image {digest[:12]}") from None


def mock_backend(mode: str, image: Image.Image, scripts: Mapping[str, Mapping[str, dict]]) -> dict:
    """Functional form of :class:`MockOcrBackend` lookup."""
    return MockOcrBackend(scripts).recognize(mode, encode_png(image))


# -- execution ------------------------------------------------------------

def _parse_blocks(body: dict, crop_rect: PixelRect, rotation: Rotation, page_w: int, page_h: int) -> LayoutPayload:
    blocks = body.get("blocks")
    if not isinstance(blocks, list):
        raise BackendMalformed("region response must carry a 'blocks' list")
    out = []
    for i, raw in enumerate(blocks):
        if not isinstance(raw, dict):
            raise BackendMalformed(f"block {i} is not an object")
        try:
            local = NormBox.from_seq(raw["bbox"])
        except (KeyError, TypeError, InvalidBox) as exc:
            raise BackendMalformed(f"block {i} has an invalid bbox: {exc}") from exc
        kind, content = raw.get("kind", ""), raw.get("content", "")
        if not isinstance(kind, str) or not isinstance(content, str):
            raise BackendMalformed(f"block {i} kind/content must be strings")
        out.append(LayoutBlock(remap_to_page(local, crop_rect, rotation, page_w, page_h), kind, content))
    return LayoutPayload(tuple(out))


def _parse_text(body: dict) -> str:
    text = body.get("text")
    if not isinstance(text, str):
        raise BackendMalformed("element response must carry a 'text' string")
    return text


def execute(page_image: Image.Image, call: ToolCall, backend: OcrBackend | None) -> ToolResult:
    """Run one tool call against ``page_image``. The page image is never modified."""
    rect = to_pixels(call.box, page_image.width, page_image.height)
    crop = rotate_image(crop_image(page_image, rect), call.rotation)
    kind = call.element_type
    if kind is ElementType.IMAGE:
        return ToolResult(call, crop, rect, ImagePayload())
    if backend is None:
        raise BackendUnavailable(f"{kind.value} mode needs an OCR backend")
    body = backend.recognize(kind.value, encode_png(crop))
    if not isinstance(body, dict):
        raise BackendMalformed("backend response must be a JSON object")
    if kind is ElementType.REGION:
        payload: Payload = _parse_blocks(body, rect, call.rotation, page_image.width, page_image.height)
    elif kind is ElementType.TABLE:
        payload = TablePayload(_parse_text(body))
    elif kind is ElementType.EQUATION:
        payload = EquationPayload(_parse_text(body))
    else:
        payload = TextPayload(_parse_text(body))
    return ToolResult(call, crop, rect, payload)
