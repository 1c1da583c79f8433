import hashlib
import json

import httpx
import pytest

from agentic_ocr import templates
from agentic_ocr.agent import (
    AgentTurn,
    EvidenceItem,
    HttpModelClient,
    PageExtraction,
    ScriptedModel,
    SessionConfig,
    check_alternation,
    parse_evidence,
    parse_tool_call,
    run_session,
    run_with_retries,
)
from agentic_ocr.errors import (
    MalformedEvidence,
    MalformedToolCall,
    ModelUnavailable,
    TurnBudgetExhausted,
    UnscriptedInput,
)
from agentic_ocr.geometry import NormBox, Rotation
from agentic_ocr.toolkit import ElementType, MockOcrBackend, ToolCall

from synthetic import script_call

Q = "What was total revenue in 2023?"
KEY = (Q, "page")

TABLE_CALL_TEXT = (
    "<think>\nThe revenue table sits in the middle.\n</think>\n<tool_call> \n"
    '{"name": "image_zoom_and_ocr_tool", "arguments": {"label": "revenue table", "bbox": [100,200,900,600], "angle": 0, "type": "table"}}'
    "\n</tool_call>"
)
TABLE_CALL = ToolCall("revenue table", NormBox(100, 200, 900, 600), Rotation.R0, ElementType.TABLE)
EVIDENCE_TEXT = '<think>\nfound it\n</think>\n```json\n[{"evidence": "Revenue 2023: 4.2B", "bbox": [100, 200, 900, 600]}]\n```'
EMPTY_TEXT = "<think>\nnothing here\n</think>\n```json\n[]\n```"


def tool_text(args: dict) -> str:
    return "<tool_call>\n" + json.dumps({"name": "image_zoom_and_ocr_tool", "arguments": args}) + "\n</tool_call>"


@pytest.fixture
def backend(page):
    b = MockOcrBackend()
    script_call(b, page, TABLE_CALL, {"text": "<table><tr><td>Revenue</td><td>4.2B</td></tr></table>"})
    return b


class TestParseToolCall:
    def test_example(self):
        assert parse_tool_call(TABLE_CALL_TEXT) == TABLE_CALL

    def test_prose(self):
        assert parse_tool_call("I should look at the table first.") is None

    def test_angle_45(self):
        with pytest.raises(MalformedToolCall):
            parse_tool_call(tool_text({"label": "a", "bbox": [0, 0, 10, 10], "angle": 45, "type": "text"}))

    def test_think_block_is_ignored(self):
        text = "<think>maybe <tool_call>{bad}</tool_call></think>plain answer"
        assert parse_tool_call(text) is None

    def test_bool_bbox_rejected(self):
        with pytest.raises(MalformedToolCall):
            parse_tool_call(tool_text({"label": "a", "bbox": [0, 0, True, 10], "angle": 0, "type": "text"}))


class TestParseEvidence:
    def test_empty_list(self):
        assert parse_evidence(EMPTY_TEXT) == []

    def test_one_item(self):
        items = parse_evidence('```json\n[{"evidence": "x", "bbox": [10,20,400,300]}]\n```')
        assert items == [EvidenceItem("x", NormBox(10, 20, 400, 300))]

    def test_three_numbers(self):
        with pytest.raises(MalformedEvidence):
            parse_evidence('```json\n[{"evidence": "x", "bbox": [10,20,400]}]\n```')

    def test_no_fence(self):
        assert parse_evidence("no block here") is None

    def test_template_comment_tolerated(self):
        text = '```json\n[\n  {\n    "evidence": "a # not a comment",\n    "bbox": [1, 2, 3, 4] # 0-1000 normalized coordinates \n  }\n]\n```'
        assert parse_evidence(text) == [EvidenceItem("a # not a comment", NormBox(1, 2, 3, 4))]

    def test_last_block_wins(self):
        text = '```json\n[]\n```\nwait\n```json\n[{"evidence": "y", "bbox": [0,0,5,5]}]\n```'
        assert len(parse_evidence(text)) == 1

    @pytest.mark.parametrize(
        "body",
        ['{"evidence": "x"}', '[{"bbox": [0,0,5,5]}]', '[{"evidence": "", "bbox": [0,0,5,5]}]', "[1]", "[{"],
    )
    def test_schema_errors(self, body):
        with pytest.raises(MalformedEvidence):
            parse_evidence(f"```json\n{body}\n```")


class TestSession:
    def test_tool_then_evidence(self, page, backend):
        model = ScriptedModel({KEY: [TABLE_CALL_TEXT, EVIDENCE_TEXT]})
        ex = run_with_retries(Q, page, SessionConfig(), backend, model)
        assert ex.relevant and len(ex.items) == 1 and len(ex.tool_results) == 1 and ex.attempts_used == 1
        assert ex.tool_results[0].recognition_text.startswith("<table>")
        roles = [t.role for t in ex.transcript]
        assert roles == ["system", "user", "assistant", "tool", "assistant"]
        assert ex.transcript[0].text == templates.agent_system_prompt()
        assert ex.transcript[3].image_parts == ["crop-1"]
        assert ex.transcript[2].text == TABLE_CALL_TEXT
        assert check_alternation(ex.transcript)

    def test_immediate_empty(self, page):
        ex = run_session(Q, page, SessionConfig(), None, ScriptedModel({KEY: [EMPTY_TEXT]}))
        assert not ex.relevant and ex.tool_results == []

    def test_budget(self, page):
        model = ScriptedModel({KEY: ["thinking..."] * 8})
        with pytest.raises(TurnBudgetExhausted):
            run_session(Q, page, SessionConfig(max_turns=8), None, model)
        assert model.calls == 8

    def test_user_turn_shows_page_downscaled(self, page):
        seen = []

        class Spy(ScriptedModel):
            def complete(self, messages, **kw):
                seen.append(messages)
                return super().complete(messages, **kw)

        run_session(Q, page, SessionConfig(page_max_dim=256), None, Spy({KEY: [EMPTY_TEXT]}))
        user = seen[0][1]
        assert user["role"] == "user"
        assert user["content"][0]["type"] == "image_url"
        assert user["content"][-1] == {"type": "text", "text": Q}

    def test_one_correction_then_success(self, page):
        bad = tool_text({"label": "a", "bbox": [0, 0, 10], "angle": 0, "type": "text"})
        ex = run_session(Q, page, SessionConfig(), None, ScriptedModel({KEY: [bad, EMPTY_TEXT]}))
        assert [t.role for t in ex.transcript] == ["system", "user", "assistant", "user", "assistant"]
        assert check_alternation(ex.transcript)

    def test_second_malformed_fails(self, page):
        bad = tool_text({"label": "a", "bbox": [0, 0, 10, 10], "angle": 45, "type": "text"})
        with pytest.raises(MalformedToolCall) as info:
            run_session(Q, page, SessionConfig(), None, ScriptedModel({KEY: [bad, bad]}))
        assert len(info.value.transcript) == 5

    def test_degenerate_box_is_observed(self, page):
        sliver = tool_text({"label": "a", "bbox": [0, 0, 1000, 1], "angle": 0, "type": "image"})
        tiny = page.resize((100, 100))
        ex = run_session(Q, tiny, SessionConfig(), None, ScriptedModel({KEY: [sliver, EMPTY_TEXT]}))
        assert ex.transcript[3].role == "tool"
        assert "error" in json.loads(ex.transcript[3].text)

    def test_image_mode_needs_no_backend(self, page):
        img_call = tool_text({"label": "chart", "bbox": [0, 0, 500, 500], "angle": 0, "type": "image"})
        ex = run_session(Q, page, SessionConfig(), None, ScriptedModel({KEY: [img_call, EVIDENCE_TEXT]}))
        assert json.loads(ex.transcript[3].text)["result"] == "cropped image only, no OCR"

    def test_unscripted_crop_propagates(self, page):
        call = tool_text({"label": "a", "bbox": [0, 0, 500, 500], "angle": 0, "type": "text"})
        with pytest.raises(UnscriptedInput):
            run_session(Q, page, SessionConfig(), MockOcrBackend(), ScriptedModel({KEY: [call]}))

    def test_call_count_bound(self, page):
        model = ScriptedModel({KEY: ["prose"] * 24})
        ex = run_with_retries(Q, page, SessionConfig(max_turns=8, max_attempts=3), None, model)
        assert model.calls == 24 <= 3 * 8
        assert not ex.relevant and ex.failure.startswith("TurnBudgetExhausted")


class TestRetries:
    def test_second_attempt_relevant(self, page, backend):
        model = ScriptedModel({KEY: [EMPTY_TEXT, TABLE_CALL_TEXT, EVIDENCE_TEXT]})
        ex = run_with_retries(Q, page, SessionConfig(), backend, model)
        assert ex.relevant and ex.attempts_used == 2

    def test_all_empty(self, page):
        model = ScriptedModel({KEY: [EMPTY_TEXT] * 3})
        ex = run_with_retries(Q, page, SessionConfig(), None, model)
        assert not ex.relevant and ex.attempts_used == 3
        assert model.calls_for(KEY) == 3

    def test_short_circuit(self, page, backend):
        model = ScriptedModel({KEY: [TABLE_CALL_TEXT, EVIDENCE_TEXT, EMPTY_TEXT, EMPTY_TEXT]})
        ex = run_with_retries(Q, page, SessionConfig(), backend, model)
        assert ex.attempts_used == 1
        assert model.calls == 2

    def test_all_transport_failures(self, page):
        class Down:
            calls = 0

            def complete(self, messages, **kw):
                Down.calls += 1
                raise ModelUnavailable("down")

        with pytest.raises(ModelUnavailable):
            run_with_retries(Q, page, SessionConfig(), None, Down())
        assert Down.calls == 3

    def test_mixed_transport_failure_is_not_fatal(self, page):
        class Flaky:
            n = 0

            def complete(self, messages, **kw):
                Flaky.n += 1
                if Flaky.n == 1:
                    raise ModelUnavailable("blip")
                return EMPTY_TEXT

        ex = run_with_retries(Q, page, SessionConfig(), None, Flaky())
        assert not ex.relevant and ex.attempts_used == 3

    def test_deterministic_transcripts(self, page, backend):
        def once():
            model = ScriptedModel({KEY: [EMPTY_TEXT, TABLE_CALL_TEXT, EVIDENCE_TEXT]})
            ex = run_with_retries(Q, page, SessionConfig(), backend, model)
            return json.dumps(ex.transcript_dict(), sort_keys=True)

        assert once() == once()


class TestAlternation:
    def test_rejects_orphan_tool(self):
        turns = [AgentTurn("system", ""), AgentTurn("user", ""), AgentTurn("assistant", "x"), AgentTurn("tool", "y")]
        assert not check_alternation(turns)

    def test_rejects_double_assistant(self):
        turns = [AgentTurn("system", ""), AgentTurn("user", ""), AgentTurn("assistant", "x"), AgentTurn("assistant", "y")]
        assert not check_alternation(turns)

    def test_tool_call_only_on_assistant(self):
        with pytest.raises(ValueError):
            AgentTurn("user", "x", parsed_tool_call=TABLE_CALL)


def test_page_extraction_invariant():
    with pytest.raises(ValueError):
        PageExtraction("p", True, [], [], [])


def test_session_config_bounds():
    with pytest.raises(ValueError):
        SessionConfig(max_turns=1)
    with pytest.raises(ValueError):
        SessionConfig(max_attempts=0)


class TestHttpModelClient:
    def test_wire_format(self):
        seen = {}

        def handler(request):
            seen["body"] = json.loads(request.content)
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json={"choices": [{"message": {"content": EMPTY_TEXT}}]})

        client = HttpModelClient(
            "http://model.test/v1/chat/completions",
            api_key="sekret",
            client=httpx.Client(transport=httpx.MockTransport(handler)),
        )
        msgs = [{"role": "user", "content": "hi"}]
        assert client.complete(msgs, temperature=1.0, session_key=KEY) == EMPTY_TEXT
        assert seen["body"]["messages"] == msgs
        assert seen["body"]["temperature"] == 1.0
        assert seen["auth"] == "Bearer sekret"

    @pytest.mark.parametrize("response", [httpx.Response(502), httpx.Response(200, json={"nope": 1})])
    def test_failures(self, response):
        client = HttpModelClient("http://model.test", client=httpx.Client(transport=httpx.MockTransport(lambda r: response)))
        with pytest.raises(ModelUnavailable):
            client.complete([], temperature=1.0, session_key=KEY)

    def test_unreachable(self):
        client = HttpModelClient("http://127.0.0.1:9/v1", timeout=2.0)
        with pytest.raises(ModelUnavailable):
            client.complete([], temperature=1.0, session_key=KEY)


class TestTemplates:
    def test_agent_prompt_frozen(self):
        text = templates.agent_system_prompt()
        assert hashlib.sha256(text.encode()).hexdigest() == hashlib.sha256(
            templates.load("agentic_ocr_system").encode()
        ).hexdigest()
        assert text.startswith("You are an advanced Visual Document Analysis Agent")
        assert "<tool_call> \n" in text
        assert text.endswith("```json\n[]\n```")

    def test_template_bytes(self):
        from importlib.resources import files

        raw = files("agentic_ocr.templates").joinpath("agentic_ocr_system.txt").read_bytes()
        assert hashlib.sha256(raw).hexdigest() == "505e8f967a7c4c88f90f7a16778148b3b047feaa2cc18db4be1422420ef51b4f"

    def test_other_templates(self):
        assert "multimodal" in templates.generator_system_prompt()
        assert templates.reranker_instruction().strip()
