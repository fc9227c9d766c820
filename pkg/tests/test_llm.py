import json
from pathlib import Path

import httpx
import pytest
from pydantic import ValidationError

from exprag.exceptions import (
    AuthRejectedError,
    ContextTooLongError,
    InvalidParameterError,
    TransientTransportError,
    UnfilledPlaceholderError,
)
from exprag.llm import (
    ChatMessage,
    ContextAwareProvider,
    EchoGoldProvider,
    FixedLetterProvider,
    HttpChatProvider,
    PromptLibrary,
    PromptTemplate,
    ProviderSettings,
    QuestionContext,
    RetrySettings,
    ScriptedProvider,
    complete,
    parse_answer,
    prompt_hash,
    provider_from_spec,
    render_prompt,
    render_template,
)
from exprag.qa import AnswerMode, OptionSource, QAItem, QAOption
from exprag.segmenter import TaskKind

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
NO_WAIT = RetrySettings(max_attempts=3, initial_wait_s=0, max_wait_s=0)


@pytest.fixture
def item() -> QAItem:
    return QAItem(
        question_id="diagnosis-H1",
        admission_key="H1",
        task=TaskKind.DIAGNOSIS,
        mode=AnswerMode.MULTI_SELECT,
        question="Which diagnoses apply?",
        background="Chief Complaint:\nCough.",
        options=[
            QAOption(letter="A", text="Gout", source=OptionSource.EHR_DISTRACTOR),
            QAOption(letter="B", text="Community acquired pneumonia", source=OptionSource.GOLD),
            QAOption(letter="C", text="Anemia", source=OptionSource.EHR_DISTRACTOR),
        ],
        gold_letters=["B"],
    )


def request_for(item: QAItem, context: str = "", settings: ProviderSettings | None = None):
    settings = settings or ProviderSettings()
    return settings.request(render_prompt(item, context), QuestionContext.of(item, context))


@pytest.mark.parametrize(
    ("text", "mode", "expected"),
    [
        ("The answer is B.", AnswerMode.SINGLE_SELECT, ["B"]),
        ("A, C and D", AnswerMode.MULTI_SELECT, ["A", "C", "D"]),
        ("Answer: [C, A]", AnswerMode.MULTI_SELECT, ["A", "C"]),
        ("B) Community acquired pneumonia", AnswerMode.MULTI_SELECT, ["B"]),
        ("Final answer: D, B, D", AnswerMode.MULTI_SELECT, ["B", "D"]),
        ("Answer: A) Hypertension; C) Diabetes", AnswerMode.MULTI_SELECT, ["A", "C"]),
        ("Answer: B) Gout", AnswerMode.SINGLE_SELECT, ["B"]),
    ],
)
def test_parse_answer(text, mode, expected):
    parsed = parse_answer(text, mode, 4)
    assert parsed.is_valid
    assert parsed.letters == expected


def test_parse_answer_without_letters():
    parsed = parse_answer("I cannot determine this.", AnswerMode.MULTI_SELECT, 4)
    assert not parsed.is_valid
    assert parsed.invalid == "no answer"


def test_parse_answer_out_of_range():
    assert parse_answer("Answer: F", AnswerMode.MULTI_SELECT, 4).invalid == "out of range"
    assert parse_answer("Answer: F", AnswerMode.SINGLE_SELECT, 4).invalid == "out of range"
    with pytest.raises(InvalidParameterError):
        parse_answer("Answer: A", AnswerMode.SINGLE_SELECT, 1)


def test_render_prompt_with_and_without_context(item):
    rag = render_prompt(item, "Similar patient had pneumonia.")
    assert [m.role for m in rag] == ["system", "user"]
    assert "Similar patient had pneumonia." in rag[1].content
    assert "A) Gout\nB) Community acquired pneumonia\nC) Anemia" in rag[1].content

    direct = render_prompt(item, "   ")
    assert "Relevant experience" not in direct[1].content
    assert "Chief Complaint:\nCough." in direct[1].content
    assert prompt_hash(rag) != prompt_hash(direct)
    assert prompt_hash(rag) == prompt_hash(render_prompt(item, "Similar patient had pneumonia."))


def test_render_template_needs_every_placeholder():
    template = PromptTemplate(template_id="t", system="s", user="{question} / {extra}")
    assert template.placeholders == ["question", "extra"]
    with pytest.raises(UnfilledPlaceholderError, match="extra"):
        render_template(template, {"question": "q"})
    (_, user) = render_template(template, {"question": "q", "extra": "e"})
    assert user == ChatMessage(role="user", content="q / e")


def test_prompts_file_matches_defaults():
    library = PromptLibrary.from_yaml(CONFIGS / "prompts.yaml")
    assert library.rag == PromptLibrary().rag
    assert library.direct_ask == PromptLibrary().direct_ask


def test_mock_providers(item):
    request = request_for(item)
    assert EchoGoldProvider().send(request).text == "Answer: B"
    assert FixedLetterProvider("C").send(request).text == "Answer: C"
    with pytest.raises(InvalidParameterError):
        FixedLetterProvider("a")


def test_context_aware_provider(item):
    provider = ContextAwareProvider()
    helped = provider.send(request_for(item, "Treated for community-acquired pneumonia."))
    assert helped.text == "Answer: B"
    unhelped = provider.send(request_for(item, "Treated for a broken wrist."))
    assert unhelped.text == "Answer: A"


def test_provider_from_spec():
    fixed = provider_from_spec(ProviderSettings(spec="mock:fixed-letter:C", max_context_chars=50))
    assert fixed.name == "mock:fixed-letter:C"
    assert fixed.max_context_chars == 50
    assert provider_from_spec(ProviderSettings()).name == "mock:echo-gold"
    with pytest.raises(InvalidParameterError):
        provider_from_spec(ProviderSettings(spec="mock:oracle"))
    with pytest.raises(InvalidParameterError):
        provider_from_spec(ProviderSettings(spec="carrier-pigeon"))
    with pytest.raises(ValidationError):
        ProviderSettings(spec="http")


def test_complete_retries_transient_failures(item):
    provider = ScriptedProvider(
        [TransientTransportError("reset"), TransientTransportError("reset"), "Answer: B"]
    )
    exchange = complete(request_for(item), provider, NO_WAIT)
    assert exchange.attempts == 3
    assert exchange.response.text == "Answer: B"


def test_complete_gives_up_after_max_attempts(item):
    provider = ScriptedProvider([TransientTransportError("down")])
    with pytest.raises(TransientTransportError):
        complete(request_for(item), provider, NO_WAIT.model_copy(update={"max_attempts": 2}))
    assert provider.calls == 2


def test_complete_does_not_retry_auth_errors(item):
    provider = ScriptedProvider([AuthRejectedError("bad key"), "Answer: B"])
    with pytest.raises(AuthRejectedError):
        complete(request_for(item), provider, NO_WAIT)
    assert provider.calls == 1


def test_complete_rejects_long_prompts(item):
    provider = ScriptedProvider(["Answer: B"], max_context_chars=10)
    with pytest.raises(ContextTooLongError):
        complete(request_for(item), provider, NO_WAIT)
    assert provider.calls == 0


def _http_provider(handler) -> HttpChatProvider:
    settings = ProviderSettings(spec="http", base_url="http://llm.test/v1", model="m")
    return HttpChatProvider(settings, client=httpx.Client(transport=httpx.MockTransport(handler)))


def _reply(text: str) -> httpx.Response:
    return httpx.Response(
        200,
        json={
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3},
        },
    )


def test_http_provider_posts_chat_completion(item):
    seen: list[httpx.Request] = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return _reply("Answer: B")

    exchange = complete(request_for(item), _http_provider(handler), NO_WAIT)
    assert exchange.response.text == "Answer: B"
    assert exchange.response.usage.prompt_tokens == 12
    (request,) = seen
    assert request.url == "http://llm.test/v1/chat/completions"
    body = json.loads(request.content)
    assert body["model"] == "gpt-4o-mini"
    assert "probe" not in body
    assert [m["role"] for m in body["messages"]] == ["system", "user"]


def test_http_provider_retries_server_errors(item):
    responses = iter([httpx.Response(500), _reply("Answer: B")])
    exchange = complete(request_for(item), _http_provider(lambda _: next(responses)), NO_WAIT)
    assert exchange.attempts == 2


def test_http_provider_maps_errors(item):
    provider = _http_provider(lambda _: httpx.Response(401))
    with pytest.raises(AuthRejectedError):
        complete(request_for(item), provider, NO_WAIT)

    too_long = _http_provider(
        lambda _: httpx.Response(400, text="This model's maximum context length is 8192 tokens")
    )
    with pytest.raises(ContextTooLongError):
        complete(request_for(item), too_long, NO_WAIT)
