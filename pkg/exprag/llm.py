"""Prompt rendering, chat-completion transport, mock providers and tolerant answer parsing."""

import hashlib
import json
import logging
import re
import string
import threading
import time
from abc import ABC, abstractmethod
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import ClassVar, Literal, Self, override

import httpx
from pydantic import AnyHttpUrl, BaseModel, ConfigDict, Field, model_validator
from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from exprag.exceptions import (
    AuthRejectedError,
    ContextTooLongError,
    InvalidParameterError,
    RateLimitedError,
    TransientTransportError,
    TransportError,
    UnfilledPlaceholderError,
)
from exprag.qa import LETTERS, AnswerMode, QAItem
from exprag.segmenter import normalize_text
from utils.configs import YamlBaseModel

logger = logging.getLogger(__name__)


class PromptTemplate(BaseModel):
    template_id: str
    version: int = 1
    system: str = Field(description="Role preamble sent as the system message.")
    user: str = Field(description="User message with {question} {background} {options} {context}.")

    @property
    def placeholders(self) -> list[str]:
        names = [name for _, name, _, _ in string.Formatter().parse(self.user) if name is not None]
        return list(dict.fromkeys(names))


_CLINICIAN = (
    "You are an experienced clinician preparing a patient's discharge. Read the patient "
    "background carefully and answer the multiple-choice question. Reply with the letter(s) "
    "of the correct option(s) only, for example 'Answer: B' or 'Answer: A, C'."
)


def _default_rag() -> PromptTemplate:
    return PromptTemplate(
        template_id="clinician-rag",
        system=_CLINICIAN,
        user=(
            "Relevant experience from similar patients:\n{context}\n\n"
            "Patient background:\n{background}\n\n"
            "Question: {question}\n\nOptions:\n{options}\n\nAnswer:"
        ),
    )


def _default_direct_ask() -> PromptTemplate:
    return PromptTemplate(
        template_id="clinician-direct-ask",
        system=_CLINICIAN,
        user=(
            "Patient background:\n{background}\n\n"
            "Question: {question}\n\nOptions:\n{options}\n\nAnswer:"
        ),
    )


class PromptLibrary(YamlBaseModel):
    """Versioned prompt templates; prompt text lives in configuration."""

    DEFAULT_CONFIG_PATH: ClassVar[Path] = Path("configs/prompts.yaml")

    rag: PromptTemplate = Field(default_factory=_default_rag)
    direct_ask: PromptTemplate = Field(default_factory=_default_direct_ask)
    extras: dict[str, PromptTemplate] = Field(
        default_factory=dict, description="Templates of the LLM-backed generation helpers."
    )


class ChatMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Literal["system", "user", "assistant"]
    content: str


def render_template(
    template: PromptTemplate, fields: Mapping[str, str | None]
) -> list[ChatMessage]:
    """Fill a template's user message; every placeholder needs a provided value.

    Raises:
        UnfilledPlaceholderError: If a placeholder has no value.
    """
    for name in template.placeholders:
        if fields.get(name) is None:
            raise UnfilledPlaceholderError(name, template.template_id)
    return [
        ChatMessage(role="system", content=template.system),
        ChatMessage(role="user", content=template.user.format_map(fields)),
    ]


def render_prompt(
    item: QAItem, context: str = "", library: PromptLibrary | None = None
) -> list[ChatMessage]:
    """Messages asking a question; an empty context selects the Direct-Ask template.

    Raises:
        UnfilledPlaceholderError: If the chosen template has a placeholder with no value.
    """
    library = library or PromptLibrary()
    template = library.rag if context.strip() else library.direct_ask
    fields = {
        "question": item.question,
        "background": item.background,
        "options": item.render_options(),
        "context": context if context.strip() else None,
    }
    return render_template(template, fields)


def prompt_hash(messages: Sequence[ChatMessage]) -> str:
    payload = json.dumps([m.model_dump() for m in messages], sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


class QuestionContext(BaseModel):
    """What the mock providers may peek at: the item's gold and the supplied context."""

    model_config = ConfigDict(frozen=True)

    n_options: int
    gold_letters: list[str]
    gold_texts: list[str]
    context: str = ""

    @classmethod
    def of(cls, item: QAItem, context: str = "") -> Self:
        gold = item.gold_set
        return cls(
            n_options=item.n_options,
            gold_letters=sorted(gold),
            gold_texts=[option.text for option in item.options if option.letter in gold],
            context=context,
        )


class ChatRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: str
    messages: list[ChatMessage]
    temperature: float = 0.0
    max_tokens: int = 64
    probe: QuestionContext | None = Field(default=None, exclude=True)

    @property
    def prompt_chars(self) -> int:
        return sum(len(m.content) for m in self.messages)


class TokenUsage(BaseModel):
    prompt_tokens: int = 0
    completion_tokens: int = 0


class ChatResponse(BaseModel):
    text: str
    usage: TokenUsage | None = None
    latency_s: float = 0.0


class ChatExchange(BaseModel):
    request: ChatRequest
    response: ChatResponse
    attempts: int = Field(ge=1)


class RetrySettings(BaseModel):
    max_attempts: int = Field(default=3, ge=1)
    initial_wait_s: float = Field(default=1.0, ge=0)
    max_wait_s: float = Field(default=8.0, ge=0)


class ProviderSettings(BaseModel):
    spec: str = Field(
        default="mock:echo-gold",
        description="http | mock:echo-gold | mock:fixed-letter[:X] | mock:context-aware",
    )
    base_url: AnyHttpUrl | None = Field(default=None, description="OpenAI-compatible API root.")
    model: str = "gpt-4o-mini"
    temperature: float = Field(default=0.0, ge=0)
    max_tokens: int = Field(default=64, ge=1)
    timeout_s: float = Field(default=60.0, gt=0)
    max_in_flight: int = Field(default=4, ge=1)
    max_context_chars: int | None = Field(default=None, ge=1)
    retry: RetrySettings = Field(default_factory=RetrySettings)

    @model_validator(mode="after")
    def _http_needs_url(self) -> Self:
        if self.spec == "http" and self.base_url is None:
            raise ValueError("The http provider needs a base_url.")
        return self

    def request(
        self, messages: list[ChatMessage], probe: QuestionContext | None = None
    ) -> ChatRequest:
        return ChatRequest(
            model=self.model,
            messages=messages,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            probe=probe,
        )


class ChatProvider(ABC):
    """One chat-completion attempt per call to ``send``; retries live in ``complete``."""

    max_context_chars: int | None = None

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @abstractmethod
    def send(self, request: ChatRequest) -> ChatResponse:
        pass


_CONTEXT_LENGTH = re.compile(r"context[ _]length|maximum context|too many tokens", re.IGNORECASE)


class HttpChatProvider(ChatProvider):
    """Client of an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        settings: ProviderSettings,
        api_key: str | None = None,
        client: httpx.Client | None = None,
    ):
        if settings.base_url is None:
            raise InvalidParameterError("HttpChatProvider needs a base_url.")
        self.settings = settings
        self.max_context_chars = settings.max_context_chars
        self._url = str(settings.base_url).rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(headers=headers, timeout=settings.timeout_s)

    @property
    @override
    def name(self) -> str:
        return f"http:{self.settings.model}"

    @override
    def send(self, request: ChatRequest) -> ChatResponse:
        payload = request.model_dump(mode="json")
        started = time.perf_counter()
        try:
            response = self._client.post(self._url, json=payload)
        except httpx.TransportError as e:
            raise TransientTransportError(f"{type(e).__name__}: {e}") from e
        latency = time.perf_counter() - started

        status = response.status_code
        if status in (401, 403):
            raise AuthRejectedError(f"Endpoint rejected the credential (HTTP {status}).")
        if status == 429:
            raise RateLimitedError("Endpoint is rate limiting requests (HTTP 429).")
        if status in (400, 413) and _CONTEXT_LENGTH.search(response.text):
            raise ContextTooLongError(request.prompt_chars, self.max_context_chars or 0)
        if status >= 500:
            raise TransientTransportError(f"Endpoint failed with HTTP {status}.")
        if status >= 400:
            raise TransportError(
                f"Endpoint refused the request with HTTP {status}: {response.text[:200]}"
            )

        data = response.json()
        choices = data.get("choices") or []
        if not choices:
            raise TransportError("Endpoint returned no choices.")
        message = choices[0].get("message") or {}
        usage = data.get("usage")
        return ChatResponse(
            text=str(message.get("content") or ""),
            usage=TokenUsage.model_validate(usage) if usage else None,
            latency_s=latency,
        )


class EchoGoldProvider(ChatProvider):
    """Answers with the item's gold letters: the upper bound of any harness."""

    @property
    @override
    def name(self) -> str:
        return "mock:echo-gold"

    @override
    def send(self, request: ChatRequest) -> ChatResponse:
        letters = request.probe.gold_letters if request.probe else []
        return ChatResponse(text=f"Answer: {format_letters(letters)}")


class FixedLetterProvider(ChatProvider):
    def __init__(self, letter: str = "A"):
        if letter not in LETTERS:
            raise InvalidParameterError(f"Fixed letter must be one of A-Z, got {letter!r}.")
        self.letter = letter

    @property
    @override
    def name(self) -> str:
        return f"mock:fixed-letter:{self.letter}"

    @override
    def send(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(text=f"Answer: {self.letter}")


class ContextAwareProvider(ChatProvider):
    """Answers the gold letters iff some gold option's normalized text occurs in the context.

    Otherwise it picks the first non-gold letter.
    """

    @property
    @override
    def name(self) -> str:
        return "mock:context-aware"

    @override
    def send(self, request: ChatRequest) -> ChatResponse:
        probe = request.probe
        if probe is None:
            return ChatResponse(text="I cannot determine this.")
        context = f" {normalize_text(probe.context)} "
        if any(f" {normalize_text(text)} " in context for text in probe.gold_texts):
            return ChatResponse(text=f"Answer: {format_letters(probe.gold_letters)}")
        wrong = next(
            (letter for letter in LETTERS[: probe.n_options] if letter not in probe.gold_letters),
            "A",
        )
        return ChatResponse(text=f"Answer: {wrong}")


class ScriptedProvider(ChatProvider):
    """Replays a script of replies and failures in order, then repeats the last entry."""

    def __init__(self, script: Sequence[str | Exception], max_context_chars: int | None = None):
        if not script:
            raise InvalidParameterError("A scripted provider needs at least one entry.")
        self._script = list(script)
        self._lock = threading.Lock()
        self.calls = 0
        self.max_context_chars = max_context_chars

    @property
    @override
    def name(self) -> str:
        return "mock:scripted"

    @override
    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            entry = self._script[min(self.calls, len(self._script) - 1)]
            self.calls += 1
        if isinstance(entry, Exception):
            raise entry
        return ChatResponse(text=entry)


def provider_from_spec(
    settings: ProviderSettings, api_key: str | None = None, client: httpx.Client | None = None
) -> ChatProvider:
    """Instantiate the provider named by ``settings.spec``.

    Raises:
        InvalidParameterError: If the spec names no known provider.
    """
    kind, _, argument = settings.spec.partition(":")
    if kind == "http":
        return HttpChatProvider(settings, api_key, client)
    if kind == "mock":
        name, _, letter = argument.partition(":")
        match name:
            case "echo-gold":
                provider: ChatProvider = EchoGoldProvider()
            case "fixed-letter":
                provider = FixedLetterProvider(letter or "A")
            case "context-aware":
                provider = ContextAwareProvider()
            case _:
                raise InvalidParameterError(f"Unknown mock provider {argument!r}.")
        provider.max_context_chars = settings.max_context_chars
        return provider
    raise InvalidParameterError(f"Unknown provider {settings.spec!r}.")


def complete(
    request: ChatRequest, provider: ChatProvider, retry: RetrySettings | None = None
) -> ChatExchange:
    """Send a request, retrying transient failures with exponential backoff.

    Raises:
        ContextTooLongError: If the prompt exceeds the provider's context; never retried.
        AuthRejectedError: If the credential is refused.
        TransportError: If the endpoint still fails after the last attempt.
    """
    retry = retry or RetrySettings()
    limit = provider.max_context_chars
    if limit is not None and request.prompt_chars > limit:
        raise ContextTooLongError(request.prompt_chars, limit)

    started = time.perf_counter()
    retrying = Retrying(
        stop=stop_after_attempt(retry.max_attempts),
        wait=wait_exponential(multiplier=retry.initial_wait_s, max=retry.max_wait_s),
        retry=retry_if_exception_type(TransientTransportError),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    )
    for attempt in retrying:
        with attempt:
            response = provider.send(request)
        outcome = attempt.retry_state.outcome
        if outcome is not None and not outcome.failed:
            return ChatExchange(
                request=request,
                response=response.model_copy(
                    update={"latency_s": time.perf_counter() - started}
                ),
                attempts=attempt.retry_state.attempt_number,
            )
    raise TransportError("Retry loop ended without an outcome.")


class ParsedAnswer(BaseModel):
    """Either a non-empty set of letters or the reason the reply was unusable."""

    model_config = ConfigDict(frozen=True)

    letters: list[str] = Field(default_factory=list)
    invalid: str | None = None

    @model_validator(mode="after")
    def _one_outcome(self) -> Self:
        if bool(self.letters) == (self.invalid is not None):
            raise ValueError("A parsed answer holds either letters or an invalid reason.")
        return self

    @classmethod
    def of(cls, letters: Sequence[str]) -> Self:
        return cls(letters=sorted(set(letters)))

    @classmethod
    def invalid_because(cls, reason: str) -> Self:
        return cls(invalid=reason)

    @property
    def is_valid(self) -> bool:
        return self.invalid is None

    @property
    def letter_set(self) -> frozenset[str]:
        return frozenset(self.letters)


def format_letters(letters: Sequence[str] | frozenset[str]) -> str:
    return ", ".join(sorted(letters))


_SEPARATOR = re.compile(r"\s*(?:(?:and|or)\b|[,;/&*\[\]()]|\s)*\s*")
_LETTER = re.compile(r"([A-Z])(?![A-Za-z'])[).:]?")


def _leading_letters(text: str) -> tuple[list[str], str]:
    """Letters listed at the start of ``text`` and whatever follows them."""
    letters: list[str] = []
    position = 0
    while True:
        separator = _SEPARATOR.match(text, position)
        start = separator.end() if separator else position
        letter = _LETTER.match(text, start)
        if letter is None:
            return letters, text[position:]
        letters.append(letter.group(1))
        position = letter.end()


def _answer_label(text: str) -> list[str]:
    match = re.search(
        r"\b(?:final\s+)?(?:answer|choice)s?\b(?:\s+(?:is|are))?\s*[:\-]?", text, re.IGNORECASE
    )
    if match is None:
        return []
    tail = text[match.end() :]
    letters, rest = _leading_letters(tail)
    # "Answer: A) Hypertension; C) Diabetes" labels every chosen option
    if letters and re.match(r"\s*[A-Z]\)", tail):
        letters += re.findall(r"(?<![A-Za-z])([A-Z])\)", rest)
    return letters


def _bracketed(text: str) -> list[str]:
    for match in re.finditer(r"\[([^\]]*)\]", text):
        letters, rest = _leading_letters(match.group(1))
        if letters and not rest.strip(" ,;."):
            return letters
    return []


def _letter_list(text: str) -> list[str]:
    letters, rest = _leading_letters(text.strip())
    return letters if letters and not rest.strip(" .,;!") else []


def _option_prefix(text: str) -> list[str]:
    return re.findall(r"^\s*([A-Z])\)", text, re.MULTILINE)


def _standalone(text: str) -> list[str]:
    # "I" and "A" followed by a lowercase word are a pronoun or an article
    return re.findall(r"(?<![A-Za-z'])(?![AI]\s+[a-z])([A-Z])(?![A-Za-z'])", text)


ANSWER_PATTERNS = (
    ("answer_label", _answer_label),
    ("bracketed", _bracketed),
    ("letter_list", _letter_list),
    ("option_prefix", _option_prefix),
    ("standalone", _standalone),
)


def parse_answer(text: str, mode: AnswerMode, n_options: int) -> ParsedAnswer:
    """Extract option letters from a reply; patterns are tried in ``ANSWER_PATTERNS`` order.

    Single-select keeps the first in-range letter; multi-select keeps the deduplicated set and
    rejects it when any letter falls outside the options.

    Raises:
        InvalidParameterError: If ``n_options`` is smaller than 2.
    """
    if not 2 <= n_options <= len(LETTERS):
        raise InvalidParameterError(f"n_options must lie in [2, {len(LETTERS)}], got {n_options}.")
    valid = set(LETTERS[:n_options])
    for pattern, extract in ANSWER_PATTERNS:
        letters = extract(text)
        if not letters:
            continue
        logger.debug("Parsed %r with pattern %s: %s", text[:80], pattern, letters)
        if mode is AnswerMode.SINGLE_SELECT:
            first = next((letter for letter in letters if letter in valid), None)
            if first is None:
                return ParsedAnswer.invalid_because("out of range")
            return ParsedAnswer.of([first])
        if not set(letters) <= valid:
            return ParsedAnswer.invalid_because("out of range")
        return ParsedAnswer.of(letters)
    logger.debug("No answer pattern matched %r", text[:80])
    return ParsedAnswer.invalid_because("no answer")


class TranscriptRecord(BaseModel):
    question_id: str
    context_mode: str
    provider: str
    prompt_hash: str
    response_text: str | None
    attempts: int
    latency_s: float
    error: str | None = None
