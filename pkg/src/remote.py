"""
Client for an external LLM service, plus the bundled mock service.

Wire format (HTTP POST, JSON):

    request:  {"prompt": str, "skeleton_tokens": [[float, ...], ...], "max_tokens": int}
    response: {"text": str}

Credentials come from EMOTOK_REMOTE_API_KEY and are sent as a bearer token.
"""
import asyncio
import logging
import os
from dataclasses import dataclass

import httpx
import uvicorn
from fastapi import FastAPI
from pydantic import BaseModel

from src.bridge import PromptKind, RenderedPrompt, SkeletonFeatures
from src.errors import ParameterError, RemoteSchemaError, RemoteStatusError, RemoteTimeoutError

API_KEY_ENV = "EMOTOK_REMOTE_API_KEY"
RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str = "http://127.0.0.1:8765/generate"
    timeout: float = 10.0
    retries: int = 2
    backoff: float = 0.5
    max_connections: int = 4
    max_tokens: int = 64

    def __post_init__(self):
        if self.timeout <= 0 or self.retries < 0 or self.backoff < 0 or self.max_connections < 1:
            raise ParameterError(f"invalid remote settings: {self}")

    @property
    def attempts(self) -> int:
        return self.retries + 1


def build_payload(prompt: str, skeleton_tokens: list[list[float]], max_tokens: int) -> dict:
    return {"prompt": prompt, "skeleton_tokens": skeleton_tokens, "max_tokens": int(max_tokens)}


def parse_response(response: httpx.Response, attempts: int) -> str:
    try:
        body = response.json()
    except ValueError as e:
        raise RemoteSchemaError("response body is not JSON", field="body", attempts=attempts) from e
    if not isinstance(body, dict) or "text" not in body:
        raise RemoteSchemaError("response is missing field 'text'", field="text", attempts=attempts)
    if not isinstance(body["text"], str):
        raise RemoteSchemaError("response field 'text' is not a string", field="text", attempts=attempts)
    return body["text"]


def _headers() -> dict[str, str]:
    key = os.environ.get(API_KEY_ENV)
    return {"Authorization": f"Bearer {key}"} if key else {}


async def remote_decode(
    client: httpx.AsyncClient,
    config: RemoteConfig,
    prompt: str,
    skeleton_tokens: list[list[float]],
    max_tokens: int | None = None,
) -> str:
    """One request with bounded retries and exponential backoff between attempts."""
    payload = build_payload(prompt, skeleton_tokens, max_tokens or config.max_tokens)
    last_status: int | None = None
    for attempt in range(1, config.attempts + 1):
        try:
            response = await client.post(config.endpoint, json=payload, headers=_headers(), timeout=config.timeout)
        except (httpx.TimeoutException, httpx.TransportError) as e:
            logger.warning(f"remote {config.endpoint}: attempt {attempt} failed ({type(e).__name__})")
            last_status = None
        else:
            logger.debug(f"remote {config.endpoint}: attempt {attempt} status {response.status_code}")
            if response.is_success:
                return parse_response(response, attempt)
            if response.status_code not in RETRYABLE_STATUS:
                raise RemoteStatusError(f"remote returned HTTP {response.status_code}", response.status_code, attempt)
            last_status = response.status_code
        if attempt < config.attempts:
            await asyncio.sleep(config.backoff * 2 ** (attempt - 1))

    if last_status is not None:
        raise RemoteStatusError(f"remote returned HTTP {last_status}", last_status, config.attempts)
    raise RemoteTimeoutError(f"remote endpoint {config.endpoint} did not answer", config.attempts)


class RemoteBackend:
    """Inference-only decoder backend; concurrency bounded by max_connections."""

    name = "remote"

    def __init__(self, config: RemoteConfig, transport: httpx.AsyncBaseTransport | None = None):
        self.config = config
        limits = httpx.Limits(max_connections=config.max_connections)
        self.client = httpx.AsyncClient(transport=transport, limits=limits)
        self._slots = asyncio.Semaphore(config.max_connections)

    async def generate(self, prompt: RenderedPrompt, features: SkeletonFeatures, *, max_tokens: int = 40, seed: int | None = None) -> str:
        async with self._slots:
            return await remote_decode(self.client, self.config, prompt.text, features.rows(), max_tokens)

    async def aclose(self) -> None:
        await self.client.aclose()

    async def __aenter__(self) -> "RemoteBackend":
        return self

    async def __aexit__(self, *exc) -> None:
        await self.aclose()


### Mock service


class GenerateRequest(BaseModel):
    prompt: str
    skeleton_tokens: list[list[float]]
    max_tokens: int


class GenerateResponse(BaseModel):
    text: str


def prompt_kind(text: str) -> PromptKind:
    return PromptKind.RECOGNITION if "Can you tell me the emotion" in text else PromptKind.DESCRIPTION


MOCK_RECOGNITION_TEXT = "This is a happy person."
MOCK_DESCRIPTION_TEXT = "This is a person whose arms swing freely and whose steps bounce with lively energy."


def create_mock_app(recognition_text: str = MOCK_RECOGNITION_TEXT, description_text: str = MOCK_DESCRIPTION_TEXT) -> FastAPI:
    """A stand-in LLM service answering every request with canned text."""
    app = FastAPI(title="emotok mock decoder")
    app.state.requests = []

    @app.post("/generate", response_model=GenerateResponse)
    async def generate(request: GenerateRequest) -> GenerateResponse:
        app.state.requests.append(request)
        recognition = prompt_kind(request.prompt) is PromptKind.RECOGNITION
        return GenerateResponse(text=recognition_text if recognition else description_text)

    @app.get("/health")
    async def health() -> dict:
        return {"status": "ok"}

    return app


def serve_mock(host: str = "127.0.0.1", port: int = 8765, recognition_text: str = MOCK_RECOGNITION_TEXT) -> None:
    logger.info(f"mock decoder listening on http://{host}:{port}/generate")
    uvicorn.run(create_mock_app(recognition_text), host=host, port=port, log_level="warning")
