"""Minimal chat client for vision-language endpoints.

Speaks the common chat-completions JSON shape: a messages list whose
user content mixes text parts and base64 data-URL image parts. Network
and HTTP failures become BackendError after bounded retries; malformed
reply JSON becomes ParseError carrying the raw payload.
"""

from __future__ import annotations

import base64

import httpx
import numpy as np

from .errors import BackendError, ParseError
from .imageio import encode_png


def image_part(image: np.ndarray) -> dict:
    payload = base64.b64encode(encode_png(image)).decode("ascii")
    return {
        "type": "image_url",
        "image_url": {"url": f"data:image/png;base64,{payload}"},
    }


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def user_message(*parts) -> dict:
    return {"role": "user", "content": list(parts)}


class ChatClient:
    def __init__(self, endpoint: str, model: str, timeout: float = 30.0,
                 retries: int = 2, api_key: str | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.api_key = api_key

    def chat(self, messages: list[dict]) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"model": self.model, "messages": messages}
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = httpx.post(f"{self.endpoint}/chat/completions",
                                  json=body, headers=headers,
                                  timeout=self.timeout)
                resp.raise_for_status()
                data = resp.json()
                return data["choices"][0]["message"]["content"]
            except (httpx.HTTPError, OSError) as exc:
                last = exc
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed chat reply: {exc}") from exc
        raise BackendError(f"chat endpoint failed after retries: {last}")


def parse_yes_no(reply: str) -> bool:
    """Leading Yes/No token of a reply; anything else is a parse error."""
    head = reply.strip().strip("\"'").lower()
    if head.startswith("yes"):
        return True
    if head.startswith("no"):
        return False
    raise ParseError(f"expected a leading Yes or No, got: {reply[:80]!r}")
