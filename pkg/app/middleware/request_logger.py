import json
import time
from typing import Any, Dict, List
from uuid import uuid4

from starlette.types import ASGIApp, Message, Receive, Scope, Send

from app.core.logger import logger

SENSITIVE_HEADERS = {"authorization", "cookie", "set-cookie"}
MAX_BODY_LOG_BYTES = 1024 * 4  # token grids are large; log a preview only

EXCLUDED_PATHS = {"/openapi.json", "/docs", "/redoc", "/healthcheck"}


def _preview(body: bytes) -> Any:
    if not body:
        return None
    head = body[:MAX_BODY_LOG_BYTES]
    if len(body) > MAX_BODY_LOG_BYTES:
        return {"truncated": True, "bytes": len(body), "preview": head.decode("utf-8", errors="replace")}
    try:
        return json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return head.decode("utf-8", errors="replace")


def _redact_headers(raw: List) -> Dict[str, str]:
    headers = {k.decode("latin-1"): v.decode("latin-1") for k, v in raw}
    return {k: "<redacted>" if k.lower() in SENSITIVE_HEADERS else v for k, v in headers.items()}


class LoggingMiddleware:
    """
    ASGI middleware logging each request and its response with a shared request id.

    The request body is buffered once and replayed downstream so route
    handlers still see it.
    """

    def __init__(self, app: ASGIApp):
        self.app = app

    async def __call__(self, scope: Scope, receive: Receive, send: Send) -> None:
        path = scope.get("path", "")
        root = scope.get("root_path", "")
        if scope["type"] != "http" or path.removeprefix(root) in EXCLUDED_PATHS:
            await self.app(scope, receive, send)
            return

        request_id = uuid4().hex[:12]
        start = time.perf_counter()

        chunks = []
        while True:
            message = await receive()
            if message["type"] != "http.request":
                break
            chunks.append(message.get("body", b""))
            if not message.get("more_body", False):
                break
        body = b"".join(chunks)
        replayed = False

        async def receive_replay() -> Message:
            nonlocal replayed
            if replayed:
                return await receive()
            replayed = True
            return {"type": "http.request", "body": body, "more_body": False}

        logger.info(
            "Request {}: {}",
            request_id,
            json.dumps(
                {
                    "method": scope.get("method"),
                    "path": path,
                    "query": scope.get("query_string", b"").decode("utf-8", errors="replace"),
                    "headers": _redact_headers(scope.get("headers", [])),
                    "body": _preview(body),
                },
                default=str,
            ),
        )

        status_code = None
        sent = bytearray()

        async def send_wrapper(message: Message) -> None:
            nonlocal status_code
            if message["type"] == "http.response.start":
                status_code = message.get("status")
            elif message["type"] == "http.response.body":
                if len(sent) < MAX_BODY_LOG_BYTES:
                    sent.extend(message.get("body", b"")[: MAX_BODY_LOG_BYTES - len(sent)])
                if not message.get("more_body", False):
                    logger.info(
                        "Response {}: status={} time={:.4f}s body={}",
                        request_id,
                        status_code,
                        time.perf_counter() - start,
                        json.dumps(_preview(bytes(sent)), default=str),
                    )
            await send(message)

        await self.app(scope, receive_replay, send_wrapper)
