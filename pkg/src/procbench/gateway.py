"""Run instruction instances against model backends with an on-disk response cache.

Backends: ``http_chat`` (any chat-completion style endpoint), ``oracle`` (echoes
the expected output) and ``random`` (seeded, well-formed random answers).
"""
from __future__ import annotations

import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx

from . import jsonl
from .evaluation import ACTIVITY, BOOL, DFG, TRACE, output_kind
from .instructions import InstructionInstance, format_edges, format_trace
from .tasks import SDFD, SPTD
from .tree import random_tree, serialize_tree

log = logging.getLogger(__name__)

HTTP_CHAT = "http_chat"
ORACLE = "oracle"
RANDOM = "random"
BACKEND_KINDS = (HTTP_CHAT, ORACLE, RANDOM)

RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class GatewayError(RuntimeError):
    pass


class AuthError(GatewayError):
    pass


class EndpointUnreachable(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = ORACLE
    endpoint: str | None = None
    model: str | None = None
    temperature: float = 0.0
    max_tokens: int = 512
    max_tokens_discovery: int = 2048
    token_env: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    seed: int = 0
    system_prompt: str | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}; expected one of {BACKEND_KINDS}")
        if self.kind == HTTP_CHAT and not (self.endpoint and self.model):
            raise ValueError("http_chat backends need both endpoint and model")
        if self.max_in_flight < 1 or self.max_retries < 0:
            raise ValueError("max_in_flight must be >= 1 and max_retries >= 0")

    @property
    def backend_id(self) -> str:
        if self.name:
            base = self.name
        elif self.kind == HTTP_CHAT:
            base = f"http_chat-{self.model}"
        elif self.kind == RANDOM:
            base = f"random-{self.seed}"
        else:
            base = ORACLE
        return re.sub(r"[^A-Za-z0-9._-]+", "_", base)

    def decoding(self, task: str) -> dict:
        max_tokens = self.max_tokens_discovery if task in (SDFD, SPTD) else self.max_tokens
        return {"temperature": self.temperature, "max_tokens": max_tokens}


@dataclass
class ResponseRecord:
    instance_id: str
    prompt_digest: str
    raw_output: str
    latency_ms: float
    backend_id: str
    cached: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def render_prompt(instance: InstructionInstance) -> str:
    return f"{instance.formulation}\n\n{instance.context}"


def prompt_digest(backend_id: str, prompt: str, decoding: dict) -> str:
    return jsonl.digest([backend_id, prompt, decoding])


def cache_path(cache_dir: str | Path, backend_id: str, digest: str) -> Path:
    return Path(cache_dir) / backend_id / digest[:2] / f"{digest}.json"


# -- offline responders -----------------------------------------------------------

def random_response(instance: InstructionInstance, seed: int) -> str:
    rng = random.Random(f"{seed}:{instance.instance_id}")
    acts = list(instance.activity_set)
    kind = output_kind(instance.task, instance.variant)
    if kind == BOOL:
        return rng.choice(("True", "False"))
    if kind == ACTIVITY:
        return rng.choice(acts)
    if kind == TRACE:
        return format_trace(rng.choice(acts) for _ in range(rng.randint(1, len(acts))))
    if kind == DFG:
        return format_edges((x, y) for x in acts for y in acts if x != y and rng.random() < 0.3)
    return serialize_tree(random_tree(rng, acts, max_depth=3, tau_prob=0.0))


# -- batch execution ----------------------------------------------------------------

def _request_text(config: BackendConfig, inst: InstructionInstance, prompt: str) -> str:
    # offline responders see more than the prompt, so that extra input is part of the key
    if config.kind == ORACLE:
        return f"{prompt}\n\n{inst.output}"
    if config.kind == RANDOM:
        return f"{prompt}\n\n{inst.instance_id}"
    return prompt


class _HttpBackend:
    def __init__(self, config: BackendConfig, client: httpx.Client | None, sleep: Callable[[float], None]):
        self.config = config
        self.sleep = sleep
        self.client = client or httpx.Client(timeout=config.timeout)
        self.owns_client = client is None
        self.headers = {"Content-Type": "application/json"}
        if config.token_env:
            token = os.environ.get(config.token_env)
            if not token:
                raise AuthError(f"environment variable {config.token_env} is not set")
            self.headers["Authorization"] = f"Bearer {token}"

    def close(self):
        if self.owns_client:
            self.client.close()

    def _backoff(self, attempt: int):
        delay = min(8.0, 0.5 * 2 ** attempt) * (0.8 + random.random() * 0.4)
        self.sleep(delay)

    def complete(self, prompt: str, decoding: dict) -> str:
        messages = []
        if self.config.system_prompt:
            messages.append({"role": "system", "content": self.config.system_prompt})
        messages.append({"role": "user", "content": prompt})
        body = {"model": self.config.model, "messages": messages, **decoding}
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._backoff(attempt - 1)
            try:
                resp = self.client.post(self.config.endpoint, json=body, headers=self.headers)
            except httpx.TransportError as exc:
                last = EndpointUnreachable(f"{type(exc).__name__}: {exc}")
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code in RETRYABLE_STATUS:
                last = GatewayError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise MalformedResponse(f"unexpected response body: {resp.text[:200]}") from exc
            if not isinstance(content, str):
                raise MalformedResponse("message content is not a string")
            return content
        raise last or GatewayError("request failed")


def run_batch(
    instances: Sequence[InstructionInstance],
    config: BackendConfig,
    cache_dir: str | Path,
    *,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[ResponseRecord]:
    """Answer every instance, in input order; cached prompts are not sent again.

    Per-instance failures after all retries yield a record with an empty
    output and an ``error`` note. Authentication failures abort the batch;
    if no request reaches the endpoint at all, EndpointUnreachable is raised.
    Completed responses are on disk as soon as they arrive.
    """
    backend_id = config.backend_id
    http = _HttpBackend(config, client, sleep) if config.kind == HTTP_CHAT else None

    jobs: dict[str, tuple[str, dict, InstructionInstance]] = {}
    keys = []
    for inst in instances:
        prompt = render_prompt(inst)
        decoding = config.decoding(inst.task)
        digest = prompt_digest(backend_id, _request_text(config, inst, prompt), decoding)
        keys.append(digest)
        jobs.setdefault(digest, (prompt, decoding, inst))

    results: dict[str, tuple[str, float, bool, str | None]] = {}
    pending = []
    for digest, (_, _, inst) in jobs.items():
        path = cache_path(cache_dir, backend_id, digest)
        if path.exists():
            cached = jsonl.read_json(path)
            results[digest] = (cached["raw_output"], 0.0, True, None)
        else:
            pending.append(digest)

    lock = threading.Lock()

    def work(digest: str):
        prompt, decoding, inst = jobs[digest]
        start = time.perf_counter()
        error = None
        try:
            if config.kind == ORACLE:
                raw = inst.output
            elif config.kind == RANDOM:
                raw = random_response(inst, config.seed)
            else:
                raw = http.complete(prompt, decoding)
        except AuthError:
            raise
        except EndpointUnreachable as exc:
            raw, error = "", f"unreachable: {exc}"
        except GatewayError as exc:
            raw, error = "", f"{type(exc).__name__}: {exc}"
        latency = round((time.perf_counter() - start) * 1000.0, 3)
        if error is None:
            jsonl.write_json(
                cache_path(cache_dir, backend_id, digest),
                {"prompt_digest": digest, "backend_id": backend_id, "raw_output": raw, "decoding": decoding},
            )
        with lock:
            results[digest] = (raw, latency, False, error)

    try:
        if pending:
            with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
                for fut in [pool.submit(work, d) for d in pending]:
                    fut.result()
    finally:
        if http is not None:
            http.close()

    attempted = [results[d] for d in pending]
    if attempted and all((r[3] or "").startswith("unreachable") for r in attempted):
        raise EndpointUnreachable(f"no request reached {config.endpoint}")

    out = []
    for inst, digest in zip(instances, keys):
        raw, latency, cached, error = results[digest]
        out.append(ResponseRecord(inst.instance_id, digest, raw, latency, backend_id, cached, error))
    return out


def write_responses(path: str | Path, records: Sequence[ResponseRecord]) -> None:
    jsonl.write_jsonl(path, (r.to_dict() for r in records))


def read_responses(path: str | Path) -> list[dict]:
    return list(jsonl.read_jsonl(path))
