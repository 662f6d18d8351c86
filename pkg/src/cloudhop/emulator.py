"""In-process stand-in for a FaaS platform.

Deployed functions get randomly generated URLs and are invoked by Host
header, never by SNI (the SNI of an emulated request is recorded but ignored,
which is exactly what makes domain fronting work). Instances are ephemeral
with a cold-start penalty, invocations are capped in payload size, duration
and concurrency, and every invocation feeds per-function billing counters.

All timing runs on a Clock, so tests use a VirtualClock and nothing here ever
sleeps for real unless a RealClock is passed.
"""

from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass, field

from .clock import Clock, RealClock
from .httpmsg import Headers

URL_ID_LEN = 32
URL_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"

DEFAULT_COLD_START_MS = 400.0
DEFAULT_KEEP_WARM_S = 300.0
DEFAULT_MAX_CONCURRENCY = 1000
DEFAULT_PAYLOAD_CAP = 6 * 1024 * 1024
EXTENDED_PAYLOAD_CAP = 20 * 1024 * 1024


class EmulatorError(Exception):
    pass


@dataclass
class FunctionConfig:
    timeout_s: float = 15.0
    memory_mb: int = 128
    storage_mb: int = 512
    payload_cap_bytes: int = DEFAULT_PAYLOAD_CAP


@dataclass
class InvocationRequest:
    method: str = "GET"
    path: str = "/"
    headers: Headers = field(default_factory=Headers)
    body: bytes = b""
    arrival: float = 0.0


@dataclass
class InvocationResponse:
    status: int
    headers: Headers = field(default_factory=Headers)
    body: bytes = b""
    # filled in by the platform
    function_id: str = ""
    latency_ms: float = 0.0
    cold: bool = False


@dataclass
class InvocationContext:
    """What the function body can see of its own deployment."""

    function_id: str
    url: str
    region: str
    config: FunctionConfig
    _platform: "PlatformEmulator"

    def get_tag(self, key: str):
        return self._platform.get_tag(self.function_id, key)


@dataclass
class _Instance:
    created_at: float
    last_used: float
    busy: bool = False


@dataclass
class BillingCounter:
    invocation_count: int = 0
    total_duration_ms: float = 0.0
    gb_seconds: float = 0.0


@dataclass
class FunctionRecord:
    function_id: str
    url: str
    region: str
    handler: object
    config: FunctionConfig
    deployed_at: float
    tag_store: dict = field(default_factory=dict)
    deleted: bool = False
    instances: list = field(default_factory=list)
    billing: BillingCounter = field(default_factory=BillingCounter)

    @property
    def host(self) -> str:
        return self.url.split("//", 1)[1].rstrip("/")


class PlatformEmulator:
    def __init__(self, clock: Clock | None = None, seed: int | None = None,
                 cold_start_ms: float = DEFAULT_COLD_START_MS,
                 keep_warm_s: float = DEFAULT_KEEP_WARM_S,
                 max_concurrency: int = DEFAULT_MAX_CONCURRENCY):
        self.clock = clock or RealClock()
        self.cold_start_ms = cold_start_ms
        self.keep_warm_s = keep_warm_s
        self.max_concurrency = max_concurrency
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._functions: dict[str, FunctionRecord] = {}
        self._by_host: dict[str, str] = {}
        self._issued_urls: set[str] = set()   # every URL ever, incl. deleted
        self._seq = 0
        self.invocation_log: list[dict] = []

    # -- deployment -----------------------------------------------------

    def generate_url(self, region: str) -> str:
        with self._lock:
            while True:
                fid = "".join(self._rng.choice(URL_ALPHABET)
                              for _ in range(URL_ID_LEN))
                url = f"https://{fid}.lambda-url.{region}.on.aws/"
                if url not in self._issued_urls:
                    self._issued_urls.add(url)
                    return url

    def deploy(self, handler, region: str, config: FunctionConfig | None = None,
               url: str | None = None) -> FunctionRecord:
        """Deploy a function body. An explicit url (tests only) is rejected if
        it was ever issued before: retired URLs are tombstoned forever."""
        if url is None:
            url = self.generate_url(region)
        else:
            with self._lock:
                if url in self._issued_urls:
                    raise EmulatorError(f"url was already issued: {url}")
                self._issued_urls.add(url)
        host = url.split("//", 1)[1].rstrip("/")
        with self._lock:
            self._seq += 1
            record = FunctionRecord(
                function_id=f"fn-{self._seq:06d}-{host.split('.', 1)[0][:8]}",
                url=url, region=region, handler=handler,
                config=config or FunctionConfig(),
                deployed_at=self.clock.now(),
            )
            self._functions[record.function_id] = record
            self._by_host[host] = record.function_id
        return record

    def delete_function(self, function_id: str) -> None:
        with self._lock:
            record = self._functions.get(function_id)
            if record is None or record.deleted:
                raise EmulatorError(f"unknown function: {function_id}")
            record.deleted = True
            record.instances.clear()
            record.tag_store.clear()
            del self._by_host[record.host]

    def functions(self) -> list[FunctionRecord]:
        with self._lock:
            return list(self._functions.values())

    def get_function(self, function_id: str) -> FunctionRecord:
        with self._lock:
            record = self._functions.get(function_id)
        if record is None:
            raise EmulatorError(f"unknown function: {function_id}")
        return record

    # -- tags -------------------------------------------------------------

    def set_tag(self, function_id: str, key: str, value: str) -> None:
        with self._lock:
            record = self._functions.get(function_id)
            if record is None or record.deleted:
                raise EmulatorError(f"unknown function: {function_id}")
            record.tag_store[key] = value

    def get_tag(self, function_id: str, key: str):
        with self._lock:
            record = self._functions.get(function_id)
            if record is None or record.deleted:
                raise EmulatorError(f"unknown function: {function_id}")
            return record.tag_store.get(key)

    # -- invocation -------------------------------------------------------

    def invoke(self, host_header: str, request: InvocationRequest,
               sni: str | None = None) -> InvocationResponse:
        """Route by Host header only. SNI is recorded for the log and then
        ignored, so a fronted request with a foreign SNI still lands."""
        host = host_header.split(":", 1)[0].strip().lower()
        now = self.clock.now()
        with self._lock:
            fid = self._by_host.get(host)
            record = self._functions.get(fid) if fid else None
        if record is None or record.deleted:
            return self._finish(None, request, host, sni, InvocationResponse(
                status=404, body=b'{"error": "function not found"}'))

        cap = record.config.payload_cap_bytes
        if len(request.body) > cap:
            return self._finish(record, request, host, sni, InvocationResponse(
                status=413, function_id=record.function_id,
                body=json.dumps({"error": "payload too large",
                                 "cap": cap}).encode()))

        instance, cold = self._acquire_instance(record, now)
        if instance is None:
            return self._finish(record, request, host, sni, InvocationResponse(
                status=429, function_id=record.function_id,
                body=b'{"error": "throttled"}'))

        cold_ms = self.cold_start_ms if cold else 0.0
        if cold_ms:
            self.clock.sleep(cold_ms / 1000.0)

        request.arrival = self.clock.now()
        started = self.clock.now()
        ctx = InvocationContext(
            function_id=record.function_id, url=record.url,
            region=record.region, config=record.config, _platform=self)
        try:
            response = record.handler(request, ctx)
        except Exception as exc:  # function crash -> platform 500
            response = InvocationResponse(
                status=500,
                body=json.dumps({"error": f"function error: {exc}"}).encode())
        duration_ms = (self.clock.now() - started) * 1000.0

        timeout_ms = record.config.timeout_s * 1000.0
        if duration_ms > timeout_ms:
            duration_ms = timeout_ms  # billed at the timeout
            response = InvocationResponse(status=504, body=b'{"error": "timeout"}')
        elif len(response.body) > cap:
            response = InvocationResponse(
                status=502, body=b'{"error": "response over payload cap"}')

        with self._lock:
            record.billing.invocation_count += 1
            record.billing.total_duration_ms += duration_ms
            record.billing.gb_seconds += (
                record.config.memory_mb / 1024.0) * (duration_ms / 1000.0)
            instance.busy = False
            instance.last_used = self.clock.now()

        response.function_id = record.function_id
        response.latency_ms = cold_ms + duration_ms
        response.cold = cold
        return self._finish(record, request, host, sni, response)

    def _acquire_instance(self, record: FunctionRecord, now: float):
        with self._lock:
            if record.deleted:
                return None, False
            busy = sum(1 for i in record.instances if i.busy)
            if busy >= self.max_concurrency:
                return None, False
            for inst in record.instances:
                if not inst.busy and now - inst.last_used <= self.keep_warm_s:
                    inst.busy = True
                    return inst, False
            inst = _Instance(created_at=now, last_used=now, busy=True)
            record.instances.append(inst)
            return inst, True

    def _finish(self, record, request, host, sni, response) -> InvocationResponse:
        with self._lock:
            self.invocation_log.append({
                "function_id": record.function_id if record else None,
                "host": host,
                "sni": sni,
                "method": request.method,
                "path": request.path,
                "status": response.status,
                "cold": response.cold,
                "latency_ms": response.latency_ms,
                "at": self.clock.now(),
            })
        return response

    # -- lifecycle ----------------------------------------------------------

    def expire_instances(self, now: float | None = None) -> int:
        if now is None:
            now = self.clock.now()
        removed = 0
        with self._lock:
            for record in self._functions.values():
                keep = []
                for inst in record.instances:
                    if not inst.busy and now - inst.last_used > self.keep_warm_s:
                        removed += 1
                    else:
                        keep.append(inst)
                record.instances = keep
        return removed

    # -- accounting -----------------------------------------------------------

    def stats(self) -> dict:
        with self._lock:
            return {
                fid: {
                    "invocation_count": rec.billing.invocation_count,
                    "total_duration_ms": rec.billing.total_duration_ms,
                    "gb_seconds": rec.billing.gb_seconds,
                }
                for fid, rec in self._functions.items()
            }

    def stats_json(self) -> str:
        return json.dumps(self.stats(), indent=2, sort_keys=True)
