import re
import threading

import pytest

from cloudhop.clock import VirtualClock
from cloudhop.emulator import (
    EmulatorError,
    FunctionConfig,
    InvocationRequest,
    InvocationResponse,
    PlatformEmulator,
)
from cloudhop.httpmsg import Headers


def echo_handler(req, ctx):
    return InvocationResponse(status=200, body=b"ok:" + req.body)


def make_platform(**kw):
    kw.setdefault("clock", VirtualClock())
    kw.setdefault("seed", 1)
    return PlatformEmulator(**kw)


class TestUrlGeneration:
    def test_grammar(self):
        plat = make_platform()
        pattern = re.compile(
            r"^https://[a-z0-9]{32}\.lambda-url\.eu-west-1\.on\.aws/$")
        for _ in range(200):
            assert pattern.match(plat.generate_url("eu-west-1"))

    def test_deterministic_sequence(self):
        a = make_platform(seed=42)
        b = make_platform(seed=42)
        urls_a = [a.generate_url("r") for _ in range(50)]
        urls_b = [b.generate_url("r") for _ in range(50)]
        assert urls_a == urls_b

    def test_no_collisions_bulk(self):
        plat = make_platform(seed=3)
        urls = {plat.generate_url("r") for _ in range(10000)}
        assert len(urls) == 10000

    def test_explicit_url_tombstoned(self):
        plat = make_platform()
        rec = plat.deploy(echo_handler, "r")
        plat.delete_function(rec.function_id)
        with pytest.raises(EmulatorError):
            plat.deploy(echo_handler, "r", url=rec.url)


class TestInvocation:
    def test_routes_by_host(self):
        plat = make_platform()
        rec = plat.deploy(echo_handler, "us-east-1")
        resp = plat.invoke(rec.host, InvocationRequest(body=b"hi"))
        assert resp.status == 200
        assert resp.body == b"ok:hi"
        assert resp.function_id == rec.function_id

    def test_unknown_host(self):
        plat = make_platform()
        resp = plat.invoke("nonexistent.on.aws", InvocationRequest())
        assert resp.status == 404

    def test_deleted_function_rejected(self):
        plat = make_platform()
        rec = plat.deploy(echo_handler, "r")
        plat.delete_function(rec.function_id)
        assert plat.invoke(rec.host, InvocationRequest()).status == 404

    def test_sni_is_ignored_for_routing(self):
        # Domain fronting: request reaches the function named by Host even
        # though the recorded SNI names something entirely different.
        plat = make_platform()
        rec = plat.deploy(echo_handler, "r")
        resp = plat.invoke(rec.host, InvocationRequest(body=b"x"),
                           sni="fabricated123.lambda-url.us-east-1.on.aws")
        assert resp.status == 200
        logged = plat.invocation_log[-1]
        assert logged["sni"] == "fabricated123.lambda-url.us-east-1.on.aws"
        assert logged["host"] == rec.host

    def test_payload_cap(self):
        plat = make_platform()
        rec = plat.deploy(echo_handler, "r",
                          config=FunctionConfig(payload_cap_bytes=100))
        assert plat.invoke(rec.host, InvocationRequest(body=b"x" * 100)).status == 200
        assert plat.invoke(rec.host, InvocationRequest(body=b"x" * 101)).status == 413

    def test_response_cap(self):
        plat = make_platform()
        rec = plat.deploy(lambda req, ctx: InvocationResponse(200, body=b"y" * 200),
                          "r", config=FunctionConfig(payload_cap_bytes=100))
        assert plat.invoke(rec.host, InvocationRequest()).status == 502

    def test_handler_crash_becomes_500(self):
        def boom(req, ctx):
            raise RuntimeError("nope")
        plat = make_platform()
        rec = plat.deploy(boom, "r")
        assert plat.invoke(rec.host, InvocationRequest()).status == 500

    def test_timeout_billed_at_timeout(self):
        clock = VirtualClock()

        def slow(req, ctx):
            clock.advance(20.0)
            return InvocationResponse(200, body=b"late")

        plat = make_platform(clock=clock)
        rec = plat.deploy(slow, "r", config=FunctionConfig(timeout_s=15.0))
        resp = plat.invoke(rec.host, InvocationRequest())
        assert resp.status == 504
        assert rec.billing.total_duration_ms == pytest.approx(15000.0)


class TestColdStart:
    def test_cold_then_warm(self):
        clock = VirtualClock()
        plat = make_platform(clock=clock, cold_start_ms=400)
        rec = plat.deploy(echo_handler, "r")
        first = plat.invoke(rec.host, InvocationRequest())
        second = plat.invoke(rec.host, InvocationRequest())
        assert first.cold and not second.cold
        assert first.latency_ms >= 400
        assert second.latency_ms < 400

    def test_idle_expiry_makes_next_cold(self):
        clock = VirtualClock()
        plat = make_platform(clock=clock, keep_warm_s=300)
        rec = plat.deploy(echo_handler, "r")
        plat.invoke(rec.host, InvocationRequest())
        clock.advance(301)
        assert plat.expire_instances() == 1
        assert plat.invoke(rec.host, InvocationRequest()).cold

    def test_busy_instance_not_expired(self):
        clock = VirtualClock()
        plat = make_platform(clock=clock)
        rec = plat.deploy(echo_handler, "r")
        plat.invoke(rec.host, InvocationRequest())
        rec.instances[0].busy = True
        clock.advance(10_000)
        assert plat.expire_instances() == 0
        rec.instances[0].busy = False

    def test_expire_on_empty_pool(self):
        plat = make_platform()
        assert plat.expire_instances() == 0

    def test_lazy_expiry_without_explicit_call(self):
        clock = VirtualClock()
        plat = make_platform(clock=clock, keep_warm_s=300)
        rec = plat.deploy(echo_handler, "r")
        plat.invoke(rec.host, InvocationRequest())
        clock.advance(500)
        assert plat.invoke(rec.host, InvocationRequest()).cold


class TestConcurrency:
    def test_throttle_at_ceiling(self):
        plat = make_platform(max_concurrency=2)
        release = threading.Event()
        started = threading.Barrier(3)

        def blocker(req, ctx):
            started.wait(timeout=5)
            release.wait(timeout=5)
            return InvocationResponse(200)

        rec = plat.deploy(blocker, "r")
        results = []

        def call():
            results.append(plat.invoke(rec.host, InvocationRequest()).status)

        threads = [threading.Thread(target=call) for _ in range(2)]
        for t in threads:
            t.start()
        started.wait(timeout=5)  # both workers inside the handler
        throttled = plat.invoke(rec.host, InvocationRequest())
        release.set()
        for t in threads:
            t.join()
        assert throttled.status == 429
        assert results == [200, 200]


class TestTags:
    def test_set_get(self):
        plat = make_platform()
        rec = plat.deploy(echo_handler, "r")
        plat.set_tag(rec.function_id, "migration", "http://next")
        assert plat.get_tag(rec.function_id, "migration") == "http://next"

    def test_get_unset_key(self):
        plat = make_platform()
        rec = plat.deploy(echo_handler, "r")
        assert plat.get_tag(rec.function_id, "nope") is None

    def test_tags_survive_instance_expiry(self):
        clock = VirtualClock()
        plat = make_platform(clock=clock)
        rec = plat.deploy(echo_handler, "r")
        plat.invoke(rec.host, InvocationRequest())
        plat.set_tag(rec.function_id, "k", "v")
        clock.advance(10_000)
        plat.expire_instances()
        assert plat.get_tag(rec.function_id, "k") == "v"

    def test_tags_do_not_survive_deletion(self):
        plat = make_platform()
        rec = plat.deploy(echo_handler, "r")
        plat.set_tag(rec.function_id, "k", "v")
        plat.delete_function(rec.function_id)
        with pytest.raises(EmulatorError):
            plat.get_tag(rec.function_id, "k")

    def test_unknown_function(self):
        plat = make_platform()
        with pytest.raises(EmulatorError):
            plat.set_tag("fn-missing", "k", "v")

    def test_handler_reads_own_tag(self):
        plat = make_platform()

        def tag_reader(req, ctx):
            return InvocationResponse(200, body=str(ctx.get_tag("k")).encode())

        rec = plat.deploy(tag_reader, "r")
        plat.set_tag(rec.function_id, "k", "hello")
        assert plat.invoke(rec.host, InvocationRequest()).body == b"hello"


class TestBilling:
    def test_exact_accounting(self):
        # Oracle: plain arithmetic over a scripted run with fixed durations.
        clock = VirtualClock()
        duration_ms = 250.0

        def timed(req, ctx):
            clock.advance(duration_ms / 1000.0)
            return InvocationResponse(200)

        plat = make_platform(clock=clock, cold_start_ms=100)
        rec = plat.deploy(timed, "r",
                          config=FunctionConfig(memory_mb=128))
        n = 40
        for _ in range(n):
            plat.invoke(rec.host, InvocationRequest())

        expected_duration = n * duration_ms
        expected_gb_s = n * (128 / 1024.0) * (duration_ms / 1000.0)
        assert rec.billing.invocation_count == n
        assert rec.billing.total_duration_ms == pytest.approx(expected_duration)
        assert rec.billing.gb_seconds == pytest.approx(expected_gb_s)

    def test_stats_shape(self):
        plat = make_platform()
        rec = plat.deploy(echo_handler, "r")
        plat.invoke(rec.host, InvocationRequest())
        stats = plat.stats()
        assert stats[rec.function_id]["invocation_count"] == 1
        assert "gb_seconds" in stats[rec.function_id]
