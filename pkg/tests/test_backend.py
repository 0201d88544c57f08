# tests/test_backend.py
"""Tests for the mock, cassette and HTTP completion backends."""

import asyncio
import json
from types import SimpleNamespace

import pytest

from cartlab.backend import (
    BackendError,
    CassetteBackend,
    CompletionRequest,
    FailureType,
    HTTPBackend,
    MockBackend,
    ReplayMiss,
    build_backend,
    classify_failure,
    load_cassette,
)

HELLO = CompletionRequest.user("hello")


class TestCompletionRequest:
    def test_digest_covers_messages_and_params(self):
        assert HELLO.digest == CompletionRequest.user("hello").digest
        assert HELLO.digest != CompletionRequest.user("hello", temperature=0.7).digest
        assert HELLO.digest != CompletionRequest.user("hello!").digest


class TestMockBackend:
    """Resolution order of the offline backend."""

    @pytest.mark.asyncio
    async def test_table_then_script_then_responder(self):
        backend = MockBackend(
            table={HELLO.digest: "from table"},
            script=["first"],
            responder=lambda request: request.messages[-1][1].upper(),
        )
        assert await backend.complete(HELLO) == "from table"
        assert await backend.complete(CompletionRequest.user("a")) == "first"
        assert await backend.complete(CompletionRequest.user("b")) == "B"
        assert backend.calls == 3

    @pytest.mark.asyncio
    async def test_seeded_choices_repeat(self):
        first = MockBackend(choices=["x", "y", "z"], seed=7)
        second = MockBackend(choices=["x", "y", "z"], seed=7)
        picks = [await first.complete(HELLO) for _ in range(5)]
        assert picks == [await second.complete(HELLO) for _ in range(5)]

    @pytest.mark.asyncio
    async def test_no_response(self):
        with pytest.raises(BackendError):
            await MockBackend().complete(HELLO)


class TestCassetteBackend:
    """Record, replay and strict modes."""

    @pytest.mark.asyncio
    async def test_record_then_strict_replay(self, tmp_path):
        path = tmp_path / "cassettes" / "run.jsonl"
        recorder = CassetteBackend(MockBackend(script=["hi there"]), path, mode="record")
        assert await recorder.complete(HELLO) == "hi there"
        assert await recorder.complete(HELLO) == "hi there"
        assert (recorder.hits, recorder.misses) == (1, 1)

        lines = path.read_text().splitlines()
        assert [json.loads(line) for line in lines] == [{"digest": HELLO.digest, "response": "hi there"}]

        player = CassetteBackend(None, path, mode="strict")
        assert await player.complete(HELLO) == "hi there"
        with pytest.raises(ReplayMiss):
            await player.complete(CompletionRequest.user("something new"))

    @pytest.mark.asyncio
    async def test_replay_does_not_save(self, tmp_path):
        path = tmp_path / "run.jsonl"
        backend = CassetteBackend(MockBackend(script=["live"]), path, mode="replay")
        assert await backend.complete(HELLO) == "live"
        assert not path.exists()

    def test_json_list_cassette(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps([{"digest": "abc", "response": "one"}, ["def", "two"]]))
        assert load_cassette(path) == {"abc": "one", "def": "two"}
        assert load_cassette(tmp_path / "missing.jsonl") == {}

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            CassetteBackend(mode="rewind")


class FakeCompletions:
    """Stands in for client.chat.completions; raises the scripted errors first."""

    def __init__(self, errors=(), content="ok", delay=0.0):
        self.errors = list(errors)
        self.content = content
        self.delay = delay
        self.kwargs = []

    async def create(self, **kwargs):
        self.kwargs.append(kwargs)
        if self.delay:
            await asyncio.sleep(self.delay)
        if self.errors:
            raise self.errors.pop(0)
        message = SimpleNamespace(content=self.content)
        return SimpleNamespace(choices=[SimpleNamespace(message=message)])


def fake_client(completions):
    return SimpleNamespace(chat=SimpleNamespace(completions=completions))


class TestHTTPBackend:
    """Retry, classification and concurrency of the HTTP backend."""

    @pytest.mark.parametrize("error,expected", [
        (asyncio.TimeoutError(), FailureType.TRANSIENT),
        (ConnectionResetError("peer reset"), FailureType.TRANSIENT),
        (RuntimeError("Rate limit reached, try again"), FailureType.TRANSIENT),
        (RuntimeError("Invalid API key"), FailureType.FUNDAMENTAL),
        (ValueError("boom"), FailureType.FUNDAMENTAL),
    ])
    def test_classify_failure(self, error, expected):
        assert classify_failure(error) is expected

    @pytest.mark.asyncio
    async def test_transient_failures_retried(self):
        completions = FakeCompletions(errors=[RuntimeError("connection dropped"), asyncio.TimeoutError()], content="done")
        backend = HTTPBackend(model="test-model", backoff_base=0.0, client=fake_client(completions))
        request = CompletionRequest(messages=(("system", "s"), ("user", "u")))

        assert await backend.complete(request) == "done"
        assert backend.calls == 3
        assert completions.kwargs[0]["model"] == "test-model"
        assert completions.kwargs[0]["messages"] == [
            {"role": "system", "content": "s"}, {"role": "user", "content": "u"},
        ]
        assert "stop" not in completions.kwargs[0]

    @pytest.mark.asyncio
    async def test_fundamental_failure_not_retried(self):
        completions = FakeCompletions(errors=[RuntimeError("unauthorized")])
        backend = HTTPBackend(model="m", backoff_base=0.0, client=fake_client(completions))
        with pytest.raises(BackendError):
            await backend.complete(HELLO)
        assert backend.calls == 1

    @pytest.mark.asyncio
    async def test_retries_run_out(self):
        completions = FakeCompletions(errors=[RuntimeError("timeout")] * 5)
        backend = HTTPBackend(model="m", max_retries=2, backoff_base=0.0, client=fake_client(completions))
        with pytest.raises(BackendError, match="after 3 attempts"):
            await backend.complete(HELLO)

    @pytest.mark.asyncio
    async def test_in_flight_bounded(self):
        completions = FakeCompletions(delay=0.01)
        backend = HTTPBackend(model="m", max_in_flight=2, client=fake_client(completions))
        requests = [CompletionRequest.user(f"q{i}") for i in range(6)]
        results = await asyncio.gather(*(backend.complete(r) for r in requests))
        assert results == ["ok"] * 6
        assert backend.peak_in_flight == 2

    def test_missing_api_key(self, monkeypatch):
        monkeypatch.delenv("CARTLAB_API_KEY", raising=False)
        with pytest.raises(BackendError, match="CARTLAB_API_KEY"):
            HTTPBackend()


class TestBuildBackend:
    def test_kinds(self, tmp_path):
        assert isinstance(build_backend("mock"), MockBackend)

        strict = build_backend("cassette", cassette=tmp_path / "c.jsonl")
        assert isinstance(strict, CassetteBackend)
        assert strict.inner is None

        wrapped = build_backend("mock", cassette=tmp_path / "c.jsonl", mode="record")
        assert isinstance(wrapped.inner, MockBackend)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            build_backend("carrier-pigeon")
