import logging
import threading

import pytest

from mfirl.registry import RunRegistry


def test_success_calls_handler():
    registry = RunRegistry()
    seen = []
    registry.register(1, on_success=seen.append)
    assert registry.pending_count() == 1
    assert registry.run(1, lambda: {"iterations": 5}) == {"iterations": 5}
    assert seen == [{"iterations": 5}]
    assert registry.pending_count() == 0
    assert registry.succeeded() == [1]


def test_failure_is_captured():
    registry = RunRegistry()
    failed = []
    registry.register(2, on_failure=failed.append)

    def boom():
        raise RuntimeError("diverged")

    assert registry.run(2, boom) is None
    assert isinstance(failed[0]["error"], RuntimeError)
    assert list(registry.failures()) == [2]
    assert str(registry.failures()[2]) == "diverged"


def test_report_without_handler():
    registry = RunRegistry()
    assert registry.report(3, "success", {}) is False
    assert registry.succeeded() == [3]


def test_unknown_status():
    with pytest.raises(ValueError):
        RunRegistry().report(1, "done")


def test_handler_error_is_logged(caplog):
    registry = RunRegistry()

    def bad_handler(_data):
        raise KeyError("missing")

    registry.register(4, on_success=bad_handler)
    with caplog.at_level(logging.ERROR, logger="mfirl.registry"):
        assert registry.report(4, "success", {}) is True
    assert any("seed=4" in r.getMessage() for r in caplog.records)


def test_concurrent_runs():
    registry = RunRegistry()
    for seed in range(20):
        registry.register(seed)
    threads = [threading.Thread(target=registry.run, args=(s, lambda s=s: {"seed": s})) for s in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert registry.succeeded() == list(range(20))
    registry.clear()
    assert registry.succeeded() == []
