import logging
import threading
from typing import Callable, Optional, Dict, Any, List

logger = logging.getLogger(__name__)


class RunRegistry:
    """
    Thread-safe registry of per-seed runs.

    Workers report each seed's outcome here; handlers run outside the lock and a
    failing handler never takes down the other seeds.
    """

    def __init__(self):
        """Initialize registry"""
        self.handlers: Dict[int, Dict[str, Any]] = {}  # seed → {on_success, on_failure, metadata}
        self.outcomes: Dict[int, Dict[str, Any]] = {}
        self.lock = threading.Lock()

    def register(
        self,
        seed: int,
        on_success: Optional[Callable] = None,
        on_failure: Optional[Callable] = None,
        metadata: Optional[Dict[str, Any]] = None,
    ):
        """
        Register handlers for a seed

        Args:
            seed: Run seed
            on_success: Called with the run's result payload
            on_failure: Called with {"error": exc, ...}
            metadata: Optional additional metadata (output directory, ...)
        """
        with self.lock:
            self.handlers[seed] = {
                "on_success": on_success,
                "on_failure": on_failure,
                "metadata": metadata or {},
            }

    def report(self, seed: int, status: str, data: Optional[Dict[str, Any]] = None) -> bool:
        """
        Record a seed's outcome and trigger its handler

        Args:
            seed: Run seed
            status: "success" or "failed"
            data: Result payload

        Returns:
            True if a handler was registered, False otherwise
        """
        if status not in ("success", "failed"):
            raise ValueError(f"unknown status '{status}'")
        with self.lock:
            handler = self.handlers.pop(seed, None)
            self.outcomes[seed] = {"status": status, "data": data or {}}

        if not handler:
            return False

        try:
            if status == "success" and handler["on_success"]:
                handler["on_success"](data)
            elif status == "failed" and handler["on_failure"]:
                handler["on_failure"](data)
        except Exception as e:
            logger.error("run handler error seed=%s error=%s", seed, e)
        return True

    def run(self, seed: int, fn: Callable[[], Dict[str, Any]]) -> Optional[Dict[str, Any]]:
        """
        Execute one seed's work and report it; exceptions are captured, not raised.

        Returns:
            The result payload, or None when the run failed
        """
        try:
            result = fn()
        except Exception as e:
            logger.warning("seed failed seed=%s error=%s: %s", seed, type(e).__name__, e)
            self.report(seed, "failed", {"error": e})
            return None
        self.report(seed, "success", result)
        return result

    def pending_count(self) -> int:
        with self.lock:
            return len(self.handlers)

    def succeeded(self) -> List[int]:
        with self.lock:
            return sorted(s for s, o in self.outcomes.items() if o["status"] == "success")

    def failures(self) -> Dict[int, BaseException]:
        """Seed → exception for every failed run."""
        with self.lock:
            return {s: o["data"].get("error") for s, o in sorted(self.outcomes.items()) if o["status"] == "failed"}

    def clear(self):
        with self.lock:
            self.handlers.clear()
            self.outcomes.clear()
