"""Virtual-time asyncio event loop.

The same async code that runs against wall-clock time (portal core, stubs,
sandboxes) runs here in simulated time: whenever the loop has no ready
callbacks, it jumps the clock straight to the earliest timer instead of
sleeping. A multi-minute scenario executes in milliseconds and every run
of the same build produces the same event order.

Only in-process work may run on this loop: real sockets or subprocesses
would race far behind the simulated clock.
"""

from __future__ import annotations

import asyncio
import selectors


class _AutoAdvanceSelector(selectors.SelectSelector):
    """Never blocks; advances the owning loop's clock by the requested timeout."""

    loop: "VirtualTimeLoop | None" = None

    def select(self, timeout=None):
        events = super().select(0)
        if events:
            return events
        if timeout is None:
            # No ready callbacks, no timers, no I/O: nothing can ever wake us.
            raise RuntimeError("virtual-time deadlock: event loop has nothing to run")
        if timeout > 0 and self.loop is not None:
            self.loop.advance(timeout)
        return []


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    _virtual_now = 0.0

    def __init__(self):
        selector = _AutoAdvanceSelector()
        super().__init__(selector)
        selector.loop = self
        self._virtual_now = 0.0

    def time(self) -> float:
        return self._virtual_now

    def advance(self, dt: float) -> None:
        self._virtual_now += dt


def run_virtual(coro):
    """Run a coroutine to completion on a fresh virtual-time loop."""
    loop = VirtualTimeLoop()
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(coro)
    finally:
        try:
            pending = asyncio.all_tasks(loop)
            for task in pending:
                task.cancel()
            if pending:
                loop.run_until_complete(
                    asyncio.gather(*pending, return_exceptions=True))
        finally:
            asyncio.set_event_loop(None)
            loop.close()
