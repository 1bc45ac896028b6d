#!/usr/bin/env python3
"""
Graceful shutdown manager for EndoNav

Long training and collection stages poll this between episodes. Pressing 'q'
(or sending SIGTERM) asks the stage to finish the current episode, write a
checkpoint and record itself as interrupted in the run manifest.
"""

import os
import select
import signal
import sys
import threading
from typing import Optional


class ShutdownManager:
    """
    Tracks stop requests for one running stage.

    Usage:
        with ShutdownManager() as manager:
            while steps < budget:
                if manager.shutdown_requested():
                    break
                ...run one episode...
    """

    def __init__(self, shutdown_key: str = 'q', handle_sigterm: bool = False):
        self._shutdown_requested = False
        self._reason: Optional[str] = None
        self._shutdown_key = shutdown_key.lower()
        self._handle_sigterm = handle_sigterm
        self._listener_thread: Optional[threading.Thread] = None
        self._stop_listener = threading.Event()
        self._lock = threading.Lock()
        self._previous_sigterm = None

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.stop()

    @property
    def reason(self) -> Optional[str]:
        with self._lock:
            return self._reason

    def start(self):
        """Start listening for the shutdown key (only when stdin is a TTY)."""
        if self._listener_thread is not None and self._listener_thread.is_alive():
            return
        self._stop_listener.clear()
        if self._handle_sigterm and threading.current_thread() is threading.main_thread():
            self._previous_sigterm = signal.signal(signal.SIGTERM, self._on_sigterm)
        if sys.stdin.isatty() and not _in_multiplexer():
            self._listener_thread = threading.Thread(
                target=self._listen, daemon=True, name="ShutdownListener"
            )
            self._listener_thread.start()

    def stop(self):
        """Stop the listener thread and restore signal handling."""
        self._stop_listener.set()
        if self._listener_thread is not None and self._listener_thread.is_alive():
            self._listener_thread.join(timeout=0.5)
        self._listener_thread = None
        if self._previous_sigterm is not None:
            signal.signal(signal.SIGTERM, self._previous_sigterm)
            self._previous_sigterm = None

    def shutdown_requested(self) -> bool:
        with self._lock:
            return self._shutdown_requested

    def request_shutdown(self, reason: str = "requested"):
        with self._lock:
            if not self._shutdown_requested:
                self._shutdown_requested = True
                self._reason = reason

    def reset(self):
        """Clear a previous request so the next stage can run."""
        with self._lock:
            self._shutdown_requested = False
            self._reason = None

    def _on_sigterm(self, signum, frame):
        self.request_shutdown("SIGTERM")

    def _listen(self):
        try:
            import termios
            import tty
        except ImportError:
            return
        fd = sys.stdin.fileno()
        try:
            old_settings = termios.tcgetattr(fd)
        except termios.error:
            return
        try:
            # cbreak keeps Ctrl+C working
            tty.setcbreak(fd)
            while not self._stop_listener.is_set():
                ready, _, _ = select.select([sys.stdin], [], [], 0.1)
                if ready and sys.stdin.read(1).lower() == self._shutdown_key:
                    self.request_shutdown(f"key '{self._shutdown_key}'")
                    sys.stdout.write('\n')
                    sys.stdout.flush()
                    break
        finally:
            termios.tcsetattr(fd, termios.TCSADRAIN, old_settings)


def _in_multiplexer() -> bool:
    # cbreak mode misbehaves under tmux/screen
    term = os.environ.get('TERM', '').lower()
    return bool(os.environ.get('TMUX') or os.environ.get('STY') or 'tmux' in term or 'screen' in term)


_global_manager: Optional[ShutdownManager] = None


def get_shutdown_manager() -> ShutdownManager:
    """Process-wide manager shared by the CLI stages."""
    global _global_manager
    if _global_manager is None:
        _global_manager = ShutdownManager(handle_sigterm=True)
    return _global_manager


def shutdown_requested() -> bool:
    return get_shutdown_manager().shutdown_requested()
