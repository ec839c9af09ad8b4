"""In-memory session store with idle expiry and per-session locking."""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field


@dataclass
class ServiceSession:
    id: str
    samples: list  # one SamplingSession per requested sample
    config: object
    image: object
    mask: object
    iterations_expected: int
    masked_cells: int
    created: float
    touched: float
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def complete(self):
        return all(s.complete for s in self.samples)


class SessionStore:
    """Sessions expire after ``ttl`` seconds idle; operations purge lazily."""

    def __init__(self, ttl=900.0, clock=time.monotonic):
        self.ttl = ttl
        self._clock = clock
        self._lock = threading.Lock()
        self._sessions = {}

    def _purge(self):
        now = self._clock()
        dead = [sid for sid, s in self._sessions.items() if now - s.touched > self.ttl]
        for sid in dead:
            del self._sessions[sid]

    def create(self, **kwargs):
        sid = uuid.uuid4().hex
        now = self._clock()
        session = ServiceSession(id=sid, created=now, touched=now, **kwargs)
        with self._lock:
            self._purge()
            self._sessions[sid] = session
        return session

    def get(self, sid):
        with self._lock:
            self._purge()
            session = self._sessions.get(sid)
            if session is not None:
                session.touched = self._clock()
            return session

    def delete(self, sid):
        with self._lock:
            self._purge()
            return self._sessions.pop(sid, None) is not None

    def count(self):
        with self._lock:
            self._purge()
            return len(self._sessions)
