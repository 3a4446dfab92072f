"""Score model backed by an external process speaking line-delimited JSON.

Request per state: ``{"id": int, "t": int, "x": [...], "y": [...]}``;
response: ``{"id": int, "score": [...]}``. Responses may come back in any
order and are matched on ``id``.
"""

from __future__ import annotations

import itertools
import json
import queue
import subprocess
import threading

import numpy as np

from .scores import ScoreModel


class ExternalScoreError(RuntimeError):
    pass


class _Connection:
    def __init__(self, command, timeout):
        self.timeout = timeout
        self.proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE, text=True, bufsize=1)
        self.lines: queue.Queue = queue.Queue()
        self.lock = threading.Lock()
        self._reader = threading.Thread(target=self._read, daemon=True)
        self._reader.start()

    def _read(self):
        for line in self.proc.stdout:
            self.lines.put(line)
        self.lines.put(None)

    def roundtrip(self, requests: list[dict], dim: int) -> dict[int, np.ndarray]:
        with self.lock:
            try:
                self.proc.stdin.write("".join(json.dumps(r) + "\n" for r in requests))
                self.proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise ExternalScoreError(f"adapter process not reachable: {exc}") from exc
            pending = {r["id"] for r in requests}
            out = {}
            while pending:
                try:
                    line = self.lines.get(timeout=self.timeout)
                except queue.Empty:
                    raise ExternalScoreError(
                        f"timed out after {self.timeout}s waiting for {len(pending)} responses") from None
                if line is None:
                    err = self.proc.stderr.read() if self.proc.poll() is not None else ""
                    raise ExternalScoreError(f"adapter exited early; stderr: {err.strip()!r}")
                try:
                    msg = json.loads(line)
                    rid, score = msg["id"], msg["score"]
                except (ValueError, KeyError, TypeError):
                    raise ExternalScoreError(f"malformed response line: {line.rstrip()!r}") from None
                if rid not in pending:
                    raise ExternalScoreError(f"unexpected response id in {line.rstrip()!r}")
                score = np.asarray(score, dtype=float)
                if score.shape != (dim,):
                    raise ExternalScoreError(
                        f"dimension mismatch (expected {dim}) in {line.rstrip()!r}")
                pending.discard(rid)
                out[rid] = score
            return out

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=1)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class ExternalScore(ScoreModel):
    """Round-trips every evaluation to an adapter process.

    Args:
        command: argv of the adapter, started once per pooled connection.
        timeout: seconds to wait for each response line.
        pool_size: number of adapter processes; batches are split across them.
    """

    def __init__(self, command, timeout: float = 30.0, pool_size: int = 1):
        super().__init__()
        self._conns = [_Connection(list(command), timeout) for _ in range(max(1, pool_size))]
        self._ids = itertools.count()
        self._id_lock = threading.Lock()

    def _next_ids(self, k):
        with self._id_lock:
            return [next(self._ids) for _ in range(k)]

    def _score(self, x, t, y):
        single = x.ndim == 1
        X = np.atleast_2d(x)
        ylist = [] if y is None else np.asarray(y, dtype=float).ravel().tolist()
        ids = self._next_ids(X.shape[0])
        reqs = [{"id": i, "t": t, "x": row.tolist(), "y": ylist} for i, row in zip(ids, X)]
        chunks = np.array_split(np.arange(len(reqs)), len(self._conns))
        results: dict[int, np.ndarray] = {}
        for conn, idx in zip(self._conns, chunks):
            if idx.size:
                results.update(conn.roundtrip([reqs[i] for i in idx], X.shape[1]))
        out = np.stack([results[i] for i in ids])
        return out[0] if single else out

    def close(self):
        for c in self._conns:
            c.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_score(command, timeout: float = 30.0, pool_size: int = 1) -> ExternalScore:
    return ExternalScore(command, timeout=timeout, pool_size=pool_size)
