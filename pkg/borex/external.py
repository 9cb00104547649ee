# borex/external.py
"""
Classifier running in a child process, spoken to in JSON Lines.

    request   {"id": <u64>, "shape": [T, H, W, C], "tensor": "<base64 float32 LE>", "label": "<token>"}
    response  {"id": <u64>, "confidence": <float in [0, 1]>}

One object per line. The server must answer every id exactly once, in any
order. A missing answer, a malformed line, a timeout or a non-zero exit is
an error, never a zero confidence.
"""
from __future__ import annotations

import base64
import itertools
import json
import logging
import queue
import shlex
import subprocess
import threading
import time
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from borex.core import ImageVolume, Label
from borex.errors import ClassifierTimeout, NonZeroExit, ProtocolError

logger = logging.getLogger(__name__)

Command = Union[str, Sequence[str]]


def encode_request(request_id: int, volume: ImageVolume, label: Label) -> str:
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    return json.dumps(
        {
            "id": request_id,
            "shape": list(volume.shape),
            "tensor": base64.b64encode(payload).decode("ascii"),
            "label": label,
        }
    )


def decode_tensor(message: dict) -> np.ndarray:
    shape = tuple(int(v) for v in message["shape"])
    return np.frombuffer(base64.b64decode(message["tensor"]), dtype="<f4").reshape(shape)


class ExternalClassifier:
    """One child process; requests from a single thread at a time."""

    serial = True

    def __init__(self, command: Command, labels: Sequence[str] = (), timeout: float = 60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.label_set = tuple(Label(l) for l in labels)
        self.timeout = timeout
        self._ids = itertools.count(1)
        self._proc: Optional[subprocess.Popen] = None
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self._lock = threading.Lock()

    # ---- process lifecycle ----
    def start(self) -> "ExternalClassifier":
        if self._proc is None:
            logger.info("Starting external classifier: %s", " ".join(self.command))
            self._lines = queue.Queue()
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
            threading.Thread(target=self._pump, args=(self._proc, self._lines), daemon=True).start()
        return self

    def _pump(self, proc: subprocess.Popen, lines: "queue.Queue[Optional[str]]") -> None:
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            if proc.stdin:
                proc.stdin.close()
            proc.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self.start()

    def __exit__(self, exc_type, exc_value, traceback):
        self.close()

    # ---- protocol ----
    def request(self, batch: Sequence[Tuple[ImageVolume, Label]]) -> List[float]:
        with self._lock:
            self.start()
            proc = self._proc
            pending: Dict[int, int] = {}
            try:
                for index, (volume, label) in enumerate(batch):
                    rid = next(self._ids)
                    pending[rid] = index
                    proc.stdin.write(encode_request(rid, volume, label) + "\n")
                proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                raise self._exit_error(f"cannot write to classifier: {e}") from e

            results: List[Optional[float]] = [None] * len(batch)
            deadline = time.monotonic() + self.timeout
            while pending:
                remaining = deadline - time.monotonic()
                try:
                    if remaining <= 0:
                        raise queue.Empty
                    line = self._lines.get(timeout=remaining)
                except queue.Empty:
                    raise ClassifierTimeout(
                        f"no answer for {len(pending)} request(s) within {self.timeout:g} s"
                    ) from None
                if line is None:
                    missing = min(pending)
                    raise self._exit_error(f"classifier closed its output without answering id {missing}", missing)
                rid, conf = self._parse(line)
                if rid not in pending:
                    raise ProtocolError(f"unexpected or duplicate response id {rid}", request_id=rid)
                results[pending.pop(rid)] = conf
            return [float(c) for c in results]

    def _parse(self, line: str) -> Tuple[int, float]:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as e:
            raise ProtocolError(f"malformed response line: {line.strip()[:80]!r}") from e
        if not isinstance(msg, dict) or not isinstance(msg.get("id"), int):
            raise ProtocolError(f"response without an integer id: {line.strip()[:80]!r}")
        conf = msg.get("confidence")
        if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            raise ProtocolError(f"response {msg['id']} has invalid confidence {conf!r}", request_id=msg["id"])
        return msg["id"], float(conf)

    def _exit_error(self, message: str, request_id: Optional[int] = None):
        proc = self._proc
        if proc is not None:
            try:
                code = proc.wait(timeout=1)
            except subprocess.TimeoutExpired:
                code = None
            if code:
                self._proc = None
                return NonZeroExit(message, code)
        return ProtocolError(message, request_id=request_id)

    def evaluate(self, volumes: Sequence[ImageVolume], label: Label) -> np.ndarray:
        return np.asarray(self.request([(v, label) for v in volumes]), dtype=np.float64)


def external_evaluate(command: Command, batch: Sequence[Tuple[ImageVolume, Label]], timeout: float = 60.0) -> List[float]:
    """One-shot helper: start the server, answer the batch, shut it down."""
    with ExternalClassifier(command, timeout=timeout) as classifier:
        return classifier.request(batch)
