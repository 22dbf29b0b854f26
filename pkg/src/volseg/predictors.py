"""Predictors: anything with ``channels`` and ``predict(window) -> (channels, z, y, x)``.

``window`` is a float32 array ``(c_in, z, y, x)``.  The network itself is out
of scope; these stand-ins cover testing (identity, constant, pointwise,
blur-threshold), replaying stored predictions, and delegating to an external
process over a framed pipe protocol:

* request:  one JSON line ``{"shape": [c, z, y, x], "dtype": "f32"}`` followed
  by the little-endian float32 payload;
* reply:    the same framing for the output;
* a header with an all-zero shape ends the session.
"""

from __future__ import annotations

import json
import os
import selectors
import subprocess
import sys
import threading
import time
from typing import BinaryIO, Callable

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, PredictorTimeout, ProtocolError
from .volume import VoxelVolume

F32 = np.dtype("<f4")


class IdentityPredictor:
    """Echoes the (normalized) input, repeated over ``channels``."""

    def __init__(self, channels: int = 1):
        self.channels = channels

    def predict(self, window):
        return np.repeat(window[:1], self.channels, axis=0).astype(np.float32)


class ConstantPredictor:
    def __init__(self, value: float, channels: int = 1):
        self.value = float(value)
        self.channels = channels

    def predict(self, window):
        return np.full((self.channels,) + window.shape[1:], self.value, dtype=np.float32)


class PointwisePredictor:
    """Applies ``fn(x) -> (channels, ...)`` voxel by voxel; context-free, so stitch-invariant."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], channels: int = 1):
        self.fn = fn
        self.channels = channels

    def predict(self, window):
        return np.asarray(self.fn(window[0]), dtype=np.float32).reshape((self.channels,) + window.shape[1:])


class BlurThresholdPredictor:
    """Gaussian blur followed by a steep sigmoid around ``threshold``."""

    def __init__(self, sigma: float = 1.0, threshold: float = 0.5, sharpness: float = 20.0):
        self.sigma = sigma
        self.threshold = threshold
        self.sharpness = sharpness
        self.channels = 1

    def predict(self, window):
        blurred = ndimage.gaussian_filter(window[0].astype(np.float64), self.sigma, mode="mirror")
        return (1.0 / (1.0 + np.exp(-self.sharpness * (blurred - self.threshold))))[None].astype(np.float32)


class FilePredictor:
    """Replays a stored prediction volume; needs the window's global box."""

    wants_box = True

    def __init__(self, predictions: VoxelVolume):
        self.data = np.asarray(predictions.data)
        if self.data.ndim == 3:
            self.data = self.data[None]
        self.channels = self.data.shape[0]

    def predict(self, window, box=None):
        if box is None:
            raise InvalidArgumentError("FilePredictor needs the window box")
        stop = box.stop
        if any(s > n for s, n in zip(stop, self.data.shape[1:])):
            raise InvalidArgumentError(f"window {box.origin}+{box.extent} outside stored predictions")
        return self.data[(slice(None),) + box.slices].astype(np.float32)


# ---------------------------------------------------------------------------
# wire protocol


def encode_frame(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=F32)
    header = json.dumps({"shape": list(arr.shape), "dtype": "f32"}) + "\n"
    return header.encode() + arr.tobytes()


def end_frame(ndim: int = 4) -> bytes:
    return (json.dumps({"shape": [0] * ndim, "dtype": "f32"}) + "\n").encode()


def parse_header(line: bytes) -> tuple:
    try:
        header = json.loads(line)
        shape = tuple(int(s) for s in header["shape"])
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError) as e:
        raise ProtocolError(f"malformed frame header {line[:80]!r}: {e}") from None
    if dtype != "f32":
        raise ProtocolError(f"unsupported frame dtype {dtype!r}")
    if any(s < 0 for s in shape):
        raise ProtocolError(f"negative dimension in frame shape {shape}")
    return shape


def read_frame(stream: BinaryIO):
    """Blocking reader used on the child side; returns ``None`` on the end frame or EOF."""
    line = stream.readline()
    if not line:
        return None
    shape = parse_header(line)
    if not shape or not all(shape):
        return None
    n = int(np.prod(shape)) * F32.itemsize
    payload = stream.read(n)
    if len(payload) != n:
        raise ProtocolError(f"truncated request: expected {n} payload bytes, received {len(payload)}")
    return np.frombuffer(payload, dtype=F32).reshape(shape)


def serve(fn: Callable[[np.ndarray], np.ndarray], stdin: BinaryIO | None = None,
          stdout: BinaryIO | None = None) -> int:
    """Child-side loop: answer each request frame with ``fn(frame)``."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    count = 0
    while True:
        arr = read_frame(stdin)
        if arr is None:
            return count
        stdout.write(encode_frame(fn(arr)))
        stdout.flush()
        count += 1


class SubprocessPredictor:
    """Runs ``command`` once and streams windows through its stdin/stdout."""

    def __init__(self, command, channels: int = 1, timeout: float = 60.0, env: dict | None = None):
        if not command:
            raise InvalidArgumentError("subprocess predictor needs a command")
        self.command = list(command)
        self.channels = channels
        self.timeout = float(timeout)
        self.env = env
        self._proc = None
        self._buf = bytearray()
        self._lock = threading.Lock()

    def _start(self):
        if self._proc is None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          env=self.env, bufsize=0)
            self._sel = selectors.DefaultSelector()
            self._sel.register(self._proc.stdout, selectors.EVENT_READ)
            self._buf = bytearray()

    def _fill(self, deadline: float, wanted: str) -> bool:
        remaining = deadline - time.monotonic()
        if remaining <= 0 or not self._sel.select(remaining):
            raise PredictorTimeout(f"no {wanted} from predictor within {self.timeout:g} s")
        chunk = os.read(self._proc.stdout.fileno(), 1 << 20)
        if not chunk:
            return False
        self._buf += chunk
        return True

    def _read_line(self, deadline):
        while b"\n" not in self._buf:
            if not self._fill(deadline, "reply header"):
                raise ProtocolError(f"predictor closed its output before a reply header "
                                    f"({len(self._buf)} stray bytes)")
        i = self._buf.index(b"\n")
        line = bytes(self._buf[:i])
        del self._buf[:i + 1]
        return line

    def _read_exact(self, n, deadline):
        while len(self._buf) < n:
            if not self._fill(deadline, "reply payload"):
                raise ProtocolError(f"truncated reply: expected {n} payload bytes, received {len(self._buf)}")
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def exchange(self, arr: np.ndarray) -> np.ndarray:
        """Send one frame and return the reply, enforcing the per-window timeout."""
        with self._lock:
            self._start()
            deadline = time.monotonic() + self.timeout
            try:
                self._proc.stdin.write(encode_frame(arr))
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                self._kill()
                raise ProtocolError(f"predictor stdin closed: {e}") from None
            try:
                shape = parse_header(self._read_line(deadline))
                n = int(np.prod(shape)) * F32.itemsize
                payload = self._read_exact(n, deadline)
            except ProtocolError:
                self._kill()
                raise
            return np.frombuffer(payload, dtype=F32).reshape(shape).copy()

    def predict(self, window):
        out = self.exchange(window)
        expected = (self.channels,) + tuple(window.shape[1:])
        if out.shape != expected:
            raise ProtocolError(f"reply shape {out.shape} != expected {expected}")
        return out

    def _kill(self):
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._sel.close()
            self._proc = None

    def close(self):
        with self._lock:
            if self._proc is None:
                return
            try:
                self._proc.stdin.write(end_frame())
                self._proc.stdin.close()
                self._proc.wait(timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
                self._proc.wait()
            self._sel.close()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
