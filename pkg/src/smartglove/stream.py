"""Newline-delimited JSON inference service and dataset replay.

Wire frame:  {"t": ms, "s": [25 readings], "qh": [w,x,y,z], "qf": [w,x,y,z]}
Event:       {"kind": "angles"|"tap"|"class", "t": ms, "payload": ..., "latency_us": float}
"""
from __future__ import annotations

import json
import logging
import math
import queue
import signal as _signal
import socket
import sys
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .glovepose import ModelBundle, StreamingPredictor, latency_summary
from .schema import FRAME_PERIOD_MS, N_SENSORS, SAMPLE_RATE_HZ, tap_finger_channel
from .signal import REST_SECONDS, TapDetector, check_unit_quaternions

log = logging.getLogger(__name__)

_EOF = object()


class WireFormatError(ValueError):
    pass


@dataclass
class WireFrame:
    t: int
    s: list
    qh: list
    qf: list

    def to_line(self):
        return json.dumps({"t": self.t, "s": self.s, "qh": self.qh, "qf": self.qf},
                          separators=(",", ":")) + "\n"


def parse_wire_frame(line) -> WireFrame:
    try:
        obj = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise WireFormatError(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise WireFormatError("frame must be a JSON object")
    try:
        t, s, qh, qf = obj["t"], obj["s"], obj["qh"], obj["qf"]
    except KeyError as exc:
        raise WireFormatError(f"missing field {exc}") from None
    if not isinstance(t, int) or isinstance(t, bool):
        raise WireFormatError("t must be an integer")
    for name, arr, n in (("s", s, N_SENSORS), ("qh", qh, 4), ("qf", qf, 4)):
        if not isinstance(arr, list) or len(arr) != n:
            raise WireFormatError(f"{name} must be an array of {n} numbers")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in arr):
            raise WireFormatError(f"{name} must hold finite numbers")
    try:
        check_unit_quaternions(np.array([qh, qf], dtype=np.float64))
    except ValueError as exc:
        raise WireFormatError(str(exc)) from None
    return WireFrame(t, s, qh, qf)


@dataclass
class EventRecord:
    kind: str
    t: int
    payload: object
    latency_us: float

    def to_line(self):
        return json.dumps({"kind": self.kind, "t": self.t, "payload": self.payload,
                           "latency_us": self.latency_us}, separators=(",", ":")) + "\n"


def parse_event(line):
    return json.loads(line)


# ---------------------------------------------------------------- session

@dataclass
class ServeConfig:
    queue_size: int = 256
    overflow: str = "drop-oldest"  # or "block"
    tap_fingers: tuple = ()  # finger indices 1..10 to watch
    tap_threshold: float = 0.04
    rest_seconds: float = REST_SECONDS

    def __post_init__(self):
        if self.queue_size < 1:
            raise ValueError("queue_size must be positive")
        if self.overflow not in ("drop-oldest", "block"):
            raise ValueError("overflow must be 'drop-oldest' or 'block'")


@dataclass
class SessionStats:
    frames: int = 0
    angle_events: int = 0
    tap_events: int = 0
    class_events: int = 0
    malformed: int = 0
    out_of_order: int = 0
    dropped: int = 0
    latency: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


class FrameProcessor:
    """Per-frame inference pipeline shared by :func:`serve_lines` and tests."""

    def __init__(self, bundle: ModelBundle, config: ServeConfig | None = None, classifier=None):
        self.config = config or ServeConfig()
        self.predictor = StreamingPredictor(bundle)
        self.classifier = classifier
        if classifier is not None and classifier.config.n_hands != 1:
            raise ValueError("a single stream can only drive a one-hand head")
        self.stats = SessionStats()
        self.last_t = None
        self.latencies = []
        self._tap_channels = [tap_finger_channel(f)[1] for f in self.config.tap_fingers]
        self._rest_frames = max(1, int(round(self.config.rest_seconds * SAMPLE_RATE_HZ)))
        self._rest_buf = []
        self.taps = None

    def handle_line(self, line):
        """Parse and process one wire line; returns the event records it produces."""
        if not line.strip():
            return []
        try:
            fr = parse_wire_frame(line)
        except WireFormatError as exc:
            self.stats.malformed += 1
            log.debug("malformed frame skipped: %s", exc)
            return []
        if self.last_t is not None and fr.t <= self.last_t:
            self.stats.out_of_order += 1
            return []
        self.last_t = fr.t
        return self.handle_frame(fr)

    def handle_frame(self, fr: WireFrame):
        t0 = time.perf_counter()
        self.stats.frames += 1
        events = []
        angles = self.predictor.push(fr.t, fr.s, fr.qh, fr.qf)
        if angles is not None:
            lat = (time.perf_counter() - t0) * 1e6
            self.latencies.append(lat)
            events.append(EventRecord("angles", fr.t, [float(a) for a in angles], lat))
            self.stats.angle_events += 1
            if self.classifier is not None:
                p = self.classifier.proba_from_features(angles[None])[0]
                events.append(EventRecord("class", fr.t, {"class_id": int(np.argmax(p)),
                                                          "probs": [float(v) for v in p]},
                                          (time.perf_counter() - t0) * 1e6))
                self.stats.class_events += 1
        if self._tap_channels:
            events.extend(self._taps(fr, t0))
        return events

    def _taps(self, fr, t0):
        tips = np.asarray(fr.s, dtype=np.float64)[self._tap_channels]
        if self.taps is None:
            # Rest calibration over the leading rest period.
            self._rest_buf.append(tips)
            if len(self._rest_buf) >= self._rest_frames:
                self.taps = TapDetector(np.mean(self._rest_buf, axis=0), self.config.tap_fingers,
                                        self.config.tap_threshold)
            return []
        out = []
        for ev in self.taps.push(tips, fr.t):
            out.append(EventRecord("tap", ev.timestamp_ms, {"finger": ev.finger_index},
                                   (time.perf_counter() - t0) * 1e6))
            self.stats.tap_events += 1
        return out

    def finish(self):
        self.stats.latency = latency_summary(self.latencies)
        return self.stats


def serve_lines(lines, write, bundle, config: ServeConfig | None = None, classifier=None,
                stop: threading.Event | None = None):
    """Run one session: ``lines`` is an iterable of wire lines, ``write`` takes event lines.

    A reader thread feeds a bounded queue; on overflow the oldest frame is
    dropped (or the reader blocks, per config).  Each event is written as one
    complete line.  Returns :class:`SessionStats`.
    """
    config = config or ServeConfig()
    proc = FrameProcessor(bundle, config, classifier)
    stop = stop or threading.Event()
    q = queue.Queue(maxsize=config.queue_size)
    dropped = [0]

    def put(item):
        blocking = item is _EOF or config.overflow == "block"
        while True:
            try:
                if blocking:
                    q.put(item, timeout=0.05)
                else:
                    q.put_nowait(item)
                return True
            except queue.Full:
                if blocking:
                    if stop.is_set() and item is not _EOF:
                        return False
                    continue
                try:
                    q.get_nowait()
                    dropped[0] += 1
                except queue.Empty:
                    pass

    def reader():
        try:
            for line in lines:
                if stop.is_set():
                    break
                if not put(line):
                    break
        except (OSError, ValueError) as exc:
            log.info("input closed: %s", exc)
        finally:
            put(_EOF)

    th = threading.Thread(target=reader, name="smartglove-reader", daemon=True)
    th.start()
    while True:
        item = q.get()
        if item is _EOF:
            break
        if isinstance(item, bytes):
            item = item.decode("utf-8", errors="replace")
        for ev in proc.handle_line(item):
            write(ev.to_line())
    th.join(timeout=1.0)
    stats = proc.finish()
    stats.dropped = dropped[0]
    log.info("session closed: %s", json.dumps(stats.to_dict(), sort_keys=True))
    return stats


def _install_signal_handlers(stop):
    def handler(signum, frame):
        stop.set()
    for sig in (_signal.SIGINT, _signal.SIGTERM):
        try:
            _signal.signal(sig, handler)
        except ValueError:  # not on the main thread
            pass


def serve_stdio(bundle, config=None, classifier=None, stdin=None, stdout=None, stop=None):
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    stop = stop or threading.Event()
    _install_signal_handlers(stop)

    def write(line):
        stdout.write(line)
        stdout.flush()

    return serve_lines(stdin, write, bundle, config, classifier, stop)


def serve_tcp(host, port, bundle, config=None, classifier=None, stop=None, max_sessions=None,
              ready: threading.Event | None = None, bound: list | None = None):
    """Accept clients one at a time; each connection is one session.

    ``bound`` (if given) receives the actual listening port, useful with port 0.
    """
    stop = stop or threading.Event()
    all_stats = []
    with socket.create_server((host, port)) as srv:
        srv.settimeout(0.2)
        if bound is not None:
            bound.append(srv.getsockname()[1])
        if ready is not None:
            ready.set()
        while not stop.is_set() and (max_sessions is None or len(all_stats) < max_sessions):
            try:
                conn, addr = srv.accept()
            except socket.timeout:
                continue
            with conn:
                conn.settimeout(None)
                rfile = conn.makefile("r", encoding="utf-8", newline="\n")
                wfile = conn.makefile("w", encoding="utf-8", newline="\n")

                def write(line, wfile=wfile):
                    try:
                        wfile.write(line)
                        wfile.flush()
                    except OSError:
                        stop_session.set()

                stop_session = threading.Event()
                watcher = threading.Thread(target=lambda: (stop.wait(), stop_session.set()), daemon=True)
                watcher.start()
                stats = serve_lines(rfile, write, bundle, config, classifier, stop_session)
                log.info("client %s disconnected", addr)
                all_stats.append(stats)
                try:
                    wfile.close()
                    rfile.close()
                except OSError:
                    pass
    return all_stats


def parse_endpoint(endpoint):
    """'-' or 'stdio' -> ("stdio",); 'tcp:HOST:PORT' or 'HOST:PORT' -> ("tcp", host, port)."""
    if endpoint in ("-", "stdio"):
        return ("stdio",)
    addr = endpoint[4:] if endpoint.startswith("tcp:") else endpoint
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bad endpoint {endpoint!r}; use stdio or tcp:HOST:PORT")
    return ("tcp", host or "127.0.0.1", int(port))


def serve(endpoint, bundle, config=None, classifier=None, stop=None, **kw):
    ep = parse_endpoint(endpoint)
    if ep[0] == "stdio":
        return [serve_stdio(bundle, config, classifier, stop=stop)]
    stop = stop or threading.Event()
    _install_signal_handlers(stop)
    return serve_tcp(ep[1], ep[2], bundle, config, classifier, stop=stop, **kw)


# ---------------------------------------------------------------- replay

def frame_lines(frames):
    """Wire lines for a :class:`FrameStream`."""
    for k in range(len(frames)):
        yield WireFrame(int(frames.t_ms[k]), frames.hsy[k].tolist(), frames.quat_hand[k].tolist(),
                        frames.quat_forearm[k].tolist()).to_line()


def paced(lines, multiplier=1.0, period_ms=FRAME_PERIOD_MS, clock=time.monotonic, sleep=time.sleep):
    """Yield items on a fixed schedule of ``period_ms / multiplier``; 0 means no pacing."""
    if multiplier < 0:
        raise ValueError("rate multiplier must be >= 0")
    if multiplier == 0:
        yield from lines
        return
    gap = period_ms / 1000.0 / multiplier
    start = clock()
    for k, line in enumerate(lines):
        delay = start + k * gap - clock()
        if delay > 0:
            sleep(delay)
        yield line


def replay(path, multiplier=0.0, chunk_rows=20000):
    """Stream a dataset file as wire lines; the file header is checked before the first frame."""
    from .synth import iter_dataset
    chunks = iter_dataset(path, chunk_rows)
    first = next(chunks, None)  # surfaces header/format errors eagerly

    def gen():
        if first is None:
            return
        yield from frame_lines(first.frames)
        for ch in chunks:
            yield from frame_lines(ch.frames)

    return paced(gen(), multiplier)
