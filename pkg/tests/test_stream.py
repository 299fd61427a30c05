import io
import json
import socket
import statistics
import threading
import time

import numpy as np
import pytest

from smartglove.glovepose import ChannelStats, ModelConfig, init_bundle, predict_stream
from smartglove.stream import (
    FrameProcessor,
    ServeConfig,
    WireFormatError,
    WireFrame,
    frame_lines,
    paced,
    parse_endpoint,
    parse_wire_frame,
    replay,
    serve_lines,
    serve_stdio,
    serve_tcp,
)
from smartglove.synth import synthesize_recording, synthesize_typing, read_dataset, write_dataset


@pytest.fixture(scope="module")
def bundle():
    rng = np.random.default_rng(0)
    stats = ChannelStats(np.zeros(28), np.ones(28))
    return init_bundle(ModelConfig(hidden_size=8, fc1_width=16), stats,
                       rng.normal(30, 5, 22), rng.uniform(5, 15, 22), seed=1)


@pytest.fixture(scope="module")
def rec():
    return synthesize_recording(5, 5)  # 100 frames


def _run(lines, bundle, **kw):
    out = []
    stats = serve_lines(lines, out.append, bundle, **kw)
    return [json.loads(x) for x in out], stats, out


def test_wire_roundtrip():
    fr = WireFrame(50, [0.1] * 25, [1, 0, 0, 0], [1, 0, 0, 0])
    assert parse_wire_frame(fr.to_line()) == fr
    for bad in ("{", "[]", '{"t":1}', '{"t":1.5,"s":[],"qh":[1,0,0,0],"qf":[1,0,0,0]}',
                json.dumps({"t": 1, "s": [0] * 24, "qh": [1, 0, 0, 0], "qf": [1, 0, 0, 0]}),
                json.dumps({"t": 1, "s": [0] * 25, "qh": [2, 0, 0, 0], "qf": [1, 0, 0, 0]})):
        with pytest.raises(WireFormatError):
            parse_wire_frame(bad)


def test_hundred_frames_61_events(bundle, rec):
    assert len(rec.frames) == 100
    events, stats, _ = _run(frame_lines(rec.frames), bundle)
    assert len(events) == 61 and all(e["kind"] == "angles" for e in events)
    assert stats.angle_events == 61 and stats.malformed == 0
    assert set(stats.latency) >= {"p50_us", "p95_us", "max_us"}


def test_malformed_line_counted(bundle, rec):
    lines = list(frame_lines(rec.frames))
    lines.insert(50, '{"t": oops}\n')
    events, stats, _ = _run(lines, bundle)
    assert len(events) == 61 and stats.malformed == 1


def test_out_of_order_skipped(bundle, rec):
    lines = list(frame_lines(rec.frames))
    lines.insert(60, lines[10])
    _, stats, _ = _run(lines, bundle)
    assert stats.out_of_order == 1 and stats.angle_events == 61


def test_online_equals_offline(bundle):
    r = synthesize_recording(6, 30)
    events, stats, _ = _run(frame_lines(r.frames), bundle, config=ServeConfig(overflow="block"))
    assert stats.dropped == 0
    offline = predict_stream(r.frames, bundle)
    assert [e["t"] for e in events] == offline.t_ms.tolist()
    assert np.array_equal(np.array([e["payload"] for e in events]), offline.angles)


def test_lines_are_complete(bundle, rec):
    stop = threading.Event()
    out = []

    def write(line):
        out.append(line)
        if len(out) == 10:
            stop.set()

    serve_lines(frame_lines(rec.frames), write, bundle, stop=stop)
    assert len(out) >= 10
    for line in out:
        assert line.endswith("\n") and line.count("\n") == 1
        json.loads(line)


def test_drop_oldest_under_slow_consumer(bundle):
    good = list(frame_lines(synthesize_recording(9, 15).frames))

    def slow_writes(line):
        time.sleep(0.002)

    cfg = ServeConfig(queue_size=8)
    stats = serve_lines(good, slow_writes, bundle, config=cfg)
    # every frame is either processed or dropped
    assert stats.dropped > 0
    assert stats.frames + stats.dropped == 300


def test_block_policy_drops_nothing(bundle, rec):
    stats = serve_lines(list(frame_lines(rec.frames)), lambda _: time.sleep(0.001), bundle,
                        config=ServeConfig(queue_size=4, overflow="block"))
    assert stats.dropped == 0 and stats.frames == 100


@pytest.mark.slow
def test_million_line_stress_terminates(bundle):
    n = 10**6
    lines = ("x\n" for _ in range(n))
    t0 = time.perf_counter()
    stats = serve_lines(lines, lambda _: None, bundle, config=ServeConfig(queue_size=256))
    assert stats.malformed + stats.dropped == n
    assert time.perf_counter() - t0 < 300


def test_taps_and_class_events(bundle):
    ds, onsets, fingers = synthesize_typing(2, 8)
    proc = FrameProcessor(bundle, ServeConfig(tap_fingers=(6, 7, 8, 9, 10)))
    taps = []
    for line in frame_lines(ds.frames):
        taps += [e for e in proc.handle_line(line) if e.kind == "tap"]
    assert len(taps) == 8
    assert sorted(e.payload["finger"] for e in taps) == sorted(int(f) for f in fingers)


def test_stdio_session(bundle, rec):
    stdin = io.StringIO("".join(frame_lines(rec.frames)))
    stdout = io.StringIO()
    stats = serve_stdio(bundle, stdin=stdin, stdout=stdout)
    assert stats.angle_events == 61
    assert len(stdout.getvalue().splitlines()) == 61


def test_tcp_session(bundle, rec):
    ready, bound, result = threading.Event(), [], []
    th = threading.Thread(target=lambda: result.extend(
        serve_tcp("127.0.0.1", 0, bundle, max_sessions=1, ready=ready, bound=bound)))
    th.start()
    assert ready.wait(5)
    with socket.create_connection(("127.0.0.1", bound[0])) as s:
        s.sendall("".join(frame_lines(rec.frames)).encode())
        s.shutdown(socket.SHUT_WR)
        data = b""
        while chunk := s.recv(65536):
            data += chunk
    th.join(10)
    assert len(data.decode().splitlines()) == 61
    assert result[0].angle_events == 61


def test_parse_endpoint():
    assert parse_endpoint("-") == ("stdio",)
    assert parse_endpoint("tcp:0.0.0.0:9000") == ("tcp", "0.0.0.0", 9000)
    with pytest.raises(ValueError):
        parse_endpoint("tcp:nowhere")


def test_paced_gap_median():
    lines = list(range(21))
    stamps = [time.monotonic() for _ in paced(lines, 1.0)]
    gaps = np.diff(stamps) * 1000
    assert abs(statistics.median(gaps) - 50) <= 5


def test_paced_fake_clock():
    now = [0.0]
    slept = []

    def sleep(d):
        slept.append(d)
        now[0] += d

    list(paced(range(5), 2.0, clock=lambda: now[0], sleep=sleep))
    assert np.allclose(slept, [0.025] * 4)
    with pytest.raises(ValueError):
        list(paced([], -1))


def test_replay_fast_and_equivalent(tmp_path, bundle):
    r = synthesize_recording(8, 500)  # 10^4 frames
    path = tmp_path / "d.csv"
    write_dataset(r, path)
    t0 = time.perf_counter()
    lines = list(replay(path, 0))
    assert time.perf_counter() - t0 < 10
    assert len(lines) == 10**4
    assert lines == list(frame_lines(read_dataset(path).frames))


def test_replay_header_error_eager(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("not a dataset\n")
    with pytest.raises(Exception):
        replay(bad)
