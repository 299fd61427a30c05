"""Acceptance criteria 1-12.

Each test records a PASS/FAIL/SKIP line in ``RESULTS``; ``conftest.py``
prints them at the end of the run.  Criteria 3, 4, 8 and 10 train models and
take several minutes on one CPU core.
"""
import contextlib
import json
import os
import socket
import struct
import threading
import time
import zlib

import numpy as np
import pytest

from smartglove import augment, evalharness as ev, glovepose as gp, heads, signal, synth
from smartglove.nncore import grad_check, smooth_l1
from smartglove.stream import ServeConfig, replay, serve_tcp

RESULTS = {}

# Synthetic end-to-end setup shared by criteria 3, 8 and 10.
E2E_SEED = 0
E2E_SECONDS = 3600  # 72k frames
E2E_MODEL = dict(hidden_size=64)
E2E_TRAIN = dict(epochs=30, lr=1e-3, lr_schedule="cosine", seed=0)
E2E_STRIDE = 1
TEST_FRACTION = 0.2

# Criterion 4 is six trainings plus a 16-cell sweep; run at reduced scale.
AUG_MODEL = dict(hidden_size=32)
AUG_TRAIN = dict(epochs=10, lr=1e-3, lr_schedule="cosine")
AUG_STRIDE = 8
AUG_TEST_STRIDE = 4
AUG_SEEDS = (0, 1, 2)


@contextlib.contextmanager
def criterion(n, title):
    rec = {"title": title, "status": "FAIL", "detail": ""}
    RESULTS[n] = rec
    try:
        yield rec
    except pytest.skip.Exception as exc:
        rec["status"] = "SKIP"
        rec["detail"] = rec["detail"] or str(exc)
        raise
    else:
        rec["status"] = "PASS"


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def e2e():
    ds = synth.synthesize_recording(E2E_SEED, E2E_SECONDS)
    feats = signal.frame_features(ds.frames)
    cut = int(len(feats) * (1 - TEST_FRACTION))
    train = gp.WindowDataset.from_segments([(feats[:cut], ds.angles[:cut])], stride=E2E_STRIDE)
    test = gp.WindowDataset.from_segments([(feats[cut:], ds.angles[cut:])], stride=1)
    return ds, train, test


@pytest.fixture(scope="module")
def e2e_bundle(e2e):
    _, train, _ = e2e
    t0 = time.perf_counter()
    bundle = gp.train(train, gp.ModelConfig(**E2E_MODEL), gp.TrainConfig(**E2E_TRAIN))
    return bundle, time.perf_counter() - t0


# ---------------------------------------------------------------- 1, 2

def test_c01_gradient_fidelity():
    with criterion(1, "gradient fidelity (H=8, 40x28, >=200 coords, rel err < 1e-4, < 60 s)") as rec:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        cfg = gp.ModelConfig(hidden_size=8, fc1_width=16, dtype="float64")
        b = gp.init_bundle(cfg, signal.ChannelStats(np.zeros(28), np.ones(28)), rng.normal(30, 5, 22),
                           rng.uniform(5, 20, 22), seed=0)
        X = rng.normal(size=(4, 40, 28))
        Y = b.label_mean + rng.normal(0, 15, size=(4, 22))

        def loss():
            b.net.zero_grad()
            return gp._loss_and_grads(b, X, Y, None, 0.5)[0]

        err = grad_check(loss, b.net.params().values(), max_coords=400, seed=0)
        elapsed = time.perf_counter() - t0
        rec["detail"] = f"max rel err {err:.2e} over 400 coords, {elapsed:.1f} s"
        assert err < 1e-4
        assert elapsed < 60


def test_c02_loss_correctness():
    with criterion(2, "smooth L1 (beta=0.5) closed-form values and knee continuity") as rec:
        got = [smooth_l1(np.array([d]), np.array([0.0]), 0.5) for d in (0, 0.25, 0.5, 1.0)]
        assert got == [0.0, 0.0625, 0.25, 0.75]
        below = smooth_l1(np.array([np.nextafter(0.5, 0)]), np.array([0.0]), 0.5)
        above = smooth_l1(np.array([np.nextafter(0.5, 1)]), np.array([0.0]), 0.5)
        assert abs(below - 0.25) < 1e-12 and abs(above - 0.25) < 1e-12
        rec["detail"] = f"values {got}"


# ---------------------------------------------------------------- 3

def test_c03_synthetic_end_to_end(e2e, e2e_bundle):
    with criterion(3, "synthetic end-to-end: 30 epochs beats ridge, <= 5 deg, < 30 min") as rec:
        _, train, test = e2e
        bundle, elapsed = e2e_bundle
        Xte = test.windows(np.arange(len(test)))
        truth = test.targets()
        lstm = ev.rmse(bundle.predict(Xte), truth).mean()
        ridge = ev.rmse(ev.ridge_baseline(train.windows(np.arange(len(train))), train.targets(), Xte),
                        truth).mean()
        rec["detail"] = (f"LSTM {lstm:.4f} deg vs ridge {ridge:.4f} deg, "
                         f"training {elapsed / 60:.1f} min ({len(train)} windows x {E2E_TRAIN['epochs']} epochs)")
        assert bundle.metadata["epochs"] == 30
        assert lstm < ridge
        assert lstm <= 5.0
        assert elapsed < 30 * 60


# ---------------------------------------------------------------- 4

def test_c04_augmentation_benefit(e2e):
    with criterion(4, "augmentation: perturbed-average RMSE aug <= 0.85 x plain (3 seeds)") as rec:
        ds, _, _ = e2e
        feats = signal.frame_features(ds.frames)
        cut = int(len(feats) * (1 - TEST_FRACTION))
        train = gp.WindowDataset.from_segments([(feats[:cut], ds.angles[:cut])], stride=AUG_STRIDE)
        test = gp.WindowDataset.from_segments([(feats[cut:], ds.angles[cut:])], stride=AUG_TEST_STRIDE)
        X, Y = test.windows(np.arange(len(test))), test.targets()
        plain, aug, matched, clean = [], [], [], []
        for seed in AUG_SEEDS:
            tc = gp.TrainConfig(seed=seed, **AUG_TRAIN)
            p = gp.train(train, gp.ModelConfig(**AUG_MODEL), tc)
            a = augment.multitask_train(train, gp.ModelConfig(multitask_flags_dim=3, **AUG_MODEL), tc)
            # control, not asserted: plain model given the same number of
            # gradient steps as the fourfold augmented set
            long_tc = gp.TrainConfig(seed=seed, **{**AUG_TRAIN, "epochs": 4 * AUG_TRAIN["epochs"]})
            m = gp.train(train, gp.ModelConfig(**AUG_MODEL), long_tc)
            s = ev.robustness_sweep({"plain": p, "aug": a, "matched": m}, X, Y, seed=seed)["summary"]
            plain.append(s["plain"]["perturbed_average_rmse_deg"])
            aug.append(s["aug"]["perturbed_average_rmse_deg"])
            matched.append(s["matched"]["perturbed_average_rmse_deg"])
            clean.append((s["plain"]["clean_rmse_deg"], s["aug"]["clean_rmse_deg"]))
        ratio = np.mean(aug) / np.mean(plain)
        cp, ca = np.mean(clean, axis=0)
        rec["detail"] = (f"ratio {ratio:.3f}: perturbed-average plain {np.mean(plain):.3f} deg, "
                         f"aug {np.mean(aug):.3f} deg; clean plain {cp:.3f} deg, aug {ca:.3f} deg; "
                         f"step-matched plain {np.mean(matched):.3f} deg "
                         f"(ratio {np.mean(aug) / np.mean(matched):.3f}, not asserted)")
        assert ratio <= 0.85


# ---------------------------------------------------------------- 5, 6, 7

def test_c05_dataset_bookkeeping():
    with criterion(5, "|D_aug| = 4|D| and flag-pattern counts = |D| for |D| in {1, 10, 1000}") as rec:
        rng = np.random.default_rng(0)
        for n in (1, 10, 1000):
            base = gp.WindowDataset(rng.normal(size=(n + 39, 28)), rng.normal(size=(n + 39, 22)), np.arange(n))
            aug = augment.AugmentedDataset(base, seed=n)
            assert len(aug) == 4 * n
            patterns, counts = np.unique(aug.flags(), axis=0, return_counts=True)
            assert patterns.tolist() == [[0, 0, 0], [0, 0, 1], [0, 1, 0], [1, 0, 0]]
            assert counts.tolist() == [n] * 4
        rec["detail"] = "exact for 1, 10, 1000"


def _oracle_taps(x, rest, threshold):
    f = ((x / rest - 1.0) ** 2 >= threshold).astype(int)
    return [t for t in range(3, len(f)) if (f[t - 3], f[t - 2], f[t - 1], f[t]) == (0, 0, 1, 1)]


def test_c06_tap_detection():
    with criterion(6, "tap detection = brute-force rising-edge oracle on 10^4 pulse trains") as rec:
        rng = np.random.default_rng(6)
        rest, thr = 1.0, signal.DEFAULT_TAP_THRESHOLD
        total = short = 0
        for _ in range(10_000):
            n = int(rng.integers(8, 80))
            x = rest + rng.normal(0, 0.02, n)
            short_onsets = []
            for _ in range(int(rng.integers(0, 5))):
                start, width = int(rng.integers(0, n)), int(rng.integers(1, 6))
                x[start:start + width] += rng.choice([-1, 1]) * rng.uniform(0.1, 0.8)
                if width == 1:
                    short_onsets.append(start)
            got = [e.timestamp_ms // 50 for e in signal.detect_taps(x, rest, thr)]
            want = _oracle_taps(x, rest, thr)
            assert got == want
            total += len(want)
            # an isolated single above-threshold sample never produces a tap
            f = (x / rest - 1) ** 2 >= thr
            for s in short_onsets:
                if 0 < s < n - 1 and not f[s - 1] and not f[s + 1]:
                    short += 1
                    assert s not in got and s + 1 not in got
        rec["detail"] = f"{total} taps matched exactly; {short} isolated 1-sample pulses rejected"


def test_c07_baseline_correction():
    with criterion(7, "baseline: constant -> 0 after warmup; ramp -> a(n-1)/2 at n=400") as rec:
        out = signal.baseline_correct(np.full(1000, 3.7), 400)
        assert np.all(out[399:] == 0.0)
        a = 0.013
        ramp = signal.baseline_correct(a * np.arange(1500.0), 400)
        err = np.abs(ramp[399:] - a * 399 / 2).max()
        assert err < 1e-9
        rec["detail"] = f"ramp max error {err:.1e}"


# ---------------------------------------------------------------- 8

def test_c08_head_transfer(e2e_bundle):
    with criterion(8, "34-class head on frozen core reaches >= 95% test accuracy") as rec:
        core, _ = e2e_bundle
        digest = core.param_digest()
        intra = 3.0
        poses = synth.random_class_poses(34, seed=8, intra_std=intra, min_sep_factor=3.0)
        d = np.linalg.norm(poses[:, None] - poses[None], axis=-1)
        assert d[~np.eye(34, dtype=bool)].min() >= 3 * intra

        def windows(seed):
            ds = synth.synthesize_class_recording(seed, poses, hold_s=4.0, jitter_std=intra, repeats=2)
            w = gp.WindowDataset.from_segments([(signal.frame_features(ds.frames), ds.angles)], stride=5)
            labels = ds.labels[w.starts + w.length - 1]
            keep = labels >= 0
            return w.windows(np.arange(len(w)))[keep], labels[keep]

        Xtr, ytr = windows(100)
        Xte, yte = windows(200)
        clf = heads.attach_head(core, heads.HeadConfig(34))
        heads.train_head(clf, Xtr, ytr, epochs=150, lr=3e-3, seed=0)
        pred = np.array([p.class_id for p in heads.classify(clf, Xte)])
        acc = float(np.mean(pred == yte))
        rec["detail"] = f"test accuracy {100 * acc:.2f}% on {len(yte)} windows; core digest unchanged"
        assert core.param_digest() == digest
        assert acc >= 0.95


# ---------------------------------------------------------------- 9

def test_c09_cv_harness():
    with criterion(9, "fold plans are exact partitions (10^3 trials); metric identities exact") as rec:
        rng = np.random.default_rng(9)
        for _ in range(1000):
            n = int(rng.integers(10, 400))
            plan = ev.split(n, "kfold10", seed=int(rng.integers(1 << 30)))
            assert np.array_equal(np.sort(np.concatenate([plan.test_indices(k) for k in range(10)])), np.arange(n))
            sizes = np.bincount(plan.assignments, minlength=10)
            assert sizes.max() - sizes.min() <= 1
            subjects = rng.integers(0, int(rng.integers(2, 8)), n)
            if len(np.unique(subjects)) < 2:
                continue
            loso = ev.split(n, "loso", subjects=subjects)
            folds = [loso.test_indices(k) for k in range(loso.n_folds)]
            assert np.array_equal(np.sort(np.concatenate(folds)), np.arange(n))
            for k, name in enumerate(loso.fold_names):
                assert len(folds[k]) == np.sum(subjects.astype(str) == name)
        t = rng.normal(size=(100, 22))
        assert np.all(ev.rmse(t, t) == 0) and np.all(ev.r2(t, t) == 100)
        const = np.broadcast_to(t.mean(axis=0), t.shape)
        assert np.all(np.abs(ev.r2(const, t)) < 1e-12)
        labels, preds = rng.integers(0, 7, (2, 500))
        res = ev.sensitivity_and_confusion(preds, labels, 7)
        assert res["accuracy"] == np.trace(res["confusion"]) / 500
        rec["detail"] = "1000 kfold10 + LOSO trials"


# ---------------------------------------------------------------- 10

def test_c10_online_offline(e2e_bundle, tmp_path):
    with criterion(10, "serve(replay(D)) bit-identical to predict_stream(D), 10^4 frames; median < 50 ms") as rec:
        bundle, _ = e2e_bundle
        path = tmp_path / "replay.sgd"
        synth.write_dataset(synth.synthesize_recording(10, 500), path)
        frames = synth.read_dataset(path).frames
        assert len(frames) == 10_000
        offline = gp.predict_stream(frames, bundle)

        ready, bound, sessions = threading.Event(), [], []
        server = threading.Thread(target=lambda: sessions.extend(serve_tcp(
            "127.0.0.1", 0, bundle, ServeConfig(overflow="block"), max_sessions=1, ready=ready, bound=bound)))
        server.start()
        assert ready.wait(10)
        received = []
        with socket.create_connection(("127.0.0.1", bound[0])) as sock:
            rfile = sock.makefile("r", encoding="utf-8")
            pump = threading.Thread(target=lambda: received.extend(rfile))
            pump.start()
            for line in replay(path, 0):
                sock.sendall(line.encode())
            sock.shutdown(socket.SHUT_WR)
            pump.join(600)
        server.join(60)
        events = [json.loads(x) for x in received]
        online = np.array([e["payload"] for e in events if e["kind"] == "angles"])
        assert online.shape == offline.angles.shape == (10_000 - 39, 22)
        assert np.array_equal(online, offline.angles)
        assert [e["t"] for e in events] == offline.t_ms.tolist()
        med_ms = sessions[0].latency["p50_us"] / 1000
        rec["detail"] = (f"{len(online)} angle events identical; median latency {med_ms:.2f} ms "
                         f"(offline {offline.latency['p50_us'] / 1000:.2f} ms)")
        assert med_ms < 50


# ---------------------------------------------------------------- 11

def test_c11_checkpoint_roundtrip(tmp_path):
    with criterion(11, "checkpoint save -> load -> forward bit-identical; corruption rejected") as rec:
        recording = synth.synthesize_recording(11, 30)
        data = gp.WindowDataset.from_segments([(signal.frame_features(recording.frames), recording.angles)], stride=4)
        b = gp.train(data, gp.ModelConfig(hidden_size=8, fc1_width=16), gp.TrainConfig(epochs=1, lr=1e-3))
        p = tmp_path / "m.sgb"
        gp.save_bundle(b, p)
        back = gp.load_bundle(p)
        w = data.windows(np.arange(len(data)))
        assert np.array_equal(b.predict(w), back.predict(w))
        raw = p.read_bytes()
        seen = set()
        for blob in (raw[: len(raw) // 3], _flip(raw), b""):
            p.write_bytes(blob)
            with pytest.raises(gp.CorruptCheckpointError) as ei:
                gp.load_bundle(p)
            seen.add(ei.value.category)
        body = bytearray(raw[:-4])
        body[4:6] = struct.pack("<H", 7)
        p.write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
        with pytest.raises(gp.UnsupportedVersionError) as ei:
            gp.load_bundle(p)
        seen.add(ei.value.category)
        rec["detail"] = f"categories raised: {sorted(seen)}"


def _flip(raw):
    b = bytearray(raw)
    b[len(b) // 2] ^= 0x01
    return bytes(b)


# ---------------------------------------------------------------- 12

def test_c12_real_data_track(tmp_path):
    """Optional: point SMARTGLOVE_REAL_DATA at a published recording (CSV)."""
    with criterion(12, "real-data track (optional): 10% subsample, intra-subject 10-fold report") as rec:
        source = os.environ.get("SMARTGLOVE_REAL_DATA")
        if not source:
            pytest.skip("SMARTGLOVE_REAL_DATA not set; published dataset not fetched")
        ds = synth.adapt_external(source, os.environ.get("SMARTGLOVE_REAL_MAPPING"))
        feats = signal.frame_features(ds.frames)
        data = gp.WindowDataset.from_segments([(feats, ds.angles)], stride=10)
        plan = ev.split(len(data), "kfold10", seed=0)
        preds = np.zeros((len(data), 22))
        for tr, te in plan.folds():
            m = gp.train(data.subset(tr), gp.ModelConfig(hidden_size=32), gp.TrainConfig(epochs=5, lr=1e-3))
            preds[te] = m.predict(data.windows(te))
        report = ev.regression_report(preds, data.targets())
        ev.write_table_csv(report, tmp_path / "joint_table.csv")
        rec["detail"] = f"average RMSE {report.average_rmse:.3f} deg, R2 {report.average_r2:.2f}%"
