"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The slow end-to-end training criterion takes several minutes on one core.
"""

import itertools
import math
import time

import numpy as np
import pytest
from gradcheck import numeric_grad, relative_error

from mcsep import features as feat
from mcsep import pipeline
from mcsep.cli import run
from mcsep.losses import loss_tgt_sisnr, loss_upit_mse, loss_upit_sisnr
from mcsep.masks import compute_oracle_mask, separate
from mcsep.metrics import permute_and_score, sdr, si_snr
from mcsep.room import (BUCKET_NAMES, SPEED_OF_SOUND, ArrayGeometry, RoomSpec, SceneSpec, ensemble_t60,
                        sample_scene, scene_rirs, spatialize)
from mcsep.signal import AnalysisConfig, decompose, frames_of, istft, stft
from mcsep.sources import bin_tones, chirp

FS = 16000


def test_criterion_1_stft_roundtrip(criterion):
    rec = criterion(1, "STFT/ISTFT roundtrip and kernel vs direct DFT")
    rng = np.random.default_rng(0)
    n = 16000
    t = np.arange(n) / FS
    signals = {"noise": rng.standard_normal(n), "chirp": chirp(rng, n, FS, (200.0, 6000.0)),
               "tone": np.sin(2 * np.pi * 440.0 * t)}
    worst_rt = worst_dft = 0.0
    for win_ms, hop_ms in ((32, 8), (64, 16)):
        cfg = AnalysisConfig.from_ms(win_ms, hop_ms, FS)
        k = np.arange(cfg.bins)[:, None] * np.arange(cfg.win_len)[None, :]
        dft = np.exp(-2j * np.pi * k / cfg.fft_size)
        usable = cfg.signal_length(cfg.frame_count(n))
        for x in signals.values():
            x = x[:usable]
            spec = stft(x, cfg)
            y = istft(spec, cfg)
            w = cfg.win_len
            worst_rt = max(worst_rt, np.linalg.norm(x[w:-w] - y[w:-w]) / np.linalg.norm(x[w:-w]))
            direct = (frames_of(x, cfg) * cfg.window) @ dft.T
            worst_dft = max(worst_dft, np.max(np.abs(spec - direct)) / np.max(np.abs(direct)))
    rec.check(worst_rt < 1e-6, f"max interior relative error {worst_rt:.2e} (< 1e-6)")
    rec.check(worst_dft < 1e-10, f"max kernel vs DFT error {worst_dft:.2e} (< 1e-10)")
    assert rec.ok, rec.line()


def test_criterion_2_si_snr(criterion):
    rec = criterion(2, "Si-SNR correctness")
    rng = np.random.default_rng(1)
    x = rng.standard_normal(8000)
    x -= x.mean()
    noise = rng.standard_normal(8000)
    noise -= noise.mean()
    noise -= (noise @ x) / (x @ x) * x
    noise *= math.sqrt((x @ x) / 10.0 / (noise @ noise))
    est = x + noise
    ten = abs(si_snr(est, x) - 10.0)
    scale = max(abs(si_snr(a * est, x) - si_snr(est, x)) for a in (1e-4, 0.1, 7.0, 1e5))
    other = x + 0.7 * rng.standard_normal(8000)
    offset = max(abs(si_snr(other + c, x + d) - si_snr(other, x)) for c, d in ((3.0, 0.0), (-2.0, 5.0)))
    rec.check(ten < 1e-9, f"orthogonal 10:1 gives 10 dB within {ten:.1e}")
    rec.check(scale < 1e-9, f"scale invariance {scale:.1e} dB")
    rec.check(offset < 1e-9, f"mean-offset invariance {offset:.1e} dB")
    assert rec.ok, rec.line()


def test_criterion_3_sdr_and_permutations(criterion):
    rec = criterion(3, "SDR at filter_len 1 and permutation scoring")
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(5):
        # zero-mean signals: the distortion projection has no mean removal of its own
        ref = rng.standard_normal(4000)
        ref -= ref.mean()
        est = rng.uniform(0.2, 3) * ref + rng.uniform(0.1, 1) * rng.standard_normal(4000)
        est -= est.mean()
        worst = max(worst, abs(sdr(est, [ref], filter_len=1) - si_snr(est, ref)))
    rec.check(worst < 1e-6, f"max |SDR - Si-SNR| {worst:.1e} dB")
    agree = 0
    for n_src in (2, 3):
        for trial in range(10):
            refs = rng.standard_normal((n_src, 1000))
            ests = rng.standard_normal((n_src, 1000)) + rng.uniform(0, 1.5) * refs[rng.permutation(n_src)]
            got = permute_and_score(ests, refs, with_sdr=False).permutation
            brute = max(itertools.permutations(range(n_src)),
                        key=lambda p: sum(si_snr(ests[p[s]], refs[s]) for s in range(n_src)))
            agree += got == brute
    rec.check(agree == 20, f"brute force agrees on {agree}/20 cases (S = 2, 3)")
    assert rec.ok, rec.line()


def test_criterion_4_oracle_ordering(criterion, tmp_path):
    rec = criterion(4, "oracle mask ordering")
    start = time.perf_counter()
    cfg = pipeline.ExperimentConfig(seed=4, count=50)
    pipeline.datagen(tmp_path, cfg)
    reports = pipeline.oracle_eval(tmp_path, cfg)
    means = {k: reports[k].avg.si_snr for k in ("IBM", "IAM", "IRM", "IPSM")}
    n = FS
    a = 0.3 * bin_tones([20, 45, 90, 150], n, 512, rng=np.random.default_rng(1))
    b = 0.3 * bin_tones([30, 60, 120, 200], n, 512, rng=np.random.default_rng(2))
    an = AnalysisConfig()
    y = stft(a + b, an)
    ests = separate(compute_oracle_mask("IBM", stft(np.stack([a, b]), an), y), y, an)
    disjoint = permute_and_score(ests, np.stack([a, b]), with_sdr=False).mean_si_snr
    elapsed = time.perf_counter() - start
    table = " ".join(f"{k} {v:.2f}" for k, v in means.items())
    rec.check(means["IPSM"] >= max(means["IBM"], means["IAM"], means["IRM"]), f"50 scenes: {table}")
    rec.check(disjoint > 40.0, f"disjoint IBM {disjoint:.1f} dB (> 40)")
    rec.check(elapsed < 120.0, f"{elapsed:.0f} s (< 120)")
    assert rec.ok, rec.line()


def test_criterion_5_room_simulation(criterion):
    rec = criterion(5, "room simulation")
    rng = np.random.default_rng(5)
    exact = 0
    for _ in range(100):
        scene = sample_scene(int(rng.integers(1 << 40)))
        rir = scene_rirs(scene)
        ok = True
        for s, src in enumerate(scene.sources):
            for m, mic in enumerate(scene.array.mic_positions):
                want = round(FS * math.dist(src, mic) / SPEED_OF_SOUND)
                ok &= int(np.flatnonzero(rir.taps[s, m])[0]) == want == rir.direct_delays[s, m]
        exact += ok
    rec.check(exact == 100, f"direct-path tap exact in {exact}/100 geometries")

    errors = []
    for target in (0.05, 0.1, 0.2, 0.3, 0.4, 0.5):
        rirs = []
        for k in range(30):
            base = sample_scene([5, k, int(target * 1000)])
            room = RoomSpec(base.room.length, base.room.width, base.room.height, target)
            rirs.append(scene_rirs(SceneSpec(room, base.array, base.sources)))
        errors.append((target, ensemble_t60(rirs) / target - 1.0))
    worst = max(abs(e) for _, e in errors)
    rec.check(worst <= 0.2, "T60 errors " + " ".join(f"{t:g}:{e:+.1%}" for t, e in errors) + " (within 20%)")

    counts = dict.fromkeys(BUCKET_NAMES, 0)
    for seed in range(10000):
        counts[sample_scene([55, seed]).bucket] += 1
    shares = [counts[b] / 10000 for b in BUCKET_NAMES]
    dev = max(abs(s - t) for s, t in zip(shares, (0.16, 0.29, 0.26, 0.29)))
    rec.check(dev <= 0.03, "buckets " + "/".join(f"{100 * s:.1f}" for s in shares) + f" (max dev {dev:.3f})")
    assert rec.ok, rec.line()


def plane_wave_multitone(array, azimuth, rng, n=8192):
    """Flat-spectrum multitone on the analysis bin centres, delayed exactly per mic.

    With no spectral nulls every cell of the STFT carries a clean phase
    rotation, and the signal is periodic so circular delays are exact.
    """
    freqs = np.fft.rfftfreq(n, 1 / FS)
    spec = np.zeros(len(freqs), complex)
    idx = np.arange(10, 113) * (n // 512)
    spec[idx] = np.exp(1j * rng.uniform(-np.pi, np.pi, len(idx)))
    u = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
    arrival = -(array.mic_positions @ u) / SPEED_OF_SOUND
    return np.stack([np.fft.irfft(spec * np.exp(-2j * np.pi * freqs * d), n) for d in arrival])


def test_criterion_6_spatial_features(criterion):
    rec = criterion(6, "IPD and angle features")
    cfg = AnalysisConfig()
    tau = 3.0 / FS
    k = 64
    f = k * FS / cfg.fft_size
    t = np.arange(cfg.signal_length(20)) / FS
    specs = stft(np.stack([np.cos(2 * np.pi * f * t), np.cos(2 * np.pi * f * (t - tau))]), cfg)
    ipd = feat.compute_ipd(specs, [(1, 2)])[0, :, k]
    err = float(np.max(np.abs(ipd - math.remainder(2 * math.pi * f * tau, 2 * math.pi))))
    rec.check(err < 1e-3, f"pure-delay IPD error {err:.1e} rad")

    array = ArrayGeometry(center=(0.0, 0.0, 0.0))
    rng = np.random.default_rng(6)
    az = 0.9
    a = feat.compute_angle_features(stft(plane_wave_multitone(array, az, rng), cfg),
                                    feat.steering_vectors(array, az, cfg))
    dev = float(np.max(np.abs(a[0, :, 16:96] - 6.0)))
    rec.check(dev < 0.1, f"aligned anechoic angle feature 6 within {dev:.3f}")

    room = RoomSpec(6.0, 5.0, 3.0, 0.2)
    center = (3.0, 2.5, 1.5)
    true_m, off_m = [], []
    for _ in range(6):
        az = rng.uniform(-math.pi, math.pi)
        src = (3.0 + 1.2 * math.cos(az), 2.5 + 1.2 * math.sin(az), 1.5)
        mix, _ = spatialize([rng.standard_normal(cfg.signal_length(60))],
                            scene_rirs(SceneSpec(room, ArrayGeometry(center=center), (src,))))
        s = stft(mix.samples, cfg)
        true_m.append(feat.compute_angle_features(s, feat.steering_vectors(array, az, cfg))[0].mean())
        off_m.append(feat.compute_angle_features(s, feat.steering_vectors(array, az + math.pi / 2, cfg))[0].mean())
    rec.check(np.mean(true_m) > np.mean(off_m),
              f"simulated scenes: true {np.mean(true_m):.2f} > 90 deg off {np.mean(off_m):.2f}")
    widths = (feat.feature_width("ipd", 257), feat.feature_width("ipd+angle", 257))
    rec.check(widths == (257 * 13, 257 * 15), f"widths {widths[0]} and {widths[1]}")
    assert rec.ok, rec.line()


def test_criterion_7_gradients(criterion):
    rec = criterion(7, "loss gradients vs central differences")
    cfg = AnalysisConfig(win_len=64, hop=16, fft_size=64)
    rng = np.random.default_rng(7)
    src = rng.standard_normal((2, cfg.signal_length(16)))
    mag, phase = decompose(stft(src.sum(axis=0), cfg))
    ref_mags = np.abs(stft(src, cfg))
    masks = rng.uniform(0.1, 0.9, (2,) + mag.shape)
    cases = {
        "uPIT-SiSNR": (lambda m: loss_upit_sisnr(m, mag, phase, src, cfg), masks.copy()),
        "uPIT-MSE": (lambda m: loss_upit_mse(m, mag, ref_mags), masks.copy()),
        "TGT-SiSNR": (lambda m: loss_tgt_sisnr(m, mag, phase, src[0], cfg), masks[:1].copy()),
    }
    for name, (fn, m) in cases.items():
        err = relative_error(fn(m).grad, numeric_grad(lambda: fn(m).value, m))
        rec.check(err < 1e-5, f"{name} {err:.1e}")
    assert rec.ok, rec.line()


@pytest.mark.slow
def test_criterion_8_learning_signal(criterion, tmp_path):
    rec = criterion(8, "end-to-end learning signal on held-out mixtures")
    start = time.perf_counter()
    train_cfg = pipeline.ExperimentConfig(seed=0, count=200)
    eval_cfg = train_cfg.replace(seed=1, count=50)
    pipeline.datagen(tmp_path, train_cfg, "train.tsv")
    pipeline.datagen(tmp_path, eval_cfg, "eval.tsv")
    mixture = pipeline.oracle_eval(tmp_path, eval_cfg.replace(mask_kinds=()), "eval.tsv")["mixture"].avg.si_snr
    scores = {}
    for mode in ("ipd+angle", "single"):
        cfg = train_cfg.replace(feature_mode=mode)
        ckpt = pipeline.train_model(tmp_path, cfg, "train.tsv", name=mode)
        rep = pipeline.eval_model(tmp_path, cfg, ckpt.relative_to(tmp_path), "eval.tsv", name=mode)
        scores[mode] = rep.avg.si_snr
    elapsed = time.perf_counter() - start
    gain = scores["ipd+angle"] - mixture
    gap = scores["ipd+angle"] - scores["single"]
    rec.check(gain >= 3.0, f"ipd+angle {scores['ipd+angle']:.2f} dB vs mixture {mixture:.2f} dB (+{gain:.2f}, >= 3)")
    rec.check(gap >= 1.0, f"magnitude-only {scores['single']:.2f} dB (gap {gap:.2f}, >= 1)")
    rec.check(elapsed < 900.0, f"{elapsed / 60:.1f} min (< 15)")
    assert rec.ok, rec.line()


def test_criterion_9_determinism(criterion, tmp_path):
    rec = criterion(9, "bit-identical reruns")
    outputs = []
    for k in range(2):
        wd = tmp_path / f"run{k}"
        assert run(["--workdir", str(wd), "datagen", "--count", "12", "--seed", "9"]) == 0
        assert run(["--workdir", str(wd), "train", "--steps", "60", "--quiet"]) == 0
        assert run(["--workdir", str(wd), "eval", "--checkpoint", "models/ipd+angle/checkpoint.bin"]) == 0
        outputs.append({name: (wd / name).read_bytes() for name in
                        ("manifest.tsv", "models/ipd+angle/curve.tsv", "models/ipd+angle/checkpoint.bin",
                         "eval/ipd+angle.scores.tsv", "eval/ipd+angle.report.json")})
    for name in outputs[0]:
        rec.check(outputs[0][name] == outputs[1][name], f"{name} identical")
    assert rec.ok, rec.line()
