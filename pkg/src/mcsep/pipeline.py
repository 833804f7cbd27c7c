"""Experiment pipeline: data generation, oracle evaluation, training, evaluation, reports."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features as feat
from .estimator import FeatureStats, MaskEstimator
from .formats import (ManifestRow, load_checkpoint, read_curve, read_manifest, read_table, save_checkpoint,
                      write_curve, write_manifest, write_table)
from .losses import LossSpec
from .masks import KINDS as MASK_KINDS
from .masks import MaskSet, compute_oracle_mask, separate
from .metrics import SCORE_HEADER, UtteranceScore, aggregate_report, format_table, permute_and_score
from .room import ROOM_MAX, ROOM_MIN, T60_RANGE, ArrayGeometry, sample_scene, scene_rirs, spatialize
from .signal import AnalysisConfig, MultichannelWaveform, decompose, stft
from .sources import speech_like
from .train import TrainConfig, TrainItem, train
from .wavio import atomic_write_text, read_wav, write_wav

LOG_FLOOR = 1e-3
PEAK = 0.9


class PipelineError(RuntimeError):
    pass


def _floats(value):
    if isinstance(value, str):
        return tuple(float(v) for v in value.split(","))
    return tuple(float(v) for v in value)


def _ints(value):
    if isinstance(value, str):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return tuple(int(v) for v in value)


def _strs(value):
    if isinstance(value, str):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return tuple(value)


def _bool(value):
    if isinstance(value, str):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return bool(value)


@dataclass(frozen=True)
class ExperimentConfig:
    # analysis
    sample_rate: int = 16000
    win_ms: float = 32.0
    hop_ms: float = 8.0
    # scenes and sources
    seed: int = 0
    count: int = 200
    n_sources: int = 2
    duration: float = 1.0
    room_min: tuple = ROOM_MIN
    room_max: tuple = ROOM_MAX
    t60_range: tuple = T60_RANGE
    snr_range: tuple = (-2.5, 2.5)
    # separation
    feature_mode: str = "ipd+angle"
    mask_kinds: tuple = MASK_KINDS
    irm_power: bool = False
    reference: str = "reverberant"
    filter_len: int = 512
    write_estimates: bool = False
    # training
    loss: str = "uPIT-SiSNR"
    lr: float = 0.05
    steps: int = 2000
    batch_size: int = 4
    clip: float = 5.0
    hidden: tuple = (16,)
    train_seed: int = 0
    jobs: int = 1

    _COERCE = {"room_min": _floats, "room_max": _floats, "t60_range": _floats, "snr_range": _floats,
               "hidden": _ints, "mask_kinds": _strs, "irm_power": _bool, "write_estimates": _bool}

    def __post_init__(self):
        if self.reference not in ("reverberant", "dry"):
            raise ValueError(f"reference must be 'reverberant' or 'dry', got {self.reference!r}")
        if self.feature_mode not in feat.MODES:
            raise ValueError(f"unknown feature mode {self.feature_mode!r}; expected one of {feat.MODES}")
        for k in self.mask_kinds:
            if k not in MASK_KINDS:
                raise ValueError(f"unknown mask kind {k!r}")
        LossSpec(self.loss, self.n_sources)
        if self.n_sources < 1 or self.count < 0 or self.duration <= 0:
            raise ValueError("n_sources, count and duration must be positive")

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ValueError(f"unknown config key {key!r}")
            if key in cls._COERCE:
                kwargs[key] = cls._COERCE[key](raw)
            elif isinstance(raw, str):
                default = names[key].default
                kwargs[key] = type(default)(raw) if not isinstance(default, str) else raw
            else:
                kwargs[key] = raw
        return cls(**kwargs)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def analysis(self) -> AnalysisConfig:
        return AnalysisConfig.from_ms(self.win_ms, self.hop_ms, self.sample_rate)

    @property
    def n_samples(self) -> int:
        return self.analysis.fit_length(int(round(self.duration * self.sample_rate)))

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, steps=self.steps, batch_size=self.batch_size, seed=self.train_seed,
                           clip=self.clip, hidden=self.hidden)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def utterance_id(seed: int, index: int) -> str:
    return hashlib.sha1(f"{seed}:{index}".encode()).hexdigest()[:12]


def source_band(rng):
    """Random speech-like pass band; two draws overlap over most of their range."""
    lo = math.exp(rng.uniform(math.log(80.0), math.log(250.0)))
    hi = math.exp(rng.uniform(math.log(3500.0), math.log(7000.0)))
    return lo, hi


def simulate_utterance(cfg: ExperimentConfig, index: int):
    """Scene, dry sources, images and mixture for utterance ``index``.

    Images are rescaled to a random level difference at mic 1 and the whole
    utterance is normalised to a common peak.
    """
    rng = np.random.default_rng([cfg.seed, index, 1])
    scene = sample_scene([cfg.seed, index], cfg.n_sources, cfg.room_min, cfg.room_max, cfg.t60_range)
    n = cfg.n_samples
    dry = [speech_like(rng, n, cfg.sample_rate, source_band(rng)) for _ in range(cfg.n_sources)]
    _, images = spatialize(dry, scene_rirs(scene, cfg.sample_rate))
    gains = [1.0 / math.sqrt(np.mean(im.samples[0] ** 2)) for im in images]
    if cfg.n_sources > 1:
        gains[1] *= 10.0 ** (-rng.uniform(*cfg.snr_range) / 20.0)
    imgs = [im.samples * g for im, g in zip(images, gains)]
    mix = np.sum(imgs, axis=0)
    peak = PEAK / max(np.max(np.abs(mix)), max(np.max(np.abs(i)) for i in imgs))
    imgs = [i * peak for i in imgs]
    dry = [d * g * peak for d, g in zip(dry, gains)]
    return scene, dry, imgs, np.sum(imgs, axis=0)


def _datagen_one(args):
    workdir, cfg, index = args
    uid = utterance_id(cfg.seed, index)
    scene, dry, imgs, mix = simulate_utterance(cfg, index)
    rel = Path("data") / uid
    fs = cfg.sample_rate
    write_wav(workdir / rel / "mix.wav", MultichannelWaveform(mix, fs))
    refs, drys = [], []
    for s, (img, d) in enumerate(zip(imgs, dry), 1):
        write_wav(workdir / rel / f"ref{s}.wav", MultichannelWaveform(img, fs))
        write_wav(workdir / rel / f"dry{s}.wav", MultichannelWaveform(d[None, :], fs))
        refs.append(str(rel / f"ref{s}.wav"))
        drys.append(str(rel / f"dry{s}.wav"))
    diff = scene.angle_difference
    return ManifestRow(uid, cfg.seed, index, scene.bucket or "-", 0.0 if diff is None else diff,
                       tuple(scene.azimuths), (scene.room.length, scene.room.width, scene.room.height),
                       scene.room.t60, str(rel / "mix.wav"), tuple(refs), tuple(drys))


def _map(fn, args, jobs):
    if jobs <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, args))


def datagen(workdir, cfg: ExperimentConfig, manifest: str = "manifest.tsv") -> Path:
    workdir = Path(workdir)
    rows = _map(_datagen_one, [(workdir, cfg, i) for i in range(cfg.count)], cfg.jobs)
    path = workdir / manifest
    write_manifest(path, rows)
    return path


def load_manifest(workdir, manifest) -> list:
    path = Path(workdir) / manifest
    if not path.exists():
        raise PipelineError(f"manifest not found: {path}")
    rows = read_manifest(path)
    if not rows:
        raise PipelineError(f"manifest is empty: {path}")
    return rows


@dataclass
class Utterance:
    row: ManifestRow
    mix: np.ndarray  # (mics, samples)
    refs: np.ndarray  # (S, samples) at mic 1


def load_utterance(workdir, row: ManifestRow, cfg: ExperimentConfig) -> Utterance:
    workdir = Path(workdir)
    for p in (row.mix, *row.refs):
        if not (workdir / p).exists():
            raise PipelineError(f"missing audio file: {workdir / p}")
    mix = read_wav(workdir / row.mix, cfg.sample_rate).samples
    paths = row.refs if cfg.reference == "reverberant" else row.dry
    refs = np.stack([read_wav(workdir / p, cfg.sample_rate).samples[0] for p in paths])
    n = cfg.analysis.signal_length(cfg.analysis.frame_count(mix.shape[1]))
    return Utterance(row, mix[:, :n], refs[:, :n])


def utterance_features(utt: Utterance, cfg: ExperimentConfig, mode: str | None = None):
    """Assembled features plus the mic-1 spectrogram."""
    mode = mode or cfg.feature_mode
    an = cfg.analysis
    specs = stft(utt.mix, an)
    log_mag = np.log(np.abs(specs[0]) + LOG_FLOOR)
    if mode == "single":
        return feat.assemble_features(log_mag, mode=mode), specs[0]
    ipd = feat.compute_ipd(specs)
    angle = None
    if mode == "ipd+angle":
        array = ArrayGeometry(center=(0.0, 0.0, 0.0))
        steering = np.stack([feat.steering_vectors(array, az, an) for az in utt.row.azimuths])
        angle = feat.compute_angle_features(specs, steering)
    return feat.assemble_features(log_mag, ipd, angle, mode), specs[0]


def train_item(utt: Utterance, cfg: ExperimentConfig, mode: str | None = None) -> TrainItem:
    x, y0 = utterance_features(utt, cfg, mode)
    mag, phase = decompose(y0)
    ref_mags = np.abs(stft(utt.refs, cfg.analysis))
    return TrainItem(x.astype(np.float32), mag, phase, utt.refs, ref_mags)


def _write_scores(path, scores):
    write_table(path, SCORE_HEADER, [s.to_row() for s in scores])


def read_scores(path) -> list:
    return [UtteranceScore.from_row(line) for line in read_table(path, SCORE_HEADER)]


def _write_report(directory: Path, name: str, scores) -> None:
    rep = aggregate_report(scores, label=name)
    _write_scores(directory / f"{name}.scores.tsv", scores)
    atomic_write_text(directory / f"{name}.report.json", rep.to_json() + "\n")


def _oracle_one(args):
    workdir, cfg, row = args
    utt = load_utterance(workdir, row, cfg)
    an = cfg.analysis
    y0 = stft(utt.mix[0], an)
    src_specs = stft(utt.refs, an)
    out = {}
    for kind in cfg.mask_kinds:
        ests = separate(compute_oracle_mask(kind, src_specs, y0, cfg.irm_power), y0, an)
        out[kind] = permute_and_score(ests, utt.refs, row.utt_id, row.bucket, filter_len=cfg.filter_len)
        if cfg.write_estimates:
            for s, e in enumerate(ests, 1):
                write_wav(Path(workdir) / "oracle" / kind / row.utt_id / f"est{s}.wav",
                          MultichannelWaveform(e[None, :], cfg.sample_rate))
    mix_ests = np.repeat(utt.mix[:1], len(utt.refs), axis=0)
    out["mixture"] = permute_and_score(mix_ests, utt.refs, row.utt_id, row.bucket, filter_len=cfg.filter_len)
    return out


def oracle_eval(workdir, cfg: ExperimentConfig, manifest: str = "manifest.tsv") -> dict:
    """Score every oracle mask kind plus the unprocessed mixture."""
    workdir = Path(workdir)
    rows = load_manifest(workdir, manifest)
    results = _map(_oracle_one, [(workdir, cfg, r) for r in rows], cfg.jobs)
    out_dir = workdir / "oracle"
    reports = {}
    for kind in [*cfg.mask_kinds, "mixture"]:
        scores = [res[kind] for res in results]
        _write_report(out_dir, kind, scores)
        reports[kind] = aggregate_report(scores, label=kind)
    atomic_write_text(out_dir / "report.txt", format_table(reports.values(), "si_snr")
                      + "\n" + format_table(reports.values(), "sdr"))
    return reports


def load_items(workdir, rows, cfg: ExperimentConfig, mode: str | None = None) -> list:
    return [train_item(load_utterance(workdir, r, cfg), cfg, mode) for r in rows]


def fit_estimator(items, cfg: ExperimentConfig, mode: str, progress=None):
    """Standardise the inputs, then train a fresh estimator on ``items``."""
    width = items[0].features.shape[1]
    est = MaskEstimator.create(width, cfg.hidden, cfg.n_sources, cfg.analysis.bins, seed=cfg.train_seed,
                               feature_mode=mode)
    stats = FeatureStats.fit([it.features for it in items])
    est.shift, est.scale = stats.shift, stats.scale
    return train(items, est, LossSpec(cfg.loss, cfg.n_sources), cfg.train_config(), cfg.analysis, progress)


def train_model(workdir, cfg: ExperimentConfig, manifest: str = "manifest.tsv", name: str | None = None,
                progress=None) -> Path:
    workdir = Path(workdir)
    rows = load_manifest(workdir, manifest)
    name = name or cfg.feature_mode
    result = fit_estimator(load_items(workdir, rows, cfg), cfg, cfg.feature_mode, progress)
    out = workdir / "models" / name
    save_checkpoint(out / "checkpoint.bin", result.estimator)
    write_curve(out / "curve.tsv", result.curve)
    atomic_write_text(out / "config.txt", cfg.to_text())
    return out / "checkpoint.bin"


def check_width(est: MaskEstimator, mode: str, cfg: ExperimentConfig) -> None:
    width = feat.feature_width(mode, cfg.analysis.bins, n_speakers=cfg.n_sources)
    if width != est.input_width:
        raise PipelineError(f"feature width mismatch: mode {mode!r} gives {width} but checkpoint expects "
                            f"{est.input_width} (checkpoint mode {est.feature_mode!r})")
    if est.bins != cfg.analysis.bins or est.n_sources != cfg.n_sources:
        raise PipelineError(f"checkpoint outputs {est.n_sources}x{est.bins} masks, config needs "
                            f"{cfg.n_sources}x{cfg.analysis.bins}")


def score_estimator(est: MaskEstimator, utts, cfg: ExperimentConfig, mode: str, with_sdr: bool = True) -> list:
    scores = []
    for utt in utts:
        x, y0 = utterance_features(utt, cfg, mode)
        ests = separate(MaskSet("estimated", est.predict(x)), y0, cfg.analysis)
        scores.append(permute_and_score(ests, utt.refs, utt.row.utt_id, utt.row.bucket, with_sdr,
                                        cfg.filter_len))
    return scores


def eval_model(workdir, cfg: ExperimentConfig, checkpoint, manifest: str = "manifest.tsv",
               name: str | None = None):
    workdir = Path(workdir)
    path = workdir / checkpoint
    if not path.exists():
        raise PipelineError(f"checkpoint not found: {path}")
    est = load_checkpoint(path)
    check_width(est, cfg.feature_mode, cfg)
    rows = load_manifest(workdir, manifest)
    utts = (load_utterance(workdir, r, cfg) for r in rows)
    scores = score_estimator(est, utts, cfg, cfg.feature_mode)
    name = name or Path(checkpoint).parent.name or cfg.feature_mode
    _write_report(workdir / "eval", name, scores)
    return aggregate_report(scores, label=name)


def collect_reports(workdir) -> dict:
    """Rebuild every report from the per-utterance score files alone."""
    workdir = Path(workdir)
    reports = {}
    for sub in ("oracle", "eval"):
        for path in sorted((workdir / sub).glob("*.scores.tsv")):
            label = path.name[:-len(".scores.tsv")]
            key = f"{sub}/{label}"
            reports[key] = aggregate_report(read_scores(path), label=key)
    if not reports:
        raise PipelineError(f"no score files under {workdir}/oracle or {workdir}/eval")
    return reports


def collect_curves(workdir) -> dict:
    return {p.parent.name: read_curve(p) for p in sorted((Path(workdir) / "models").glob("*/curve.tsv"))}
