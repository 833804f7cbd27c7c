import json
import shutil

import numpy as np
import pytest

from mcsep import pipeline
from mcsep.cli import run
from mcsep.formats import MANIFEST_FIELDS, ManifestRow, read_manifest, write_manifest
from mcsep.signal import MultichannelWaveform
from mcsep.sources import bin_tones
from mcsep.wavio import read_wav, write_wav

SMALL = ["--count", "4", "--seed", "11"]


def cli(workdir, *args):
    return run(["--workdir", str(workdir), *args])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    wd = tmp_path_factory.mktemp("wd")
    assert cli(wd, "datagen", *SMALL) == 0
    return wd


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error kind=")
    return err[0]


class TestDatagen:
    def test_manifest_and_audio(self, dataset):
        rows = read_manifest(dataset / "manifest.tsv")
        assert len(rows) == 4
        assert len({r.utt_id for r in rows}) == 4
        for r in rows:
            assert r.utt_id == pipeline.utterance_id(11, r.index)
            mix = read_wav(dataset / r.mix, 16000)
            assert mix.channel_count == 6 and mix.length == 16000
            for p in (*r.refs, *r.dry):
                assert read_wav(dataset / p, 16000).length == 16000

    def test_rerun_identical(self, dataset, tmp_path):
        assert cli(tmp_path, "datagen", *SMALL) == 0
        assert (tmp_path / "manifest.tsv").read_bytes() == (dataset / "manifest.tsv").read_bytes()
        r = read_manifest(tmp_path / "manifest.tsv")[2]
        assert (tmp_path / r.mix).read_bytes() == (dataset / r.mix).read_bytes()

    def test_ids_are_content_addressed(self, dataset, tmp_path):
        assert cli(tmp_path, "datagen", "--count", "2", "--seed", "11") == 0
        assert read_manifest(tmp_path / "manifest.tsv") == read_manifest(dataset / "manifest.tsv")[:2]

    def test_parallel_matches_serial(self, dataset, tmp_path):
        assert cli(tmp_path, "--jobs", "2", "datagen", *SMALL) == 0
        assert (tmp_path / "manifest.tsv").read_bytes() == (dataset / "manifest.tsv").read_bytes()

    def test_peak_and_references_sum(self, dataset):
        cfg = pipeline.ExperimentConfig()
        r = read_manifest(dataset / "manifest.tsv")[0]
        mix = read_wav(dataset / r.mix).samples
        imgs = [read_wav(dataset / p).samples for p in r.refs]
        assert np.max(np.abs(mix)) <= pipeline.PEAK + 1e-6
        np.testing.assert_allclose(mix[0], imgs[0][0] + imgs[1][0], atol=1e-6)
        assert cfg.n_samples == 16000


class TestErrors:
    def test_empty_manifest(self, tmp_path, capsys):
        (tmp_path / "manifest.tsv").write_text("\t".join(MANIFEST_FIELDS) + "\n")
        assert cli(tmp_path, "oracle-eval") == 1
        assert "empty" in error_line(capsys)
        assert not (tmp_path / "oracle").exists()

    def test_missing_audio(self, dataset, tmp_path, capsys):
        shutil.copy(dataset / "manifest.tsv", tmp_path / "manifest.tsv")
        assert cli(tmp_path, "oracle-eval") == 1
        assert "missing audio" in error_line(capsys)

    def test_usage_error_is_one_line(self, tmp_path, capsys):
        assert cli(tmp_path, "train", "--lr", "fast") == 2
        error_line(capsys)

    def test_bad_config_key(self, tmp_path, capsys):
        (tmp_path / "exp.cfg").write_text("learning_rate = 3\n")
        assert cli(tmp_path, "--config", "exp.cfg", "datagen") == 1
        assert "learning_rate" in error_line(capsys)

    def test_missing_checkpoint(self, dataset, capsys):
        assert cli(dataset, "eval", "--checkpoint", "models/none/checkpoint.bin") == 1
        assert "checkpoint not found" in error_line(capsys)


class TestConfig:
    def test_flags_override_file(self, tmp_path):
        (tmp_path / "exp.cfg").write_text("count = 3\nseed = 9  # comment\n")
        assert cli(tmp_path, "--config", "exp.cfg", "datagen", "--count", "1") == 0
        rows = read_manifest(tmp_path / "manifest.tsv")
        assert len(rows) == 1 and rows[0].seed == 9

    def test_from_mapping_coercion(self):
        cfg = pipeline.ExperimentConfig.from_mapping({"hidden": "8,4", "lr": "0.5", "irm_power": "yes",
                                                      "t60_range": "0.1,0.2", "steps": "7"})
        assert cfg.hidden == (8, 4) and cfg.lr == 0.5 and cfg.irm_power and cfg.t60_range == (0.1, 0.2)
        assert cfg.steps == 7
        with pytest.raises(ValueError):
            pipeline.ExperimentConfig(feature_mode="stereo")


class TestTrainEval:
    def test_train_eval_report(self, dataset, capsys):
        args = ("train", "--steps", "3", "--hidden", "4", "--quiet", "--name", "tiny")
        assert cli(dataset, *args) == 0
        ckpt = "models/tiny/checkpoint.bin"
        first = (dataset / ckpt).read_bytes(), (dataset / "models/tiny/curve.tsv").read_bytes()
        assert cli(dataset, *args) == 0
        assert first == ((dataset / ckpt).read_bytes(), (dataset / "models/tiny/curve.tsv").read_bytes())
        assert cli(dataset, "eval", "--checkpoint", ckpt) == 0
        scores = (dataset / "eval/tiny.scores.tsv").read_bytes()
        assert cli(dataset, "eval", "--checkpoint", ckpt) == 0
        assert (dataset / "eval/tiny.scores.tsv").read_bytes() == scores
        capsys.readouterr()

        assert cli(dataset, "eval", "--checkpoint", ckpt, "--feature-mode", "single") == 1
        line = error_line(capsys)
        assert "257" in line and "3855" in line

        assert cli(dataset, "oracle-eval", "--masks", "IBM,IPSM") == 0
        assert cli(dataset, "report") == 0
        out = dataset / "report"
        for name in ("report.txt", "report.json", "si_snr.png", "sdr.png", "curves.png"):
            assert (out / name).stat().st_size > 0
        saved = json.loads((out / "report.json").read_text())
        stored = json.loads((dataset / "eval/tiny.report.json").read_text())
        assert saved["eval/tiny"]["avg"] == stored["avg"]
        assert set(saved) == {"eval/tiny", "oracle/IBM", "oracle/IPSM", "oracle/mixture"}


def test_disjoint_pair_oracle_ibm(tmp_path):
    """Sources on disjoint frequency bins, injected through a hand-written manifest."""
    n = 16000
    a = 0.3 * bin_tones([20, 45, 90], n, 512, rng=np.random.default_rng(1))
    b = 0.3 * bin_tones([30, 60, 120], n, 512, rng=np.random.default_rng(2))
    rel = "data/pair"
    write_wav(tmp_path / rel / "mix.wav", MultichannelWaveform(np.tile(a + b, (6, 1)), 16000))
    for k, s in enumerate((a, b), 1):
        write_wav(tmp_path / rel / f"ref{k}.wav", MultichannelWaveform(np.tile(s, (6, 1)), 16000))
        write_wav(tmp_path / rel / f"dry{k}.wav", MultichannelWaveform(s[None], 16000))
    row = ManifestRow("pair", 0, 0, "90-180", 120.0, (0.0, 2.0), (5.0, 5.0, 3.0), 0.2, f"{rel}/mix.wav",
                      (f"{rel}/ref1.wav", f"{rel}/ref2.wav"), (f"{rel}/dry1.wav", f"{rel}/dry2.wav"))
    write_manifest(tmp_path / "manifest.tsv", [row])
    reports = pipeline.oracle_eval(tmp_path, pipeline.ExperimentConfig(mask_kinds=("IBM",)))
    assert reports["IBM"].avg.si_snr > 40.0
