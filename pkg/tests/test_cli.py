import json
import os

import pytest

from avcount.cli import build_parser, main
from avcount.config import load_config, parse_config
from avcount.dataio import DataError


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    """Config tuned for plumbing tests: tiny corpus, few epochs."""
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(
        json.dumps(
            {
                "seed": 7,
                "epochs": 4,
                "n_clips": 6,
                "scene": {
                    "noise_level": 0.02,
                    "amp_range": [0.15, 0.3],
                    "envelope_width": 0.12,
                    "rate": 1.5,
                },
            }
        )
    )
    return str(path)


@pytest.fixture(scope="module")
def corpus_dir(fast_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--spec", fast_config, "--out", str(out)]) == 0
    return str(out)


@pytest.fixture(scope="module")
def model_dir(fast_config, corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    code = main(
        ["train", "--config", fast_config, "--data", corpus_dir, "--out", str(out), "--jobs", "1"]
    )
    assert code == 0
    return str(out)


class TestConfig:
    def test_empty_config_is_all_defaults(self):
        cfg = parse_config({})
        assert cfg.t_d == 0.75 and cfg.k == 15 and cfg.epochs == 100
        assert cfg.spectrogram.window_len == 4096

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(DataError):
            parse_config({"windowlen": 4096})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(DataError):
            parse_config({"spectrogram": {"hop_len": 10}})
        with pytest.raises(DataError):
            parse_config({"detector": {"m": 0.3}})

    def test_invalid_value_rejected(self):
        with pytest.raises(DataError):
            parse_config({"spectrogram": {"f_min": -5.0}})

    def test_detector_section_parsed(self):
        cfg = parse_config({"detector": {"smoother": [7, 3], "m_frac": 0.45}})
        assert cfg.detector.smoother.lengths == (7, 3)
        assert cfg.detector.m_frac == 0.45

    def test_env_seed_override(self, monkeypatch):
        monkeypatch.setenv("AVC_SEED", "99")
        cfg = parse_config({"seed": 1})
        assert cfg.seed == 99
        monkeypatch.setenv("AVC_SEED", "zzz")
        with pytest.raises(DataError):
            parse_config({})

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(DataError):
            load_config(tmp_path / "absent.json")

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(DataError):
            load_config(path)


class TestExitCodes:
    def test_usage_error_is_1(self, capsys):
        assert main(["synth"]) == 1  # missing --out
        assert "usage error" in capsys.readouterr().err

    def test_unknown_command_is_1(self):
        assert main(["frobnicate"]) == 1

    def test_data_error_is_2(self, tmp_path, capsys):
        code = main(["predict", "--model", str(tmp_path / "none"), "--audio", str(tmp_path), "--out", str(tmp_path / "o.csv")])
        assert code == 2
        assert "data error" in capsys.readouterr().err

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0
        assert main(["train", "--help"]) == 0


class TestHelpDocumentsEveryFlag:
    @pytest.mark.parametrize(
        "command,flags",
        [
            ("synth", ["--spec", "--out"]),
            ("extract", ["--config", "--audio", "--out", "--jobs"]),
            ("train", ["--config", "--data", "--out", "--deep", "--cache", "--jobs"]),
            ("predict", ["--model", "--audio", "--out", "--jobs"]),
            ("count", ["--model", "--audio", "--tdet", "--config", "--jobs"]),
            ("eval", ["--model", "--data", "--out", "--config", "--jobs"]),
            ("gridsearch", ["--config", "--data", "--out", "--jobs"]),
            ("experiment", ["--config"]),
        ],
    )
    def test_flags_in_help(self, command, flags, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args([command, "--help"])
        text = capsys.readouterr().out
        for flag in flags:
            assert flag in text


class TestPipelineCommands:
    def test_synth_reproducible_byte_for_byte(self, fast_config, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--spec", fast_config, "--out", str(d1)]) == 0
        assert main(["synth", "--spec", fast_config, "--out", str(d2)]) == 0
        for name in sorted(os.listdir(d1)):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_synth_seed_env_changes_output(self, fast_config, tmp_path, monkeypatch):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--spec", fast_config, "--out", str(d1)]) == 0
        monkeypatch.setenv("AVC_SEED", "1234")
        assert main(["synth", "--spec", fast_config, "--out", str(d2)]) == 0
        wavs = [n for n in os.listdir(d1) if n.endswith(".wav")]
        assert any(
            (d1 / n).read_bytes() != (d2 / n).read_bytes() for n in wavs
        )

    def test_extract_writes_cache_per_clip(self, fast_config, corpus_dir, tmp_path):
        out = tmp_path / "cache"
        code = main(["extract", "--config", fast_config, "--audio", corpus_dir, "--out", str(out), "--jobs", "1"])
        assert code == 0
        files = sorted(os.listdir(out))
        assert len(files) == 6
        assert all(f.endswith(".avcf") for f in files)
        from avcount.features import read_feature_cache

        fm = read_feature_cache(out / files[0])
        assert fm.dim == 528 and fm.frames == 540

    def test_train_writes_bundle(self, model_dir):
        names = sorted(os.listdir(model_dir))
        assert names == ["pipeline.json", "stage1.ckpt", "stage2.ckpt", "stats.bin"]

    def test_train_from_feature_cache_matches_direct(self, fast_config, corpus_dir, tmp_path):
        cache = tmp_path / "cache"
        main(["extract", "--config", fast_config, "--audio", corpus_dir, "--out", str(cache), "--jobs", "1"])
        direct = tmp_path / "direct"
        cached = tmp_path / "cached"
        main(["train", "--config", fast_config, "--data", corpus_dir, "--out", str(direct), "--jobs", "1"])
        main(["train", "--config", fast_config, "--data", corpus_dir, "--out", str(cached), "--cache", str(cache), "--jobs", "1"])
        for name in ("stage1.ckpt", "stage2.ckpt", "stats.bin", "pipeline.json"):
            assert (direct / name).read_bytes() == (cached / name).read_bytes()

    def test_predict_row_count(self, model_dir, corpus_dir, tmp_path):
        out = tmp_path / "pred.csv"
        code = main(["predict", "--model", model_dir, "--audio", corpus_dir, "--out", str(out), "--jobs", "1"])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "clip_id,frame,t_s,d_hat_s"
        assert len(lines) == 1 + 6 * 540  # 540 frames per 20 s clip

    def test_predict_reproducible(self, model_dir, corpus_dir, tmp_path):
        o1, o2 = tmp_path / "p1.csv", tmp_path / "p2.csv"
        main(["predict", "--model", model_dir, "--audio", corpus_dir, "--out", str(o1), "--jobs", "1"])
        main(["predict", "--model", model_dir, "--audio", corpus_dir, "--out", str(o2), "--jobs", "2"])
        assert o1.read_bytes() == o2.read_bytes()

    def test_count_defaults_to_t_d(self, model_dir, corpus_dir, capsys):
        assert main(["count", "--model", model_dir, "--audio", corpus_dir, "--jobs", "1"]) == 0
        with_default = capsys.readouterr().out
        assert main(["count", "--model", model_dir, "--audio", corpus_dir, "--tdet", "0.75", "--jobs", "1"]) == 0
        explicit = capsys.readouterr().out
        assert with_default == explicit
        lines = with_default.strip().splitlines()
        assert lines[-1].startswith("TOTAL,")
        assert len(lines) == 7  # 6 clips + total

    def test_count_rejects_out_of_range_tdet(self, model_dir, corpus_dir):
        code = main(["count", "--model", model_dir, "--audio", corpus_dir, "--tdet", "2.0", "--jobs", "1"])
        assert code == 2

    def test_eval_writes_reports(self, model_dir, corpus_dir, tmp_path, capsys):
        out = tmp_path / "reports"
        code = main(["eval", "--model", model_dir, "--data", corpus_dir, "--out", str(out), "--jobs", "1"])
        assert code == 0
        assert sorted(os.listdir(out)) == ["VCNN_curve.csv", "VCNN_summary.csv"]
        curve = (out / "VCNN_curve.csv").read_text().strip().splitlines()
        assert len(curve) == 101

    def test_gridsearch_emits_table(self, fast_config, corpus_dir, tmp_path, capsys):
        out = tmp_path / "grid.csv"
        # tiny grid via a dedicated config to keep runtime down
        cfg_path = tmp_path / "grid_cfg.json"
        cfg = json.loads(open(fast_config).read())
        cfg["grid"] = {"smoothers": [[5, 3]], "m_fracs": [0.4], "p_fracs": [0.2]}
        cfg_path.write_text(json.dumps(cfg))
        code = main(["gridsearch", "--config", str(cfg_path), "--data", corpus_dir, "--out", str(out), "--jobs", "1"])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "smoother,m_frac,p_frac,mean_abs_rvce"
        assert len(lines) == 3  # header + 1 cell + best row
        assert lines[-1].startswith("BEST")

    def test_experiment_full_protocol(self, corpus_dir, tmp_path):
        out_dir = tmp_path / "exp"
        cfg_path = tmp_path / "exp_cfg.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "seed": 3,
                    "epochs": 3,
                    "n_runs": 2,
                    "variants": ["VCNN"],
                    "paths": {"data_dir": corpus_dir, "out_dir": str(out_dir)},
                }
            )
        )
        assert main(["experiment", "--config", str(cfg_path)]) == 0
        names = sorted(os.listdir(out_dir))
        assert "summary.csv" in names
        assert "VCNN_bands.csv" in names
        assert "run3_VCNN_curve.csv" in names and "run4_VCNN_curve.csv" in names
        summary = (out_dir / "summary.csv").read_text().strip().splitlines()
        assert summary[0] == "run_seed,stage1_mse,stage2_mse,VCNN_area_ptp,VCNN_efp"
        assert len(summary) == 3

    def test_experiment_requires_paths(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text("{}")
        assert main(["experiment", "--config", str(cfg_path)]) == 2
