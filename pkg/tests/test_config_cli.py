import json
import shutil
from pathlib import Path

import pytest

from logicl.cli import main as cli_main
from logicl.config import (
    DEFAULT_CONFIG,
    default_window_size,
    infer_config_from,
    load_config,
    loss_weights_from,
    oracle_spec_from,
    train_config_from,
    validate_config,
    validate_config_dict,
)
from logicl.errors import ConfigError
from logicl.synthetic import make_mock_oracle_spec

REPO_ROOT = Path(__file__).resolve().parent.parent
SAMPLE_CONFIG = REPO_ROOT / "configs" / "synthetic.toml"


class TestDefaults:
    def test_paper_protocol_defaults(self):
        assert DEFAULT_CONFIG["delta"]["k_candidates"] == 128
        assert DEFAULT_CONFIG["infer"]["top_i"] + DEFAULT_CONFIG["infer"]["top_j"] == 8
        assert DEFAULT_CONFIG["infer"]["threshold"] == 0.5
        w = DEFAULT_CONFIG["train"]["weights"]
        assert (w["lambda_mmd"], w["lambda_supcon"], w["lambda_delta"]) == (0.1, 1.0, 1.0)
        assert DEFAULT_CONFIG["encoder"]["dim"] == 384

    def test_window_size_conventions(self):
        assert default_window_size("BGL") == 40
        assert default_window_size("thunderbird") == 40
        assert default_window_size("Liberty") == 30

    def test_sample_config_mock_matches_bundled_fixture(self):
        cfg = load_config(SAMPLE_CONFIG)
        assert oracle_spec_from(cfg) == make_mock_oracle_spec()


class TestValidation:
    def test_sample_config_is_valid(self):
        assert validate_config(SAMPLE_CONFIG) == []

    def test_mmr_lambda_violation_path(self):
        cfg = load_config(SAMPLE_CONFIG)
        cfg["retrieve"]["mmr_lambda"] = 1.5
        violations = validate_config_dict(cfg)
        assert any(v.startswith("retrieve.mmr_lambda") for v in violations)

    def test_threshold_open_interval(self):
        cfg = load_config(SAMPLE_CONFIG)
        cfg["infer"]["threshold"] = 1.0
        violations = validate_config_dict(cfg)
        assert any(v.startswith("infer.threshold") for v in violations)

    def test_all_violations_listed(self):
        cfg = load_config(SAMPLE_CONFIG)
        cfg["retrieve"]["mmr_lambda"] = -1
        cfg["infer"]["top_i"] = 0
        cfg["train"]["tau"] = 0
        violations = validate_config_dict(cfg)
        assert len(violations) >= 3

    def test_json_config_supported(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 3, "infer": {"top_j": 2}}))
        cfg = load_config(path)
        assert cfg["seed"] == 3
        assert cfg["infer"]["top_j"] == 2
        assert cfg["infer"]["top_i"] == 4  # defaults preserved

    def test_toml_parse_error_has_location(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("seed = = 3\n")
        with pytest.raises(ConfigError, match="TOML parse error"):
            load_config(path)

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("nope.toml")

    def test_builders_round_trip_defaults(self):
        cfg = load_config(SAMPLE_CONFIG)
        assert train_config_from(cfg).epochs == 20
        assert loss_weights_from(cfg).lambda_mmd == 0.1
        assert infer_config_from(cfg).k_total == 8


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    """One full pipeline run on a fast variant of the bundled config."""
    root = tmp_path_factory.mktemp("cli-run")
    config_path = root / "fast.toml"
    text = SAMPLE_CONFIG.read_text().replace("epochs = 20", "epochs = 3")
    text = text.replace("k_candidates = 128", "k_candidates = 16")
    config_path.write_text(text)
    state = root / "state"
    rc = cli_main(["all", "--config", str(config_path), "--state-dir", str(state)])
    assert rc == 0
    return config_path, state


class TestCLI:
    def test_all_produces_artifacts(self, completed_run):
        _, state = completed_run
        for name in (
            "train.jsonl",
            "test.jsonl",
            "backbone_train.npz",
            "delta.matrix",
            "head.npz",
            "loss_trace.csv",
            "predictions.jsonl",
            "report.json",
            "alignment_similarity.csv",
            "alignment_delta.csv",
        ):
            assert (state / name).exists(), name

    def test_report_includes_effective_config(self, completed_run):
        config_path, state = completed_run
        report = json.loads((state / "report.json").read_text())
        assert report["config"]["delta"]["k_candidates"] == 16
        assert report["metrics"]["tp"] + report["metrics"]["fn"] == 20

    def test_missing_prior_artifact_exit_2(self, completed_run, tmp_path, capsys):
        config_path, _ = completed_run
        rc = cli_main(["train", "--config", str(config_path), "--state-dir", str(tmp_path / "fresh")])
        assert rc == 2
        assert "run prepare first" in capsys.readouterr().err

    def test_detect_before_train_exit_2(self, completed_run, tmp_path, capsys):
        config_path, state = completed_run
        fresh = tmp_path / "fresh2"
        shutil.copytree(state, fresh)
        (fresh / "head.npz").unlink()
        (fresh / "train.stamp.json").unlink()
        (fresh / "detect.stamp.json").unlink()
        rc = cli_main(["detect", "--config", str(config_path), "--state-dir", str(fresh)])
        assert rc == 2
        assert "run train first" in capsys.readouterr().err

    def test_stage_rerun_is_cache_hit(self, completed_run, caplog):
        config_path, state = completed_run
        mtime = (state / "backbone_train.npz").stat().st_mtime_ns
        with caplog.at_level("INFO"):
            rc = cli_main(["embed", "--config", str(config_path), "--state-dir", str(state)])
        assert rc == 0
        assert "cache hit" in caplog.text
        assert (state / "backbone_train.npz").stat().st_mtime_ns == mtime

    def test_invalid_config_exit_1(self, tmp_path, capsys):
        config_path = tmp_path / "bad.toml"
        config_path.write_text('[infer]\nthreshold = 1.5\n[dataset]\nkind = "synthetic"\n')
        rc = cli_main(["prepare", "--config", str(config_path), "--state-dir", str(tmp_path / "s")])
        assert rc == 1
        assert "infer.threshold" in capsys.readouterr().err

    def test_validate_config_command(self, tmp_path, capsys):
        rc = cli_main(["validate-config", "--config", str(SAMPLE_CONFIG)])
        assert rc == 0
        bad = tmp_path / "bad.toml"
        bad.write_text("[retrieve]\nmmr_lambda = 2.0\n")
        rc = cli_main(["validate-config", "--config", str(bad)])
        assert rc == 1
        assert "retrieve.mmr_lambda" in capsys.readouterr().out

    def test_flag_overrides_reach_report(self, completed_run, tmp_path):
        config_path, _ = completed_run
        state = tmp_path / "override-state"
        rc = cli_main(
            [
                "all",
                "--config",
                str(config_path),
                "--state-dir",
                str(state),
                "--top-i",
                "6",
                "--top-j",
                "2",
            ]
        )
        assert rc == 0
        report = json.loads((state / "report.json").read_text())
        assert report["config"]["infer"]["top_i"] == 6
        assert report["config"]["overrides_applied"]["infer.top_i"] == 6

    def test_env_overrides_below_flags(self, completed_run, tmp_path, monkeypatch):
        config_path, _ = completed_run
        monkeypatch.setenv("LOGICL_SEED", "99")
        state = tmp_path / "env-state"
        rc = cli_main(
            ["prepare", "--config", str(config_path), "--state-dir", str(state), "--seed", "5"]
        )
        assert rc == 0
        # flag wins over env: the stamp captures the dataset section only, so
        # assert via a fresh load of the applied override mechanics instead
        from logicl.cli import _apply_overrides
        import argparse

        cfg = load_config(config_path)
        args = argparse.Namespace(
            state_dir=None, seed=5, candidates=None, checkpoint_every=None, top_i=None,
            top_j=None, threshold=None, mmr_lambda=None, llm_endpoint=None, llm_model=None,
            llm_timeout=None, mock_oracle=None, cot=False,
        )
        cfg = _apply_overrides(cfg, args)
        assert cfg["seed"] == 5

    def test_retrieve_command(self, completed_run, capsys):
        config_path, state = completed_run
        rc = cli_main(
            [
                "retrieve",
                "--config",
                str(config_path),
                "--state-dir",
                str(state),
                "--query-id",
                "src0000",
                "--k",
                "5",
                "--mmr-lambda",
                "0.7",
            ]
        )
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["query_id"] == "src0000"
        assert len(payload["top_k"]) == 5
        assert len(payload["mmr"]) == 5
        assert payload["mmr"][0] == payload["top_k"][0]["id"]

    def test_test_corpus_override_and_train_state_alias(self, completed_run, tmp_path):
        config_path, state = completed_run
        small_test = tmp_path / "small_test.jsonl"
        lines = (state / "test.jsonl").read_text().splitlines()[:10]
        small_test.write_text("\n".join(lines) + "\n")
        rc = cli_main(
            [
                "detect",
                "--config",
                str(config_path),
                "--train-state",
                str(state),
                "--test",
                str(small_test),
            ]
        )
        assert rc == 0
        preds = (state / "predictions.jsonl").read_text().splitlines()
        assert len(preds) == 10
        # restore the full predictions for later tests in this module
        (state / "detect.stamp.json").unlink()
        assert cli_main(["detect", "--config", str(config_path), "--state-dir", str(state)]) == 0

    def test_partial_checkpoint_requires_resume(self, completed_run, tmp_path, capsys):
        from logicl.delta import load_matrix, save_matrix

        config_path, state = completed_run
        fresh = tmp_path / "partial-state"
        shutil.copytree(state, fresh)
        matrix = load_matrix(fresh / "delta.matrix")
        for qid in list(matrix.rows)[100:]:
            del matrix.rows[qid]
        matrix.partial = True
        save_matrix(matrix, fresh / "delta.matrix")

        rc = cli_main(["build-delta", "--config", str(config_path), "--state-dir", str(fresh)])
        assert rc == 1
        assert "--resume" in capsys.readouterr().err

        rc = cli_main(
            ["build-delta", "--config", str(config_path), "--state-dir", str(fresh), "--resume"]
        )
        assert rc == 0
        assert (fresh / "delta.matrix").read_bytes() == (state / "delta.matrix").read_bytes()

    def test_oracle_transport_failure_exit_3(self, completed_run, tmp_path, monkeypatch):
        import requests

        def refuse(*args, **kwargs):
            raise OSError("connection refused")

        monkeypatch.setattr(requests, "post", refuse)
        monkeypatch.setattr("time.sleep", lambda s: None)
        config_path, state = completed_run
        fresh = tmp_path / "transport-state"
        shutil.copytree(state, fresh)
        (fresh / "detect.stamp.json").unlink()
        remote_cfg = tmp_path / "remote.toml"
        remote_cfg.write_text(
            config_path.read_text().replace('kind = "mock"', 'kind = "remote"')
        )
        rc = cli_main(
            [
                "detect",
                "--config",
                str(remote_cfg),
                "--state-dir",
                str(fresh),
                "--llm-endpoint",
                "http://nowhere.invalid",
            ]
        )
        assert rc == 3

    def test_mock_oracle_fixture_flag(self, completed_run, tmp_path):
        config_path, _ = completed_run
        fixture = tmp_path / "mock.json"
        fixture.write_text(json.dumps({"bias": 5.0, "keyword_weights": {}, "concepts": {}}))
        state = tmp_path / "mock-state"
        rc = cli_main(
            [
                "all",
                "--config",
                str(config_path),
                "--state-dir",
                str(state),
                "--mock-oracle",
                str(fixture),
            ]
        )
        assert rc == 0
        report = json.loads((state / "report.json").read_text())
        # bias +5 makes the mock call everything anomalous: recall 1, precision low
        assert report["metrics"]["fn"] == 0
        assert report["metrics"]["fp"] == 30
