"""Tests for config resolution, validation and report files."""

import datetime

import pytest

from tests.conftest import small_budget, write_config
from zdmix import core
from zdmix.core import ConfigError

# ── resolve_config_path ─────────────────────────────────────────────────


class TestResolveConfigPath:
    def test_explicit_path_takes_priority(self, tmp_project, global_zdmix_dir):
        """An explicit path wins over CWD and global configs."""
        (tmp_project / "custom").mkdir()
        explicit = write_config(tmp_project / "custom", {"experiment": "verify-tensor"}, "my.yaml")
        write_config(tmp_project, {"experiment": "verify-toy"})
        write_config(global_zdmix_dir, {"experiment": "verify-llt"}, "config.yaml")

        assert core.resolve_config_path(str(explicit)) == explicit.resolve()

    def test_explicit_path_missing_returns_none(self, tmp_project):
        """A missing explicit path does not fall through to CWD."""
        write_config(tmp_project, {"experiment": "verify-toy"})
        assert core.resolve_config_path("/nonexistent/zdmix.yaml") is None

    @pytest.mark.parametrize("name", ["zdmix.yaml", "zdmix.yml", ".zdmix.yaml", ".zdmix.yml"])
    def test_cwd_variants(self, tmp_project, name):
        write_config(tmp_project, {"experiment": "verify-toy"}, name)
        assert core.resolve_config_path(None) == (tmp_project / name).resolve()

    def test_cwd_beats_global(self, tmp_project, global_zdmix_dir):
        write_config(tmp_project, {"experiment": "verify-toy"})
        write_config(global_zdmix_dir, {"experiment": "verify-llt"}, "config.yaml")
        assert core.resolve_config_path(None) == (tmp_project / "zdmix.yaml").resolve()

    def test_global_fallback(self, tmp_project, global_zdmix_dir):
        path = write_config(global_zdmix_dir, {"experiment": "verify-llt"}, "config.yaml")
        assert core.resolve_config_path(None) == path.resolve()

    def test_nothing_found(self, tmp_project):
        assert core.resolve_config_path(None) is None


# ── load_config ─────────────────────────────────────────────────────────


class TestLoadConfig:
    def test_flat_keys_are_nested(self, tmp_project):
        path = write_config(
            tmp_project,
            {"experiment": "verify-mixing", "table.preset": "finite", "budget.batches": 64},
        )
        config = core.load_config(path)
        assert config["table"] == {"preset": "finite"}
        assert config["budget"] == {"batches": 64}

    def test_flat_and_nested_merge(self, tmp_project):
        path = write_config(
            tmp_project,
            {"budget": {"trajectories": 100}, "budget.batches": 64},
        )
        assert core.load_config(path)["budget"] == {"trajectories": 100, "batches": 64}

    def test_scalar_collision(self, tmp_project):
        path = write_config(tmp_project, {"budget": 5, "budget.batches": 64})
        with pytest.raises(ConfigError, match="collides"):
            core.load_config(path)

    def test_env_file_resolution(self, tmp_project, monkeypatch):
        monkeypatch.delenv("ZDMIX_OUT", raising=False)
        (tmp_project / ".env").write_text("ZDMIX_OUT=from-dotenv\n")
        path = write_config(tmp_project, {"env_file": ".env", "output": "${ZDMIX_OUT}/runs"})
        assert core.load_config(path)["output"] == "from-dotenv/runs"

    def test_environment_resolution(self, tmp_project, monkeypatch):
        monkeypatch.setenv("ZDMIX_TABLE", "infinite")
        path = write_config(tmp_project, {"table": {"preset": "$ZDMIX_TABLE"}})
        assert core.load_config(path)["table"]["preset"] == "infinite"

    def test_unknown_reference_left_alone(self, tmp_project, monkeypatch):
        monkeypatch.delenv("ZDMIX_NOPE", raising=False)
        path = write_config(tmp_project, {"output": "${ZDMIX_NOPE}"})
        assert core.load_config(path)["output"] == "${ZDMIX_NOPE}"

    def test_config_dir_recorded(self, tmp_project):
        path = write_config(tmp_project, {"experiment": "verify-tensor"})
        assert core.load_config(path)["_config_dir"] == tmp_project.resolve()

    def test_malformed_yaml(self, tmp_project):
        path = tmp_project / "zdmix.yaml"
        path.write_text("experiment: [unclosed\n")
        with pytest.raises(ConfigError, match="cannot parse"):
            core.load_config(path)

    def test_top_level_list(self, tmp_project):
        path = tmp_project / "zdmix.yaml"
        path.write_text("- verify-toy\n")
        with pytest.raises(ConfigError, match="mapping"):
            core.load_config(path)

    def test_missing_file(self, tmp_project):
        with pytest.raises(ConfigError, match="not found"):
            core.load_config(tmp_project / "absent.yaml")


# ── validate_config ─────────────────────────────────────────────────────


def _valid(**overrides):
    config = {"experiment": "verify-mixing", **small_budget(), "_config_dir": None}
    config.update(overrides)
    return config


class TestValidateConfig:
    def test_defaults(self):
        cfg = core.validate_config({"experiment": "verify-tensor"}, env={})
        assert cfg.seed == 0
        assert cfg.workers == 1
        assert cfg.order == 3
        assert cfg.batches == 32
        assert cfg.lags is None
        assert cfg.ladder == []

    def test_unknown_experiment(self):
        with pytest.raises(ConfigError, match="experiment must be one of"):
            core.validate_config({"experiment": "verify-everything"}, env={})

    def test_workers_from_environment(self):
        cfg = core.validate_config(_valid(), env={"WORKERS": "6"})
        assert cfg.workers == 6

    def test_config_workers_beat_environment(self):
        cfg = core.validate_config(_valid(workers=2), env={"WORKERS": "6"})
        assert cfg.workers == 2

    @pytest.mark.parametrize("workers", [0, "many"])
    def test_bad_workers(self, workers):
        with pytest.raises(ConfigError, match="workers"):
            core.validate_config(_valid(workers=workers), env={})

    def test_seed_range(self):
        with pytest.raises(ConfigError, match="64 unsigned bits"):
            core.validate_config(_valid(seed=-1), env={})

    def test_boolean_is_not_an_integer(self):
        with pytest.raises(ConfigError, match="seed must be an integer"):
            core.validate_config(_valid(seed=True), env={})

    def test_ladder_must_increase(self):
        with pytest.raises(ConfigError, match="strictly increasing"):
            core.validate_config(_valid(ladder=[10, 10, 20]), env={})

    def test_monte_carlo_needs_trajectories(self):
        with pytest.raises(ConfigError, match="trajectories"):
            core.validate_config({"experiment": "verify-mixing"}, env={})

    def test_monte_carlo_needs_32_batches(self):
        config = _valid(budget={"trajectories": 100, "batches": 8})
        with pytest.raises(ConfigError, match="batches must be >= 32"):
            core.validate_config(config, env={})

    def test_exact_suites_need_no_budget(self):
        cfg = core.validate_config({"experiment": "verify-toy"}, env={})
        assert cfg.trajectories == 0

    @pytest.mark.parametrize("order", [0, 4])
    def test_order_range(self, order):
        with pytest.raises(ConfigError, match="order"):
            core.validate_config(_valid(order=order), env={})

    def test_lags_must_be_positive(self):
        with pytest.raises(ConfigError, match="lags"):
            core.validate_config(_valid(lags=0), env={})

    def test_relative_output_resolves_against_config_dir(self, tmp_path):
        cfg = core.validate_config(_valid(output="runs", _config_dir=tmp_path), env={})
        assert cfg.output == tmp_path / "runs"

    def test_absolute_output_kept(self, tmp_path):
        cfg = core.validate_config(_valid(output=str(tmp_path / "abs")), env={})
        assert cfg.output == tmp_path / "abs"


class TestConfigHash:
    def test_private_keys_ignored(self):
        a = core.config_hash({"experiment": "verify-toy", "_config_dir": "/a"})
        b = core.config_hash({"experiment": "verify-toy", "_config_dir": "/b"})
        assert a == b

    def test_key_order_ignored(self):
        assert core.config_hash({"a": 1, "b": 2}) == core.config_hash({"b": 2, "a": 1})

    def test_seed_changes_hash(self):
        assert core.config_hash({"seed": 1}) != core.config_hash({"seed": 2})


# ── Report files ─────────────────────────────────────────────────────────


class TestReportFiles:
    def test_run_dir_name(self, tmp_path):
        now = datetime.datetime(2026, 1, 2, 3, 4, 5, 6, tzinfo=datetime.timezone.utc)
        run_dir = core.create_run_dir(tmp_path, "abcdef0123456789", now=now)
        assert run_dir.name == "abcdef012345-20260102T030405000006Z"
        assert run_dir.is_dir()

    def test_run_dir_is_fresh(self, tmp_path):
        now = datetime.datetime(2026, 1, 2, tzinfo=datetime.timezone.utc)
        core.create_run_dir(tmp_path, "abc", now=now)
        with pytest.raises(FileExistsError):
            core.create_run_dir(tmp_path, "abc", now=now)

    def test_report_header_and_blanks(self, tmp_path):
        rows = [{"statistic": "sigma2[1,1]", "n": 25, "value": 0.5, "stderr": None,
                 "batches": 32, "seed": 7}]
        path = core.save_report(rows, tmp_path)
        lines = path.read_text().splitlines()
        assert lines[0] == "statistic,n,value,stderr,batches,seed"
        assert lines[1] == "sigma2[1,1],25,0.5,,32,7"

    def test_floats_round_trip(self, tmp_path):
        value = 0.1 + 0.2
        core.save_report([{"statistic": "x", "value": value}], tmp_path)
        row = core.load_report(tmp_path)[0]
        assert float(row["value"]) == value

    def test_load_report_missing(self, tmp_path):
        assert core.load_report(tmp_path) is None

    def test_summary(self, tmp_path):
        from zdmix.executor import Criterion

        criteria = [Criterion("a", True, 1.0, "ok"), Criterion("b", False, None, "bad")]
        text = core.save_summary(criteria, tmp_path).read_text()
        assert "PASS  a: ok" in text
        assert "FAIL  b: bad" in text
        assert text.endswith("1/2 criteria passed\n")

    def test_meta_sorted(self, tmp_path):
        text = core.save_meta({"seed": "7", "experiment": "verify-toy"}, tmp_path).read_text()
        assert text == "experiment: verify-toy\nseed: 7\n"


class TestPlotdata:
    def test_curves_become_rows(self, tmp_path):
        rows = [
            {"statistic": "curve/cn/measured", "n": 50, "value": 0.2, "stderr": 0.01},
            {"statistic": "curve/cn/predicted", "n": 50, "value": 0.21},
            {"statistic": "curve/cn/measured", "n": 25, "value": 0.4, "stderr": 0.02},
            {"statistic": "curve/cn/predicted", "n": 25, "value": 0.39},
            {"statistic": "sigma2[1,1]", "n": 25, "value": 1.0},
        ]
        core.save_report(rows, tmp_path)
        lines = core.emit_plotdata(tmp_path).read_text().splitlines()
        assert lines == [
            "curve,n,measured,predicted,stderr",
            "cn,25,0.4,0.39,0.02",
            "cn,50,0.2,0.21,0.01",
        ]

    def test_no_report(self, tmp_path):
        with pytest.raises(ConfigError, match="no report.csv"):
            core.emit_plotdata(tmp_path)
