"""zdmix core - errors, config loading, variable resolution, report files."""

import csv
import datetime
import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any

import yaml
from dotenv import dotenv_values

GLOBAL_DIR = Path.home() / ".zdmix"
GLOBAL_CONFIG = GLOBAL_DIR / "config.yaml"

CWD_CONFIG_CANDIDATES = [
    "zdmix.yaml",
    "zdmix.yml",
    ".zdmix.yaml",
    ".zdmix.yml",
]

EXPERIMENT_KINDS = (
    "verify-tensor",
    "verify-toy",
    "verify-llt",
    "verify-mixing",
    "verify-coefficients",
    "verify-infinite",
)

REPORT_COLUMNS = ["statistic", "n", "value", "stderr", "batches", "seed"]
PLOTDATA_COLUMNS = ["curve", "n", "measured", "predicted", "stderr"]


# ── Errors ───────────────────────────────────────────────────────────────


class ZdmixError(Exception):
    """Base class for every error raised by zdmix."""


class ConfigError(ZdmixError):
    """Experiment config is missing, malformed or fails validation."""


class GeometryError(ZdmixError):
    """Billiard table is invalid for the requested operation."""


class ModelError(ZdmixError, ValueError):
    """Markov model violates stochasticity, mixing, centering or aperiodicity."""


class UnboundedFlightError(ZdmixError):
    """A free flight crossed more cells than the configured cap."""


class TangentCollision(ZdmixError):
    """A collision landed within angular tolerance of tangency."""


class SpectralGapError(ZdmixError):
    """The leading eigenvalue is not isolated at the requested parameter."""


class WindowOverflowError(ZdmixError):
    """Displacement window of an exact oracle exceeds its size cap."""


class ConvergenceError(ZdmixError):
    """A fit, truncation or extrapolation did not reach its tolerance."""


class BudgetExhaustedError(ZdmixError):
    """A Monte Carlo provider was asked for more than its budget allows."""


class RankError(ZdmixError, ValueError):
    """Tensor rank overflow or mismatch."""


class SymmetryError(ZdmixError, ValueError):
    """Contraction requested on a non-symmetric operand."""


# ── Config discovery and loading ─────────────────────────────────────────


def resolve_path(
    candidates: list[Path],
    default: Path | None = None,
) -> Path | None:
    """Return the first existing path from candidates, else default."""
    for p in candidates:
        if p.exists():
            return p.resolve()
    return default


def resolve_config_path(config_file: str | None) -> Path | None:
    """Find the experiment config to use.

    Resolution order:
      1. Explicit path argument (no fallthrough if missing)
      2. zdmix.yaml (variants) in CWD
      3. ~/.zdmix/config.yaml
    """
    if config_file:
        return resolve_path([Path(config_file)])
    return resolve_path([Path(c) for c in CWD_CONFIG_CANDIDATES] + [GLOBAL_CONFIG])


def load_env(env_file: str | None, base_dir: str | Path = ".") -> dict[str, str]:
    """Load .env file and merge with os.environ.

    .env values take precedence over os.environ for the keys they define.
    """
    env = dict(os.environ)
    if env_file:
        dotenv_path = Path(base_dir) / env_file
        if dotenv_path.exists():
            dotenv_vars = dotenv_values(str(dotenv_path))
            env.update({k: v for k, v in dotenv_vars.items() if v is not None})
    return env


def resolve_value(value: Any, env: dict[str, str]) -> Any:
    """Resolve $VAR and ${VAR} references in a string value.

    Unknown references are left untouched; non-strings pass through.
    """
    if not isinstance(value, str):
        return value

    def _replace(m: re.Match) -> str:
        var_name = m.group(1) or m.group(2)
        return env.get(var_name, os.environ.get(var_name, m.group(0)))

    return re.sub(r"\$\{([^}]+)\}|\$([A-Za-z_][A-Za-z0-9_]*)", _replace, value)


def resolve_in_obj(obj: Any, env: dict[str, str]) -> Any:
    """Recursively resolve variable references in dicts, lists, and strings."""
    if isinstance(obj, str):
        return resolve_value(obj, env)
    if isinstance(obj, dict):
        return {k: resolve_in_obj(v, env) for k, v in obj.items()}
    if isinstance(obj, list):
        return [resolve_in_obj(item, env) for item in obj]
    return obj


def set_at_path(obj: dict, path: str, value: Any) -> None:
    """Set a value at a dot-notation path in a nested dict.

    "table.flight_cap" creates {"table": {"flight_cap": value}}. A path
    that runs through an existing leaf is a ConfigError.
    """
    tokens = path.split(".")
    current = obj
    for token in tokens[:-1]:
        if token not in current:
            current[token] = {}
        elif not isinstance(current[token], dict):
            raise ConfigError(f"key '{path}' collides with scalar '{token}'")
        current = current[token]
    last = tokens[-1]
    if isinstance(current.get(last), dict) and not isinstance(value, dict):
        raise ConfigError(f"key '{path}' is both a value and a section")
    if isinstance(value, dict) and isinstance(current.get(last), dict):
        for k, v in value.items():
            set_at_path(current[last], k, v)
    else:
        current[last] = value


def unflatten(data: dict) -> dict:
    """Expand flat dotted keys into nested mappings, recursively."""
    out: dict = {}
    for key, value in data.items():
        if isinstance(value, dict):
            value = unflatten(value)
        set_at_path(out, str(key), value)
    return out


def load_config(config_path: str | Path | None) -> dict:
    """Load a YAML experiment config into a nested dict.

    Stores '_config_dir' so relative paths (env file, output dir) resolve
    against the config file. Returns an empty config when path is None.
    """
    if config_path is None:
        return {"_config_dir": None}
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    config = unflatten(data)
    env = load_env(config.get("env_file"), base_dir=path.resolve().parent)
    config = resolve_in_obj(config, env)
    config["_config_dir"] = path.resolve().parent
    return config


# ── Experiment config ────────────────────────────────────────────────────


CONFIG_SCHEMA: dict[str, Any] = {
    "experiment": {"type": "str", "required": True, "choices": list(EXPERIMENT_KINDS)},
    "seed": {"type": "int", "default": 0, "range": "0 .. 2**64-1"},
    "workers": {"type": "int", "default": "$WORKERS or 1", "range": ">= 1"},
    "output": {"type": "path", "default": "reports"},
    "env_file": {"type": "path", "default": None},
    "table": {
        "preset": {"type": "str", "choices": ["finite", "infinite"]},
        "obstacles": {"type": "list", "items": {"center": "[x, y]", "radius": "float"}},
        "flight_cap": {"type": "int", "default": 1_000_000},
    },
    "model": {
        "preset": {
            "type": "str",
            "choices": ["w5", "two-state", "lazy-walk", "asymmetric", "iid-line"],
        },
        "transition": {"type": "matrix", "note": "row-stochastic; use together with 'steps'"},
        "steps": {"type": "list", "note": "per state: [{step: [..], weight: w}, ...]"},
        "kernels": {"type": "list", "note": "[{step: [..], matrix: rows}, ...]"},
    },
    "ladder": {"type": "list[int]", "note": "strictly increasing"},
    "budget": {
        "trajectories": {"type": "int", "range": "> 0"},
        "batches": {"type": "int", "default": 32, "range": ">= 32"},
        "max_steps": {"type": "int", "default": None, "note": "total collision steps"},
    },
    "lags": {"type": "int", "default": None, "note": "M; chosen from the decay fit if unset"},
    "order": {"type": "int", "default": 3, "range": "1 .. 3"},
    "observables": {
        "type": "mapping",
        "items": {"base": "one | cos_phi | obstacle:<i> | kappa:<j> | centered:<tag>",
                  "weights": "{'l1,l2': weight}"},
    },
}


class ExperimentConfig:
    """Validated experiment configuration."""

    def __init__(self):
        self.experiment: str = ""
        self.seed: int = 0
        self.workers: int = 1
        self.output: Path = Path("reports")
        self.table: dict = {}
        self.model: dict = {}
        self.ladder: list[int] = []
        self.trajectories: int = 0
        self.batches: int = 32
        self.lags: int | None = None
        self.order: int = 3
        self.max_steps: int | None = None
        self.observables: dict = {}
        self.raw: dict = {}

    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(config: dict) -> str:
    """Stable sha256 of a config mapping, ignoring private '_' keys."""
    clean = {k: v for k, v in config.items() if not str(k).startswith("_")}
    blob = json.dumps(clean, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def validate_config(config: dict, env: dict[str, str] | None = None) -> ExperimentConfig:
    """Check a loaded config against CONFIG_SCHEMA and build an ExperimentConfig."""
    env = env if env is not None else dict(os.environ)
    cfg = ExperimentConfig()
    cfg.raw = config

    kind = config.get("experiment")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENT_KINDS)}; got {kind!r}")
    cfg.experiment = kind

    cfg.seed = _int_field(config, "seed", 0)
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must fit in 64 unsigned bits")

    workers = config.get("workers", env.get("WORKERS", 1))
    try:
        cfg.workers = int(workers)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"workers must be an integer, got {workers!r}") from e
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")

    output = Path(str(config.get("output", "reports")))
    config_dir = config.get("_config_dir")
    if not output.is_absolute() and config_dir:
        output = Path(config_dir) / output
    cfg.output = output

    cfg.table = config.get("table") or {}
    cfg.model = config.get("model") or {}
    if not isinstance(cfg.table, dict) or not isinstance(cfg.model, dict):
        raise ConfigError("table and model must be mappings")

    ladder = config.get("ladder") or []
    if not isinstance(ladder, list) or not all(isinstance(n, int) for n in ladder):
        raise ConfigError("ladder must be a list of integers")
    if any(b <= a for a, b in zip(ladder, ladder[1:], strict=False)):
        raise ConfigError("ladder must be strictly increasing")
    if any(n < 0 for n in ladder):
        raise ConfigError("ladder entries must be non-negative")
    cfg.ladder = ladder

    budget = config.get("budget") or {}
    cfg.trajectories = _int_field(budget, "trajectories", 0)
    cfg.batches = _int_field(budget, "batches", 32)
    if kind not in ("verify-tensor", "verify-toy", "verify-coefficients"):
        if cfg.trajectories <= 0:
            raise ConfigError("budget.trajectories must be > 0")
        if cfg.batches < 32:
            raise ConfigError("budget.batches must be >= 32")
    if budget.get("max_steps") is not None:
        cfg.max_steps = _int_field(budget, "max_steps", 0)
        if cfg.max_steps <= 0:
            raise ConfigError("budget.max_steps must be > 0")
    if config.get("lags") is not None:
        cfg.lags = _int_field(config, "lags", 0)
        if cfg.lags < 1:
            raise ConfigError("lags must be >= 1")
    cfg.order = _int_field(config, "order", 3)
    if not 1 <= cfg.order <= 3:
        raise ConfigError("order must be 1, 2 or 3")
    cfg.observables = config.get("observables") or {}
    return cfg


def _int_field(section: dict, key: str, default: int) -> int:
    value = section.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int | str):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f"{key} must be an integer, got {value!r}") from e


# ── Report files ─────────────────────────────────────────────────────────


def create_run_dir(output: Path, cfg_hash: str, now: datetime.datetime | None = None) -> Path:
    """Create a fresh run directory named by config hash and UTC timestamp."""
    now = now or datetime.datetime.now(datetime.timezone.utc)
    stamp = now.strftime("%Y%m%dT%H%M%S%fZ")
    run_dir = output / f"{cfg_hash[:12]}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


def format_number(value: Any) -> str:
    """Shortest round-tripping text for a number; blanks for None."""
    if value is None:
        return ""
    if isinstance(value, int | str):
        return str(value)
    return repr(float(value))


def save_report(rows: list[dict], run_dir: Path) -> Path:
    """Write report.csv with the fixed REPORT_COLUMNS header."""
    path = run_dir / "report.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([format_number(row.get(col)) for col in REPORT_COLUMNS])
    return path


def save_summary(criteria: list, run_dir: Path) -> Path:
    """Write summary.txt: one PASS/FAIL line per criterion with measured values."""
    path = run_dir / "summary.txt"
    lines = []
    for c in criteria:
        status = "PASS" if c.passed else "FAIL"
        lines.append(f"{status}  {c.name}: {c.detail}")
    passed = sum(1 for c in criteria if c.passed)
    lines.append(f"{passed}/{len(criteria)} criteria passed")
    path.write_text("\n".join(lines) + "\n")
    return path


def save_meta(meta: dict, run_dir: Path) -> Path:
    """Write meta.txt as sorted 'key: value' lines."""
    path = run_dir / "meta.txt"
    path.write_text("".join(f"{k}: {meta[k]}\n" for k in sorted(meta)))
    return path


def load_report(report_dir: str | Path) -> list[dict] | None:
    """Load report.csv from a run directory; None when absent."""
    path = Path(report_dir) / "report.csv"
    if not path.exists():
        return None
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def emit_plotdata(report_dir: str | Path) -> Path:
    """Turn curve rows of a report into tidy plotdata.csv.

    Curve rows are stored as statistic 'curve/<name>/measured' and
    'curve/<name>/predicted'. Output has one row per (curve, n).
    """
    rows = load_report(report_dir)
    if rows is None:
        raise ConfigError(f"no report.csv in {report_dir}")

    curves: dict[tuple[str, int], dict] = {}
    for row in rows:
        parts = row["statistic"].split("/")
        if len(parts) != 3 or parts[0] != "curve":
            continue
        _, name, kind = parts
        entry = curves.setdefault((name, int(row["n"])), {})
        entry[kind] = row["value"]
        if kind == "measured":
            entry["stderr"] = row["stderr"]

    path = Path(report_dir) / "plotdata.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PLOTDATA_COLUMNS)
        for (name, n), entry in sorted(curves.items()):
            w.writerow(
                [
                    name,
                    n,
                    entry.get("measured", ""),
                    entry.get("predicted", ""),
                    entry.get("stderr", ""),
                ],
            )
    return path
