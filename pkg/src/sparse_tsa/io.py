"""Config loading, measurement CSV ingestion and result bundles.

Series go to CSV with 12 significant digits; configs and diagnostics go
to JSON. Every bundle carries a manifest whose config hash can be
recomputed from the config snapshot next to it.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .attacks import AttackSpec, AttackTrace, IntegrityViolationSpec, MultipathSpec
from .clock import ClockModelParams, ClockState
from .estimators import SolverConfig, split_outputs
from .measurements import MeasurementEpoch, SatelliteEpoch
from .scenario import ScenarioConfig, ScenarioResult, compare, format_table

MEASUREMENT_COLUMNS = (
    "t_s",
    "sat_id",
    "pr_m",
    "prr_mps",
    "var_pr",
    "var_prr",
    "sat_x",
    "sat_y",
    "sat_z",
    "sat_vx",
    "sat_vy",
    "sat_vz",
    "sat_cb_m",
    "sat_cdrift_mps",
)
TRACE_COLUMNS = ("t_s", "s_rho_m", "s_rhodot_mps", "s_rhoddot", "s_jerk")
SOLUTION_COLUMNS = ("t_s", "bias_est_m", "drift_est_mps", "s_bias_m", "s_drift_mps", "s_jerk")
EKF_COLUMNS = ("t_s", "bias_est_m", "drift_est_mps")
TRUTH_COLUMNS = ("t_s", "bias_m", "drift_mps")

# reference attack parameters, filled in when an attack block gives only its order
ATTACK_DEFAULTS = {
    1: {"start_s": 100.0, "bias_max_m": 1500.0},
    2: {"start_s": 50.0, "drift_max_mps": 5.0},
    3: {"start_s": 10.0, "bias_max_m": 750.0, "drift_max_mps": 5.0},
}

PRESETS = ("clean", "first-order", "second-order", "third-order", "integrity-violation", "multipath")


class ConfigError(Exception):
    """Base for configuration problems (CLI exit code 2)."""


class ConfigParseError(ConfigError):
    pass


class ConfigSchemaError(ConfigError):
    pass


class ConfigConsistencyError(ConfigError):
    pass


class IngestError(Exception):
    """Malformed measurement or series file (CLI exit code 3)."""


def _fmt(v) -> str:
    return f"{float(v):.12g}"


# ---------------------------------------------------------------------------
# configuration


def config_schema() -> dict:
    text = resources.files("sparse_tsa").joinpath("schemas/config.schema.json").read_text()
    return json.loads(text)


def config_from_dict(raw: dict) -> ScenarioConfig:
    """Validate ``raw`` against the schema and build a config with defaults applied."""
    try:
        jsonschema.validate(raw, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigSchemaError(f"{where}: {exc.message}") from None
    raw = dict(raw)
    try:
        kwargs = {k: raw[k] for k in ("duration_s", "dt_s", "n_sats", "sigma_pr_m", "sigma_prr_mps", "seed", "scoring") if k in raw}
        if "user_llh" in raw:
            kwargs["user_llh"] = tuple(raw["user_llh"])
        dt = float(raw.get("dt_s", 1.0))
        clock = dict(raw.get("clock", {}))
        x0 = ClockState(clock.pop("x0_bias_m", 100.0), clock.pop("x0_drift_mps", 2.0))
        kwargs["clock"] = ClockModelParams(dt_s=dt, **clock)
        kwargs["clock_x0"] = x0
        if raw.get("attack") is not None:
            att = dict(raw["attack"])
            kwargs["attack"] = AttackSpec(**{**ATTACK_DEFAULTS[att["order"]], **att})
        if raw.get("integrity_violation") is not None:
            kwargs["integrity_violation"] = IntegrityViolationSpec(**raw["integrity_violation"])
        if raw.get("multipath") is not None:
            mp = dict(raw["multipath"])
            mp["affected_sat_ids"] = tuple(mp.get("affected_sat_ids", ()))
            kwargs["multipath"] = MultipathSpec(**mp)
        solver = dict(raw.get("solver", {}))
        if "lambda" in solver:
            solver["lam"] = solver.pop("lambda")
        if "prior_std" in solver:
            solver["prior_std"] = tuple(solver["prior_std"])
        kwargs["solver"] = SolverConfig(**solver)
        return ScenarioConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigConsistencyError(str(exc)) from None


def config_to_dict(config: ScenarioConfig) -> dict:
    """Complete, JSON-ready snapshot; ``config_from_dict`` inverts it exactly."""
    solver = asdict(config.solver)
    solver["lambda"] = solver.pop("lam")
    solver["prior_std"] = list(solver["prior_std"])
    out = {
        "duration_s": config.duration_s,
        "dt_s": config.dt_s,
        "n_sats": config.n_sats,
        "sigma_pr_m": config.sigma_pr_m,
        "sigma_prr_mps": config.sigma_prr_mps,
        "seed": config.seed,
        "scoring": config.scoring,
        "user_llh": list(config.user_llh),
        "clock": {
            "h0": config.clock.h0,
            "h_neg2": config.clock.h_neg2,
            "x0_bias_m": config.clock_x0.bias_m,
            "x0_drift_mps": config.clock_x0.drift_mps,
        },
        "attack": None if config.attack is None else asdict(config.attack),
        "integrity_violation": None if config.integrity_violation is None else asdict(config.integrity_violation),
        "multipath": None,
        "solver": solver,
    }
    if config.multipath is not None:
        mp = asdict(config.multipath)
        mp["affected_sat_ids"] = list(mp["affected_sat_ids"])
        out["multipath"] = mp
    return out


def config_hash(config: ScenarioConfig) -> str:
    canon = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigParseError(f"{path}: no such file") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigParseError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigSchemaError(f"{path}: top level must be an object")
    return config_from_dict(raw)


def load_preset(name: str) -> ScenarioConfig:
    if name not in PRESETS:
        raise ConfigParseError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("sparse_tsa").joinpath(f"presets/{name}.json").read_text()
    return config_from_dict(json.loads(text))


def save_config(config: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# measurement CSV


def write_measurements_csv(epochs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_COLUMNS)
        for ep in epochs:
            for i, sat in enumerate(ep.sats):
                w.writerow(
                    [_fmt(ep.t_s), str(sat.sat_id)]
                    + [_fmt(v) for v in (ep.pr_m[i], ep.prr_mps[i], ep.var_pr_m2[i], ep.var_prr_m2ps2[i])]
                    + [_fmt(v) for v in sat.pos_ecef_m]
                    + [_fmt(v) for v in sat.vel_ecef_mps]
                    + [_fmt(sat.clock_bias_m), _fmt(sat.clock_drift_mps)]
                )


def _read_table(path, columns, kind: str) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in columns if c not in header]
            if missing:
                raise IngestError(f"{path}: {kind} file is missing columns {missing}")
            return list(reader)
    except FileNotFoundError:
        raise IngestError(f"{path}: no such file") from None
    except (UnicodeDecodeError, csv.Error) as exc:
        raise IngestError(f"{path}: {exc}") from None


def _floats(row: dict, columns, where: str) -> list[float]:
    try:
        vals = [float(row[c]) for c in columns]
    except (TypeError, ValueError):
        raise IngestError(f"{where}: non-numeric value in {[row.get(c) for c in columns]}") from None
    if not np.all(np.isfinite(vals)):
        raise IngestError(f"{where}: non-finite value")
    return vals


def ingest_measurements_csv(path) -> list[MeasurementEpoch]:
    """Group rows into epochs (ordered by satellite id within each epoch).

    Epoch times must be non-decreasing down the file; rows of one epoch
    may come in any order but must be contiguous.
    """
    rows = _read_table(path, MEASUREMENT_COLUMNS, "measurement")
    if not rows:
        raise IngestError(f"{path}: no measurement rows")
    groups: list[tuple[float, list]] = []
    for line, row in enumerate(rows, start=2):
        where = f"{path}:{line}"
        vals = _floats(row, MEASUREMENT_COLUMNS, where)
        t = vals[0]
        if vals[1] != int(vals[1]):
            raise IngestError(f"{where}: sat_id must be an integer")
        if groups and t < groups[-1][0]:
            raise IngestError(f"{where}: epoch time {t} goes backwards from {groups[-1][0]}")
        if not groups or t != groups[-1][0]:
            groups.append((t, []))
        groups[-1][1].append(vals)
    epochs = []
    for t, members in groups:
        members.sort(key=lambda v: v[1])
        ids = [int(v[1]) for v in members]
        if len(set(ids)) != len(ids):
            raise IngestError(f"{path}: duplicate satellite in epoch t={t}")
        arr = np.array(members)
        sats = tuple(SatelliteEpoch(int(v[1]), v[6:9].copy(), v[9:12].copy(), float(v[12]), float(v[13])) for v in arr)
        try:
            epochs.append(MeasurementEpoch(t, sats, arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 5]))
        except ValueError as exc:
            raise IngestError(f"{path}: epoch t={t}: {exc}") from None
    return epochs


def _write_series(path, columns, data) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in zip(*data):
            w.writerow([_fmt(v) for v in row])


def read_series_csv(path, columns) -> dict:
    """Numeric columns of a series file as arrays keyed by name."""
    rows = _read_table(path, columns, "series")
    vals = np.array([_floats(r, columns, f"{path}:{i}") for i, r in enumerate(rows, start=2)]).reshape(-1, len(columns))
    return {c: vals[:, j] for j, c in enumerate(columns)}


def write_trace_csv(trace: AttackTrace, path) -> None:
    _write_series(path, TRACE_COLUMNS, [trace.t_s, *trace.sequences])


def read_trace_csv(path) -> AttackTrace:
    d = read_series_csv(path, TRACE_COLUMNS)
    return AttackTrace(*(d[c] for c in TRACE_COLUMNS))


def write_truth_csv(t_s, truth, path) -> None:
    """Truth at the measurement epochs (the prior-epoch row is not written)."""
    _write_series(path, TRUTH_COLUMNS, [t_s, truth[1:, 0], truth[1:, 1]])


def write_ekf_csv(t_s, traj, path) -> None:
    _write_series(path, EKF_COLUMNS, [t_s, traj.bias_m, traj.drift_mps])


def write_solution_csv(t_s, solution, dt_s: float, path) -> None:
    parts = split_outputs(solution, dt_s)
    _write_series(
        path, SOLUTION_COLUMNS, [t_s, parts.bias_m, parts.drift_mps, parts.s_bias_m, parts.s_drift_mps, parts.s_jerk]
    )


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# ---------------------------------------------------------------------------
# result bundles


@dataclass
class RunManifest:
    tool_version: str
    config_hash: str
    seed: int
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    started_utc: str = ""
    finished_utc: str = ""

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        write_json(asdict(self), path)
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def start_manifest(config: ScenarioConfig, inputs=()) -> RunManifest:
    return RunManifest(__version__, config_hash(config), config.seed, [str(p) for p in inputs], [], _now())


def finish_manifest(manifest: RunManifest, out_dir, written) -> RunManifest:
    manifest.outputs = sorted(str(Path(p).name) for p in written)
    manifest.finished_utc = _now()
    manifest.write(out_dir)
    return manifest


def diagnostics_dict(result: ScenarioResult) -> dict:
    d = result.tsarm.diagnostics
    out = d.as_dict()
    out.pop("elapsed_s")  # wall time would break byte-identical bundles
    out["rmse_ekf_m"] = result.rmse_ekf
    out["rmse_tsarm_m"] = result.rmse_tsarm
    out["integrity_flagged_epochs"] = result.integrity.flagged_epochs.tolist()
    out["clock_flagged_epochs"] = np.flatnonzero(result.clock_flags).tolist()
    return out


def emit_results(result: ScenarioResult, out_dir, inputs=(), name: str = "scenario") -> RunManifest:
    """Write the full bundle for one scenario; returns the manifest (also on disk)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    manifest = start_manifest(cfg, inputs)
    t = cfg.times_s
    written = []

    def path(fname):
        p = out_dir / fname
        written.append(p)
        return p

    save_config(cfg, path("config.json"))
    write_truth_csv(t, result.truth, path("truth.csv"))
    write_measurements_csv(result.measurements, path("measurements.csv"))
    write_trace_csv(result.trace, path("attack_trace.csv"))
    write_ekf_csv(t, result.ekf, path("ekf.csv"))
    write_solution_csv(t, result.tsarm, cfg.dt_s, path("tsarm.csv"))
    write_json(diagnostics_dict(result), path("diagnostics.json"))

    parts = split_outputs(result.tsarm, cfg.dt_s)
    truth = result.truth[1:]
    tr = result.trace
    _write_series(
        path("plot_series.csv"),
        (
            "t_s",
            "clean_bias_m",
            "clean_drift_mps",
            "attacked_bias_m",
            "attacked_drift_mps",
            "ekf_bias_m",
            "ekf_drift_mps",
            "corrected_bias_m",
            "corrected_drift_mps",
            "s_bias_est_m",
            "s_drift_est_mps",
            "s_accel_est",
            "s_jerk_est",
            "s_jerk_true",
        ),
        [
            t,
            truth[:, 0],
            truth[:, 1],
            truth[:, 0] + tr.s_rho_m,
            truth[:, 1] + tr.s_rhodot_mps,
            result.ekf.bias_m,
            result.ekf.drift_mps,
            parts.bias_m,
            parts.drift_mps,
            parts.s_bias_m,
            parts.s_drift_mps,
            parts.s_accel,
            parts.s_jerk,
            tr.s_jerk,
        ],
    )
    write_comparison(compare({name: result}), out_dir, written)
    return finish_manifest(manifest, out_dir, written)


def write_comparison(rows: list[dict], out_dir, written=None) -> None:
    out_dir = Path(out_dir)
    cols = ("scenario", "lambda", "ekf_rmse_m", "tsarm_rmse_m", "ratio")
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["scenario"]] + [_fmt(r[c]) for c in cols[1:]])
    (out_dir / "comparison.txt").write_text(format_table(rows) + "\n")
    if written is not None:
        written.extend([out_dir / "comparison.csv", out_dir / "comparison.txt"])
