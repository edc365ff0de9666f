"""
YAML scenario and experiment files.

A file may hold a ``scenario`` section, a ``search`` section and an
``experiment`` section; missing keys fall back to the packaged defaults in
``data/indoor.yaml``. Angles in files are in degrees, delays in ns.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .channel import ArrayGeometry, ConfigError, ScenarioConfig, dbm_to_watt, noise_power
from .geometry import C_LIGHT, LocalizationState, Pose

# profile/combiner realization used when a file does not name one
DEFAULT_REALIZATION_SEED = 11
EXPERIMENT_KINDS = ("rmse-vs-snr", "active-vs-passive", "multipath", "mutual-coupling", "blind-map")


def default_document() -> dict:
    text = resources.files("riscal").joinpath("data/indoor.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_document(path=None) -> dict:
    """Packaged defaults overlaid with the YAML file at ``path`` (if any)."""
    doc = default_document()
    if path is None:
        return doc
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        user = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(user) - {"scenario", "search", "experiment"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    return _merge(doc, user)


def _vec(x, n, what):
    try:
        v = np.asarray(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must be numeric") from exc
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise ConfigError(f"{what} must be {n} finite numbers")
    return v


def _array(d, what) -> tuple[int, int, float]:
    try:
        return int(d["n1"]), int(d["n2"]), float(d["spacing_wavelengths"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{what} needs n1, n2 and spacing_wavelengths") from exc


def scenario_from_dict(sc: dict) -> tuple[ScenarioConfig, int]:
    """Build a :class:`ScenarioConfig` and the realization seed from a scenario mapping."""
    known = {"carrier_hz", "bandwidth_hz", "subcarriers", "transmissions", "tx_power_dbm",
             "ris_power_dbm", "noise_psd_dbm_hz", "noise_figure_db", "bs_array", "ris_array",
             "rf_chains", "bs", "ris", "ue", "clock_bias_ns", "realization_seed"}
    unknown = set(sc) - known
    if unknown:
        raise ConfigError(f"unknown scenario key(s) {sorted(unknown)}")
    try:
        f_c = float(sc["carrier_hz"])
        bw = float(sc["bandwidth_hz"])
        lam = C_LIGHT / f_c
        noise = noise_power(float(sc["noise_psd_dbm_hz"]), float(sc["noise_figure_db"]), bw)
        nb1, nb2, db = _array(sc["bs_array"], "bs_array")
        nr1, nr2, dr = _array(sc["ris_array"], "ris_array")
        n1, n2 = (int(v) for v in sc["rf_chains"])
        bs = Pose(_vec(sc["bs"]["position"], 3, "bs.position"),
                  np.radians(_vec(sc["bs"].get("euler_deg", [0, 0, 0]), 3, "bs.euler_deg")))
        ris_euler = np.radians(_vec(sc["ris"].get("euler_deg", [0, 0, 0]), 3, "ris.euler_deg"))
        state = LocalizationState(_vec(sc["ue"], 3, "ue"), _vec(sc["ris"]["position"], 3, "ris.position"),
                                  ris_euler[2], float(sc["clock_bias_ns"]) * 1e-9, ris_euler[:2])
        cfg = ScenarioConfig(
            f_c=f_c, bandwidth=bw, K=int(sc["subcarriers"]), G=int(sc["transmissions"]),
            P_T=float(dbm_to_watt(float(sc["tx_power_dbm"]))),
            P_R=float(dbm_to_watt(float(sc["ris_power_dbm"]))),
            sigma0_sq=noise, sigmar_sq=noise,
            bs_array=ArrayGeometry(nb1, nb2, db * lam), ris_array=ArrayGeometry(nr1, nr2, dr * lam),
            N1=n1, N2=n2, bs=bs, truth=state,
        )
        seed = int(sc.get("realization_seed", DEFAULT_REALIZATION_SEED))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc!r}") from exc
    return cfg, seed


@dataclass(frozen=True)
class SearchSettings:
    o3_points: int = 64
    delta_points: int = 64
    max_delta_fraction: float = 0.9
    kappa: float = 0.1
    rounds: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSettings":
        unknown = set(d or {}) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown search key(s) {sorted(unknown)}")
        try:
            s = cls(**{k: type(getattr(cls, k))(v) for k, v in (d or {}).items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid search settings: {exc}") from exc
        if s.o3_points < 1 or s.delta_points < 1 or not 0 < s.kappa < 1 or s.rounds < 0:
            raise ConfigError("search settings out of range")
        return s

    def kwargs(self) -> dict:
        return dict(n_o3=self.o3_points, n_delta=self.delta_points,
                    max_delta_frac=self.max_delta_fraction, kappa=self.kappa, rounds=self.rounds)


@dataclass(frozen=True)
class ExperimentSpec:
    """One Monte-Carlo study: what to sweep, how many trials, which seeds."""

    kind: str
    sweep: tuple
    trials: int = 100
    master_seed: int = 0
    params: dict = field(default_factory=dict)
    output: str | None = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {EXPERIMENT_KINDS}")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        vals = np.asarray(self.sweep, dtype=float)
        if vals.ndim != 1 or not np.all(np.isfinite(vals)):
            raise ConfigError("sweep values must be a finite list")
        if np.any(np.diff(vals) < 0):
            raise ConfigError("sweep values must be sorted")
        object.__setattr__(self, "sweep", tuple(float(v) for v in vals))

    @classmethod
    def from_dict(cls, d: dict, kind: str | None = None) -> "ExperimentSpec":
        d = dict(d or {})
        kind = kind or d.get("kind")
        if kind is None:
            raise ConfigError("experiment kind missing")
        defaults = DEFAULT_SWEEPS.get(kind, ())
        try:
            return cls(kind=kind, sweep=tuple(d.get("sweep", defaults)),
                       trials=int(d.get("trials", 100)), master_seed=int(d.get("master_seed", 0)),
                       params=dict(d.get("params", {}) or {}), output=d.get("output"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment settings: {exc}") from exc


DEFAULT_SWEEPS = {
    "rmse-vs-snr": (-10.0, 0.0, 10.0, 20.0, 30.0, 40.0),
    "active-vs-passive": (-40.0, -30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0, 40.0),
    "multipath": (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0),
    "mutual-coupling": (0.02, 0.05, 0.1, 0.15, 0.2, 0.25),
    "blind-map": (0.0,),
}


@dataclass
class LoadedConfig:
    scenario: ScenarioConfig
    realization_seed: int
    search: SearchSettings
    experiment: dict


def load_config(path=None) -> LoadedConfig:
    doc = load_document(path)
    cfg, seed = scenario_from_dict(doc.get("scenario", {}))
    search = SearchSettings.from_dict(doc.get("search", {}))
    return LoadedConfig(cfg, seed, search, dict(doc.get("experiment", {}) or {}))
