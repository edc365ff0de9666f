"""
Monte-Carlo experiment driver.

Every trial draws its pilots, noise and grid offsets from
``SeedSequence([master_seed, sweep_index, trial_index])``, so any trial can be
re-run on its own and results do not depend on the number of workers.
Delays and the clock bias are reported in meters.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import (
    ArrayGeometry, ConfigError, MultipathSet, ScenarioConfig, ScenarioRealization, build_realization,
    config_amplification, coupling_matrix, dbm_to_watt, scale_noise_to_snr, synthesize_observations,
)
from .config import DEFAULT_REALIZATION_SEED, ExperimentSpec, SearchSettings
from .crlb import SingularFimError, channel_fim, bound_realization, efim, error_bounds, localization_bounds
from .crlb import fim_multi_bs, fim_with_priors
from .esprit import coarse_estimate
from .geometry import C_LIGHT, ChannelParams, LocalizationState, Pose, forward_map, wrap_angle
from .localize import SearchConfig, SearchRound, grid_search_path
from .refine import RefineOptions, ls_refine

SCHEMA_VERSION = 1
CSV_FIELDS = ("sweep", "value", "variant", "metric", "stage", "statistic", "estimate",
              "trials", "failures", "half_width")
CHANNEL_METRICS = ("theta_L", "theta_R", "tau_L", "tau_R", "vartheta")
STATE_METRICS = ("p_U", "p_R", "o3", "delta")
OUTPUT_ENV = "RISCAL_OUTPUT_DIR"


def trial_seed(master_seed: int, sweep_index: int, trial_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(sweep_index), int(trial_index)])


def output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "results"))


# single trial

@dataclass
class TrialResult:
    """Stage-wise estimates of one trial; ``failure`` names the stage that failed."""

    coarse: ChannelParams | None = None
    refined: ChannelParams | None = None
    rounds: list = field(default_factory=list)
    refine_stop: str | None = None
    refine_cost: tuple | None = None
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None

    def estimate(self, q: int | None = None, fixed_o1_o2=(0.0, 0.0)) -> LocalizationState | None:
        if not self.rounds:
            return None
        r: SearchRound = self.rounds[-1 if q is None else q]
        return r.state(fixed_o1_o2)


def run_trial(real: ScenarioRealization, seed, search: SearchSettings | None = None,
              refine_opts: RefineOptions | None = None, dither: bool = True,
              noise: bool = True) -> TrialResult:
    """Synthesize one observation and run coarse estimation, LS refinement
    and the grid search. Failures are recorded, not raised."""
    search = SearchSettings() if search is None else search
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    obs_ss, grid_ss = ss.spawn(2)
    cfg = real.config
    out = TrialResult()
    obs = synthesize_observations(real, np.random.default_rng(obs_ss), noise=noise)
    try:
        ce = coarse_estimate(obs)
    except np.linalg.LinAlgError as exc:
        out.failure = f"coarse: {exc}"
        return out
    out.coarse = ce.eta
    if not ce.ris_reliable:
        out.failure = "coarse: RIS path not resolved"
        return out
    try:
        rf = ls_refine(ce.eta, obs, refine_opts)
    except (np.linalg.LinAlgError, ValueError) as exc:
        out.failure = f"refine: {exc}"
        return out
    out.refined = rf.eta
    out.refine_stop = rf.stop_reason
    out.refine_cost = (rf.initial_cost, rf.cost)
    if dither:
        sc = SearchConfig.dithered(cfg.delta_f, np.random.default_rng(grid_ss), **search.kwargs())
    else:
        sc = SearchConfig.default(cfg.delta_f, **search.kwargs())
    try:
        out.rounds = grid_search_path(rf.eta, sc, cfg.bs, real.state.fixed_o1_o2)
    except RuntimeError as exc:
        out.failure = f"search: {exc}"
    return out


def channel_errors(est: ChannelParams, truth: ChannelParams) -> dict:
    """Per-group estimation errors (angles in rad, delays in m)."""
    e = est.to_vector(C_LIGHT) - truth.to_vector(C_LIGHT)
    return {
        "theta_L": float(np.hypot(e[0], e[1])),
        "theta_R": float(np.hypot(e[2], e[3])),
        "tau_L": float(abs(e[4])),
        "tau_R": float(abs(e[5])),
        "vartheta": float(np.hypot(e[6], e[7])),
    }


def state_errors(est: LocalizationState, truth: LocalizationState) -> dict:
    return {
        "p_U": float(np.linalg.norm(est.p_U - truth.p_U)),
        "p_R": float(np.linalg.norm(est.p_R - truth.p_R)),
        "o3": float(abs(wrap_angle(est.o3 - truth.o3))),
        "delta": float(C_LIGHT * abs(est.clock_bias - truth.clock_bias)),
    }


def trial_errors(res: TrialResult, real: ScenarioRealization) -> dict:
    """``{(metric, stage): error}`` for every stage the trial reached."""
    truth_eta = forward_map(real.state, real.config.bs)
    out = {}
    if res.coarse is not None and np.all(np.isfinite(res.coarse.to_vector())):
        out.update({(k, "coarse"): v for k, v in channel_errors(res.coarse, truth_eta).items()})
    if res.refined is not None:
        out.update({(k, "refined"): v for k, v in channel_errors(res.refined, truth_eta).items()})
    for q, r in enumerate(res.rounds):
        est = r.state(real.state.fixed_o1_o2)
        out.update({(k, f"Q{q}"): v for k, v in state_errors(est, real.state).items()})
    return out


# aggregation

def rmse_summary(errors) -> tuple[float, float]:
    """RMSE and a 95% half-width from a normal approximation on squared errors."""
    sq = np.asarray(errors, dtype=float) ** 2
    n = sq.size
    if n == 0:
        return float("nan"), float("nan")
    mse = float(np.mean(sq))
    if n < 2:
        return float(np.sqrt(mse)), float("nan")
    h = 1.96 * float(np.std(sq, ddof=1)) / np.sqrt(n)
    return float(np.sqrt(mse)), 0.5 * (np.sqrt(mse + h) - np.sqrt(max(mse - h, 0.0)))


@dataclass
class ResultTable:
    """Flat rows of RMSE and error-bound values; see ``CSV_FIELDS``."""

    sweep: str
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, value, metric, stage, statistic, estimate, trials=0, failures=0,
            half_width=float("nan"), variant=""):
        self.rows.append(dict(sweep=self.sweep, value=float(value), variant=variant, metric=metric,
                              stage=stage, statistic=statistic, estimate=float(estimate),
                              trials=int(trials), failures=int(failures),
                              half_width=float(half_width)))

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def get(self, **match) -> float:
        rows = self.select(**match)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {match}")
        return rows[0]["estimate"]

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        meta = dict(self.meta, schema_version=SCHEMA_VERSION,
                    seed_rule="SeedSequence([master_seed, sweep_index, trial_index])")
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
        return path


def _run_point(args):
    real, master, idx, trials, search, dither = args
    return [run_trial(real, trial_seed(master, idx, t), search, dither=dither) for t in range(trials)]


def _run_trials(jobs, workers: int):
    if workers <= 1:
        return [_run_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_point, jobs))


def _add_trial_rows(table: ResultTable, value, results, real, variant="", stages=None):
    errs = [trial_errors(r, real) for r in results]
    keys = sorted({k for e in errs for k in e}, key=lambda k: (k[1], k[0]))
    if stages is not None:
        keys = [k for k in keys if k[1] in stages]
    failures = sum(not r.ok for r in results)
    for metric, stage in keys:
        vals = [e[(metric, stage)] for e, r in zip(errs, results) if r.ok and (metric, stage) in e]
        rmse, hw = rmse_summary(vals)
        table.add(value, metric, stage, "rmse", rmse, len(vals), failures, hw, variant)


def _add_bound_rows(table: ResultTable, value, real, variant="", channel=True):
    try:
        loc = localization_bounds(real)
    except SingularFimError:
        loc = {k: np.inf for k in STATE_METRICS}
    for k in STATE_METRICS:
        table.add(value, k, "bound", "eb", loc.get(k, np.inf), variant=variant)
    if channel:
        try:
            ch = error_bounds(efim(channel_fim(bound_realization(real))))
        except SingularFimError:
            ch = {k: np.inf for k in CHANNEL_METRICS}
        for k in CHANNEL_METRICS:
            table.add(value, k, "bound", "eb", ch[k], variant=variant)


def _base_realization(cfg: ScenarioConfig, spec: ExperimentSpec, realization_seed: int):
    return build_realization(cfg, int(spec.params.get("realization_seed", realization_seed)))


# experiments

def experiment_rmse_vs_snr(cfg: ScenarioConfig, spec: ExperimentSpec, realization_seed: int = DEFAULT_REALIZATION_SEED,
                           search: SearchSettings | None = None, workers: int = 1) -> ResultTable:
    """RMSE of channel parameters (coarse and refined) and of the localization
    state after every grid round, versus the received SNR."""
    base = _base_realization(cfg, spec, realization_seed)
    dither = bool(spec.params.get("dither", True))
    table = ResultTable("snr_db", meta=dict(kind=spec.kind, master_seed=spec.master_seed,
                                            trials=spec.trials, realization_seed=realization_seed))
    reals = [scale_noise_to_snr(base, snr) for snr in spec.sweep]
    jobs = [(r, spec.master_seed, i, spec.trials, search, dither) for i, r in enumerate(reals)]
    for snr, real, results in zip(spec.sweep, reals, _run_trials(jobs, workers)):
        _add_trial_rows(table, snr, results, real)
        _add_bound_rows(table, snr, real)
    return table


def active_passive_realizations(base: ScenarioRealization, p_var_dbm: float):
    """Active RIS powered with ``P_var`` and passive RIS with ``P_var`` added to the transmitter."""
    cfg = base.config
    P = float(dbm_to_watt(p_var_dbm))
    ca = cfg.replace(P_R=P)
    active = base.replace(config=ca, profiles=base.profiles.with_amplification(
        config_amplification(ca, base.state)))
    cp = cfg.replace(P_T=cfg.P_T + P, P_R=0.0, sigmar_sq=0.0)
    passive = base.replace(config=cp, profiles=base.profiles.with_amplification(1.0))
    return active, passive


def experiment_active_vs_passive(cfg: ScenarioConfig, spec: ExperimentSpec,
                                 realization_seed: int = DEFAULT_REALIZATION_SEED, **_) -> ResultTable:
    """Error bounds at the native noise level for an active RIS with supply
    ``P_var`` and a passive RIS whose transmitter gets the extra ``P_var``."""
    base = _base_realization(cfg, spec, realization_seed)
    table = ResultTable("p_var_dbm", meta=dict(kind=spec.kind, realization_seed=realization_seed))
    for pv in spec.sweep:
        active, passive = active_passive_realizations(base, pv)
        for variant, real in (("active", active), ("passive", passive)):
            _add_bound_rows(table, pv, real, variant, channel=False)
    return table


def _run_multipath_point(args):
    base, master, idx, n_sp, trials, snr, rcs, search, dither = args
    out = []
    for t in range(trials):
        ss = trial_seed(master, idx, t)
        mp_ss, trial_ss = ss.spawn(2)
        real = base
        if n_sp > 0:
            real = base.replace(multipath=MultipathSet.random(n_sp, np.random.default_rng(mp_ss), rcs))
        real = scale_noise_to_snr(real, snr)
        out.append((real, run_trial(real, trial_ss, search, dither=dither)))
    return out


def experiment_multipath(cfg: ScenarioConfig, spec: ExperimentSpec, realization_seed: int = DEFAULT_REALIZATION_SEED,
                         search: SearchSettings | None = None, workers: int = 1) -> ResultTable:
    """RMSE versus the number of scatter points per channel at a fixed SNR.

    Scatter points are redrawn for every trial; the SNR counts the total
    (LOS plus scattered) received signal.
    """
    base = _base_realization(cfg, spec, realization_seed)
    snr = float(spec.params.get("snr_db", 30.0))
    rcs = float(spec.params.get("rcs", 0.5))
    dither = bool(spec.params.get("dither", True))
    table = ResultTable("scatter_points", meta=dict(kind=spec.kind, snr_db=snr, rcs=rcs,
                                                    master_seed=spec.master_seed, trials=spec.trials,
                                                    realization_seed=realization_seed))
    jobs = [(base, spec.master_seed, i, int(n), spec.trials, snr, rcs, search, dither)
            for i, n in enumerate(spec.sweep)]
    if workers <= 1:
        outs = [_run_multipath_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_run_multipath_point, jobs))
    los_bound = scale_noise_to_snr(base, snr)
    for n, pairs in zip(spec.sweep, outs):
        results = [r for _, r in pairs]
        errs_real = pairs[0][0] if pairs else base
        # the truth is the same for every trial; errors only need the state
        _add_trial_rows(table, n, results, errs_real)
        _add_bound_rows(table, n, los_bound)
    return table


def experiment_mutual_coupling(cfg: ScenarioConfig, spec: ExperimentSpec, realization_seed: int = DEFAULT_REALIZATION_SEED,
                               search: SearchSettings | None = None, workers: int = 1) -> ResultTable:
    """RMSE versus RIS element spacing (in wavelengths) with and without
    mutual coupling in the synthesized data; the estimators ignore coupling.

    For each spacing and RIS power the noise is scaled so the coupling-free
    data has the target SNR; the coupled data reuses the same noise levels
    and trial seeds.
    """
    snr = float(spec.params.get("snr_db", 30.0))
    powers = [float(p) for p in spec.params.get("ris_power_dbm", [7.0])]
    scale = float(spec.params.get("coupling_scale", 1e-3))
    decay = float(spec.params.get("coupling_decay", 0.1))
    dither = bool(spec.params.get("dither", True))
    seed = int(spec.params.get("realization_seed", realization_seed))
    table = ResultTable("ris_spacing_wavelengths",
                        meta=dict(kind=spec.kind, snr_db=snr, coupling_scale=scale,
                                  coupling_decay=decay, master_seed=spec.master_seed,
                                  trials=spec.trials, realization_seed=seed))
    jobs, labels = [], []
    idx = 0
    for sp in spec.sweep:
        for pr in powers:
            ris = ArrayGeometry(cfg.ris_array.n1, cfg.ris_array.n2, sp * cfg.wavelength)
            c = cfg.replace(ris_array=ris, P_R=float(dbm_to_watt(pr)))
            free = scale_noise_to_snr(build_realization(c, seed), snr)
            S = coupling_matrix(ris, c.wavelength, scale, decay)
            coupled = free.replace(scattering=S)
            for variant, real in ((f"PR={pr:g}dBm,no-mc", free), (f"PR={pr:g}dBm,mc", coupled)):
                jobs.append((real, spec.master_seed, idx, spec.trials, search, dither))
                labels.append((sp, variant, real))
            idx += 1
    for (sp, variant, real), results in zip(labels, _run_trials(jobs, workers)):
        _add_trial_rows(table, sp, results, real, variant, stages=("refined", "Q2", "Q3"))
        if variant.endswith("no-mc"):
            _add_bound_rows(table, sp, real, variant, channel=False)
    return table


# blind-area maps

# decimeter-level accuracy; EB(p_U) above this marks a blind cell [m]
DEFAULT_BLIND_THRESHOLD = 0.1
BLIND_VARIANTS = ("baseline", "known-o3", "known-delta", "known-both", "bs+1", "bs+2")
DEFAULT_EXTRA_BS = (
    Pose([5.0, 0.0, 3.0], [0.0, 0.0, np.pi]),
    Pose([0.0, -5.0, 3.0], [0.0, 0.0, np.pi / 2]),
)


def _nearest_rank(v, q: float) -> float:
    """Nearest-rank percentile; well defined with infinite entries."""
    s = np.sort(np.ravel(v))
    return float(s[max(int(np.ceil(q / 100 * s.size)) - 1, 0)])


@dataclass
class BlindMap:
    """EB(p_U) on a regular UE grid for several variants.

    Cells with a singular FIM hold ``inf``; they count as blind and are
    capped at the largest finite value in rendered maps.
    """

    x: np.ndarray
    y: np.ndarray
    height: float
    eb: dict
    threshold: float

    def summary(self, variant: str) -> dict:
        v = self.eb[variant]
        finite = v[np.isfinite(v)]
        ok = finite.size > 0 and finite.min() > 0
        return dict(
            variant=variant,
            blind_fraction=float(np.mean(~(v <= self.threshold))),
            # over nonsingular cells; singular ones are counted separately
            dynamic_range_decades=float(np.log10(finite.max() / finite.min())) if ok else np.nan,
            p95=_nearest_rank(v, 95),
            median=_nearest_rank(v, 50),
            singular_cells=int(np.sum(~np.isfinite(v))),
        )

    def write_csv(self, path, variants=None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        variants = list(self.eb) if variants is None else list(variants)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "variant", "eb_p_U"])
            for var in variants:
                for i, xv in enumerate(self.x):
                    for j, yv in enumerate(self.y):
                        w.writerow([repr(float(xv)), repr(float(yv)), var, repr(float(self.eb[var][i, j]))])
        return path

    def write_png(self, path, variant: str, cap: float | None = None) -> Path:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        v = np.array(self.eb[variant], dtype=float)
        cap = np.nanmax(v[np.isfinite(v)]) if cap is None else cap
        v = np.minimum(np.where(np.isfinite(v), v, cap), cap)
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.pcolormesh(self.x, self.y, np.log10(v).T, shading="nearest")
        fig.colorbar(im, ax=ax, label="log10 EB(p_U) [m]")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_title(variant)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return Path(path)


def _cell_bounds(args):
    base, xs, y, height, variants, extra_bs = args
    out = {v: np.empty(len(xs)) for v in variants}
    need_extra = any(v.startswith("bs+") for v in variants)
    for i, x in enumerate(xs):
        state = base.state.replace(p_U=np.array([x, y, height]))
        try:
            r0 = bound_realization(base, state=state)
            J0 = efim(channel_fim(r0))
            extras = []
            if need_extra:
                for pose in extra_bs:
                    r = bound_realization(base, state=state, bs=pose)
                    extras.append(efim(channel_fim(r)))
        except (SingularFimError, ValueError):
            for v in variants:
                out[v][i] = np.inf
            continue
        for v in variants:
            if v == "baseline":
                J = fim_with_priors(J0, state, base.config.bs)
            elif v == "known-o3":
                J = fim_with_priors(J0, state, base.config.bs, ("o3",))
            elif v == "known-delta":
                J = fim_with_priors(J0, state, base.config.bs, ("delta",))
            elif v == "known-both":
                J = fim_with_priors(J0, state, base.config.bs, ("o3", "delta"))
            else:
                n = int(v[3:])
                J = fim_multi_bs([fim_with_priors(J0, state, base.config.bs)]
                                 + [fim_with_priors(Je, state, pose)
                                    for Je, pose in zip(extras[:n], extra_bs[:n])])
            try:
                out[v][i] = error_bounds(J)["p_U"]
            except (SingularFimError, np.linalg.LinAlgError):
                out[v][i] = np.inf
    return out


def experiment_blind_map(cfg: ScenarioConfig, spec: ExperimentSpec | None = None,
                         realization_seed: int = DEFAULT_REALIZATION_SEED, variants=BLIND_VARIANTS, grid: int = 50,
                         extent=(-5.0, 5.0), height: float = 1.0, threshold: float | None = None,
                         extra_bs=DEFAULT_EXTRA_BS, workers: int = 1) -> BlindMap:
    """EB(p_U) over a ``grid x grid`` set of UE positions at fixed height.

    Bounds use the native noise level of ``cfg``. Cells with a singular FIM
    are ``inf``. Extra base stations share the RIS, its profiles and the
    combiner design of the main one.
    """
    params = {} if spec is None else spec.params
    seed = int(params.get("realization_seed", realization_seed))
    grid = int(params.get("grid", grid))
    height = float(params.get("height", height))
    threshold = float(params.get("threshold", DEFAULT_BLIND_THRESHOLD if threshold is None else threshold))
    variants = tuple(params.get("variants", variants))
    for v in variants:
        if v not in BLIND_VARIANTS:
            raise ConfigError(f"unknown blind-map variant {v!r}; choose from {BLIND_VARIANTS}")
    base = build_realization(cfg, seed)
    step = (extent[1] - extent[0]) / grid
    xs = extent[0] + step * (np.arange(grid) + 0.5)
    ys = xs.copy()
    jobs = [(base, xs, y, height, variants, tuple(extra_bs)) for y in ys]
    if workers <= 1:
        cols = [_cell_bounds(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            cols = list(ex.map(_cell_bounds, jobs))
    eb = {v: np.stack([c[v] for c in cols], axis=1) for v in variants}
    return BlindMap(xs, ys, height, eb, threshold)


def blind_map_table(bm: BlindMap) -> ResultTable:
    table = ResultTable("variant", meta=dict(kind="blind-map", threshold=bm.threshold,
                                             grid=len(bm.x), height=bm.height))
    for i, v in enumerate(bm.eb):
        s = bm.summary(v)
        for key in ("blind_fraction", "dynamic_range_decades", "p95", "median", "singular_cells"):
            table.add(i, key, "map", "summary", s[key], variant=v)
    return table


EXPERIMENTS = {
    "rmse-vs-snr": experiment_rmse_vs_snr,
    "active-vs-passive": experiment_active_vs_passive,
    "multipath": experiment_multipath,
    "mutual-coupling": experiment_mutual_coupling,
}


def run_experiment(cfg: ScenarioConfig, spec: ExperimentSpec, realization_seed: int = DEFAULT_REALIZATION_SEED,
                   search: SearchSettings | None = None, workers: int = 1) -> ResultTable:
    if spec.kind == "blind-map":
        return blind_map_table(experiment_blind_map(cfg, spec, realization_seed, workers=workers))
    fn = EXPERIMENTS[spec.kind]
    if spec.kind == "active-vs-passive":
        return fn(cfg, spec, realization_seed)
    return fn(cfg, spec, realization_seed, search=search, workers=workers)


def spec_metadata(spec: ExperimentSpec) -> dict:
    return asdict(spec)
