"""Monte Carlo driver: trials, deterministic seeding, CSV persistence and
plot-ready series.

A trial is one (drop, realization) pair. A drop fixes the UE positions and the
large-scale fading; a realization draws small-scale fading, data and noise.
Random streams are derived from ``(master seed, drop, realization, purpose)``
only, so every algorithm, pilot type and transmit power of a trial sees the
same channel, data indices and unit-variance noise (common random numbers),
and results do not depend on how trials are scheduled across workers.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np
import pandas as pd

from . import baseline, ep, metrics, model
from .config import OUT_DIR_ENV, STUDIES, ExperimentConfig

log = logging.getLogger(__name__)

CSV_HEADER = (
    "study", "algorithm", "pilot", "Td", "power_dbm", "drop", "realization",
    "ue", "nmse", "ser", "ck", "diverged", "seed_hi", "seed_lo",
)
TRACE_HEADER = ("study", "algorithm", "pilot", "Td", "power_dbm", "drop", "realization", "iteration", "nmse")
METRIC_ONLY = "pc_metric"  # algorithm label of rows that carry only c_k

# purpose tags go last: SeedSequence ignores trailing zero words
_TAG_DROP = 1
_TAG_REALIZATION = 2
_TAG_LSFC = 3
_TAG_FRAME = 4


class MissingDataError(ValueError):
    """The results lack label combinations a study needs."""


# --------------------------------------------------------------------------
# seeding
# --------------------------------------------------------------------------

def _key64(*entropy: int) -> int:
    w = np.random.SeedSequence(list(entropy)).generate_state(2, np.uint32)
    return (int(w[0]) << 32) | int(w[1])


def trial_seeds(master: int, drop: int, realization: int) -> tuple[int, int]:
    """``(seed_hi, seed_lo)``: 64-bit keys of the drop and of the realization.

    ``seed_hi`` alone determines geometry and large-scale fading; ``seed_lo``
    determines fading, data and noise.
    """
    return _key64(master, drop, _TAG_DROP), _key64(master, drop, realization, _TAG_REALIZATION)


def lsfc_rng(seed_hi: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed_hi, _TAG_LSFC]))


def frame_rng(seed_lo: int, T_d: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed_lo, T_d, _TAG_FRAME]))


# --------------------------------------------------------------------------
# trials
# --------------------------------------------------------------------------

@dataclass
class TrialRecord:
    study: str
    algorithm: str
    pilot: str
    Td: int | None
    power_dbm: float | None
    drop: int
    realization: int
    seed_hi: int
    seed_lo: int
    nmse: float | None = None
    ser: float | None = None
    nmse_ue: np.ndarray | None = None
    ser_ue: np.ndarray | None = None
    ck: np.ndarray | None = None
    diverged: bool = False
    trace: list[float] | None = None


def draw_scenario(cfg: ExperimentConfig, seed_hi: int) -> model.ChannelStats:
    sc = cfg.scenario
    rng = lsfc_rng(seed_hi)
    geom = model.sample_geometry(sc.geometry, sc.K, rng)
    return model.compute_channel_stats(geom, sc.channel, rng, N=sc.N)


def _run_algorithm(alg, frame, stats, prior, const, cfg: ExperimentConfig, rec: TrialRecord) -> None:
    has_data = frame.Xd.shape[1] > 0
    x_hat = H_hat = None
    if alg in ("ep_mod", "ep_legacy"):
        epc = dataclasses.replace(cfg.ep, legacy_mode=alg == "ep_legacy")
        res = ep.run(frame, prior, const, epc, H_true=frame.H if cfg.trace else None)
        H_hat, x_hat = res.H_hat, res.x_idx
        if cfg.trace:
            rec.trace = [float(v) for v in res.diagnostics["nmse"]]
    elif alg == "mmse_pilot_csi":
        H_hat = prior.H_hat
        if has_data:
            x_hat = baseline.mmse_detect(frame.Yd, H_hat, frame.sigma_n2, const)
    elif alg == "mmse_perfect_csi":
        if has_data:
            x_hat = baseline.mmse_detect(frame.Yd, frame.H, frame.sigma_n2, const)
    elif alg == "genie_mmse":
        H_hat = baseline.genie_mmse(frame.Y, frame.X, stats, frame.sigma_n2).H_hat
    else:
        raise ValueError(f"unknown algorithm {alg!r}")
    if H_hat is not None:
        if not np.all(np.isfinite(H_hat)):
            raise ep.EPDivergence("non-finite channel estimate")
        rec.nmse = metrics.nmse(frame.H, H_hat)
        rec.nmse_ue = metrics.nmse_per_ue(frame.H, H_hat)
    if x_hat is not None:
        rec.ser = metrics.ser(frame.data_idx, x_hat)
        rec.ser_ue = metrics.ser_per_ue(frame.data_idx, x_hat)


def run_trial(cfg: ExperimentConfig, drop: int, realization: int) -> list[TrialRecord]:
    """Every (pilot, T_d, power, algorithm) combination of one trial."""
    sc = cfg.scenario
    seed_hi, seed_lo = trial_seeds(cfg.seed, drop, realization)
    stats = draw_scenario(cfg, seed_hi)
    s2 = sc.sigma_n2
    out: list[TrialRecord] = []
    label = dict(study=cfg.study, drop=drop, realization=realization, seed_hi=seed_hi, seed_lo=seed_lo)

    for pilot in cfg.pilots:
        for power in cfg.powers_dbm:
            const = sc.make_constellation(power)
            Xp = model.make_pilots(pilot, sc.dims(0), const) if sc.T_p else np.zeros((sc.K, 0), dtype=complex)
            ck = metrics.pc_metric(stats, Xp, s2)
            if cfg.study == "cdf_ck" or not cfg.algorithms:
                out.append(TrialRecord(algorithm=METRIC_ONLY, pilot=pilot, Td=None, power_dbm=power, ck=ck, **label))
                continue
            for T_d in cfg.Td:
                dims = sc.dims(T_d)
                frame = model.sample_frame(dims, stats, Xp, const, s2, frame_rng(seed_lo, T_d))
                prior = None
                for alg in cfg.algorithms:
                    rec = TrialRecord(algorithm=alg, pilot=pilot, Td=T_d, power_dbm=power, ck=ck, **label)
                    try:
                        if prior is None and alg in ("ep_mod", "ep_legacy", "mmse_pilot_csi"):
                            prior = baseline.pilot_mmse_all(frame, stats)
                        _run_algorithm(alg, frame, stats, prior, const, cfg, rec)
                    except (FloatingPointError, np.linalg.LinAlgError) as exc:
                        log.warning("trial drop=%d realization=%d %s/%s diverged: %s", drop, realization, alg, pilot, exc)
                        rec = TrialRecord(algorithm=alg, pilot=pilot, Td=T_d, power_dbm=power, ck=ck, diverged=True, **label)
                    out.append(rec)
    return out


def _run_chunk(cfg: ExperimentConfig, tasks: list[tuple[int, int]]) -> list[TrialRecord]:
    recs = []
    for d, r in tasks:
        recs.extend(run_trial(cfg, d, r))
    return recs


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else format(v, ".17g")


def _opt(a, k):
    return None if a is None else a[k]


def record_rows(rec: TrialRecord) -> list[tuple]:
    """CSV rows of one record: an aggregate row (``ue = -1``) and one per UE."""
    head = (rec.study, rec.algorithm, rec.pilot, rec.Td, rec.power_dbm, rec.drop, rec.realization)
    tail = (int(rec.diverged), rec.seed_hi, rec.seed_lo)
    rows = []
    if rec.algorithm != METRIC_ONLY:
        rows.append(head + (-1, rec.nmse, rec.ser, None) + tail)
    K = next(len(a) for a in (rec.ck, rec.nmse_ue, rec.ser_ue) if a is not None)
    for k in range(K):
        rows.append(head + (k, _opt(rec.nmse_ue, k), _opt(rec.ser_ue, k), _opt(rec.ck, k)) + tail)
    return rows


def trace_rows(rec: TrialRecord) -> list[tuple]:
    if not rec.trace:
        return []
    head = (rec.study, rec.algorithm, rec.pilot, rec.Td, rec.power_dbm, rec.drop, rec.realization)
    return [head + (i, v) for i, v in enumerate(rec.trace)]


def _sort_key(row):
    # labels first, then numeric indices; None sorts before any value
    return tuple((0, "") if v is None else (1, v) for v in row[:8])


def write_csv(path: str | os.PathLike, header, rows) -> None:
    rows = sorted(rows, key=_sort_key)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])


def read_results(path: str | os.PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"results file not found: {path}")
    df = pd.read_csv(path, dtype={"algorithm": str, "pilot": str, "study": str})
    if tuple(df.columns) not in (CSV_HEADER, TRACE_HEADER):
        raise ValueError(f"{path}: unexpected header {list(df.columns)}")
    return df


@dataclass
class ExperimentResults:
    records: pd.DataFrame
    traces: pd.DataFrame
    csv_path: Path | None = None
    trace_path: Path | None = None


def trace_path_for(csv_path: str | os.PathLike) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + "_traces.csv")


def resolve_out_dir(cfg_value: str, cli_value: str | None = None) -> Path:
    """CLI flag, then the environment override, then the config value."""
    return Path(cli_value or os.environ.get(OUT_DIR_ENV) or cfg_value)


def run_experiment(cfg: ExperimentConfig, write: bool = True, out_dir: str | os.PathLike | None = None) -> ExperimentResults:
    """Run every trial of ``cfg``; optionally persist ``<study>.csv`` (and
    ``<study>_traces.csv`` when traces are on) in the output directory."""
    cfg = cfg.resolved()
    tasks = [(d, r) for d in range(cfg.drops) for r in range(cfg.realizations)]
    log.info("%s: %d trials on %d worker(s)", cfg.study, len(tasks), cfg.workers)
    if cfg.workers == 1:
        records = _run_chunk(cfg, tasks)
    else:
        n_chunks = min(len(tasks), 8 * cfg.workers)
        chunks = [tasks[i::n_chunks] for i in range(n_chunks)]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = [r for part in pool.map(partial(_run_chunk, cfg), chunks) for r in part]

    rows = [row for rec in records for row in record_rows(rec)]
    trows = [row for rec in records for row in trace_rows(rec)]
    res = ExperimentResults(
        records=_frame(CSV_HEADER, sorted(rows, key=_sort_key)),
        traces=_frame(TRACE_HEADER, sorted(trows, key=_sort_key)),
    )
    if write:
        out = Path(out_dir) if out_dir is not None else resolve_out_dir(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        res.csv_path = out / f"{cfg.study}.csv"
        write_csv(res.csv_path, CSV_HEADER, rows)
        if cfg.trace:
            res.trace_path = trace_path_for(res.csv_path)
            write_csv(res.trace_path, TRACE_HEADER, trows)
    n_div = int(sum(r.diverged for r in records))
    if n_div:
        log.warning("%d of %d algorithm runs diverged and are excluded from means", n_div, len(records))
    return res


def _frame(header, rows) -> pd.DataFrame:
    df = pd.DataFrame(rows, columns=list(header))
    for col in header:
        if col not in ("study", "algorithm", "pilot"):
            df[col] = pd.to_numeric(df[col], errors="coerce")
    return df


# --------------------------------------------------------------------------
# aggregation and plot series
# --------------------------------------------------------------------------

SERIES_KEYS = ["algorithm", "pilot", "Td", "power_dbm"]


def series_name(algorithm: str, pilot: str, Td, power=None) -> str:
    name = f"{algorithm}_{pilot}"
    if Td is not None and not pd.isna(Td):
        name += f"_Td{int(Td)}"
    if power is not None:
        name += f"_P{float(power):g}dBm"
    return name


def _as_results(results) -> ExperimentResults:
    if isinstance(results, ExperimentResults):
        return results
    if isinstance(results, pd.DataFrame):
        return ExperimentResults(results, pd.DataFrame(columns=list(TRACE_HEADER)))
    path = Path(results)
    tp = trace_path_for(path)
    traces = read_results(tp) if tp.is_file() else pd.DataFrame(columns=list(TRACE_HEADER))
    return ExperimentResults(read_results(path), traces, path, tp if tp.is_file() else None)


def _check_required(df: pd.DataFrame, required, what: str) -> None:
    if df.empty:
        raise MissingDataError(f"no rows usable for {what}")
    if required:
        have = set(map(tuple, df[["algorithm", "pilot", "Td"]].itertuples(index=False)))
        missing = [c for c in required if (c[0], c[1], c[2]) not in have]
        if missing:
            listing = ", ".join(series_name(*c) for c in missing)
            raise MissingDataError(f"{what}: results lack {listing}")


def mean_curve(df: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Per (algorithm, pilot, Td, power): mean and standard error of a
    trial-level metric over non-diverged trials, plus the divergence count."""
    agg = df[df.ue == -1]
    out = []
    for key, g in agg.groupby(SERIES_KEYS, dropna=False, sort=True):
        ok = g[(g.diverged == 0) & g[metric].notna()][metric]
        n = len(ok)
        out.append(dict(zip(SERIES_KEYS, key), mean=ok.mean() if n else np.nan,
                        stderr=ok.std(ddof=1) / np.sqrt(n) if n > 1 else np.nan,
                        n=n, diverged=int(g.diverged.sum())))
    return pd.DataFrame(out)


def per_ue_means(df: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Per (series, drop, UE): metric averaged over realizations, with c_k."""
    ue = df[(df.ue >= 0) & (df.diverged == 0) & df[metric].notna()]
    return ue.groupby(SERIES_KEYS + ["drop", "ue"], dropna=False, sort=True).agg(
        value=(metric, "mean"), ck=("ck", "first")).reset_index()


def paired_difference(df: pd.DataFrame, metric: str, a: dict, b: dict) -> tuple[float, float, int]:
    """Mean and standard error of ``metric[a] - metric[b]`` over trials where
    both runs succeeded; ``a`` and ``b`` select series by label."""
    agg = df[(df.ue == -1) & (df.diverged == 0)]

    def pick(sel):
        m = np.ones(len(agg), dtype=bool)
        for k, v in sel.items():
            m &= (agg[k] == v).to_numpy()
        return agg[m].set_index(["drop", "realization"])[metric]

    d = (pick(a) - pick(b)).dropna()
    n = len(d)
    if n < 2:
        raise MissingDataError(f"fewer than two paired trials for {a} vs {b}")
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(n)), n


def _write_series(path: Path, columns, data) -> Path:
    arr = np.column_stack([np.asarray(c, dtype=float) for c in data])
    np.savetxt(path, arr, fmt="%.10g", header=" ".join(columns), comments="# ")
    return path


def _power_tag(df: pd.DataFrame):
    return df.power_dbm.nunique() > 1


def emit_plot_series(results, study: str, out_dir: str | os.PathLike, required=None) -> list[Path]:
    """Write one whitespace-separated text series per curve of ``study``.

    ``results`` is an :class:`ExperimentResults`, a records DataFrame or the
    path of a results CSV (traces are then read from the sibling
    ``*_traces.csv``). ``required`` optionally lists ``(algorithm, pilot, Td)``
    combinations that must be present. Files are named
    ``algorithm_pilot_Td<T_d>`` with a ``_P<power>dBm`` suffix when the
    results hold several powers for a per-power study.
    """
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")
    res = _as_results(results)
    df = res.records
    if df.empty:
        raise MissingDataError("results are empty")
    out = Path(out_dir)
    written: list[Path] = []

    if study in ("ser_vs_power", "nmse_vs_power"):
        metric = "ser" if study == "ser_vs_power" else "nmse"
        usable = df[(df.ue == -1) & df[metric].notna()]
        _check_required(usable, required, study)
        curve = mean_curve(df[df.algorithm.isin(usable.algorithm.unique())], metric)
        out.mkdir(parents=True, exist_ok=True)
        for (alg, pilot, Td), g in curve.groupby(["algorithm", "pilot", "Td"], dropna=False, sort=True):
            g = g.sort_values("power_dbm")
            if g.n.sum() == 0:
                continue
            cols = ["power_dbm", metric, f"{metric}_stderr", "n", "diverged"]
            data = [g.power_dbm, g["mean"], g.stderr, g.n, g.diverged]
            if metric == "nmse":
                cols.insert(2, "nmse_db")
                data.insert(2, 10 * np.log10(g["mean"]))
            written.append(_write_series(out / f"{series_name(alg, pilot, Td)}.txt", cols, data))

    elif study == "nmse_vs_iter":
        tr = res.traces
        if tr is None or tr.empty:
            raise MissingDataError("nmse_vs_iter needs per-iteration traces (run with tracing on)")
        _check_required(tr, required, study)
        tagged = _power_tag(tr)
        out.mkdir(parents=True, exist_ok=True)
        for key, g in tr.groupby(SERIES_KEYS, dropna=False, sort=True):
            m = g.groupby("iteration").nmse.agg(["mean", "count"]).reset_index()
            name = series_name(key[0], key[1], key[2], key[3] if tagged else None)
            written.append(_write_series(
                out / f"{name}.txt", ["iteration", "nmse", "nmse_db", "n"],
                [m.iteration, m["mean"], 10 * np.log10(m["mean"]), m["count"]]))

    elif study in ("cdf_ser", "cdf_nmse"):
        metric = "ser" if study == "cdf_ser" else "nmse"
        pts = per_ue_means(df, metric)
        _check_required(pts, required, study)
        tagged = _power_tag(pts)
        out.mkdir(parents=True, exist_ok=True)
        for key, g in pts.groupby(SERIES_KEYS, dropna=False, sort=True):
            e = metrics.ecdf(g.value)
            vals = 10 * np.log10(e.support) if metric == "nmse" else e.support
            col = "nmse_db" if metric == "nmse" else "ser"
            name = series_name(key[0], key[1], key[2], key[3] if tagged else None)
            written.append(_write_series(out / f"{name}.txt", [col, "cdf"], [vals, e.fractions]))

    elif study == "cdf_ck":
        ck = df[(df.ue >= 0) & df.ck.notna()].drop_duplicates(["pilot", "power_dbm", "drop", "ue"])
        if ck.empty:
            raise MissingDataError("cdf_ck: results carry no per-UE c_k values")
        if required:
            missing = sorted({c[1] for c in required} - set(ck.pilot))
            if missing:
                raise MissingDataError(f"cdf_ck: results lack pilot type(s) {', '.join(missing)}")
        tagged = _power_tag(ck)
        out.mkdir(parents=True, exist_ok=True)
        for (pilot, power), g in ck.groupby(["pilot", "power_dbm"], sort=True):
            e = metrics.ecdf(g.ck)
            name = series_name(METRIC_ONLY, pilot, None, power if tagged else None)
            written.append(_write_series(out / f"{name}.txt", ["ck", "cdf"], [e.support, e.fractions]))

    elif study == "ser_vs_ck":
        pts = per_ue_means(df, "ser")
        pts = pts[pts.ck.notna()]
        _check_required(pts, required, study)
        tagged = _power_tag(pts)
        out.mkdir(parents=True, exist_ok=True)
        for key, g in pts.groupby(SERIES_KEYS, dropna=False, sort=True):
            b = ser_vs_ck_bins(g.ck, g.value)
            name = series_name(key[0], key[1], key[2], key[3] if tagged else None)
            written.append(_write_series(out / f"{name}.txt", ["ck", "ser", "count"], [b.centers, b.means, b.counts]))

    if not written:
        raise MissingDataError(f"{study}: nothing to plot")
    return written


def ser_vs_ck_bins(ck, ser, n_bins: int = 20) -> metrics.BinnedMeans:
    """Mean SER_k over 20 log-spaced c_k bins spanning the observed range."""
    ck = np.asarray(ck, dtype=float)
    return metrics.bin_by_metric(ck, ser, metrics.log_bin_edges(ck, n_bins))
