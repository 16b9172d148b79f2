"""End-to-end runs: data generation, r, Training-1, Training-2, metrics, reports."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import pfsa
from .armodel import TrainConfig, chars_per_string, cross_entropy, train_ar
from .distill import DistillConfig, distill_cyclic, distill_two_stage, write_distilled
from .features import FeatureSpec, empirical_moments, motif_frequency
from .gam import Training1Config, save_gam, train_gam, write_training_log

log = logging.getLogger(__name__)

PROCESSES = ("pure", "mixture")
MIXTURE_P_CONTAIN = 0.9
EVAL_SAMPLES = 2000


@dataclass
class ExperimentConfig:
    motif: str = "10001011111000"
    n: int = 30
    process: str = "pure"
    dsize: int = 5000
    ft: str = "1001111"
    treg: str = "rs"
    mode: str = "two_stage"
    ds_size: int = 20_000
    test_size: int = 5000
    seed: int = 0
    ar: dict = field(default_factory=dict)
    training1: dict = field(default_factory=dict)
    distill: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.process not in PROCESSES:
            raise ValueError(f"process must be one of {PROCESSES}")
        if len(self.ft) != 7 or set(self.ft) - {"0", "1"}:
            raise ValueError("ft must have 7 bits")
        if not 1 <= len(self.motif) <= self.n:
            raise ValueError("motif must fit in n")
        if min(self.dsize, self.ds_size, self.test_size, self.n) <= 0:
            raise ValueError("sizes must be positive")
        Training1Config(treg=self.treg)
        DistillConfig(mode=self.mode)

    @property
    def val_size(self) -> int:
        return int(min(max(0.25 * self.dsize, 500), 2000))

    def seed_for(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def ar_config(self, stage: str) -> TrainConfig:
        return TrainConfig(**{**self.ar, "seed": self.seed_for(stage)})

    def training1_config(self) -> Training1Config:
        return Training1Config(**{**self.training1, "treg": self.treg, "seed": self.seed_for("training1")})

    def distill_config(self) -> DistillConfig:
        return DistillConfig(**{"ds_size": self.ds_size, **self.distill, "mode": self.mode,
                                "seed": self.seed_for("distill")})

    def flat(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = json.dumps(v, sort_keys=True) if isinstance(v, dict) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def stage_seed(root: int, stage: str) -> int:
    """Independent, reproducible seed for one pipeline stage."""
    ss = np.random.SeedSequence(entropy=root, spawn_key=(zlib.crc32(stage.encode()),))
    return int(ss.generate_state(1)[0])


def build_process(cfg: ExperimentConfig):
    if cfg.process == "pure":
        return pfsa.normalize(pfsa.build_motif_automaton(cfg.motif, cfg.n, "contain"))
    return pfsa.motif_mixture(cfg.motif, cfg.n, MIXTURE_P_CONTAIN)


def true_entropy(process) -> float:
    if isinstance(process, pfsa.MixtureProcess):
        return pfsa.mixture_entropy(process)
    return pfsa.entropy(process)


@dataclass
class Dataset:
    D: list[str]
    V: list[str]
    T: list[str]
    entropy_per_char: float
    process: object = field(repr=False, default=None)


def gen_data(cfg: ExperimentConfig, out_dir: Path | None = None) -> Dataset:
    process = build_process(cfg)
    D = pfsa.sample(process, cfg.dsize, cfg.seed_for("data/D"))
    V = pfsa.sample(process, cfg.val_size, cfg.seed_for("data/V"))
    T = pfsa.sample(process, cfg.test_size, cfg.seed_for("data/T"))
    h = true_entropy(process) / chars_per_string(cfg.n)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pfsa.write_dataset(out / "D.txt", D)
        pfsa.write_dataset(out / "V.txt", V)
        pfsa.write_dataset(out / "T.txt", T)
        comps = [(process, 1.0)] if isinstance(process, pfsa.Pfsa) else process.components
        for i, (p, _) in enumerate(comps):
            (out / f"process_{i}.fsa").write_text(p.to_text())
        with open(out / "truth.json", "w") as fh:
            json.dump({"entropy_per_char": h, "entropy_total": h * chars_per_string(cfg.n),
                       "mixture": [w for _, w in comps], "config": cfg.flat()}, fh, indent=2)
    return Dataset(D, V, T, h, process)


# ---------------------------------------------------------------------------
# single run

REPORT_FIELDS = (
    "status", "h_true", "ce_r", "ce_pi", "ce_r_over_pi", "ce_pi_over_h",
    "mf_true", "mf_r", "mf_pi", "mom_true", "mom_r", "mom_pi", "mom_distilled",
    "lambda", "l1_mom", "t1_epochs", "acceptance_rate",
)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    status: str = "ok"
    h_true: float = math.nan
    ce_r: float = math.nan
    ce_pi: float = math.nan
    mf_true: float = math.nan
    mf_r: float = math.nan
    mf_pi: float = math.nan
    mom_true: list = field(default_factory=list)
    mom_r: list = field(default_factory=list)
    mom_pi: list = field(default_factory=list)
    mom_distilled: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    l1_mom: float = math.nan
    t1_epochs: int = 0
    acceptance_rate: float = math.nan
    timings: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def ce_r_over_pi(self) -> float:
        return self.ce_r / self.ce_pi

    @property
    def ce_pi_over_h(self) -> float:
        return self.ce_pi / self.h_true

    def row(self) -> dict:
        """Deterministic CSV row: config fields then metrics (no timings)."""
        out = self.config.flat()
        for name in REPORT_FIELDS:
            v = self.lam if name == "lambda" else getattr(self, name)
            if isinstance(v, (list, tuple)):
                v = json.dumps([float(x) for x in v])
            elif isinstance(v, float):
                v = repr(v)
            out[name] = v
        return out

    def to_json(self) -> dict:
        d = self.row()
        d["config"] = asdict(self.config)
        d["timings"] = self.timings
        d["extra"] = self.extra
        return d


def _stage_key(cfg: ExperimentConfig, *names: str) -> tuple:
    flat = cfg.flat()
    return tuple(flat[k] for k in names)


_DATA_KEYS = ("motif", "n", "process", "dsize", "test_size", "seed")


def run_experiment(cfg: ExperimentConfig, out_dir=None, cache: dict | None = None) -> ExperimentReport:
    """gen_data -> train r -> Training-1 -> Training-2 -> metrics.

    ``cache`` (a plain dict) lets runs that share data and r settings reuse them.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cache = {} if cache is None else cache
    rep = ExperimentReport(cfg)
    stage = "gen_data"
    try:
        t0 = time.perf_counter()
        data_key = ("data",) + _stage_key(cfg, *_DATA_KEYS)
        if data_key not in cache:
            cache[data_key] = gen_data(cfg, out)
        elif out is not None:
            gen_data(cfg, out)
        data = cache[data_key]
        rep.timings["gen_data"] = time.perf_counter() - t0
        rep.h_true = data.entropy_per_char
        spec = FeatureSpec.create(cfg.motif, cfg.ft, cfg.seed_for("features"))
        rep.mom_true = list(empirical_moments(spec, data.D))
        rep.mf_true = motif_frequency(cfg.motif, data.T)

        stage = "train_ar"
        t0 = time.perf_counter()
        r_key = ("r",) + data_key + (json.dumps(cfg.ar, sort_keys=True),)
        if r_key not in cache:
            cache[r_key] = train_ar(data.D, data.V, cfg.ar_config("train_ar"))
        r = cache[r_key]
        rep.timings["train_ar"] = time.perf_counter() - t0
        rep.ce_r = cross_entropy(r, data.T)
        r_samples = r.sample(EVAL_SAMPLES, cfg.seed_for("eval/r"))
        rep.mf_r = motif_frequency(cfg.motif, r_samples)
        rep.mom_r = list(empirical_moments(spec, r_samples))
        if out is not None:
            r.save(out / "r.npz")

        stage = "train_gam"
        t0 = time.perf_counter()
        t1_cfg = cfg.training1_config()
        g = train_gam(r, data.D, data.V, t1_cfg, spec)
        rep.timings["train_gam"] = time.perf_counter() - t0
        rep.lam = list(g.lam)
        rep.t1_epochs = len(g.history)
        rep.l1_mom = min((row["l1_mom"] for row in g.history), default=0.0)
        if out is not None:
            save_gam(g, out / "gam.json", out / "r.npz")
            write_training_log(out / "training1_log.csv", g.history)

        stage = "distill"
        t0 = time.perf_counter()
        d_cfg = cfg.distill_config()
        ar_pi = cfg.ar_config("train_pi")
        if cfg.mode == "two_stage":
            pi, stats, (dtrain, dval) = distill_two_stage(g, d_cfg, ar_pi, data.D, data.V)
        else:
            pi, stats, (dtrain, dval) = distill_cyclic(g, data.D, data.V, d_cfg, ar_pi, t1_cfg)
        rep.timings["distill"] = time.perf_counter() - t0
        rep.acceptance_rate = float(np.mean(stats.acceptance_rates))
        rep.extra["acceptance_rates"] = stats.acceptance_rates
        rep.extra["proposal_draws"] = stats.draws
        rep.extra["proposal_updates"] = stats.proposal_updates
        rep.extra["pi_epochs"] = pi.meta.get("epochs_run")
        rep.extra["r_epochs"] = r.meta.get("epochs_run")
        rep.mom_distilled = list(empirical_moments(spec, dtrain + dval))
        if out is not None:
            pi.save(out / "pi.npz")
            write_distilled(out, dtrain, dval, {"gam": str(out / "gam.json"), "seed": d_cfg.seed,
                                                "stats": asdict(stats)})

        stage = "eval"
        rep.ce_pi = cross_entropy(pi, data.T)
        pi_samples = pi.sample(EVAL_SAMPLES, cfg.seed_for("eval/pi"))
        rep.mf_pi = motif_frequency(cfg.motif, pi_samples)
        rep.mom_pi = list(empirical_moments(spec, pi_samples))
    except Exception as exc:  # noqa: BLE001 - recorded in the report, run is partial
        log.exception("stage %s failed", stage)
        rep.status = f"failed:{stage}"
        rep.extra["error"] = repr(exc)
    if out is not None:
        with open(out / "run.json", "w") as fh:
            json.dump(rep.to_json(), fh, indent=2)
        write_report_csv(out / "report.csv", [rep])
    return rep


def write_report_csv(path, reports: Sequence[ExperimentReport]) -> None:
    header = [f.name for f in fields(ExperimentConfig)] + list(REPORT_FIELDS)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            w.writerow(rep.row())


# ---------------------------------------------------------------------------
# sweeps

LONG_HEADER = ("run_id", "motif", "n", "process", "dsize", "ft", "treg", "mode", "seed", "metric", "value")
LONG_METRICS = ("h_true", "ce_r", "ce_pi", "ce_r_over_pi", "ce_pi_over_h", "mf_r", "mf_pi", "l1_mom")


def expand_grid(base: dict, grid: dict) -> list[ExperimentConfig]:
    keys = sorted(grid)
    combos = itertools.product(*(grid[k] for k in keys)) if keys else [()]
    return [ExperimentConfig.from_dict({**base, **dict(zip(keys, combo))}) for combo in combos]


def sweep(cfgs: Iterable[ExperimentConfig], out_dir, plot: bool = True) -> list[ExperimentReport]:
    """Run every config, then write the long CSV, the comparison tables and plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    reports = []
    for i, cfg in enumerate(cfgs):
        log.info("sweep run %d: %s", i, cfg.flat())
        reports.append(run_experiment(cfg, out / f"run_{i:03d}", cache))
    long_rows = long_format(reports)
    write_long_csv(out / "sweep.csv", long_rows)
    write_report_csv(out / "report.csv", reports)
    write_ratio_tables(out, reports)
    if plot:
        plot_sweep(out / "sweep.csv", out)
    return reports


def long_format(reports: Sequence[ExperimentReport]) -> list[dict]:
    rows = []
    for i, rep in enumerate(reports):
        if rep.status != "ok":
            continue
        c = rep.config
        for metric in LONG_METRICS:
            rows.append({"run_id": i, "motif": c.motif, "n": c.n, "process": c.process,
                         "dsize": c.dsize, "ft": c.ft, "treg": c.treg, "mode": c.mode,
                         "seed": c.seed, "metric": metric, "value": repr(float(getattr(rep, metric)))})
    return rows


def write_long_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LONG_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_long_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _pair_ratios(reports, vary: str, a: str, b: str, time_stage: str) -> list[dict]:
    ok = [r for r in reports if r.status == "ok"]

    def key(rep):
        d = rep.config.flat()
        d.pop(vary)
        return tuple(sorted(d.items()))

    by_key: dict = {}
    for rep in ok:
        by_key.setdefault(key(rep), {})[getattr(rep.config, vary)] = rep
    rows = []
    for pair in by_key.values():
        if a in pair and b in pair:
            ra, rb = pair[a], pair[b]
            rows.append({
                "process": ra.config.process, "dsize": ra.config.dsize, "ft": ra.config.ft,
                "mf_ratio": _safe_div(ra.mf_pi, rb.mf_pi),
                "ce_ratio": _safe_div(ra.ce_pi, rb.ce_pi),
                "time_ratio": _safe_div(ra.timings.get(time_stage, math.nan),
                                        rb.timings.get(time_stage, math.nan)),
            })
    return sorted(rows, key=lambda r: (r["process"], r["ft"], r["dsize"]))


def _safe_div(a: float, b: float) -> float:
    return a / b if b else math.inf if a else math.nan


def write_ratio_tables(out: Path, reports: Sequence[ExperimentReport]) -> None:
    """rs-vs-snis (Training-1 time) and two_stage-vs-cyclic (total time) ratios."""
    tables = {
        "rs_vs_snis.csv": _pair_ratios(reports, "treg", "rs", "snis", "train_gam"),
        "two_stage_vs_cyclic.csv": _pair_ratios(reports, "mode", "two_stage", "cyclic", "distill"),
    }
    for name, rows in tables.items():
        with open(out / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["process", "dsize", "ft", "mf_ratio", "ce_ratio", "time_ratio"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def plot_sweep(csv_path, out_dir) -> list[Path]:
    """CE and motif frequency against |D|, one SVG per (process, ft, treg, mode)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "gamlm"
    rows = read_long_csv(csv_path)
    groups: dict = {}
    for row in rows:
        k = (row["process"], row["ft"], row["treg"], row["mode"])
        groups.setdefault(k, {}).setdefault(row["metric"], []).append((int(row["dsize"]), float(row["value"])))
    paths = []
    for (process, ft, treg, mode), metrics in sorted(groups.items()):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax2 = ax.twinx()
        for metric, style, axis in (("ce_r", "-o", ax), ("ce_pi", "-s", ax), ("h_true", "-", ax),
                                    ("mf_r", "--o", ax2), ("mf_pi", "--s", ax2)):
            pts = sorted(metrics.get(metric, []))
            if pts:
                axis.plot([p[0] for p in pts], [p[1] for p in pts], style, label=metric)
        ax.set_xscale("log")
        ax.set_xlabel("|D|")
        ax.set_ylabel("cross-entropy (nats/char)")
        ax2.set_ylabel("motif frequency")
        ax2.set_ylim(0, 1.05)
        ax.set_title(f"{process} ft={ft} {treg} {mode}")
        h1, l1 = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(h1 + h2, l1 + l2, fontsize=7, loc="center right")
        path = Path(out_dir) / f"ce_{process}_{ft}_{treg}_{mode}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths
